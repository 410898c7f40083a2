//! The MLM optimization loop: Adam with bias correction, linear warmup then
//! linear decay, decoupled weight decay on matrix-shaped tensors, and global
//! gradient-norm clipping.
//!
//! Two modes share one loop. `PretrainBase` thaws every tensor and trains the
//! whole encoder; `TrainAdapter` requires injected adapters with everything
//! else frozen, and refuses to start otherwise. Optimizer state is allocated
//! for trainable tensors only, so adapter training carries adapter-sized
//! state no matter how large the base is.
//!
//! [`train`] touches no files — it returns the loss trace and leaves
//! checkpointing to the caller — and is deterministic: batches, masking, and
//! dropout all come from derived named RNG streams.

use std::collections::VecDeque;
use std::io::Write;

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_backward, EncoderModel, Gradients, ParameterStore};
use crate::scalar::Scalar;
use crate::seeding;
use crate::textpipe::{epoch_batches, BatchConfig, MaskedBatch, MaskingConfig, Vocabulary};

/// What the optimizer is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every tensor trains — the base model construction phase.
    PretrainBase,
    /// Only adapter tensors train; the base and head must be frozen.
    TrainAdapter,
}

/// Optimization hyperparameters. Batch geometry lives in [`BatchConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm ceiling for gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps between trace rows; 0 silences the trace entirely.
    pub log_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::TrainAdapter,
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 100_000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: Some(1.0),
            log_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!(
                "peak_lr {} must be a positive real",
                self.peak_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay {} must be a finite non-negative real",
                self.weight_decay
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!(
                    "grad_clip {c} must be a positive real"
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 → peak over the warmup, then peak → 0 at
/// `total_steps`. Steps are 1-based inside the training loop; step 0 is
/// the value before any step, which is zero.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let (warmup, total) = (cfg.warmup_steps, cfg.total_steps);
    if step <= warmup {
        cfg.peak_lr * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        cfg.peak_lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Adam moments for every trainable tensor, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
    t: u64,
}

impl<F: Scalar> OptimizerState<F> {
    /// Zeroed moments for exactly the unfrozen tensors of the store.
    pub fn for_trainable(store: &ParameterStore<F>) -> Self {
        let m: IndexMap<String, ArrayD<F>> = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(name, p)| (name.to_string(), ArrayD::zeros(p.value.raw_dim())))
            .collect();
        let v = m.clone();
        OptimizerState { m, v, t: 0 }
    }

    /// Completed (non-skipped) optimizer steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn tracked_tensors(&self) -> usize {
        self.m.len()
    }

    /// Total floats held across both moments.
    pub fn state_param_count(&self) -> u64 {
        2 * self.m.values().map(|m| m.len() as u64).sum::<u64>()
    }

    pub fn first_moment(&self, name: &str) -> Option<&ArrayD<F>> {
        self.m.get(name)
    }
}

/// What one [`adam_step`] call did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        /// Pre-clip global gradient norm.
        grad_norm: f64,
    },
    /// A non-finite gradient appeared; parameters and the step counter are
    /// untouched.
    SkippedNonFinite,
}

/// One bias-corrected Adam update over every tracked tensor, with decoupled
/// weight decay on matrix-shaped tensors only and optional global-norm
/// clipping. Gradients must cover exactly the tensors the state tracks.
pub fn adam_step<F: Scalar>(
    store: &mut ParameterStore<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    if grads.len() != state.m.len() {
        return Err(Error::config(format!(
            "gradients cover {} tensors but optimizer state tracks {}",
            grads.len(),
            state.m.len()
        )));
    }
    if !grads.all_finite() {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let grad_norm = grads.global_norm();
    let clip_scale = match cfg.grad_clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.t += 1;
    let bias1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
    let (ob1, ob2) = (F::from_f64(1.0 - cfg.beta1), F::from_f64(1.0 - cfg.beta2));
    let scale = F::from_f64(clip_scale);
    let (inv_bias1, inv_bias2) = (F::from_f64(1.0 / bias1), F::from_f64(1.0 / bias2));
    let eps = F::from_f64(cfg.epsilon);
    let lr_f = F::from_f64(lr);
    let wd = F::from_f64(cfg.weight_decay);

    for (name, m) in state.m.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("no gradient for tracked tensor {name}")))?;
        let v = state.v.get_mut(name).expect("moments share keys");
        let theta = store.trainable_value_mut(name).ok_or_else(|| {
            Error::config(format!("optimizer state tracks frozen tensor {name}"))
        })?;
        let decay = if theta.ndim() >= 2 { wd } else { F::zero() };
        for ((t_i, g_i), (m_i, v_i)) in theta
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g_c = *g_i * scale;
            *m_i = b1 * *m_i + ob1 * g_c;
            *v_i = b2 * *v_i + ob2 * g_c * g_c;
            let m_hat = *m_i * inv_bias1;
            let v_hat = *v_i * inv_bias2;
            *t_i = *t_i - lr_f * (m_hat / (v_hat.sqrt() + eps) + decay * *t_i);
        }
    }
    Ok(StepOutcome::Applied { grad_norm })
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Pre-clip global gradient norm; 0 when the step was skipped.
    pub grad_norm: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Step slots consumed — always `total_steps` on success.
    pub steps_run: u64,
    /// Slots that applied no update (no labels in the batch, or non-finite
    /// gradients).
    pub skipped_steps: u64,
    /// Loss of the last step, if any step ran.
    pub final_loss: Option<f64>,
    pub trace: Vec<TraceRow>,
}

/// Runs `total_steps` of MLM training over the corpus, cycling epochs as
/// needed. Epoch boundaries re-mask and re-shuffle; dropout draws from a
/// per-step stream. The model is updated in place; nothing is written to
/// disk.
pub fn train<F: Scalar>(
    model: &mut EncoderModel<F>,
    lines: &[String],
    vocab: &Vocabulary,
    masking: &MaskingConfig,
    batch_cfg: &BatchConfig,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TraceRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    match cfg.mode {
        TrainMode::PretrainBase => model.unfreeze_all(),
        TrainMode::TrainAdapter => {
            if model.adapter.is_none() {
                return Err(Error::config(
                    "adapter training requires a model with injected adapters",
                ));
            }
            let trainable = model.store.trainable_names();
            if trainable.is_empty() {
                return Err(Error::config("adapter training found no trainable tensors"));
            }
            if let Some(stray) = trainable.iter().find(|n| !n.contains(".adapter.")) {
                return Err(Error::config(format!(
                    "adapter training requires a frozen base, but {stray} is trainable"
                )));
            }
        }
    }
    let adapters_enabled = model.adapter.is_some();
    let mut state = OptimizerState::for_trainable(&model.store);

    let mut epoch = 0u64;
    let mut queue: VecDeque<MaskedBatch> =
        epoch_batches(lines, vocab, batch_cfg, masking, epoch)?.into();
    if queue.is_empty() {
        return Err(Error::data("training corpus produced no batches"));
    }

    let mut trace = Vec::new();
    let mut skipped_steps = 0u64;
    let mut final_loss = None;
    let mut consecutive_bad_logs = 0u32;

    for step in 1..=cfg.total_steps {
        let batch = match queue.pop_front() {
            Some(b) => b,
            None => {
                epoch += 1;
                queue = epoch_batches(lines, vocab, batch_cfg, masking, epoch)?.into();
                queue
                    .pop_front()
                    .ok_or_else(|| Error::data("training corpus produced no batches"))?
            }
        };
        let lr = lr_schedule(step, cfg);
        let mut dropout_rng = seeding::derive_rng(cfg.seed, "trainer/dropout", &[step]);
        let out = forward_backward(model, &batch, adapters_enabled, Some(&mut dropout_rng))?;
        let loss = out.loss.to_f64();
        final_loss = Some(loss);

        let mut grad_norm = 0.0;
        if out.masked_positions == 0 {
            skipped_steps += 1;
        } else {
            match adam_step(&mut model.store, &out.grads, &mut state, lr, cfg)? {
                StepOutcome::Applied { grad_norm: n } => grad_norm = n,
                StepOutcome::SkippedNonFinite => skipped_steps += 1,
            }
        }

        if cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step == cfg.total_steps) {
            let row = TraceRow {
                step,
                lr,
                loss,
                grad_norm,
            };
            if loss.is_finite() {
                consecutive_bad_logs = 0;
            } else {
                consecutive_bad_logs += 1;
                if consecutive_bad_logs >= 3 {
                    return Err(Error::numeric(format!(
                        "loss diverged: non-finite at {consecutive_bad_logs} consecutive \
                         logged steps, last at step {step}"
                    )));
                }
            }
            on_log(&row);
            trace.push(row);
        }
    }

    Ok(TrainReport {
        steps_run: cfg.total_steps,
        skipped_steps,
        final_loss,
        trace,
    })
}

/// Writes the loss trace as `step,lr,loss` CSV.
pub fn write_trace_csv(trace: &[TraceRow], mut sink: impl Write) -> Result<()> {
    let io_err = |e: std::io::Error| Error::data(format!("trace write failed: {e}"));
    writeln!(sink, "step,lr,loss").map_err(io_err)?;
    for row in trace {
        writeln!(sink, "{},{},{}", row.step, row.lr, row.loss).map_err(io_err)?;
    }
    Ok(())
}
