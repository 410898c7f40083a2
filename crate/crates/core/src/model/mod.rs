//! The toy transformer encoder and its parameter machinery.
//!
//! A post-layer-norm encoder in the classic MLM configuration: learned
//! token and absolute-position embeddings, multi-head self-attention and
//! GELU feed-forward sublayers, and a prediction head weight-tied to the
//! token embedding. Bottleneck adapters can be injected after both
//! sublayers of every layer; injection freezes everything else, so training
//! afterwards touches only adapter weights.
//!
//! Parameters live in a [`ParameterStore`] keyed by stable names
//! (`layer0.attn.wq`, `embed.token`, ...) with a group tag and a frozen
//! flag each — the unit the optimizer, checkpoints, and freeze-invariant
//! checks all share.

mod encoder;
pub mod math;

pub use encoder::{forward, forward_backward, mlm_loss, ForwardOutput, Gradients, StepOutput};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

/// Encoder geometry and regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 5,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder {name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Bottleneck adapter geometry: hidden → bottleneck → hidden with a GELU in
/// between and a residual connection around the whole block, inserted after
/// the attention and feed-forward sublayers of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    /// Standard deviation of the down-projection init; up-projection and
    /// biases start at zero so an untrained adapter is the identity.
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            bottleneck: 16,
            init_std: 0.01,
        }
    }
}

impl AdapterConfig {
    /// Derives the bottleneck width from a reduction factor: `hidden / r`,
    /// which must divide evenly.
    pub fn from_reduction_factor(hidden: usize, reduction_factor: usize) -> Result<Self> {
        if reduction_factor == 0 || hidden % reduction_factor != 0 {
            return Err(Error::config(format!(
                "reduction factor {reduction_factor} does not divide hidden size {hidden}"
            )));
        }
        Ok(AdapterConfig {
            bottleneck: hidden / reduction_factor,
            ..Default::default()
        })
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::config("adapter bottleneck must be at least 1"));
        }
        if self.bottleneck > encoder.hidden {
            return Err(Error::config(format!(
                "adapter bottleneck {} exceeds hidden size {}",
                self.bottleneck, encoder.hidden
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config(format!(
                "adapter init_std {} must be a small positive real",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// Which part of the model a tensor belongs to; the unit of freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Adapter,
    Head,
}

/// One named tensor with its training status.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub group: ParamGroup,
    pub frozen: bool,
}

/// Insertion-ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<F> {
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>, group: ParamGroup) {
        let prev = self.params.insert(
            name.to_string(),
            Param {
                value,
                group,
                frozen: false,
            },
        );
        assert!(prev.is_none(), "parameter {name} inserted twice");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> &Param<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> ArrayViewD<'_, F> {
        self.get(name).value.view()
    }

    /// The tensor as a matrix; panics if it is not 2-D.
    pub fn mat(&self, name: &str) -> Array2<F> {
        self.get(name)
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("parameter {name} is not a matrix"))
            .to_owned()
    }

    /// The tensor as a vector; panics if it is not 1-D.
    pub fn vec(&self, name: &str) -> Array1<F> {
        self.get(name)
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("parameter {name} is not a vector"))
            .to_owned()
    }

    /// Mutable access for the optimizer, refused for frozen tensors.
    pub fn trainable_value_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        let p = self.params.get_mut(name)?;
        if p.frozen {
            None
        } else {
            Some(&mut p.value)
        }
    }

    /// Unconditional mutable access, for checkpoint loading only.
    pub(crate) fn raw_value_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub(crate) fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .frozen = frozen;
    }

    /// Freezes or thaws every tensor in `group`.
    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.values_mut() {
            if p.group == group {
                p.frozen = frozen;
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.params.values().map(|p| p.value.len() as u64).sum()
    }

    pub fn group_param_count(&self, group: ParamGroup) -> u64 {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    /// SHA-256 of the tensor's little-endian payload, as lowercase hex.
    pub fn checksum(&self, name: &str) -> String {
        let p = self.get(name);
        let mut bytes = Vec::with_capacity(p.value.len() * F::BYTES);
        for v in p.value.iter() {
            v.put_le(&mut bytes);
        }
        let digest = Sha256::digest(&bytes);
        let mut out = String::with_capacity(64);
        for b in digest {
            write!(out, "{b:02x}").expect("hex formatting");
        }
        out
    }

    /// Checksums of every tensor, sorted by name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.params
            .keys()
            .map(|name| (name.clone(), self.checksum(name)))
            .collect()
    }

    /// Checksums of the tensors in `groups` only.
    pub fn group_checksums(&self, groups: &[ParamGroup]) -> BTreeMap<String, String> {
        self.params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(name, _)| (name.clone(), self.checksum(name)))
            .collect()
    }
}

/// The encoder: geometry, optional adapter geometry, and all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<F> {
    pub config: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    pub store: ParameterStore<F>,
}

/// Weight-matrix initialization scale (embeddings and projections).
pub const BASE_INIT_STD: f64 = 0.02;

impl<F: Scalar> EncoderModel<F> {
    /// A freshly initialized base model (no adapters): weights from
    /// N(0, 0.02²) drawn per-tensor from named RNG streams, biases zero,
    /// layer-norm scales one.
    pub fn init_base(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let h = config.hidden;
        let weight = |name: &str, rows: usize, cols: usize, store: &mut ParameterStore<F>| {
            let mut rng = seeding::derive_rng_labeled(seed, "model/init", name, &[]);
            let tensor =
                Array2::from_shape_simple_fn((rows, cols), || math::normal_draw(&mut rng, BASE_INIT_STD));
            store.insert(name, tensor.into_dyn(), ParamGroup::Base);
        };

        weight("embed.token", config.vocab_size, h, &mut store);
        weight("embed.pos", config.max_seq_len, h, &mut store);
        store.insert("embed.ln.gamma", Array1::ones(h).into_dyn(), ParamGroup::Base);
        store.insert("embed.ln.beta", Array1::zeros(h).into_dyn(), ParamGroup::Base);

        for l in 0..config.layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                weight(&format!("layer{l}.attn.{proj}"), h, h, &mut store);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                store.insert(
                    &format!("layer{l}.attn.{bias}"),
                    Array1::<F>::zeros(h).into_dyn(),
                    ParamGroup::Base,
                );
            }
            for ln in ["ln1", "ln2"] {
                store.insert(
                    &format!("layer{l}.{ln}.gamma"),
                    Array1::<F>::ones(h).into_dyn(),
                    ParamGroup::Base,
                );
                store.insert(
                    &format!("layer{l}.{ln}.beta"),
                    Array1::<F>::zeros(h).into_dyn(),
                    ParamGroup::Base,
                );
            }
            weight(&format!("layer{l}.ffn.w1"), h, config.ffn_dim, &mut store);
            store.insert(
                &format!("layer{l}.ffn.b1"),
                Array1::<F>::zeros(config.ffn_dim).into_dyn(),
                ParamGroup::Base,
            );
            weight(&format!("layer{l}.ffn.w2"), config.ffn_dim, h, &mut store);
            store.insert(
                &format!("layer{l}.ffn.b2"),
                Array1::<F>::zeros(h).into_dyn(),
                ParamGroup::Base,
            );
        }

        // The MLM head reuses the token embedding; only its bias is a
        // separate tensor.
        store.insert(
            "head.bias",
            Array1::<F>::zeros(config.vocab_size).into_dyn(),
            ParamGroup::Head,
        );

        Ok(EncoderModel {
            config,
            adapter: None,
            store,
        })
    }

    /// Adds the two adapter blocks to every layer and freezes the base and
    /// head. Down-projections draw from N(0, init_std²); up-projections and
    /// all biases start at zero, so the adapted forward initially equals the
    /// base forward.
    pub fn inject_adapters(&mut self, cfg: AdapterConfig, seed: u64) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::config("adapters are already injected"));
        }
        cfg.validate(&self.config)?;
        let (h, b) = (self.config.hidden, cfg.bottleneck);
        for l in 0..self.config.layers {
            for site in ["attn", "ffn"] {
                let prefix = format!("layer{l}.adapter.{site}");
                let down_name = format!("{prefix}.down");
                let mut rng = seeding::derive_rng_labeled(seed, "model/adapter-init", &down_name, &[]);
                let down =
                    Array2::from_shape_simple_fn((h, b), || math::normal_draw(&mut rng, cfg.init_std));
                self.store.insert(&down_name, down.into_dyn(), ParamGroup::Adapter);
                self.store.insert(
                    &format!("{prefix}.down_bias"),
                    Array1::<F>::zeros(b).into_dyn(),
                    ParamGroup::Adapter,
                );
                self.store.insert(
                    &format!("{prefix}.up"),
                    Array2::<F>::zeros((b, h)).into_dyn(),
                    ParamGroup::Adapter,
                );
                self.store.insert(
                    &format!("{prefix}.up_bias"),
                    Array1::<F>::zeros(h).into_dyn(),
                    ParamGroup::Adapter,
                );
            }
        }
        self.store.set_group_frozen(ParamGroup::Base, true);
        self.store.set_group_frozen(ParamGroup::Head, true);
        self.store.set_group_frozen(ParamGroup::Adapter, false);
        self.adapter = Some(cfg);
        Ok(())
    }

    /// Marks every tensor trainable — the base pre-training setting.
    pub fn unfreeze_all(&mut self) {
        for group in [ParamGroup::Base, ParamGroup::Head, ParamGroup::Adapter] {
            self.store.set_group_frozen(group, false);
        }
    }
}

/// The parameter cost of injecting adapters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterOverhead {
    pub added_params: u64,
    /// `added_params / base_param_count`.
    pub ratio: f64,
}

/// Computes the adapter parameter overhead against a given base size:
/// `2L · (2Hb + b + H)` added parameters — per layer, two blocks of one
/// H×b down-projection with bias and one b×H up-projection with bias.
pub fn adapter_overhead(
    encoder: &EncoderConfig,
    adapter: &AdapterConfig,
    base_param_count: u64,
) -> AdapterOverhead {
    let (l, h, b) = (
        encoder.layers as u64,
        encoder.hidden as u64,
        adapter.bottleneck as u64,
    );
    let added = 2 * l * (2 * h * b + b + h);
    AdapterOverhead {
        added_params: added,
        ratio: added as f64 / base_param_count as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq_len: 10,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(toy_config().validate().is_ok());
        assert!(EncoderConfig {
            heads: 3,
            ..toy_config()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            layers: 0,
            ..toy_config()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            dropout: 1.0,
            ..toy_config()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn adapter_config_from_reduction_factor() {
        let cfg = AdapterConfig::from_reduction_factor(768, 12).unwrap();
        assert_eq!(cfg.bottleneck, 64);
        assert!(AdapterConfig::from_reduction_factor(768, 7).is_err());
        assert!(AdapterConfig::from_reduction_factor(64, 0).is_err());
    }

    #[test]
    fn adapter_config_validation() {
        let enc = toy_config();
        assert!(AdapterConfig {
            bottleneck: 0,
            ..Default::default()
        }
        .validate(&enc)
        .is_err());
        assert!(AdapterConfig {
            bottleneck: 9,
            ..Default::default()
        }
        .validate(&enc)
        .is_err());
        assert!(AdapterConfig {
            bottleneck: 8,
            init_std: 0.0
        }
        .validate(&enc)
        .is_err());
        assert!(AdapterConfig {
            bottleneck: 4,
            init_std: 0.01
        }
        .validate(&enc)
        .is_ok());
    }

    #[test]
    fn base_init_is_deterministic_and_counts_add_up() {
        let a = EncoderModel::<f32>::init_base(toy_config(), 7).unwrap();
        let b = EncoderModel::<f32>::init_base(toy_config(), 7).unwrap();
        assert_eq!(a.store.checksums(), b.store.checksums());
        let c = EncoderModel::<f32>::init_base(toy_config(), 8).unwrap();
        assert_ne!(a.store.checksums(), c.store.checksums());

        let cfg = toy_config();
        let h = cfg.hidden as u64;
        let expected_base = (cfg.vocab_size as u64) * h    // token embedding
            + (cfg.max_seq_len as u64) * h                 // position embedding
            + 2 * h                                        // embedding layer norm
            + cfg.layers as u64
                * (4 * h * h + 4 * h                       // attention projections
                    + 4 * h                                // two layer norms
                    + h * cfg.ffn_dim as u64 + cfg.ffn_dim as u64
                    + cfg.ffn_dim as u64 * h + h);
        assert_eq!(a.store.group_param_count(ParamGroup::Base), expected_base);
        assert_eq!(
            a.store.group_param_count(ParamGroup::Head),
            cfg.vocab_size as u64
        );
        assert_eq!(a.store.param_count(), expected_base + cfg.vocab_size as u64);
        // A fresh base model is fully trainable.
        assert_eq!(a.store.trainable_param_count(), a.store.param_count());
    }

    #[test]
    fn injection_adds_blocks_and_freezes_base() {
        let mut model = EncoderModel::<f32>::init_base(toy_config(), 1).unwrap();
        let ad = AdapterConfig {
            bottleneck: 2,
            init_std: 0.01,
        };
        model.inject_adapters(ad, 99).unwrap();

        // 2 layers × 2 sites × 4 tensors.
        let adapter_tensors = model
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Adapter)
            .count();
        assert_eq!(adapter_tensors, 16);

        let trainable = model.store.trainable_names();
        assert!(trainable.iter().all(|n| n.contains(".adapter.")));
        assert_eq!(
            model.store.trainable_param_count(),
            model.store.group_param_count(ParamGroup::Adapter)
        );

        // Double injection is refused.
        assert!(model.inject_adapters(ad, 99).is_err());
    }

    #[test]
    fn one_layer_model_gets_exactly_two_blocks() {
        let mut model = EncoderModel::<f32>::init_base(
            EncoderConfig {
                layers: 1,
                ..toy_config()
            },
            1,
        )
        .unwrap();
        model
            .inject_adapters(
                AdapterConfig {
                    bottleneck: 2,
                    init_std: 0.01,
                },
                5,
            )
            .unwrap();
        let blocks: std::collections::HashSet<String> = model
            .store
            .names()
            .filter(|n| n.contains(".adapter."))
            .map(|n| n.rsplit_once('.').unwrap().0.to_string())
            .collect();
        assert_eq!(blocks.len(), 2);
    }

    #[test]
    fn overhead_formula_reference_geometry() {
        let enc = EncoderConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab_size: 30_522,
            max_seq_len: 512,
            dropout: 0.1,
        };
        let ad = AdapterConfig {
            bottleneck: 64,
            init_std: 0.01,
        };
        let overhead = adapter_overhead(&enc, &ad, 110_000_000);
        assert_eq!(overhead.added_params, 2_379_264);
        assert!((overhead.ratio - 0.0216).abs() < 0.0015);
    }

    #[test]
    fn overhead_formula_edge_geometry() {
        let enc = EncoderConfig {
            layers: 1,
            hidden: 8,
            ..toy_config()
        };
        let ad = AdapterConfig {
            bottleneck: 8,
            init_std: 0.01,
        };
        let h = 8u64;
        assert_eq!(
            adapter_overhead(&enc, &ad, 1).added_params,
            2 * (2 * h * h + h + h)
        );
    }

    #[test]
    fn frozen_tensors_refuse_mutable_access() {
        let mut model = EncoderModel::<f32>::init_base(toy_config(), 3).unwrap();
        model
            .inject_adapters(
                AdapterConfig {
                    bottleneck: 2,
                    init_std: 0.01,
                },
                4,
            )
            .unwrap();
        assert!(model.store.trainable_value_mut("embed.token").is_none());
        assert!(model.store.trainable_value_mut("head.bias").is_none());
        assert!(model
            .store
            .trainable_value_mut("layer0.adapter.attn.down")
            .is_some());
    }

    #[test]
    fn checksums_detect_single_element_changes() {
        let mut model = EncoderModel::<f32>::init_base(toy_config(), 3).unwrap();
        let before = model.store.checksum("embed.token");
        model.store.raw_value_mut("embed.token")[[0, 0]] += 1e-6;
        assert_ne!(model.store.checksum("embed.token"), before);
    }
}
