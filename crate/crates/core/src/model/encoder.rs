//! Forward pass, loss, and hand-derived backward pass of the encoder.
//!
//! All activations flow as `(batch·seq, hidden)` matrices — row `b·S + s`
//! is position `s` of batch element `b` — so sublayers are plain matrix
//! products; attention carves per-batch, per-head views out of the rows.
//! The backward pass mirrors the forward exactly, reading intermediate
//! state from a cache recorded during the forward run. Parameter gradients
//! are only materialized for tensors the caller tracks, so frozen-base
//! training never pays for base-weight gradient products.

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::math::{
    dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows_backward,
    softmax_rows_inplace, LayerNormCache,
};
use crate::model::{EncoderModel, ParameterStore};
use crate::scalar::Scalar;
use crate::textpipe::{MaskedBatch, IGNORE_LABEL};

/// Additive attention penalty for padded key positions; large enough that
/// the exponential underflows to exactly zero in both precisions.
const MASKED_SCORE: f64 = -1e9;

/// Named gradient accumulators, allocated only for tracked tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    map: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    /// Zeroed accumulators for every trainable tensor in the store.
    pub fn for_trainable(store: &ParameterStore<F>) -> Self {
        let map = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(name, p)| (name.to_string(), ArrayD::zeros(p.value.raw_dim())))
            .collect();
        Gradients { map }
    }

    /// Whether gradients for `name` are being tracked. Backward passes use
    /// this to skip parameter-gradient products for frozen tensors.
    pub fn wants(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    fn acc2(&mut self, name: &str, delta: Array2<F>) {
        if let Some(g) = self.map.get_mut(name) {
            *g += &delta.into_dyn();
        }
    }

    fn acc1(&mut self, name: &str, delta: Array1<F>) {
        if let Some(g) = self.map.get_mut(name) {
            *g += &delta.into_dyn();
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }

    /// Replaces the tracked gradient for `name`; panics on an untracked
    /// name or a shape mismatch — both are caller bugs.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) {
        let g = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient tracked for {name}"));
        assert_eq!(
            g.shape(),
            value.shape(),
            "gradient shape mismatch for {name}"
        );
        *g = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm over all tracked entries, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

struct AdapterCache<F> {
    /// Block input.
    x: Array2<F>,
    /// Bottleneck pre-activation.
    z: Array2<F>,
}

struct LayerCache<F> {
    x_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention probabilities, one `(S, S)` matrix per `(batch, head)` in
    /// row-major order.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    attn_drop: Option<Array2<F>>,
    attn_adapter: Option<AdapterCache<F>>,
    ln1: LayerNormCache<F>,
    x_mid: Array2<F>,
    ffn_z1: Array2<F>,
    ffn_g: Array2<F>,
    ffn_drop: Option<Array2<F>>,
    ffn_adapter: Option<AdapterCache<F>>,
    ln2: LayerNormCache<F>,
}

struct Cache<F> {
    emb_ln: LayerNormCache<F>,
    emb_drop: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
    hidden: Array2<F>,
}

/// Logits plus whatever the backward pass will need.
pub struct ForwardOutput<F> {
    /// Pre-softmax vocabulary scores, `(batch, seq, vocab)`.
    pub logits: Array3<F>,
    cache: Option<Cache<F>>,
}

/// Loss, gradient, and bookkeeping of one training forward/backward.
pub struct StepOutput<F> {
    pub loss: F,
    /// Positions that carried a real label.
    pub masked_positions: usize,
    pub grads: Gradients<F>,
}

/// Inference forward pass: logits only.
pub fn forward<F: Scalar>(
    model: &EncoderModel<F>,
    input_ids: &Array2<u32>,
    attention_mask: &Array2<u8>,
    adapters_enabled: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Array3<F>> {
    let out = run_forward(
        model,
        input_ids,
        attention_mask,
        adapters_enabled,
        dropout_rng,
        false,
    )?;
    Ok(out.logits)
}

/// Training step: forward with cache, MLM loss, backward. Gradients cover
/// exactly the trainable tensors of the store.
pub fn forward_backward<F: Scalar>(
    model: &EncoderModel<F>,
    batch: &MaskedBatch,
    adapters_enabled: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput<F>> {
    let out = run_forward(
        model,
        &batch.input_ids,
        &batch.attention_mask,
        adapters_enabled,
        dropout_rng,
        true,
    )?;
    let (loss, masked_positions) = mlm_loss(&out.logits, &batch.labels);
    let grads = backward(model, batch, &out);
    Ok(StepOutput {
        loss,
        masked_positions,
        grads,
    })
}

/// Mean cross-entropy over labeled positions, and how many there were.
/// With no labeled positions the loss is zero by convention.
pub fn mlm_loss<F: Scalar>(logits: &Array3<F>, labels: &Array2<i64>) -> (F, usize) {
    let (bsz, seq, _vocab) = logits.dim();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..bsz {
        for t in 0..seq {
            let label = labels[[b, t]];
            if label == IGNORE_LABEL {
                continue;
            }
            let row = logits.slice(s![b, t, ..]);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max).to_f64();
            let log_sum: f64 = row
                .iter()
                .map(|&v| (v.to_f64() - max).exp())
                .sum::<f64>()
                .ln();
            total += max + log_sum - row[label as usize].to_f64();
            count += 1;
        }
    }
    if count == 0 {
        return (F::zero(), 0);
    }
    (F::from_f64(total / count as f64), count)
}

fn validate_inputs<F: Scalar>(
    model: &EncoderModel<F>,
    input_ids: &Array2<u32>,
    attention_mask: &Array2<u8>,
    adapters_enabled: bool,
) -> Result<()> {
    let cfg = &model.config;
    let (bsz, seq) = input_ids.dim();
    if bsz == 0 || seq == 0 {
        return Err(Error::data("empty batch"));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::data(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if attention_mask.dim() != input_ids.dim() {
        return Err(Error::data(format!(
            "attention mask shape {:?} does not match input shape {:?}",
            attention_mask.dim(),
            input_ids.dim()
        )));
    }
    if let Some(bad) = input_ids.iter().find(|id| **id as usize >= cfg.vocab_size) {
        return Err(Error::data(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    if adapters_enabled && model.adapter.is_none() {
        return Err(Error::config(
            "adapters requested but none are injected in this model",
        ));
    }
    Ok(())
}

fn run_forward<F: Scalar>(
    model: &EncoderModel<F>,
    input_ids: &Array2<u32>,
    attention_mask: &Array2<u8>,
    adapters_enabled: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    want_cache: bool,
) -> Result<ForwardOutput<F>> {
    validate_inputs(model, input_ids, attention_mask, adapters_enabled)?;
    let cfg = &model.config;
    let store = &model.store;
    let (bsz, seq) = input_ids.dim();
    let (rows, h) = (bsz * seq, cfg.hidden);

    let rate = cfg.dropout;
    let next_drop = |shape: (usize, usize), rng: &mut Option<&mut ChaCha8Rng>| {
        match rng {
            Some(r) if rate > 0.0 => Some(dropout_mask::<F>(shape, rate, r)),
            _ => None,
        }
    };

    // Embeddings: token + learned absolute position, then layer norm.
    let token_emb = store.mat("embed.token");
    let pos_emb = store.mat("embed.pos");
    let mut x = Array2::<F>::zeros((rows, h));
    for b in 0..bsz {
        for t in 0..seq {
            let id = input_ids[[b, t]] as usize;
            let row = &token_emb.row(id) + &pos_emb.row(t);
            x.row_mut(b * seq + t).assign(&row);
        }
    }
    let (mut x, emb_ln) = layer_norm(
        &x,
        &store.vec("embed.ln.gamma"),
        &store.vec("embed.ln.beta"),
    );
    let emb_drop = next_drop((rows, h), &mut dropout_rng);
    if let Some(mask) = &emb_drop {
        x *= mask;
    }

    // Additive key mask per batch element.
    let neg = F::from_f64(MASKED_SCORE);
    let key_mask: Vec<Array1<F>> = (0..bsz)
        .map(|b| {
            Array1::from_iter(
                (0..seq).map(|t| if attention_mask[[b, t]] == 0 { neg } else { F::zero() }),
            )
        })
        .collect();

    let (heads, head_dim) = (cfg.heads, cfg.head_dim());
    let inv_sqrt_d = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut layer_caches = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let x_in = x;
        let p = |suffix: &str| format!("layer{l}.{suffix}");

        // Multi-head self-attention.
        let q = x_in.dot(&store.mat(&p("attn.wq"))) + &store.vec(&p("attn.bq"));
        let k = x_in.dot(&store.mat(&p("attn.wk"))) + &store.vec(&p("attn.bk"));
        let v = x_in.dot(&store.mat(&p("attn.wv"))) + &store.vec(&p("attn.bv"));
        let mut ctx = Array2::<F>::zeros((rows, h));
        let mut probs = Vec::with_capacity(bsz * heads);
        for b in 0..bsz {
            let row_range = s![b * seq..(b + 1) * seq, ..];
            for a in 0..heads {
                let col_range = s![.., a * head_dim..(a + 1) * head_dim];
                let qs = q.slice(row_range).slice_move(col_range);
                let ks = k.slice(row_range).slice_move(col_range);
                let vs = v.slice(row_range).slice_move(col_range);
                let mut scores = qs.dot(&ks.t());
                scores.mapv_inplace(|v| v * inv_sqrt_d);
                scores += &key_mask[b];
                softmax_rows_inplace(&mut scores);
                ctx.slice_mut(row_range)
                    .slice_move(col_range)
                    .assign(&scores.dot(&vs));
                probs.push(scores);
            }
        }
        let mut attn_out = ctx.dot(&store.mat(&p("attn.wo"))) + &store.vec(&p("attn.bo"));
        let attn_drop = next_drop((rows, h), &mut dropout_rng);
        if let Some(mask) = &attn_drop {
            attn_out *= mask;
        }
        let (attn_out, attn_adapter) = if adapters_enabled {
            adapter_block(store, &p("adapter.attn"), attn_out)
        } else {
            (attn_out, None)
        };
        let (x_mid, ln1) = layer_norm(
            &(&x_in + &attn_out),
            &store.vec(&p("ln1.gamma")),
            &store.vec(&p("ln1.beta")),
        );

        // Position-wise feed-forward.
        let ffn_z1 = x_mid.dot(&store.mat(&p("ffn.w1"))) + &store.vec(&p("ffn.b1"));
        let ffn_g = ffn_z1.mapv(gelu);
        let mut ffn_out = ffn_g.dot(&store.mat(&p("ffn.w2"))) + &store.vec(&p("ffn.b2"));
        let ffn_drop = next_drop((rows, h), &mut dropout_rng);
        if let Some(mask) = &ffn_drop {
            ffn_out *= mask;
        }
        let (ffn_out, ffn_adapter) = if adapters_enabled {
            adapter_block(store, &p("adapter.ffn"), ffn_out)
        } else {
            (ffn_out, None)
        };
        let (x_next, ln2) = layer_norm(
            &(&x_mid + &ffn_out),
            &store.vec(&p("ln2.gamma")),
            &store.vec(&p("ln2.beta")),
        );

        x = x_next;
        layer_caches.push(LayerCache {
            x_in,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            attn_adapter,
            ln1,
            x_mid,
            ffn_z1,
            ffn_g,
            ffn_drop,
            ffn_adapter,
            ln2,
        });
    }

    // Weight-tied MLM head.
    let logits2 = x.dot(&token_emb.t()) + &store.vec("head.bias");
    let logits = logits2
        .into_shape_with_order((bsz, seq, cfg.vocab_size))
        .expect("row count is batch × seq");

    let cache = want_cache.then(|| Cache {
        emb_ln,
        emb_drop,
        layers: layer_caches,
        hidden: x,
    });
    Ok(ForwardOutput { logits, cache })
}

/// Bottleneck adapter block: `x + gelu(x·D + c)·U + d`.
fn adapter_block<F: Scalar>(
    store: &ParameterStore<F>,
    prefix: &str,
    x: Array2<F>,
) -> (Array2<F>, Option<AdapterCache<F>>) {
    let z = x.dot(&store.mat(&format!("{prefix}.down"))) + &store.vec(&format!("{prefix}.down_bias"));
    let out = &x
        + &(z.mapv(gelu).dot(&store.mat(&format!("{prefix}.up")))
            + &store.vec(&format!("{prefix}.up_bias")));
    (out, Some(AdapterCache { x, z }))
}

fn backward<F: Scalar>(
    model: &EncoderModel<F>,
    batch: &MaskedBatch,
    out: &ForwardOutput<F>,
) -> Gradients<F> {
    let cfg = &model.config;
    let store = &model.store;
    let cache = out.cache.as_ref().expect("backward requires a cached forward");
    let (bsz, seq, vocab) = out.logits.dim();
    let rows = bsz * seq;
    let mut grads = Gradients::for_trainable(store);

    // Loss gradient: (softmax − onehot) / n_labeled at labeled positions.
    let labeled: Vec<(usize, i64)> = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != IGNORE_LABEL)
        .map(|(n, l)| (n, *l))
        .collect();
    let mut d_logits = Array2::<F>::zeros((rows, vocab));
    if !labeled.is_empty() {
        let inv_count = F::from_f64(1.0 / labeled.len() as f64);
        let flat_logits = out
            .logits
            .view()
            .into_shape_with_order((rows, vocab))
            .expect("logits reshape");
        for &(n, label) in &labeled {
            let mut p = flat_logits.row(n).to_owned().insert_axis(Axis(0));
            softmax_rows_inplace(&mut p);
            let mut d_row = d_logits.row_mut(n);
            d_row.assign(&p.remove_axis(Axis(0)));
            d_row[label as usize] -= F::one();
            d_row.mapv_inplace(|v| v * inv_count);
        }
    }

    // Head: logits = hidden · Eᵀ + bias. The token embedding receives a
    // second contribution later from the embedding lookup.
    let token_emb = store.mat("embed.token");
    let mut dx = d_logits.dot(&token_emb);
    if grads.wants("head.bias") {
        grads.acc1("head.bias", d_logits.sum_axis(Axis(0)));
    }
    if grads.wants("embed.token") {
        grads.acc2("embed.token", d_logits.t().dot(&cache.hidden));
    }

    let (heads, head_dim) = (cfg.heads, cfg.head_dim());
    let inv_sqrt_d = F::from_f64(1.0 / (head_dim as f64).sqrt());

    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];
        let p = |suffix: &str| format!("layer{l}.{suffix}");

        // LN2 closes the feed-forward residual block.
        let (d_res2, d_gamma, d_beta) =
            layer_norm_backward(&dx, &store.vec(&p("ln2.gamma")), &lc.ln2);
        grads.acc1(&p("ln2.gamma"), d_gamma);
        grads.acc1(&p("ln2.beta"), d_beta);

        let mut d_ffn_out = d_res2.clone();
        let mut d_x_mid = d_res2;
        if let Some(ad) = &lc.ffn_adapter {
            d_ffn_out = adapter_backward(store, &p("adapter.ffn"), ad, d_ffn_out, &mut grads);
        }
        if let Some(mask) = &lc.ffn_drop {
            d_ffn_out *= mask;
        }
        // FFN: out = gelu(x_mid·W1 + b1)·W2 + b2.
        if grads.wants(&p("ffn.w2")) {
            grads.acc2(&p("ffn.w2"), lc.ffn_g.t().dot(&d_ffn_out));
        }
        if grads.wants(&p("ffn.b2")) {
            grads.acc1(&p("ffn.b2"), d_ffn_out.sum_axis(Axis(0)));
        }
        let mut d_z1 = d_ffn_out.dot(&store.mat(&p("ffn.w2")).t());
        d_z1.zip_mut_with(&lc.ffn_z1, |d, z| *d = *d * gelu_grad(*z));
        if grads.wants(&p("ffn.w1")) {
            grads.acc2(&p("ffn.w1"), lc.x_mid.t().dot(&d_z1));
        }
        if grads.wants(&p("ffn.b1")) {
            grads.acc1(&p("ffn.b1"), d_z1.sum_axis(Axis(0)));
        }
        d_x_mid += &d_z1.dot(&store.mat(&p("ffn.w1")).t());

        // LN1 closes the attention residual block.
        let (d_res1, d_gamma, d_beta) =
            layer_norm_backward(&d_x_mid, &store.vec(&p("ln1.gamma")), &lc.ln1);
        grads.acc1(&p("ln1.gamma"), d_gamma);
        grads.acc1(&p("ln1.beta"), d_beta);

        let mut d_attn_out = d_res1.clone();
        dx = d_res1;
        if let Some(ad) = &lc.attn_adapter {
            d_attn_out = adapter_backward(store, &p("adapter.attn"), ad, d_attn_out, &mut grads);
        }
        if let Some(mask) = &lc.attn_drop {
            d_attn_out *= mask;
        }

        // Output projection.
        if grads.wants(&p("attn.wo")) {
            grads.acc2(&p("attn.wo"), lc.ctx.t().dot(&d_attn_out));
        }
        if grads.wants(&p("attn.bo")) {
            grads.acc1(&p("attn.bo"), d_attn_out.sum_axis(Axis(0)));
        }
        let d_ctx = d_attn_out.dot(&store.mat(&p("attn.wo")).t());

        // Scaled dot-product attention, head by head.
        let mut dq = Array2::<F>::zeros((rows, cfg.hidden));
        let mut dk = Array2::<F>::zeros((rows, cfg.hidden));
        let mut dv = Array2::<F>::zeros((rows, cfg.hidden));
        for b in 0..bsz {
            let row_range = s![b * seq..(b + 1) * seq, ..];
            for a in 0..heads {
                let col_range = s![.., a * head_dim..(a + 1) * head_dim];
                let probs = &lc.probs[b * heads + a];
                let d_ctx_s = d_ctx.slice(row_range).slice_move(col_range);
                let qs = lc.q.slice(row_range).slice_move(col_range);
                let ks = lc.k.slice(row_range).slice_move(col_range);
                let vs = lc.v.slice(row_range).slice_move(col_range);

                let d_probs = d_ctx_s.dot(&vs.t());
                dv.slice_mut(row_range)
                    .slice_move(col_range)
                    .assign(&probs.t().dot(&d_ctx_s));
                let mut d_scores = softmax_rows_backward(probs, &d_probs);
                d_scores.mapv_inplace(|v| v * inv_sqrt_d);
                dq.slice_mut(row_range)
                    .slice_move(col_range)
                    .assign(&d_scores.dot(&ks));
                dk.slice_mut(row_range)
                    .slice_move(col_range)
                    .assign(&d_scores.t().dot(&qs));
            }
        }

        for (name_w, name_b, d) in [
            ("attn.wq", "attn.bq", &dq),
            ("attn.wk", "attn.bk", &dk),
            ("attn.wv", "attn.bv", &dv),
        ] {
            if grads.wants(&p(name_w)) {
                grads.acc2(&p(name_w), lc.x_in.t().dot(d));
            }
            if grads.wants(&p(name_b)) {
                grads.acc1(&p(name_b), d.sum_axis(Axis(0)));
            }
            dx += &d.dot(&store.mat(&p(name_w)).t());
        }
    }

    // Embeddings: only needed when something underneath is trainable.
    let wants_embeddings = grads.wants("embed.token")
        || grads.wants("embed.pos")
        || grads.wants("embed.ln.gamma")
        || grads.wants("embed.ln.beta");
    if wants_embeddings {
        if let Some(mask) = &cache.emb_drop {
            dx *= mask;
        }
        let (d_emb, d_gamma, d_beta) =
            layer_norm_backward(&dx, &store.vec("embed.ln.gamma"), &cache.emb_ln);
        grads.acc1("embed.ln.gamma", d_gamma);
        grads.acc1("embed.ln.beta", d_beta);

        let mut d_token = Array2::<F>::zeros((cfg.vocab_size, cfg.hidden));
        let mut d_pos = Array2::<F>::zeros((cfg.max_seq_len, cfg.hidden));
        for b in 0..bsz {
            for t in 0..seq {
                let row = d_emb.row(b * seq + t);
                let id = batch.input_ids[[b, t]] as usize;
                d_token.row_mut(id).zip_mut_with(&row, |a, b| *a = *a + *b);
                d_pos.row_mut(t).zip_mut_with(&row, |a, b| *a = *a + *b);
            }
        }
        grads.acc2("embed.token", d_token);
        grads.acc2("embed.pos", d_pos);
    }

    grads
}

/// Backward through one adapter block; returns the gradient at the block
/// input (the residual path plus the bottleneck path).
fn adapter_backward<F: Scalar>(
    store: &ParameterStore<F>,
    prefix: &str,
    cache: &AdapterCache<F>,
    d_out: Array2<F>,
    grads: &mut Gradients<F>,
) -> Array2<F> {
    let up = store.mat(&format!("{prefix}.up"));
    let g = cache.z.mapv(gelu);
    if grads.wants(&format!("{prefix}.up")) {
        grads.acc2(&format!("{prefix}.up"), g.t().dot(&d_out));
    }
    if grads.wants(&format!("{prefix}.up_bias")) {
        grads.acc1(&format!("{prefix}.up_bias"), d_out.sum_axis(Axis(0)));
    }
    let mut d_z = d_out.dot(&up.t());
    d_z.zip_mut_with(&cache.z, |d, z| *d = *d * gelu_grad(*z));
    if grads.wants(&format!("{prefix}.down")) {
        grads.acc2(&format!("{prefix}.down"), cache.x.t().dot(&d_z));
    }
    if grads.wants(&format!("{prefix}.down_bias")) {
        grads.acc1(&format!("{prefix}.down_bias"), d_z.sum_axis(Axis(0)));
    }
    let mut d_x = d_z.dot(&store.mat(&format!("{prefix}.down")).t());
    d_x += &d_out;
    d_x
}
