//! Word-level text pipeline: vocabulary, encoding, MLM masking, batching.
//!
//! Tokenization is deliberately simple — lowercase, split on whitespace,
//! split one sentence-final period into its own token — so every concept
//! label in the graph stays a single token and a cloze probe can mask it
//! with a single `[MASK]`. Reserved tokens occupy fixed ids 0..=4 and are
//! never candidates for masking.
//!
//! Masking is dynamic: each epoch re-draws masks from an RNG derived from
//! `(seed, epoch, example index)`, so the schedule is reproducible yet the
//! model never sees the same corruption twice across epochs.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Reserved tokens at their fixed ids.
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Label value marking positions that do not contribute to the loss.
pub const IGNORE_LABEL: i64 = -100;

/// Splits a line into tokens: reserved literals pass through unchanged,
/// everything else is lowercased, and a single trailing period (on a token
/// longer than the period itself) becomes its own token.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in line.split_whitespace() {
        if RESERVED_TOKENS.contains(&piece) {
            out.push(piece.to_string());
            continue;
        }
        let lower = piece.to_lowercase();
        match lower.strip_suffix('.') {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_string());
                out.push(".".to_string());
            }
            _ => out.push(lower),
        }
    }
    out
}

/// A token ↔ id bijection with the 5 reserved tokens pinned at ids 0..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus lines. Tokens with frequency below
    /// `min_frequency` are dropped; survivors get ids after the reserved
    /// block, ordered by descending frequency with lexicographic
    /// tie-breaks.
    pub fn build<I, S>(lines: I, min_frequency: u64) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut freq: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for token in tokenize(line.as_ref()) {
                // Reserved literals appearing in text map to their fixed ids
                // and must not be counted as ordinary tokens.
                if RESERVED_TOKENS.contains(&token.as_str()) {
                    continue;
                }
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(_, n)| *n >= min_frequency)
            .collect();
        kept.sort_by(|(ta, na), (tb, nb)| nb.cmp(na).then_with(|| ta.cmp(tb)));

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens).expect("constructed token list is valid")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::data(
                "vocabulary must start with the 5 reserved tokens in order",
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("vocabulary lists token {t:?} twice")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved_id(id: u32) -> bool {
        (id as usize) < RESERVED_TOKENS.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Tokens in id order.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Writes one token per line; the line number is the id.
    pub fn write(&self, mut sink: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(sink, "{t}").map_err(|e| Error::data(format!("vocab write failed: {e}")))?;
        }
        Ok(())
    }

    pub fn read(reader: impl BufRead) -> Result<Vocabulary> {
        let tokens = reader
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::data(format!("vocab read failed: {e}")))?;
        Self::from_tokens(tokens)
    }
}

/// Encodes one line as `[CLS] tokens [SEP]`, mapping out-of-vocabulary
/// tokens to `[UNK]` and truncating the middle so the result never exceeds
/// `max_len` ids. `max_len` must be at least 2.
pub fn encode_line(line: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "max_len must fit [CLS] and [SEP]");
    let tokens = tokenize(line);
    let body = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(CLS_ID);
    ids.extend(tokens[..body].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(SEP_ID);
    ids
}

/// Maps ids back to their tokens; unknown ids render as `[UNK]`.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|id| vocab.token(*id).unwrap_or(RESERVED_TOKENS[1]).to_string())
        .collect()
}

/// MLM corruption parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Probability that a non-reserved position is selected for prediction.
    pub mlm_probability: f64,
    /// Of the selected positions: replaced by `[MASK]`.
    pub mask_fraction: f64,
    /// Of the selected positions: replaced by a random non-reserved token.
    pub random_fraction: f64,
    /// Of the selected positions: left unchanged.
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mlm_probability: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mlm_probability) {
            return Err(Error::config(format!(
                "mlm_probability {} outside [0, 1]",
                self.mlm_probability
            )));
        }
        for (name, f) in [
            ("mask_fraction", self.mask_fraction),
            ("random_fraction", self.random_fraction),
            ("keep_fraction", self.keep_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("{name} {f} outside [0, 1]")));
            }
        }
        let sum = self.mask_fraction + self.random_fraction + self.keep_fraction;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "mask/random/keep fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Applies MLM corruption to one encoded sequence.
///
/// Per non-reserved position, in fixed draw order: one uniform decides
/// selection against `mlm_probability`; for selected positions a second
/// uniform picks the branch (mask / random / keep), and the random branch
/// draws one id uniformly from the non-reserved range. Labels carry the
/// original id at selected positions and [`IGNORE_LABEL`] elsewhere.
pub fn apply_mlm_masking(
    seq: &[u32],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<i64>) {
    let reserved = RESERVED_TOKENS.len() as u32;
    let mut input = seq.to_vec();
    let mut labels = vec![IGNORE_LABEL; seq.len()];
    for (i, &orig) in seq.iter().enumerate() {
        if Vocabulary::is_reserved_id(orig) {
            continue;
        }
        if rng.random::<f64>() >= cfg.mlm_probability {
            continue;
        }
        labels[i] = orig as i64;
        let branch: f64 = rng.random();
        if branch < cfg.mask_fraction {
            input[i] = MASK_ID;
        } else if branch < cfg.mask_fraction + cfg.random_fraction {
            if vocab_size as u32 > reserved {
                input[i] = rng.random_range(reserved..vocab_size as u32);
            }
            // A vocabulary of only reserved tokens has nothing to draw from;
            // the position falls through unchanged, like the keep branch.
        }
        // else: keep branch, input unchanged.
    }
    (input, labels)
}

/// One training batch: ids, loss labels, and a 0/1 attention mask. Padding
/// positions have attention 0 and label [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Array2<u32>,
    pub labels: Array2<i64>,
    pub attention_mask: Array2<u8>,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.input_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.ncols()
    }

    /// Positions with a real (non-ignored) label.
    pub fn masked_positions(&self) -> usize {
        self.labels.iter().filter(|l| **l != IGNORE_LABEL).count()
    }
}

/// How corpus lines become training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One corpus line per example.
    LineByLine,
    /// Consecutive lines share an example, separated by `[SEP]`, while the
    /// packed length stays within `max_len`.
    MaxLengthPacking,
}

/// Batch assembly parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub mode: BatchMode,
    /// Length budget per example (ids, including specials).
    pub max_len: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 32,
            mode: BatchMode::LineByLine,
            max_len: 64,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        Ok(())
    }
}

/// Packs lines into id sequences: every example starts with `[CLS]`; each
/// line appends its tokens plus a `[SEP]`, flushing first whenever that
/// would exceed `max_len`. A single oversized line is truncated to fit.
fn pack_lines(lines: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<u32>> {
    let mut examples = Vec::new();
    let mut current: Vec<u32> = vec![CLS_ID];
    for line in lines {
        let mut tokens = tokenize(line);
        tokens.truncate(max_len - 2);
        let cost = tokens.len() + 1;
        if current.len() > 1 && current.len() + cost > max_len {
            examples.push(std::mem::replace(&mut current, vec![CLS_ID]));
        }
        current.extend(tokens.iter().map(|t| vocab.id_or_unk(t)));
        current.push(SEP_ID);
    }
    if current.len() > 1 {
        examples.push(current);
    }
    examples
}

/// Assembles the batches for one epoch.
///
/// Examples are built in corpus order (encoding or packing per `mode`),
/// masked with per-example RNGs derived from `(seed, epoch, example
/// index)`, shuffled by an RNG derived from `(seed, epoch)`, then grouped
/// and padded to each batch's longest sequence. The result depends only on
/// the inputs — never on thread count or iteration timing.
pub fn epoch_batches(
    lines: &[String],
    vocab: &Vocabulary,
    batch_cfg: &BatchConfig,
    masking: &MaskingConfig,
    epoch: u64,
) -> Result<Vec<MaskedBatch>> {
    batch_cfg.validate()?;
    masking.validate()?;
    let encoded: Vec<Vec<u32>> = match batch_cfg.mode {
        BatchMode::LineByLine => lines
            .iter()
            .map(|l| encode_line(l, vocab, batch_cfg.max_len))
            .collect(),
        BatchMode::MaxLengthPacking => pack_lines(lines, vocab, batch_cfg.max_len),
    };

    let mut masked: Vec<(Vec<u32>, Vec<i64>)> = encoded
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = seeding::derive_rng(masking.seed, "textpipe/mask", &[epoch, i as u64]);
            apply_mlm_masking(seq, masking, vocab.size(), &mut rng)
        })
        .collect();

    let mut shuffle_rng = seeding::derive_rng(masking.seed, "textpipe/shuffle", &[epoch]);
    masked.shuffle(&mut shuffle_rng);

    Ok(masked
        .chunks(batch_cfg.batch_size)
        .map(pad_into_batch)
        .collect())
}

fn pad_into_batch(chunk: &[(Vec<u32>, Vec<i64>)]) -> MaskedBatch {
    let rows = chunk.len();
    let width = chunk.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
    let mut input_ids = Array2::from_elem((rows, width), PAD_ID);
    let mut labels = Array2::from_elem((rows, width), IGNORE_LABEL);
    let mut attention_mask = Array2::zeros((rows, width));
    for (r, (ids, labs)) in chunk.iter().enumerate() {
        for (c, &id) in ids.iter().enumerate() {
            input_ids[[r, c]] = id;
            labels[[r, c]] = labs[c];
            attention_mask[[r, c]] = 1;
        }
    }
    MaskedBatch {
        input_ids,
        labels,
        attention_mask,
    }
}

/// Reads corpus lines for training, dropping the blank block separators.
pub fn read_corpus_lines(reader: impl BufRead) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::data(format!("corpus read failed: {e}")))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}
