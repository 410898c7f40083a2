//! Cloze-style factual recall evaluation.
//!
//! A probe item is a sentence with exactly one `[MASK]` and a single-word
//! gold answer. The model ranks every non-reserved vocabulary token by its
//! logit at the mask position (ties broken by ascending token id), and the
//! curve reports mean precision-at-k over a k grid: the fraction of items
//! whose gold lands in the top k. Items whose gold is out of vocabulary are
//! skipped and counted, never silently dropped.
//!
//! Probes can be synthesized from a knowledge graph with a paraphrase
//! template table — phrasing deliberately different from the training
//! templates — and written as JSON lines using the field names of the
//! public ConceptNet cloze distribution, so such files load unchanged.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use ndarray::{s, Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, PredicateId, Triple};
use crate::model::{forward, EncoderModel};
use crate::scalar::Scalar;
use crate::seeding;
use crate::textpipe::{encode_line, Vocabulary, MASK_ID, PAD_ID, RESERVED_TOKENS};
use crate::verbalize::{substitute, TemplateTable};

/// The mask literal probe sentences must contain exactly once.
pub const MASK_TOKEN: &str = RESERVED_TOKENS[MASK_ID as usize];

/// Default k grid for precision curves.
pub const DEFAULT_K_GRID: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];

/// Forward-pass chunk size during curve evaluation.
const EVAL_BATCH: usize = 32;

/// One cloze question: a masked sentence and its single-word answer.
///
/// Serialized field names follow the public ConceptNet cloze files
/// (`masked_sentence`, `obj_label`, `predicate`, `uuid`); unknown fields in
/// such files are ignored on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub masked_sentence: String,
    #[serde(rename = "obj_label")]
    pub gold_object: String,
    pub predicate: PredicateId,
    pub uuid: String,
    /// The originating edge, when the item was synthesized rather than read
    /// from a file. Not serialized.
    #[serde(skip)]
    pub source_triple: Option<Triple>,
}

impl ProbeItem {
    /// Builds and validates an item; the uuid is derived deterministically
    /// from the sentence, gold, and predicate.
    pub fn new(
        masked_sentence: impl Into<String>,
        gold_object: impl Into<String>,
        predicate: PredicateId,
        source_triple: Option<Triple>,
    ) -> Result<Self> {
        let masked_sentence = masked_sentence.into();
        let gold_object = gold_object.into();
        let key = format!("{masked_sentence}\n{gold_object}\n{predicate}");
        let uuid = Uuid::new_v5(&Uuid::NAMESPACE_OID, key.as_bytes())
            .hyphenated()
            .to_string();
        let item = ProbeItem {
            masked_sentence,
            gold_object,
            predicate,
            uuid,
            source_triple,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        let masks = self.masked_sentence.matches(MASK_TOKEN).count();
        if masks != 1 {
            return Err(Error::data(format!(
                "probe sentence must contain exactly one {MASK_TOKEN}, found {masks}: {:?}",
                self.masked_sentence
            )));
        }
        if self.gold_object.is_empty() || self.gold_object.chars().any(char::is_whitespace) {
            return Err(Error::data(format!(
                "probe gold must be a single word, got {:?}",
                self.gold_object
            )));
        }
        Ok(())
    }
}

/// All non-reserved token ids sorted by descending logit, ties by ascending
/// id. The fixed tie rule makes rankings reproducible across runs.
pub fn rank_ids_from_logits<F: Scalar>(row: ArrayView1<'_, F>) -> Vec<u32> {
    let reserved = RESERVED_TOKENS.len() as u32;
    let mut ids: Vec<u32> = (reserved..row.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        row[b as usize]
            .to_f64()
            .total_cmp(&row[a as usize].to_f64())
            .then(a.cmp(&b))
    });
    ids
}

/// 1-based rank the sort above would assign to `gold_id`.
fn gold_rank_from_logits<F: Scalar>(row: ArrayView1<'_, F>, gold_id: u32) -> usize {
    let reserved = RESERVED_TOKENS.len() as u32;
    let gold = row[gold_id as usize].to_f64();
    let beating = (reserved..row.len() as u32)
        .filter(|&id| {
            let cmp = row[id as usize].to_f64().total_cmp(&gold);
            cmp == std::cmp::Ordering::Greater
                || (cmp == std::cmp::Ordering::Equal && id < gold_id)
        })
        .count();
    beating + 1
}

/// Encodes the sentence and returns (ids, mask position); the mask must
/// survive length truncation.
fn encode_probe(item: &ProbeItem, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<u32>, usize)> {
    item.validate()?;
    let ids = encode_line(&item.masked_sentence, vocab, max_len);
    let positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == MASK_ID)
        .map(|(i, _)| i)
        .collect();
    match positions.as_slice() {
        [pos] => Ok((ids, *pos)),
        [] => Err(Error::data(format!(
            "mask position lost to length truncation in {:?}",
            item.masked_sentence
        ))),
        _ => Err(Error::data(format!(
            "multiple mask tokens after encoding {:?}",
            item.masked_sentence
        ))),
    }
}

/// Ranks the whole usable vocabulary for one item at its mask position.
/// Injected adapters participate automatically.
pub fn rank_vocab<F: Scalar>(
    model: &EncoderModel<F>,
    item: &ProbeItem,
    vocab: &Vocabulary,
) -> Result<Vec<u32>> {
    let (ids, pos) = encode_probe(item, vocab, model.config.max_seq_len)?;
    let input = Array2::from_shape_vec((1, ids.len()), ids).expect("row-major single row");
    let mask = Array2::ones(input.dim());
    let logits = forward(model, &input, &mask, model.adapter.is_some(), None)?;
    Ok(rank_ids_from_logits(logits.slice(s![0, pos, ..])))
}

/// Whether `gold` sits within the first `k` entries of the ranking.
pub fn precision_at_k(ranking: &[u32], gold: u32, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::config("precision_at_k requires k ≥ 1"));
    }
    let position = ranking
        .iter()
        .position(|&id| id == gold)
        .ok_or_else(|| Error::data(format!("gold id {gold} is not rankable")))?;
    Ok(position < k)
}

/// One point of a precision curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_p: f64,
}

/// Mean precision-at-k over a k grid, with skip accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PAtKCurve {
    pub points: Vec<CurvePoint>,
    /// Items that produced a rank.
    pub n_scored: usize,
    /// Items skipped for an out-of-vocabulary gold.
    pub n_skipped: usize,
}

impl PAtKCurve {
    pub fn p_at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.mean_p)
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].mean_p <= w[1].mean_p)
    }

    /// Writes `k,mean_p,n_scored,n_skipped` CSV.
    pub fn write_csv(&self, mut sink: impl Write) -> Result<()> {
        let io_err = |e: std::io::Error| Error::data(format!("curve write failed: {e}"));
        writeln!(sink, "k,mean_p,n_scored,n_skipped").map_err(io_err)?;
        for p in &self.points {
            writeln!(sink, "{},{},{},{}", p.k, p.mean_p, self.n_scored, self.n_skipped)
                .map_err(io_err)?;
        }
        Ok(())
    }
}

fn validate_k_grid(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::config("empty k grid"));
    }
    if ks[0] == 0 {
        return Err(Error::config("k values must be ≥ 1"));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "k grid must be strictly ascending, got {ks:?}"
        )));
    }
    Ok(())
}

/// Curve arithmetic over precomputed 1-based gold ranks.
fn curve_from_ranks(ranks: &[usize], ks: &[usize], n_skipped: usize) -> PAtKCurve {
    let n = ranks.len();
    let points = ks
        .iter()
        .map(|&k| CurvePoint {
            k,
            mean_p: ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64,
        })
        .collect();
    PAtKCurve {
        points,
        n_scored: n,
        n_skipped,
    }
}

/// Gold ranks for every scorable item, with the out-of-vocabulary skip
/// count. Items are evaluated in chunks against the read-only model.
fn gold_ranks<F: Scalar>(
    model: &EncoderModel<F>,
    items: &[ProbeItem],
    vocab: &Vocabulary,
) -> Result<(Vec<usize>, usize)> {
    let max_len = model.config.max_seq_len;
    let mut scorable: Vec<(Vec<u32>, usize, u32)> = Vec::new();
    let mut n_skipped = 0usize;
    for item in items {
        let gold_lower = item.gold_object.to_lowercase();
        let Some(gold_id) = vocab.id(&gold_lower) else {
            item.validate()?;
            n_skipped += 1;
            continue;
        };
        if Vocabulary::is_reserved_id(gold_id) {
            n_skipped += 1;
            continue;
        }
        let (ids, pos) = encode_probe(item, vocab, max_len)?;
        scorable.push((ids, pos, gold_id));
    }

    let adapters = model.adapter.is_some();
    let mut ranks = Vec::with_capacity(scorable.len());
    for chunk in scorable.chunks(EVAL_BATCH) {
        let width = chunk.iter().map(|(ids, _, _)| ids.len()).max().unwrap();
        let mut input = Array2::from_elem((chunk.len(), width), PAD_ID);
        let mut attn = Array2::<u8>::zeros((chunk.len(), width));
        for (r, (ids, _, _)) in chunk.iter().enumerate() {
            for (c, &id) in ids.iter().enumerate() {
                input[[r, c]] = id;
                attn[[r, c]] = 1;
            }
        }
        let logits = forward(model, &input, &attn, adapters, None)?;
        for (r, (_, pos, gold_id)) in chunk.iter().enumerate() {
            ranks.push(gold_rank_from_logits(logits.slice(s![r, *pos, ..]), *gold_id));
        }
    }
    Ok((ranks, n_skipped))
}

/// Mean P@k over the grid. Out-of-vocabulary golds are skipped and counted;
/// an entirely unscorable probe is an error rather than an empty curve.
pub fn mean_p_at_k<F: Scalar>(
    model: &EncoderModel<F>,
    items: &[ProbeItem],
    vocab: &Vocabulary,
    ks: &[usize],
) -> Result<PAtKCurve> {
    validate_k_grid(ks)?;
    let (ranks, n_skipped) = gold_ranks(model, items, vocab)?;
    if ranks.is_empty() {
        return Err(Error::data(format!(
            "no scorable probe items ({n_skipped} skipped as out of vocabulary)"
        )));
    }
    Ok(curve_from_ranks(&ranks, ks, n_skipped))
}

/// The items whose predicate matches, in their original order.
pub fn filter_by_predicate(items: &[ProbeItem], predicate: &PredicateId) -> Vec<ProbeItem> {
    items
        .iter()
        .filter(|i| &i.predicate == predicate)
        .cloned()
        .collect()
}

/// How much of the probe leaks from the training set at the object slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub probe_items: usize,
    /// Items whose gold equals the object of at least one training triple.
    pub matched: usize,
    pub fraction: f64,
    /// Fixed description of the match rule, for report provenance.
    pub match_definition: String,
}

/// Counts probe golds that appear as a training-triple object (lowercased
/// comparison, matching the vocabulary's casing rule).
pub fn object_overlap(training: &[Triple], items: &[ProbeItem]) -> OverlapReport {
    let objects: HashSet<&str> = training.iter().map(|t| t.object.as_str()).collect();
    let matched = items
        .iter()
        .filter(|i| objects.contains(i.gold_object.to_lowercase().as_str()))
        .count();
    let fraction = if items.is_empty() {
        0.0
    } else {
        matched as f64 / items.len() as f64
    };
    OverlapReport {
        probe_items: items.len(),
        matched,
        fraction,
        match_definition: "probe gold equals the object of ≥1 training triple (lowercased)"
            .to_string(),
    }
}

/// A synthesized probe plus its skip accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSynthesis {
    pub items: Vec<ProbeItem>,
    /// Triples dropped because their object spans several words.
    pub skipped_multi_word: usize,
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Builds cloze items from every graph triple with a single-word object:
/// the paraphrase pattern is filled with the subject and `[MASK]`, the
/// sentence is capitalized, and the object becomes the gold. `max_items`
/// keeps a seed-deterministic subset in graph order.
pub fn synthesize_probe(
    graph: &KnowledgeGraph,
    paraphrases: &TemplateTable,
    seed: u64,
    max_items: Option<usize>,
) -> Result<ProbeSynthesis> {
    let mut items = Vec::new();
    let mut skipped_multi_word = 0usize;
    for triple in graph.triples() {
        if triple.object.word_count() > 1 {
            skipped_multi_word += 1;
            continue;
        }
        let pattern = paraphrases.resolve(&triple.predicate)?;
        let sentence = capitalize_first(&substitute(
            &pattern,
            triple.subject.as_str(),
            MASK_TOKEN,
        ));
        let gold = triple.object.as_str().to_string();
        let predicate = triple.predicate.clone();
        items.push(ProbeItem::new(sentence, gold, predicate, Some(triple))?);
    }

    if let Some(limit) = max_items {
        if items.len() > limit {
            let mut rng = seeding::derive_rng(seed, "probe/holdout", &[limit as u64]);
            let mut indices: Vec<usize> = (0..items.len()).collect();
            indices.shuffle(&mut rng);
            let mut keep: Vec<usize> = indices.into_iter().take(limit).collect();
            keep.sort_unstable();
            items = keep.into_iter().map(|i| items[i].clone()).collect();
        }
    }
    Ok(ProbeSynthesis {
        items,
        skipped_multi_word,
    })
}

/// Writes one JSON object per line with the ConceptNet cloze field names.
pub fn write_probe_jsonl(items: &[ProbeItem], mut sink: impl Write) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::data(format!("probe serialization failed: {e}")))?;
        writeln!(sink, "{line}").map_err(|e| Error::data(format!("probe write failed: {e}")))?;
    }
    Ok(())
}

/// Reads a JSON-lines probe file, validating every item. Unknown fields are
/// ignored, so files from the public cloze distribution load as-is.
pub fn read_probe_jsonl(reader: impl BufRead) -> Result<Vec<ProbeItem>> {
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::data(format!("probe read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ProbeItem = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("probe line {}: {e}", n + 1)))?;
        item.validate()
            .map_err(|e| Error::data(format!("probe line {}: {e}", n + 1)))?;
        items.push(item);
    }
    Ok(items)
}
