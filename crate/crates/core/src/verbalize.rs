//! Rendering triples and walks into natural-language training text.
//!
//! Patterns live in versioned data files mapping each predicate to a
//! sentence skeleton like `"{s} is a synonym of {o}"`. Substitution is
//! verbatim — no article agreement, no casing changes — so the rendered
//! corpus is a deterministic function of graph and table. Predicates without
//! a pattern fall back to the decamelized predicate name placed between
//! subject and object (`flavorOf` → `{s} flavor of {o}`) when the table
//! allows it.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{PredicateId, Triple};
use crate::walker::Walk;

/// A versioned predicate → pattern mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateTable {
    version: u32,
    fallback: bool,
    patterns: IndexMap<PredicateId, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    version: u32,
    fallback: bool,
    patterns: IndexMap<String, String>,
}

impl TemplateTable {
    /// Parses a table from its TOML form, validating that every pattern
    /// contains exactly one `{s}` and one `{o}`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawTable =
            toml::from_str(text).map_err(|e| Error::config(format!("template table: {e}")))?;
        let mut patterns = IndexMap::with_capacity(raw.patterns.len());
        for (name, pattern) in raw.patterns {
            let pred = PredicateId::new(&name)?;
            validate_pattern(&pred, &pattern)?;
            if patterns.insert(pred.clone(), pattern).is_some() {
                return Err(Error::config(format!(
                    "template table lists predicate {pred} twice"
                )));
            }
        }
        Ok(TemplateTable {
            version: raw.version,
            fallback: raw.fallback,
            patterns,
        })
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawTable {
            version: self.version,
            fallback: self.fallback,
            patterns: self
                .patterns
                .iter()
                .map(|(p, t)| (p.as_str().to_string(), t.clone()))
                .collect(),
        };
        toml::to_string(&raw).expect("table serializes")
    }

    /// The pattern table used for rendering training corpora.
    pub fn bundled_train() -> Self {
        Self::from_toml_str(include_str!("../data/templates/train.toml"))
            .expect("bundled train table is valid")
    }

    /// The paraphrase table used for synthesizing cloze probes.
    pub fn bundled_probe() -> Self {
        Self::from_toml_str(include_str!("../data/templates/probe.toml"))
            .expect("bundled probe table is valid")
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn allows_fallback(&self) -> bool {
        self.fallback
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn predicates(&self) -> impl Iterator<Item = &PredicateId> {
        self.patterns.keys()
    }

    /// The explicit pattern for `pred`, if the table has one.
    pub fn pattern_for(&self, pred: &PredicateId) -> Option<&str> {
        self.patterns.get(pred).map(String::as_str)
    }

    /// The pattern that will actually be used for `pred`: the table entry,
    /// or the fallback if allowed, or an error.
    pub fn resolve(&self, pred: &PredicateId) -> Result<Cow<'_, str>> {
        if let Some(p) = self.pattern_for(pred) {
            return Ok(Cow::Borrowed(p));
        }
        if self.fallback {
            return Ok(Cow::Owned(fallback_pattern(pred)));
        }
        Err(Error::data(format!(
            "no pattern for predicate {pred} and fallback is disabled"
        )))
    }

    /// Predicates present in both tables whose patterns coincide. Probe
    /// paraphrase tables must keep this empty against the training table.
    pub fn shared_patterns_with(&self, other: &TemplateTable) -> Vec<PredicateId> {
        self.patterns
            .iter()
            .filter(|(pred, pattern)| other.pattern_for(pred) == Some(pattern.as_str()))
            .map(|(pred, _)| pred.clone())
            .collect()
    }
}

fn validate_pattern(pred: &PredicateId, pattern: &str) -> Result<()> {
    for placeholder in ["{s}", "{o}"] {
        let count = pattern.matches(placeholder).count();
        if count != 1 {
            return Err(Error::config(format!(
                "pattern for {pred} must contain {placeholder} exactly once, found {count}: {pattern:?}"
            )));
        }
    }
    Ok(())
}

/// Splits a camel-case identifier into lowercase words: `hasSubevent` →
/// `has subevent`.
pub fn decamelize(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    for c in name.chars() {
        if c.is_uppercase() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

/// The pattern used for predicates missing from a table: the decamelized
/// predicate name between the two labels.
pub fn fallback_pattern(pred: &PredicateId) -> String {
    format!("{{s}} {} {{o}}", decamelize(pred.as_str()))
}

/// Substitutes both placeholders in one pass, so label text that happens to
/// look like a placeholder is never re-expanded.
pub fn substitute(pattern: &str, subject: &str, object: &str) -> String {
    let si = pattern.find("{s}").expect("pattern validated to contain {s}");
    let oi = pattern.find("{o}").expect("pattern validated to contain {o}");
    let ((first_at, first, first_text), (second_at, _, second_text)) = if si < oi {
        ((si, "{s}", subject), (oi, "{o}", object))
    } else {
        ((oi, "{o}", object), (si, "{s}", subject))
    };
    let mut out = String::with_capacity(pattern.len() + subject.len() + object.len());
    out.push_str(&pattern[..first_at]);
    out.push_str(first_text);
    out.push_str(&pattern[first_at + first.len()..second_at]);
    out.push_str(second_text);
    out.push_str(&pattern[second_at + 3..]);
    out
}

/// Renders one triple as a period-terminated sentence.
pub fn verbalize_triple(t: &Triple, table: &TemplateTable) -> Result<String> {
    let pattern = table.resolve(&t.predicate)?;
    let mut sentence = substitute(&pattern, t.subject.as_str(), t.object.as_str());
    sentence.push('.');
    Ok(sentence)
}

/// Renders a walk as one sentence per step, in step order.
pub fn verbalize_walk(walk: &Walk, table: &TemplateTable) -> Result<Vec<String>> {
    walk.steps
        .iter()
        .map(|t| verbalize_triple(t, table))
        .collect()
}

/// What a corpus render produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    /// Non-empty walk blocks written.
    pub blocks: u64,
    pub line_count: u64,
    /// Whitespace-delimited tokens across all lines (the sentence-final
    /// period stays glued to its word here; the text pipeline splits it).
    pub token_count: u64,
    pub per_predicate_lines: BTreeMap<String, u64>,
}

impl CorpusSummary {
    /// Fraction of sentences drawn from each predicate; sums to 1 when any
    /// lines were written.
    pub fn predicate_shares(&self) -> BTreeMap<String, f64> {
        let total = self.line_count.max(1) as f64;
        self.per_predicate_lines
            .iter()
            .map(|(p, n)| (p.clone(), *n as f64 / total))
            .collect()
    }
}

/// Renders walks to a corpus file: one sentence per line, one blank line
/// between consecutive walk blocks. Walks with zero steps contribute
/// nothing, not even a separator.
pub fn write_corpus(
    walks: &[Walk],
    table: &TemplateTable,
    mut sink: impl Write,
) -> Result<CorpusSummary> {
    let mut summary = CorpusSummary::default();
    for walk in walks {
        if walk.steps.is_empty() {
            continue;
        }
        if summary.blocks > 0 {
            writeln!(sink).map_err(write_err)?;
        }
        summary.blocks += 1;
        for (step, line) in walk.steps.iter().zip(verbalize_walk(walk, table)?) {
            summary.line_count += 1;
            summary.token_count += line.split_whitespace().count() as u64;
            *summary
                .per_predicate_lines
                .entry(step.predicate.as_str().to_string())
                .or_insert(0) += 1;
            writeln!(sink, "{line}").map_err(write_err)?;
        }
    }
    Ok(summary)
}

fn write_err(e: std::io::Error) -> Error {
    Error::data(format!("corpus write failed: {e}"))
}
