//! Knowledge-graph ingestion, filtering, and statistics.
//!
//! The graph is a directed multigraph: nodes are concept labels, edges carry
//! a predicate and a positive weight, and parallel edges (same endpoints,
//! same or different predicate) are kept as-is. Adjacency preserves
//! first-appearance order so that every downstream stage — walks, corpora,
//! probes — is reproducible from the input file alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicates the verbalizer ships sentence patterns for. Anything else is
/// still ingested and walkable, but [`PredicateId::is_known`] reports false
/// and rendering it relies on the fallback rule.
pub const KNOWN_PREDICATES: &[&str] = &[
    "antonymOf",
    "atLocation",
    "capableOf",
    "causes",
    "causesDesire",
    "desires",
    "hasA",
    "hasPrerequisite",
    "hasProperty",
    "hasSubevent",
    "isA",
    "locatedNear",
    "madeOf",
    "mannerOf",
    "motivatedByGoal",
    "partOf",
    "receivesAction",
    "synonymOf",
    "usedFor",
];

/// A normalized concept label: lowercase, space-separated words.
///
/// Construction normalizes raw labels the way graph dumps commonly need:
/// surrounding whitespace is trimmed, underscores become spaces, internal
/// runs of separators collapse to a single space, and everything is
/// lowercased. Empty (after trimming) labels are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptLabel(String);

impl ConceptLabel {
    pub fn new(raw: &str) -> Result<Self> {
        let mut out = String::with_capacity(raw.len());
        for piece in raw.split(|c: char| c.is_whitespace() || c == '_') {
            if piece.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.extend(piece.chars().flat_map(|c| c.to_lowercase()));
        }
        if out.is_empty() {
            return Err(Error::data(format!("empty concept label {raw:?}")));
        }
        Ok(ConceptLabel(out))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Number of space-separated words in the label.
    pub fn word_count(&self) -> usize {
        self.0.split(' ').count()
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ConceptLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        ConceptLabel::new(&s)
    }
}

impl From<ConceptLabel> for String {
    fn from(l: ConceptLabel) -> String {
        l.0
    }
}

/// A relation identifier in lower-camel-case form, e.g. `isA`.
///
/// Construction trims whitespace and lowercases the first character so that
/// dumps written as `IsA`/`UsedFor` compare equal to the canonical names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PredicateId(String);

impl PredicateId {
    pub fn new(raw: &str) -> Result<Self> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(Error::data("empty predicate identifier"));
        }
        if trimmed.chars().any(|c| c.is_whitespace()) {
            return Err(Error::data(format!(
                "predicate {trimmed:?} contains whitespace"
            )));
        }
        let mut chars = trimmed.chars();
        let first = chars.next().expect("non-empty");
        let mut out = String::with_capacity(trimmed.len());
        out.extend(first.to_lowercase());
        out.push_str(chars.as_str());
        Ok(PredicateId(out))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Whether the verbalizer ships a first-class pattern for this relation.
    pub fn is_known(&self) -> bool {
        KNOWN_PREDICATES.contains(&self.0.as_str())
    }
}

impl fmt::Display for PredicateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for PredicateId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        PredicateId::new(&s)
    }
}

impl From<PredicateId> for String {
    fn from(p: PredicateId) -> String {
        p.0
    }
}

/// One weighted, directed edge: subject --predicate--> object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: ConceptLabel,
    pub predicate: PredicateId,
    pub object: ConceptLabel,
    pub weight: f64,
}

impl Triple {
    pub fn new(
        subject: ConceptLabel,
        predicate: PredicateId,
        object: ConceptLabel,
        weight: f64,
    ) -> Result<Self> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::data(format!(
                "edge {subject} -{predicate}-> {object} has non-positive weight {weight}"
            )));
        }
        Ok(Triple {
            subject,
            predicate,
            object,
            weight,
        })
    }
}

/// An outgoing edge as stored in adjacency; the subject is the map key.
#[derive(Debug, Clone, PartialEq)]
pub struct OutEdge {
    pub predicate: PredicateId,
    pub target: ConceptLabel,
    pub weight: f64,
}

/// Directed multigraph over concept labels with weighted, predicate-tagged
/// edges. Node order is first-appearance order (subjects and objects alike);
/// out-edge order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    adjacency: IndexMap<ConceptLabel, Vec<OutEdge>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut g = Self::new();
        for t in triples {
            g.push(t);
        }
        g
    }

    fn push(&mut self, t: Triple) {
        // Subject before object: a row's first-appearance order reads left
        // to right.
        self.adjacency.entry(t.subject.clone()).or_default();
        self.adjacency.entry(t.object.clone()).or_default();
        self.adjacency
            .get_mut(&t.subject)
            .expect("subject entry just created")
            .push(OutEdge {
                predicate: t.predicate,
                target: t.object,
                weight: t.weight,
            });
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }

    pub fn contains_node(&self, label: &ConceptLabel) -> bool {
        self.adjacency.contains_key(label)
    }

    /// Position of `label` in node order, if present.
    pub fn node_index(&self, label: &ConceptLabel) -> Option<usize> {
        self.adjacency.get_index_of(label)
    }

    /// Node at `index` in node order; panics when out of range.
    pub fn node_at(&self, index: usize) -> &ConceptLabel {
        self.adjacency
            .get_index(index)
            .map(|(k, _)| k)
            .expect("node index out of range")
    }

    /// Nodes in first-appearance order.
    pub fn nodes(&self) -> impl Iterator<Item = &ConceptLabel> {
        self.adjacency.keys()
    }

    /// Outgoing edges of `node`, in insertion order; empty for dead ends and
    /// unknown nodes alike (use [`contains_node`](Self::contains_node) to
    /// tell them apart).
    pub fn out_edges(&self, node: &ConceptLabel) -> &[OutEdge] {
        self.adjacency.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All edges as owned triples, in node order then insertion order.
    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.adjacency.iter().flat_map(|(s, edges)| {
            edges.iter().map(move |e| Triple {
                subject: s.clone(),
                predicate: e.predicate.clone(),
                object: e.target.clone(),
                weight: e.weight,
            })
        })
    }

    /// The subgraph containing only edges whose predicate is in `keep`.
    ///
    /// Nodes with no incident kept edge (in either direction) are dropped;
    /// surviving nodes and edges keep their relative order.
    pub fn filter_by_predicates(&self, keep: &[PredicateId]) -> KnowledgeGraph {
        let mut kept_nodes: IndexMap<&ConceptLabel, ()> = IndexMap::new();
        for (s, edges) in &self.adjacency {
            for e in edges {
                if keep.contains(&e.predicate) {
                    kept_nodes.entry(s).or_default();
                    kept_nodes.entry(&e.target).or_default();
                }
            }
        }
        let mut out = KnowledgeGraph::new();
        // Two passes keep node order aligned with the parent graph: first
        // materialize every surviving node in parent order, then the edges.
        for (node, _) in &kept_nodes {
            out.adjacency.entry((*node).clone()).or_default();
        }
        out.adjacency
            .sort_by(|a, _, b, _| self.adjacency.get_index_of(a).cmp(&self.adjacency.get_index_of(b)));
        for (s, edges) in &self.adjacency {
            for e in edges {
                if keep.contains(&e.predicate) {
                    out.adjacency
                        .get_mut(s)
                        .expect("subject materialized above")
                        .push(e.clone());
                }
            }
        }
        out
    }

    pub fn stats(&self) -> GraphStats {
        let mut per_predicate: BTreeMap<String, u64> = BTreeMap::new();
        for edges in self.adjacency.values() {
            for e in edges {
                *per_predicate.entry(e.predicate.as_str().to_string()).or_insert(0) += 1;
            }
        }
        GraphStats {
            node_count: self.node_count() as u64,
            edge_count: self.edge_count() as u64,
            per_predicate,
        }
    }
}

/// Summary counts for a graph; predicate shares sum to 1 over the edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: u64,
    pub edge_count: u64,
    pub per_predicate: BTreeMap<String, u64>,
}

impl GraphStats {
    /// Fraction of all edges carried by each predicate.
    pub fn predicate_shares(&self) -> BTreeMap<String, f64> {
        let total = self.edge_count.max(1) as f64;
        self.per_predicate
            .iter()
            .map(|(p, n)| (p.clone(), *n as f64 / total))
            .collect()
    }
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes: {}", self.node_count)?;
        writeln!(f, "edges: {}", self.edge_count)?;
        for (p, n) in &self.per_predicate {
            let share = *n as f64 / self.edge_count.max(1) as f64;
            writeln!(f, "  {p}: {n} ({share:.4})")?;
        }
        Ok(())
    }
}

/// What ingestion did with the rows it read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub edges_added: u64,
    pub malformed_rows: u64,
    /// Rows that omitted the weight column and received the default of 1.0.
    pub defaulted_weights: u64,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "read {} rows: {} edges added, {} malformed, {} weights defaulted to 1.0",
            self.rows_read, self.edges_added, self.malformed_rows, self.defaulted_weights
        )
    }
}

/// Parses a comma-separated edge list into a graph.
///
/// Row format: `subject,predicate,object[,weight]`. Lines that are blank or
/// start with `#` are skipped. Malformed rows — wrong column count, empty
/// fields, unparseable or non-positive weight — are counted and skipped
/// rather than failing the whole file. Fields are split on every comma, so
/// labels themselves must not contain commas.
pub fn ingest_edge_list(reader: impl BufRead) -> Result<(KnowledgeGraph, IngestReport)> {
    let mut graph = KnowledgeGraph::new();
    let mut report = IngestReport::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::data(format!("read failure in edge list: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        report.rows_read += 1;
        match parse_edge_row(trimmed) {
            Ok((triple, weight_defaulted)) => {
                graph.push(triple);
                report.edges_added += 1;
                if weight_defaulted {
                    report.defaulted_weights += 1;
                }
            }
            Err(_) => report.malformed_rows += 1,
        }
    }
    Ok((graph, report))
}

fn parse_edge_row(row: &str) -> Result<(Triple, bool)> {
    let fields: Vec<&str> = row.split(',').collect();
    let (weight, defaulted) = match fields.len() {
        3 => (1.0, true),
        4 => {
            let w: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("bad weight field {:?}", fields[3])))?;
            (w, false)
        }
        n => return Err(Error::data(format!("expected 3 or 4 columns, got {n}"))),
    };
    let triple = Triple::new(
        ConceptLabel::new(fields[0])?,
        PredicateId::new(fields[1])?,
        ConceptLabel::new(fields[2])?,
        weight,
    )?;
    Ok((triple, defaulted))
}

/// Writes a graph back out in the same edge-list format `ingest_edge_list`
/// reads, one `subject,predicate,object,weight` row per edge.
pub fn write_edge_list(graph: &KnowledgeGraph, mut sink: impl std::io::Write) -> Result<()> {
    for t in graph.triples() {
        writeln!(sink, "{},{},{},{}", t.subject, t.predicate, t.object, t.weight)
            .map_err(|e| Error::data(format!("write failure in edge list: {e}")))?;
    }
    Ok(())
}
