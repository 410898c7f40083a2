//! A desk-scale laboratory for injecting knowledge-graph facts into a small
//! masked-language-model encoder through bottleneck adapters.
//!
//! The pipeline runs end to end on one machine in minutes: ingest a weighted
//! edge list, random-walk it into triple chains, verbalize the chains into a
//! synthetic text corpus, pre-train a toy transformer encoder on ordinary
//! text, then freeze it and train small adapter modules on the fact corpus.
//! A cloze probe measures how much of the graph the adapted model can recall
//! compared to its frozen base.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`kg`] — edge-list ingestion, predicate filtering, graph statistics
//! * [`walker`] — alias-method weighted random walks over the graph
//! * [`verbalize`] — template-based rendering of triples into sentences
//! * [`textpipe`] — word-level vocabulary, encoding, and MLM masking
//! * [`model`] — the encoder, its parameter store, and adapter injection
//! * [`trainer`] — Adam with warmup/decay, gradient clipping, freezing
//! * [`probe`] — cloze evaluation with mean precision-at-k curves
//! * [`checkpoint`] / [`manifest`] / [`config`] — run artifacts
//! * [`pipeline`] — orchestration, including a self-contained demo study
//! * [`seeding`] — derived, thread-count-independent RNG streams

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod kg;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod scalar;
pub mod seeding;
pub mod textpipe;
pub mod trainer;
pub mod verbalize;
pub mod walker;

pub use error::{Error, Result};
pub use scalar::Scalar;
