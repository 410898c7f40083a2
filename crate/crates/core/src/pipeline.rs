//! End-to-end orchestration, including the self-contained demo study.
//!
//! The demo builds a synthetic world and runs the whole experiment on it:
//!
//! 1. generate ~200 invented concepts and two fact graphs over them — a
//!    *target* graph (the facts to inject) and a *control* graph on a
//!    disjoint predicate set;
//! 2. render a base corpus of scrambled non-fact sentences (every carrier
//!    phrase, no true fact) and pre-train a small encoder on it;
//! 3. random-walk the target graph, verbalize the walks, and train
//!    bottleneck adapters on the resulting fact corpus — and, separately,
//!    a control adapter on the control corpus;
//! 4. synthesize a paraphrase cloze probe from the target graph and compare
//!    base, adapted, and control models on mean precision-at-k.
//!
//! Every stage derives its seed from the one root seed, so a demo run is
//! reproducible file-for-file. The pieces (world generation, corpus
//! builders, comparison tables) are public so the CLI and tests can drive
//! them individually.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::kg::{
    write_edge_list, ConceptLabel, GraphStats, KnowledgeGraph, PredicateId, Triple,
};
use crate::manifest::{sha256_file, RunManifest};
use crate::model::{AdapterConfig, EncoderConfig, EncoderModel};
use crate::probe::{
    mean_p_at_k, object_overlap, synthesize_probe, write_probe_jsonl, CurvePoint, OverlapReport,
    PAtKCurve, DEFAULT_K_GRID,
};
use crate::seeding::{self, derive_u64};
use crate::textpipe::{BatchConfig, BatchMode, MaskingConfig, Vocabulary};
use crate::trainer::{train, write_trace_csv, TrainConfig, TrainMode, TrainReport};
use crate::verbalize::{substitute, verbalize_triple, verbalize_walk, TemplateTable};
use crate::walker::{generate_walks, write_walks, StartNodes, Walk, WalkParams};

/// Predicates whose facts the demo injects and probes.
pub fn target_predicates() -> Vec<PredicateId> {
    ["isA", "usedFor", "madeOf", "atLocation"]
        .iter()
        .map(|p| PredicateId::new(p).expect("static predicate"))
        .collect()
}

/// Predicates for the control adapter; disjoint from the target set.
pub fn control_predicates() -> Vec<PredicateId> {
    ["synonymOf", "antonymOf", "capableOf", "partOf"]
        .iter()
        .map(|p| PredicateId::new(p).expect("static predicate"))
        .collect()
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Words that appear in any bundled sentence pattern; invented concept
/// names must avoid them so a concept is never mistaken for a carrier word.
fn carrier_words() -> HashSet<String> {
    let mut words = HashSet::new();
    for table in [TemplateTable::bundled_train(), TemplateTable::bundled_probe()] {
        for pred in table.predicates() {
            if let Some(pattern) = table.pattern_for(pred) {
                for w in pattern.split_whitespace() {
                    if w != "{s}" && w != "{o}" {
                        words.insert(w.to_lowercase());
                    }
                }
            }
        }
    }
    words
}

/// `n` distinct pronounceable two- or three-syllable names.
pub fn generate_concepts(n: usize, seed: u64) -> Vec<ConceptLabel> {
    let mut rng = seeding::derive_rng(seed, "world/concepts", &[]);
    let avoid = carrier_words();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = if rng.random_bool(0.5) { 2 } else { 3 };
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            name.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if avoid.contains(&name) || !seen.insert(name.clone()) {
            continue;
        }
        out.push(ConceptLabel::new(&name).expect("generated names are single words"));
    }
    out
}

/// A synthetic fact world: one concept inventory, two graphs.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub concepts: Vec<ConceptLabel>,
    /// Facts to inject; the probe is synthesized from this graph.
    pub target: KnowledgeGraph,
    /// Facts on a disjoint predicate set, over subject–object pairs that
    /// never occur in the target graph.
    pub control: KnowledgeGraph,
}

fn concept_index(concepts: &[ConceptLabel]) -> std::collections::HashMap<&str, usize> {
    concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect()
}

fn random_edges(
    concepts: &[ConceptLabel],
    predicates: &[PredicateId],
    per_subject: usize,
    forbidden_pairs: &HashSet<(usize, usize)>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Triple> {
    let mut triples = Vec::with_capacity(concepts.len() * per_subject);
    for (si, subject) in concepts.iter().enumerate() {
        let mut preds: Vec<&PredicateId> = predicates.iter().collect();
        preds.shuffle(rng);
        for pred in preds.into_iter().take(per_subject) {
            let oi = loop {
                let cand = rng.random_range(0..concepts.len());
                if cand != si && !forbidden_pairs.contains(&(si, cand)) {
                    break cand;
                }
            };
            let weight = rng.random_range(0.5..2.0);
            triples.push(
                Triple::new(subject.clone(), pred.clone(), concepts[oi].clone(), weight)
                    .expect("generated triples are valid"),
            );
        }
    }
    triples
}

fn pair_set(graph: &KnowledgeGraph, index: &std::collections::HashMap<&str, usize>) -> HashSet<(usize, usize)> {
    graph
        .triples()
        .map(|t| (index[t.subject.as_str()], index[t.object.as_str()]))
        .collect()
}

/// Builds the demo world: `n` concepts, `per_subject` target facts and
/// `per_subject` control facts per concept, with no subject–object pair
/// shared between the two graphs.
pub fn generate_world(seed: u64, n: usize, per_subject: usize) -> SyntheticWorld {
    let concepts = generate_concepts(n, seed);
    let index = concept_index(&concepts);

    let mut rng = seeding::derive_rng(seed, "world/target-edges", &[]);
    let target_triples = random_edges(
        &concepts,
        &target_predicates(),
        per_subject,
        &HashSet::new(),
        &mut rng,
    );
    let target = KnowledgeGraph::from_triples(target_triples);
    let target_pairs = pair_set(&target, &index);

    let mut rng = seeding::derive_rng(seed, "world/control-edges", &[]);
    let control_triples = random_edges(
        &concepts,
        &control_predicates(),
        per_subject,
        &target_pairs,
        &mut rng,
    );
    let control = KnowledgeGraph::from_triples(control_triples);

    SyntheticWorld {
        concepts,
        target,
        control,
    }
}

/// How many made-up objects each (concept, predicate) context gets in the
/// base corpus. More than one keeps the base model *uncertain* about every
/// completion: it learns the phrasing structure without ever committing to
/// a wrong answer the adapters would then have to override.
pub const PSEUDO_OBJECTS_PER_CONTEXT: usize = 2;

/// The base-pretraining corpus: a *pseudo-fact* corpus over subject–object
/// pairs that are facts in neither graph. Every (concept, predicate) pair
/// gets [`PSEUDO_OBJECTS_PER_CONTEXT`] made-up objects, each rendered twice
/// — once in the training phrasing (with its sentence-final period, as the
/// walk corpus renders facts) and once in the paraphrase phrasing
/// (period-less, as the probe poses questions). The base model therefore
/// learns the words, both sentence shapes, and — crucially — that both
/// phrasings of a (subject, predicate) context complete with the same
/// objects, while never seeing a true fact and never settling on a single
/// completion for any context.
pub fn scrambled_corpus(world: &SyntheticWorld, seed: u64) -> Result<Vec<String>> {
    let mut rng = seeding::derive_rng(seed, "world/scrambled", &[]);
    let index = concept_index(&world.concepts);
    let mut forbidden = pair_set(&world.target, &index);
    forbidden.extend(pair_set(&world.control, &index));

    let train_table = TemplateTable::bundled_train();
    let probe_table = TemplateTable::bundled_probe();
    let predicates: Vec<PredicateId> = target_predicates()
        .into_iter()
        .chain(control_predicates())
        .collect();

    let n = world.concepts.len();
    let mut lines = Vec::with_capacity(n * predicates.len() * PSEUDO_OBJECTS_PER_CONTEXT * 2);
    for (si, subject) in world.concepts.iter().enumerate() {
        for pred in &predicates {
            for _ in 0..PSEUDO_OBJECTS_PER_CONTEXT {
                let oi = loop {
                    let cand = rng.random_range(0..n);
                    if cand != si && !forbidden.contains(&(si, cand)) {
                        break cand;
                    }
                };
                let t = Triple::new(
                    subject.clone(),
                    pred.clone(),
                    world.concepts[oi].clone(),
                    1.0,
                )?;
                lines.push(verbalize_triple(&t, &train_table)?);
                let pattern = probe_table.resolve(pred)?;
                lines.push(substitute(&pattern, subject.as_str(), t.object.as_str()));
            }
        }
    }
    Ok(lines)
}

/// Walks a graph and renders every step, one sentence per line.
pub fn walk_corpus(
    graph: &KnowledgeGraph,
    params: &WalkParams,
    table: &TemplateTable,
) -> Result<(Vec<Walk>, Vec<String>)> {
    let walks = generate_walks(graph, params)?;
    let mut lines = Vec::new();
    for walk in &walks {
        lines.extend(verbalize_walk(walk, table)?);
    }
    Ok((walks, lines))
}

/// Writes lines newline-terminated.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for line in lines {
        text.push_str(line);
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Settings for one training stage of the demo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePreset {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Fraction of positions predicted per sentence. The adapter stages run
    /// hotter than the conventional 0.15: masking more positions multiplies
    /// the object-prediction events per pass through the small fact corpus.
    pub mlm_probability: f64,
    /// Of the selected positions, the share replaced by the mask token; the
    /// remainder splits evenly between random replacement and keep-as-is.
    /// 0.8 gives the conventional 80/10/10; the adapter stages use 1.0 so
    /// every training prediction sees exactly the input the probe poses.
    pub mask_fraction: f64,
    /// Dropout during this stage; the adapter stages turn it off because
    /// their job is memorization, not generalization.
    pub dropout: f64,
}

/// Scale knobs for the demo study.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPreset {
    pub concepts: usize,
    /// Facts per concept in each graph.
    pub facts_per_concept: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    /// Encoder geometry; `vocab_size` is replaced by the built vocabulary.
    pub model: EncoderConfig,
    pub bottleneck: usize,
    pub pretrain: StagePreset,
    pub adapter_train: StagePreset,
    pub batch_size: usize,
    pub ks: Vec<usize>,
}

impl DemoPreset {
    /// The full desk-scale experiment (~200 concepts, ~600 facts).
    pub fn full() -> Self {
        DemoPreset {
            concepts: 200,
            facts_per_concept: 3,
            // Short walks from every node, many times over: the first step
            // out of each start node covers that node's own facts evenly,
            // where long sparse walks leave low-in-degree facts undertrained.
            walks_per_node: 20,
            walk_length: 2,
            model: EncoderConfig {
                layers: 2,
                hidden: 64,
                heads: 4,
                ffn_dim: 256,
                vocab_size: 5,
                max_seq_len: 16,
                dropout: 0.1,
            },
            bottleneck: 64,
            pretrain: StagePreset {
                steps: 3_000,
                peak_lr: 3e-3,
                warmup_steps: 200,
                weight_decay: 0.01,
                mlm_probability: 0.15,
                mask_fraction: 0.8,
                dropout: 0.1,
            },
            adapter_train: StagePreset {
                steps: 9_000,
                peak_lr: 5e-3,
                warmup_steps: 200,
                weight_decay: 0.0,
                mlm_probability: 0.4,
                mask_fraction: 1.0,
                dropout: 0.0,
            },
            batch_size: 32,
            ks: DEFAULT_K_GRID.to_vec(),
        }
    }

    /// A seconds-scale variant for smoke tests; same shape, tiny counts.
    pub fn smoke() -> Self {
        DemoPreset {
            concepts: 36,
            facts_per_concept: 2,
            walks_per_node: 2,
            walk_length: 6,
            model: EncoderConfig {
                layers: 2,
                hidden: 32,
                heads: 2,
                ffn_dim: 64,
                vocab_size: 5,
                max_seq_len: 16,
                dropout: 0.0,
            },
            bottleneck: 8,
            pretrain: StagePreset {
                steps: 120,
                peak_lr: 3e-3,
                warmup_steps: 20,
                weight_decay: 0.01,
                mlm_probability: 0.15,
                mask_fraction: 0.8,
                dropout: 0.0,
            },
            adapter_train: StagePreset {
                steps: 160,
                peak_lr: 5e-3,
                warmup_steps: 20,
                weight_decay: 0.0,
                mlm_probability: 0.3,
                mask_fraction: 1.0,
                dropout: 0.0,
            },
            batch_size: 16,
            ks: DEFAULT_K_GRID.to_vec(),
        }
    }
}

/// Locations of every file a demo run writes inside its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPaths {
    pub edges: PathBuf,
    pub control_edges: PathBuf,
    pub walks: PathBuf,
    pub control_walks: PathBuf,
    pub base_corpus: PathBuf,
    pub fact_corpus: PathBuf,
    pub control_corpus: PathBuf,
    pub vocab: PathBuf,
    pub base_checkpoint: PathBuf,
    pub adapted_checkpoint: PathBuf,
    pub control_checkpoint: PathBuf,
    pub base_trace: PathBuf,
    pub adapted_trace: PathBuf,
    pub control_trace: PathBuf,
    pub probe: PathBuf,
    pub base_curve: PathBuf,
    pub adapted_curve: PathBuf,
    pub control_curve: PathBuf,
    pub comparison: PathBuf,
    pub overlap: PathBuf,
    pub manifest: PathBuf,
}

impl DemoPaths {
    pub fn new(dir: &Path) -> Self {
        let p = |name: &str| dir.join(name);
        DemoPaths {
            edges: p("edges.csv"),
            control_edges: p("control_edges.csv"),
            walks: p("walks.txt"),
            control_walks: p("control_walks.txt"),
            base_corpus: p("base_corpus.txt"),
            fact_corpus: p("fact_corpus.txt"),
            control_corpus: p("control_corpus.txt"),
            vocab: p("vocab.txt"),
            base_checkpoint: p("base.ckpt"),
            adapted_checkpoint: p("adapted.ckpt"),
            control_checkpoint: p("control.ckpt"),
            base_trace: p("base_trace.csv"),
            adapted_trace: p("adapted_trace.csv"),
            control_trace: p("control_trace.csv"),
            probe: p("probe.jsonl"),
            base_curve: p("base_curve.csv"),
            adapted_curve: p("adapted_curve.csv"),
            control_curve: p("control_curve.csv"),
            comparison: p("comparison.csv"),
            overlap: p("overlap.json"),
            manifest: p("manifest.toml"),
        }
    }

    /// Every file, for existence checks and byte-level comparisons.
    pub fn all_files(&self) -> Vec<&PathBuf> {
        vec![
            &self.edges,
            &self.control_edges,
            &self.walks,
            &self.control_walks,
            &self.base_corpus,
            &self.fact_corpus,
            &self.control_corpus,
            &self.vocab,
            &self.base_checkpoint,
            &self.adapted_checkpoint,
            &self.control_checkpoint,
            &self.base_trace,
            &self.adapted_trace,
            &self.control_trace,
            &self.probe,
            &self.base_curve,
            &self.adapted_curve,
            &self.control_curve,
            &self.comparison,
            &self.overlap,
            &self.manifest,
        ]
    }
}

/// Outcome of a demo run: curves, overlap, and where everything landed.
#[derive(Debug, Clone)]
pub struct DemoReport {
    pub paths: DemoPaths,
    pub target_stats: GraphStats,
    pub control_stats: GraphStats,
    pub vocab_size: usize,
    pub base_lines: usize,
    pub fact_lines: usize,
    pub control_lines: usize,
    pub probe_items: usize,
    pub probe_skipped_multi_word: usize,
    pub base_curve: PAtKCurve,
    pub adapted_curve: PAtKCurve,
    pub control_curve: PAtKCurve,
    pub overlap: OverlapReport,
    pub base_final_loss: Option<f64>,
    pub adapted_final_loss: Option<f64>,
    pub control_final_loss: Option<f64>,
}

impl DemoReport {
    /// Adapted-model improvement over the base at `k`, in fractions.
    pub fn gain_at(&self, k: usize) -> Option<f64> {
        Some(self.adapted_curve.p_at(k)? - self.base_curve.p_at(k)?)
    }

    /// Control-model improvement over the base at `k`, in fractions.
    pub fn control_gain_at(&self, k: usize) -> Option<f64> {
        Some(self.control_curve.p_at(k)? - self.base_curve.p_at(k)?)
    }

    /// Human-readable summary with the comparison table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "world: {} concepts, {} target edges, {} control edges\n",
            self.target_stats.node_count, self.target_stats.edge_count, self.control_stats.edge_count
        ));
        out.push_str(&format!(
            "corpora: base {} lines, facts {} lines, control {} lines; vocabulary {} tokens\n",
            self.base_lines, self.fact_lines, self.control_lines, self.vocab_size
        ));
        out.push_str(&format!(
            "probe: {} items ({} multi-word objects skipped); gold/training-object overlap {:.0}%\n",
            self.probe_items,
            self.probe_skipped_multi_word,
            self.overlap.fraction * 100.0
        ));
        if let (Some(b), Some(a), Some(c)) = (
            self.base_final_loss,
            self.adapted_final_loss,
            self.control_final_loss,
        ) {
            out.push_str(&format!(
                "final losses: base {b:.4}, adapted {a:.4}, control {c:.4}\n"
            ));
        }
        out.push('\n');
        out.push_str(
            &render_comparison_table(&[
                ("base", &self.base_curve),
                ("adapted", &self.adapted_curve),
                ("control", &self.control_curve),
            ])
            .expect("demo curves share one k grid"),
        );
        out
    }
}

fn run_stage(
    model: &mut EncoderModel<f32>,
    lines: &[String],
    vocab: &Vocabulary,
    preset: &DemoPreset,
    stage: &StagePreset,
    mode: TrainMode,
    train_seed: u64,
    mask_seed: u64,
    progress: &mut impl FnMut(&str),
) -> Result<TrainReport> {
    let cfg = TrainConfig {
        mode,
        peak_lr: stage.peak_lr,
        warmup_steps: stage.warmup_steps.min(stage.steps),
        total_steps: stage.steps,
        weight_decay: stage.weight_decay,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        grad_clip: Some(1.0),
        log_interval: (stage.steps / 10).max(1),
        seed: train_seed,
    };
    let leftover = (1.0 - stage.mask_fraction) / 2.0;
    let masking = MaskingConfig {
        mlm_probability: stage.mlm_probability,
        mask_fraction: stage.mask_fraction,
        random_fraction: leftover,
        keep_fraction: leftover,
        seed: mask_seed,
    };
    model.config.dropout = stage.dropout;
    let batch = BatchConfig {
        batch_size: preset.batch_size,
        mode: BatchMode::LineByLine,
        max_len: preset.model.max_seq_len,
    };
    train(model, lines, vocab, &masking, &batch, &cfg, |row| {
        progress(&format!(
            "    step {:>6}  lr {:.2e}  loss {:.4}",
            row.step, row.lr, row.loss
        ));
    })
}

/// Runs the whole demo experiment under `out_dir` with every stage seeded
/// from `seed`. `progress` receives one line per stage and per training log
/// point; pass a closure that prints, or ignore it.
pub fn run_demo(
    out_dir: &Path,
    seed: u64,
    preset: &DemoPreset,
    mut progress: impl FnMut(&str),
) -> Result<DemoReport> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let paths = DemoPaths::new(out_dir);
    let train_table = TemplateTable::bundled_train();
    let probe_table = TemplateTable::bundled_probe();

    // World.
    progress("world: generating concepts and fact graphs");
    let world_seed = derive_u64(seed, "demo/world");
    let world = generate_world(world_seed, preset.concepts, preset.facts_per_concept);
    write_to(&paths.edges, |sink| write_edge_list(&world.target, sink))?;
    write_to(&paths.control_edges, |sink| {
        write_edge_list(&world.control, sink)
    })?;

    // Corpora.
    progress("corpora: walking graphs and rendering sentences");
    let walk_seed = derive_u64(seed, "demo/walk");
    let params = WalkParams {
        length: preset.walk_length,
        walks_per_node: preset.walks_per_node,
        seed: walk_seed,
        start_nodes: StartNodes::All,
    };
    let (walks, fact_lines) = walk_corpus(&world.target, &params, &train_table)?;
    write_to(&paths.walks, |sink| write_walks(&walks, sink))?;
    write_lines(&paths.fact_corpus, &fact_lines)?;

    let control_walk_seed = derive_u64(seed, "demo/walk-control");
    let control_params = WalkParams {
        seed: control_walk_seed,
        ..params.clone()
    };
    let (control_walks, control_lines) =
        walk_corpus(&world.control, &control_params, &train_table)?;
    write_to(&paths.control_walks, |sink| {
        write_walks(&control_walks, sink)
    })?;
    write_lines(&paths.control_corpus, &control_lines)?;

    let base_corpus_seed = derive_u64(seed, "demo/base-corpus");
    let base_lines = scrambled_corpus(&world, base_corpus_seed)?;
    write_lines(&paths.base_corpus, &base_lines)?;

    // Vocabulary over everything the three corpora contain.
    let vocab = Vocabulary::build(
        base_lines
            .iter()
            .chain(&fact_lines)
            .chain(&control_lines)
            .map(String::as_str),
        1,
    );
    write_to(&paths.vocab, |sink| vocab.write(sink))?;

    // Base pre-training on the fact-free corpus.
    progress("pretrain: base model on the scrambled corpus");
    let mut encoder_cfg = preset.model;
    encoder_cfg.vocab_size = vocab.size();
    let model_init_seed = derive_u64(seed, "demo/model-init");
    let mut base_model = EncoderModel::<f32>::init_base(encoder_cfg, model_init_seed)?;
    let pretrain_seed = derive_u64(seed, "demo/pretrain");
    let mask_pretrain_seed = derive_u64(seed, "demo/mask-pretrain");
    let base_report = run_stage(
        &mut base_model,
        &base_lines,
        &vocab,
        preset,
        &preset.pretrain,
        TrainMode::PretrainBase,
        pretrain_seed,
        mask_pretrain_seed,
        &mut progress,
    )?;
    save_checkpoint(&base_model, &paths.base_checkpoint)?;
    write_to(&paths.base_trace, |sink| {
        write_trace_csv(&base_report.trace, sink)
    })?;

    // Adapter training on the injected facts.
    progress("adapters: training on the fact corpus");
    let adapter_cfg = AdapterConfig {
        bottleneck: preset.bottleneck,
        init_std: 0.01,
    };
    let adapter_init_seed = derive_u64(seed, "demo/adapter-init");
    let mut adapted_model = base_model.clone();
    adapted_model.inject_adapters(adapter_cfg, adapter_init_seed)?;
    let adapter_seed = derive_u64(seed, "demo/train-adapter");
    let mask_adapter_seed = derive_u64(seed, "demo/mask-adapter");
    let adapted_report = run_stage(
        &mut adapted_model,
        &fact_lines,
        &vocab,
        preset,
        &preset.adapter_train,
        TrainMode::TrainAdapter,
        adapter_seed,
        mask_adapter_seed,
        &mut progress,
    )?;
    save_checkpoint(&adapted_model, &paths.adapted_checkpoint)?;
    write_to(&paths.adapted_trace, |sink| {
        write_trace_csv(&adapted_report.trace, sink)
    })?;

    // Control adapter on the disjoint-predicate corpus.
    progress("adapters: training the control on the disjoint corpus");
    let control_init_seed = derive_u64(seed, "demo/adapter-init-control");
    let mut control_model = base_model.clone();
    control_model.inject_adapters(adapter_cfg, control_init_seed)?;
    let control_seed = derive_u64(seed, "demo/train-control");
    let mask_control_seed = derive_u64(seed, "demo/mask-control");
    let control_report = run_stage(
        &mut control_model,
        &control_lines,
        &vocab,
        preset,
        &preset.adapter_train,
        TrainMode::TrainAdapter,
        control_seed,
        mask_control_seed,
        &mut progress,
    )?;
    save_checkpoint(&control_model, &paths.control_checkpoint)?;
    write_to(&paths.control_trace, |sink| {
        write_trace_csv(&control_report.trace, sink)
    })?;

    // Paraphrase probe from the target graph.
    progress("probe: synthesizing and scoring");
    let probe_seed = derive_u64(seed, "demo/probe");
    let synthesis = synthesize_probe(&world.target, &probe_table, probe_seed, None)?;
    write_to(&paths.probe, |sink| {
        write_probe_jsonl(&synthesis.items, sink)
    })?;

    let base_curve = mean_p_at_k(&base_model, &synthesis.items, &vocab, &preset.ks)?;
    let adapted_curve = mean_p_at_k(&adapted_model, &synthesis.items, &vocab, &preset.ks)?;
    let control_curve = mean_p_at_k(&control_model, &synthesis.items, &vocab, &preset.ks)?;
    write_to(&paths.base_curve, |sink| base_curve.write_csv(sink))?;
    write_to(&paths.adapted_curve, |sink| adapted_curve.write_csv(sink))?;
    write_to(&paths.control_curve, |sink| control_curve.write_csv(sink))?;

    let named = [
        ("base", &base_curve),
        ("adapted", &adapted_curve),
        ("control", &control_curve),
    ];
    write_to(&paths.comparison, |sink| {
        write_comparison_csv(&named, sink)
    })?;

    let training_triples: Vec<Triple> = world.target.triples().collect();
    let overlap = object_overlap(&training_triples, &synthesis.items);
    let overlap_json = serde_json::to_string_pretty(&overlap)
        .map_err(|e| Error::data(format!("overlap serialization: {e}")))?;
    std::fs::write(&paths.overlap, overlap_json + "\n")
        .map_err(|e| Error::data(format!("cannot write {}: {e}", paths.overlap.display())))?;

    // Manifest: resolved configuration echo plus every derived seed.
    let config = demo_config_echo(seed, preset, &encoder_cfg, adapter_cfg);
    let mut manifest = RunManifest::for_run("demo", &config);
    for (stage, s) in [
        ("world", world_seed),
        ("walk", walk_seed),
        ("walk_control", control_walk_seed),
        ("base_corpus", base_corpus_seed),
        ("model_init", model_init_seed),
        ("pretrain", pretrain_seed),
        ("mask_pretrain", mask_pretrain_seed),
        ("adapter_init", adapter_init_seed),
        ("train_adapter", adapter_seed),
        ("mask_adapter", mask_adapter_seed),
        ("adapter_init_control", control_init_seed),
        ("train_control", control_seed),
        ("mask_control", mask_control_seed),
        ("probe", probe_seed),
    ] {
        manifest.record_stage_seed(stage, s);
    }
    manifest.train_templates_version = Some(train_table.version());
    manifest.probe_templates_version = Some(probe_table.version());
    manifest.corpus_sha256 = Some(sha256_file(&paths.fact_corpus)?);
    manifest.save(&paths.manifest)?;

    Ok(DemoReport {
        paths,
        target_stats: world.target.stats(),
        control_stats: world.control.stats(),
        vocab_size: vocab.size(),
        base_lines: base_lines.len(),
        fact_lines: fact_lines.len(),
        control_lines: control_lines.len(),
        probe_items: synthesis.items.len(),
        probe_skipped_multi_word: synthesis.skipped_multi_word,
        base_curve,
        adapted_curve,
        control_curve,
        overlap,
        base_final_loss: base_report.final_loss,
        adapted_final_loss: adapted_report.final_loss,
        control_final_loss: control_report.final_loss,
    })
}

/// The resolved configuration the demo effectively ran with; `[train]`
/// echoes the adapter stage, whose result is the headline number.
fn demo_config_echo(
    seed: u64,
    preset: &DemoPreset,
    encoder: &EncoderConfig,
    adapter: AdapterConfig,
) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.seed = seed;
    config.workers = 1;
    config.graph.predicates = target_predicates()
        .iter()
        .map(|p| p.as_str().to_string())
        .collect();
    config.walk.length = preset.walk_length;
    config.walk.walks_per_node = preset.walks_per_node;
    config.model = *encoder;
    config.adapter = adapter;
    config.train.peak_lr = preset.adapter_train.peak_lr;
    config.train.warmup_steps = preset.adapter_train.warmup_steps;
    config.train.total_steps = preset.adapter_train.steps;
    config.train.weight_decay = preset.adapter_train.weight_decay;
    config.train.batch_size = preset.batch_size;
    config.train.max_len = preset.model.max_seq_len;
    config.train.mlm_probability = preset.adapter_train.mlm_probability;
    config.probe.ks = preset.ks.clone();
    config
}

fn write_to(path: &Path, f: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    let mut writer = std::io::BufWriter::new(file);
    f(&mut writer)?;
    use std::io::Write as _;
    writer
        .flush()
        .map_err(|e| Error::data(format!("cannot flush {}: {e}", path.display())))
}

fn check_shared_grid(named: &[(&str, &PAtKCurve)]) -> Result<Vec<usize>> {
    let Some((_, first)) = named.first() else {
        return Err(Error::config("comparison needs at least one curve"));
    };
    let ks: Vec<usize> = first.points.iter().map(|p| p.k).collect();
    for (name, curve) in named {
        let theirs: Vec<usize> = curve.points.iter().map(|p| p.k).collect();
        if theirs != ks {
            return Err(Error::data(format!(
                "curve {name:?} has k grid {theirs:?}, expected {ks:?}"
            )));
        }
    }
    Ok(ks)
}

/// Merged comparison CSV: one row per k, one column per curve, then an
/// absolute-difference and a relative-improvement column for every curve
/// after the first (the baseline).
pub fn write_comparison_csv(
    named: &[(&str, &PAtKCurve)],
    mut sink: impl std::io::Write,
) -> Result<()> {
    let ks = check_shared_grid(named)?;
    let io_err = |e: std::io::Error| Error::data(format!("comparison write failed: {e}"));

    let mut header = vec!["k".to_string()];
    header.extend(named.iter().map(|(n, _)| n.to_string()));
    let base_name = named[0].0;
    for (name, _) in &named[1..] {
        header.push(format!("{name}_minus_{base_name}"));
        header.push(format!("{name}_rel_{base_name}"));
    }
    writeln!(sink, "{}", header.join(",")).map_err(io_err)?;

    for (i, k) in ks.iter().enumerate() {
        let mut row = vec![k.to_string()];
        let base = named[0].1.points[i].mean_p;
        for (_, curve) in named {
            row.push(format!("{}", curve.points[i].mean_p));
        }
        for (_, curve) in &named[1..] {
            let v = curve.points[i].mean_p;
            row.push(format!("{}", v - base));
            row.push(format!("{}", (v - base) / base));
        }
        writeln!(sink, "{}", row.join(",")).map_err(io_err)?;
    }
    Ok(())
}

/// Fixed-width text table over the same data as [`write_comparison_csv`]:
/// one row per k, each curve's mean P@k, and for every curve after the
/// first its absolute and relative improvement over that baseline.
pub fn render_comparison_table(named: &[(&str, &PAtKCurve)]) -> Result<String> {
    let ks = check_shared_grid(named)?;
    let mut out = String::new();
    out.push_str(&format!("{:>6}", "k"));
    for (name, _) in named {
        out.push_str(&format!("  {name:>9}"));
    }
    for (name, _) in &named[1..] {
        out.push_str(&format!("  {:>11}  {:>9}", format!("Δ {name}"), "rel %"));
    }
    out.push('\n');
    for (i, k) in ks.iter().enumerate() {
        out.push_str(&format!("{k:>6}"));
        let base = named[0].1.points[i].mean_p;
        for (_, curve) in named {
            out.push_str(&format!("  {:>9.4}", curve.points[i].mean_p));
        }
        for (_, curve) in &named[1..] {
            let delta = curve.points[i].mean_p - base;
            let rel = if base == 0.0 {
                f64::INFINITY
            } else {
                delta / base * 100.0
            };
            out.push_str(&format!("  {delta:>+11.4}  {rel:>+9.1}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses a curve CSV produced by [`PAtKCurve::write_csv`].
pub fn read_curve_csv(reader: impl BufRead) -> Result<PAtKCurve> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::data(format!("curve read failed: {e}")))?
        .ok_or_else(|| Error::data("empty curve file"))?;
    if header.trim() != "k,mean_p,n_scored,n_skipped" {
        return Err(Error::data(format!(
            "unexpected curve header {header:?}"
        )));
    }
    let mut points = Vec::new();
    let mut n_scored = 0;
    let mut n_skipped = 0;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::data(format!("curve read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::data(format!(
                "curve row {} has {} fields, expected 4",
                idx + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::data(format!("curve row {}: bad {what}", idx + 2));
        points.push(CurvePoint {
            k: fields[0].parse().map_err(|_| parse_err("k"))?,
            mean_p: fields[1].parse().map_err(|_| parse_err("mean_p"))?,
        });
        n_scored = fields[2].parse().map_err(|_| parse_err("n_scored"))?;
        n_skipped = fields[3].parse().map_err(|_| parse_err("n_skipped"))?;
    }
    if points.is_empty() {
        return Err(Error::data("curve file has no data rows"));
    }
    Ok(PAtKCurve {
        points,
        n_scored,
        n_skipped,
    })
}
