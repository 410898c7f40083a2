//! `kginject` — command-line front end for the knowledge-injection pipeline.
//!
//! Subcommands mirror the pipeline stages (ingest → walk → verbalize →
//! build-vocab → pretrain → train-adapter → probe), with `demo` running the
//! whole desk-scale experiment in one invocation and `report` joining
//! precision curves into a comparison table.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or malformed inputs), 3 numeric failure (divergence).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use kginject::config::PipelineConfig;
use kginject::checkpoint::{load_checkpoint, save_checkpoint};
use kginject::kg::{ingest_edge_list, write_edge_list, KnowledgeGraph};
use kginject::manifest::{sha256_file, RunManifest};
use kginject::model::EncoderModel;
use kginject::pipeline::{
    read_curve_csv, render_comparison_table, run_demo, write_comparison_csv, DemoPreset,
};
use kginject::probe::{
    mean_p_at_k, object_overlap, read_probe_jsonl, synthesize_probe, write_probe_jsonl, ProbeItem,
};
use kginject::seeding::derive_u64;
use kginject::textpipe::{read_corpus_lines, Vocabulary};
use kginject::trainer::{train, write_trace_csv, TrainMode};
use kginject::verbalize::verbalize_walk;
use kginject::walker::{generate_walks, read_walks, write_walks};
use kginject::{Error, Result};

#[derive(Parser)]
#[command(
    name = "kginject",
    version,
    about = "Inject knowledge-graph facts into a small masked-language model via bottleneck adapters",
    after_help = "Configuration: --config TOML file, overridden by KGINJECT_* environment \
                  variables (double underscore separates path segments, e.g. \
                  KGINJECT_TRAIN__PEAK_LR=0.001), overridden in turn by --seed/--workers."
)]
struct Cli {
    /// Configuration file (TOML); built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root random seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (0 = one per core). Never affects
    /// outputs.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a weighted edge list and report graph statistics.
    Ingest(IngestArgs),
    /// Generate weighted random walks over a graph.
    Walk(WalkArgs),
    /// Render walks into a sentence-per-step text corpus.
    Verbalize(VerbalizeArgs),
    /// Build a word-level vocabulary from text corpora.
    BuildVocab(BuildVocabArgs),
    /// Pre-train a base encoder with masked-language modeling.
    Pretrain(PretrainArgs),
    /// Inject bottleneck adapters into a frozen checkpoint and train them.
    TrainAdapter(TrainAdapterArgs),
    /// Score a model on a cloze probe, producing a precision curve.
    Probe(ProbeArgs),
    /// Measure gold-object overlap between a probe and training triples.
    Overlap(OverlapArgs),
    /// Join precision curves into one comparison table.
    Report(ReportArgs),
    /// Run the self-contained desk-scale experiment end to end.
    Demo(DemoArgs),
    /// Print the fully resolved configuration as TOML.
    DumpConfig,
}

#[derive(Args)]
struct IngestArgs {
    /// Edge list: one `subject,predicate,object[,weight]` row per line.
    #[arg(long, value_name = "PATH")]
    edges: PathBuf,
    /// Write the parsed (and predicate-filtered, if configured) graph back
    /// out as a normalized edge list.
    #[arg(long, value_name = "PATH")]
    normalized_out: Option<PathBuf>,
}

#[derive(Args)]
struct WalkArgs {
    #[arg(long, value_name = "PATH")]
    edges: PathBuf,
    /// Output walks file (one comma-separated label chain per line).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct VerbalizeArgs {
    /// Walks file produced by `walk`.
    #[arg(long, value_name = "PATH")]
    walks: PathBuf,
    /// Output corpus (one sentence per line).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Corpus file; repeat the flag to merge several.
    #[arg(long, value_name = "PATH", required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    #[arg(long, value_name = "PATH")]
    vocab: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Loss-trace CSV (default: the checkpoint path with a .trace.csv
    /// extension).
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainAdapterArgs {
    /// Base checkpoint from `pretrain`.
    #[arg(long, value_name = "PATH")]
    base: PathBuf,
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    #[arg(long, value_name = "PATH")]
    vocab: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint to score.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    vocab: PathBuf,
    /// Probe items (JSON lines). Omit when synthesizing.
    #[arg(long, value_name = "PATH", conflicts_with = "synthesize")]
    items: Option<PathBuf>,
    /// Synthesize the probe from a graph instead of reading items.
    #[arg(long, requires = "edges")]
    synthesize: bool,
    /// Graph to synthesize from (with --synthesize).
    #[arg(long, value_name = "PATH")]
    edges: Option<PathBuf>,
    /// Write the synthesized items here (with --synthesize).
    #[arg(long, value_name = "PATH")]
    items_out: Option<PathBuf>,
    /// Output precision-curve CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct OverlapArgs {
    /// Training graph the probe golds are checked against.
    #[arg(long, value_name = "PATH")]
    edges: PathBuf,
    /// Probe items (JSON lines).
    #[arg(long, value_name = "PATH")]
    items: PathBuf,
    /// Write the overlap report as JSON (also printed to stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Curve CSVs; the first is the baseline the others are compared to.
    #[arg(long, value_name = "PATH", num_args = 1.., required = true)]
    curves: Vec<PathBuf>,
    /// Also write the merged table as CSV.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Output directory for every artifact of the run.
    #[arg(long, value_name = "DIR", default_value = "demo-out")]
    out: PathBuf,
    /// Run the seconds-scale preset instead of the full experiment.
    #[arg(long)]
    smoke: bool,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        });
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    // 0 asks rayon for one thread per core; the pool size never changes any
    // output, only wall-clock time.
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build_global()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;

    match cli.command {
        Command::Ingest(args) => cmd_ingest(&config, args),
        Command::Walk(args) => cmd_walk(&config, args),
        Command::Verbalize(args) => cmd_verbalize(&config, args),
        Command::BuildVocab(args) => cmd_build_vocab(&config, args),
        Command::Pretrain(args) => cmd_pretrain(&config, args),
        Command::TrainAdapter(args) => cmd_train_adapter(&config, args),
        Command::Probe(args) => cmd_probe(&config, args),
        Command::Overlap(args) => cmd_overlap(&config, args),
        Command::Report(args) => cmd_report(args),
        Command::Demo(args) => cmd_demo(&config, args),
        Command::DumpConfig => {
            print!("{}", config.to_toml_string());
            Ok(())
        }
    }
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))
}

fn load_graph(config: &PipelineConfig, path: &Path) -> Result<KnowledgeGraph> {
    let (graph, report) = ingest_edge_list(open_reader(path)?)?;
    eprintln!("{}: {report}", path.display());
    Ok(match config.graph.predicate_filter()? {
        Some(keep) => graph.filter_by_predicates(&keep),
        None => graph,
    })
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(open_reader(path)?)
}

fn load_model(path: &Path) -> Result<EncoderModel<f32>> {
    load_checkpoint::<f32>(path)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    read_corpus_lines(open_reader(path)?)
}

/// Each artifact-writing command drops a manifest next to its primary
/// output, named after it.
fn manifest_path(primary_out: &Path) -> PathBuf {
    primary_out.with_extension("manifest.toml")
}

fn write_manifest(manifest: &RunManifest, primary_out: &Path) -> Result<()> {
    manifest.save(&manifest_path(primary_out))
}

fn cmd_ingest(config: &PipelineConfig, args: IngestArgs) -> Result<()> {
    let graph = load_graph(config, &args.edges)?;
    let stats = graph.stats();
    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::data(format!("stats serialization: {e}")))?;
    println!("{json}");
    if let Some(out) = args.normalized_out {
        write_edge_list(&graph, &mut create_writer(&out)?)?;
        write_manifest(&RunManifest::for_run("ingest", config), &out)?;
    }
    Ok(())
}

fn cmd_walk(config: &PipelineConfig, args: WalkArgs) -> Result<()> {
    let graph = load_graph(config, &args.edges)?;
    let walk_seed = derive_u64(config.seed, "walk");
    let params = config.walk.to_params(walk_seed);
    let walks = generate_walks(&graph, &params)?;
    write_walks(&walks, &mut create_writer(&args.out)?)?;
    eprintln!("{} walks -> {}", walks.len(), args.out.display());
    let mut manifest = RunManifest::for_run("walk", config);
    manifest.record_stage_seed("walk", walk_seed);
    write_manifest(&manifest, &args.out)
}

fn cmd_verbalize(config: &PipelineConfig, args: VerbalizeArgs) -> Result<()> {
    let table = config.verbalize.load_table()?;
    let walks = read_walks(open_reader(&args.walks)?)?;
    let mut sink = create_writer(&args.out)?;
    let mut count = 0usize;
    for walk in &walks {
        for sentence in verbalize_walk(walk, &table)? {
            writeln!(sink, "{sentence}")
                .map_err(|e| Error::data(format!("cannot write {}: {e}", args.out.display())))?;
            count += 1;
        }
    }
    sink.flush()
        .map_err(|e| Error::data(format!("cannot write {}: {e}", args.out.display())))?;
    eprintln!("{count} sentences -> {}", args.out.display());
    let mut manifest = RunManifest::for_run("verbalize", config);
    manifest.train_templates_version = Some(table.version());
    manifest.corpus_sha256 = Some(sha256_file(&args.out)?);
    write_manifest(&manifest, &args.out)
}

fn cmd_build_vocab(config: &PipelineConfig, args: BuildVocabArgs) -> Result<()> {
    let mut lines = Vec::new();
    for path in &args.corpus {
        lines.extend(read_lines(path)?);
    }
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), config.vocab.min_frequency);
    vocab.write(&mut create_writer(&args.out)?)?;
    eprintln!("{} tokens -> {}", vocab.size(), args.out.display());
    write_manifest(&RunManifest::for_run("build-vocab", config), &args.out)
}

fn cmd_pretrain(config: &PipelineConfig, args: PretrainArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let lines = read_lines(&args.corpus)?;
    let mut model_cfg = config.model;
    model_cfg.vocab_size = vocab.size();

    let init_seed = derive_u64(config.seed, "model-init");
    let train_seed = derive_u64(config.seed, "pretrain");
    let mask_seed = derive_u64(config.seed, "mask-pretrain");
    let mut model = EncoderModel::<f32>::init_base(model_cfg, init_seed)?;
    let report = run_training(
        &mut model,
        &lines,
        &vocab,
        config,
        TrainMode::PretrainBase,
        train_seed,
        mask_seed,
    )?;
    save_checkpoint(&model, &args.out)?;
    let trace_path = args
        .trace
        .unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_trace_csv(&report.trace, &mut create_writer(&trace_path)?)?;
    eprintln!(
        "pretrained {} steps (final loss {:?}) -> {}",
        report.steps_run,
        report.final_loss,
        args.out.display()
    );

    let mut manifest = RunManifest::for_run("pretrain", config);
    manifest.record_stage_seed("model_init", init_seed);
    manifest.record_stage_seed("pretrain", train_seed);
    manifest.record_stage_seed("mask_pretrain", mask_seed);
    manifest.corpus_sha256 = Some(sha256_file(&args.corpus)?);
    write_manifest(&manifest, &args.out)
}

fn cmd_train_adapter(config: &PipelineConfig, args: TrainAdapterArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let lines = read_lines(&args.corpus)?;
    let mut model = load_model(&args.base)?;

    let inject_seed = derive_u64(config.seed, "adapter-init");
    let train_seed = derive_u64(config.seed, "train-adapter");
    let mask_seed = derive_u64(config.seed, "mask-adapter");
    model.inject_adapters(config.adapter, inject_seed)?;
    let report = run_training(
        &mut model,
        &lines,
        &vocab,
        config,
        TrainMode::TrainAdapter,
        train_seed,
        mask_seed,
    )?;
    save_checkpoint(&model, &args.out)?;
    let trace_path = args
        .trace
        .unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_trace_csv(&report.trace, &mut create_writer(&trace_path)?)?;
    eprintln!(
        "adapter-trained {} steps (final loss {:?}) -> {}",
        report.steps_run,
        report.final_loss,
        args.out.display()
    );

    let mut manifest = RunManifest::for_run("train-adapter", config);
    manifest.record_stage_seed("adapter_init", inject_seed);
    manifest.record_stage_seed("train_adapter", train_seed);
    manifest.record_stage_seed("mask_adapter", mask_seed);
    manifest.corpus_sha256 = Some(sha256_file(&args.corpus)?);
    write_manifest(&manifest, &args.out)
}

fn run_training(
    model: &mut EncoderModel<f32>,
    lines: &[String],
    vocab: &Vocabulary,
    config: &PipelineConfig,
    mode: TrainMode,
    train_seed: u64,
    mask_seed: u64,
) -> Result<kginject::trainer::TrainReport> {
    let cfg = config.train.to_train_config(mode, train_seed);
    let masking = config.train.to_masking_config(mask_seed);
    let batch = config.train.to_batch_config();
    train(model, lines, vocab, &masking, &batch, &cfg, |row| {
        eprintln!(
            "step {:>6}  lr {:.3e}  loss {:.4}",
            row.step, row.lr, row.loss
        )
    })
}

fn read_items(path: &Path) -> Result<Vec<ProbeItem>> {
    read_probe_jsonl(open_reader(path)?)
}

fn cmd_probe(config: &PipelineConfig, args: ProbeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let vocab = load_vocab(&args.vocab)?;

    let items = if args.synthesize {
        let edges = args.edges.as_deref().expect("clap enforces --edges");
        let graph = load_graph(config, edges)?;
        let table = config.probe.load_table()?;
        let probe_seed = derive_u64(config.seed, "probe");
        let synthesis = synthesize_probe(&graph, &table, probe_seed, config.probe.max_items)?;
        eprintln!(
            "synthesized {} items ({} multi-word objects skipped)",
            synthesis.items.len(),
            synthesis.skipped_multi_word
        );
        if let Some(items_out) = &args.items_out {
            write_probe_jsonl(&synthesis.items, &mut create_writer(items_out)?)?;
        }
        synthesis.items
    } else {
        let path = args.items.as_deref().ok_or_else(|| {
            Error::config("probe needs --items FILE, or --synthesize with --edges")
        })?;
        read_items(path)?
    };

    let curve = mean_p_at_k(&model, &items, &vocab, &config.probe.ks)?;
    curve.write_csv(&mut create_writer(&args.out)?)?;
    println!(
        "{}",
        render_comparison_table(&[("model", &curve)])?.trim_end()
    );
    println!(
        "scored {} items, skipped {} (out-of-vocabulary gold)",
        curve.n_scored, curve.n_skipped
    );

    let mut manifest = RunManifest::for_run("probe", config);
    if args.synthesize {
        manifest.record_stage_seed("probe", derive_u64(config.seed, "probe"));
        manifest.probe_templates_version = Some(config.probe.load_table()?.version());
    }
    write_manifest(&manifest, &args.out)
}

fn cmd_overlap(config: &PipelineConfig, args: OverlapArgs) -> Result<()> {
    let graph = load_graph(config, &args.edges)?;
    let items = read_items(&args.items)?;
    let triples: Vec<_> = graph.triples().collect();
    let report = object_overlap(&triples, &items);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("overlap serialization: {e}")))?;
    println!("{json}");
    if let Some(out) = args.out {
        std::fs::write(&out, json + "\n")
            .map_err(|e| Error::data(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut curves = Vec::new();
    for path in &args.curves {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        curves.push((name, read_curve_csv(open_reader(path)?)?));
    }
    let named: Vec<(&str, &kginject::probe::PAtKCurve)> =
        curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
    print!("{}", render_comparison_table(&named)?);
    if let Some(out) = args.out {
        write_comparison_csv(&named, &mut create_writer(&out)?)?;
    }
    Ok(())
}

fn cmd_demo(config: &PipelineConfig, args: DemoArgs) -> Result<()> {
    let preset = if args.smoke {
        DemoPreset::smoke()
    } else {
        DemoPreset::full()
    };
    let report = run_demo(&args.out, config.seed, &preset, |line| eprintln!("{line}"))?;
    print!("{}", report.render_text());
    println!("artifacts in {}", args.out.display());
    Ok(())
}
