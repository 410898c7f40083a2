//! Release acceptance suite: one test per shipping criterion, each named
//! `criterion_NN_*` so the harness result line doubles as the criterion's
//! pass/fail verdict. Run with `--nocapture` to see the measured numbers
//! behind each verdict.
//!
//! Criteria 7 and 8 share three full-scale demo experiments (several
//! minutes each); everything else finishes in seconds.

use std::sync::OnceLock;

use kginject::kg::{ConceptLabel, PredicateId, Triple};
use kginject::model::{
    adapter_overhead, forward, forward_backward, math, mlm_loss, AdapterConfig, EncoderConfig,
    EncoderModel, ParamGroup,
};
use kginject::pipeline::{
    generate_world, run_demo, target_predicates, walk_corpus, DemoPreset, DemoReport,
};
use kginject::probe::{
    mean_p_at_k, object_overlap, precision_at_k, ProbeItem, DEFAULT_K_GRID,
};
use kginject::seeding::{self, derive_u64};
use kginject::textpipe::{
    apply_mlm_masking, encode_line, BatchConfig, BatchMode, MaskedBatch, MaskingConfig,
    Vocabulary, IGNORE_LABEL, MASK_ID, PAD_ID,
};
use kginject::trainer::{train, TrainConfig, TrainMode};
use kginject::verbalize::TemplateTable;
use kginject::walker::{AliasTable, StartNodes, WalkParams};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

/// Criterion 1 — adapter parameter overhead at production scale: a 12-layer,
/// 768-hidden encoder with bottleneck 64 adds exactly 2,379,264 parameters,
/// which lands in the 2.0–2.2% band of a 110M-parameter base.
#[test]
fn criterion_01_adapter_overhead_at_production_scale() {
    let encoder = EncoderConfig {
        layers: 12,
        hidden: 768,
        heads: 12,
        ffn_dim: 3072,
        vocab_size: 30_522,
        max_seq_len: 512,
        dropout: 0.1,
    };
    let adapter = AdapterConfig {
        bottleneck: 64,
        init_std: 0.01,
    };
    let overhead = adapter_overhead(&encoder, &adapter, 110_000_000);
    println!(
        "added {} parameters, ratio {:.4} of 110M",
        overhead.added_params, overhead.ratio
    );
    assert_eq!(overhead.added_params, 2_379_264);
    assert!(
        (0.020..=0.022).contains(&overhead.ratio),
        "overhead ratio {:.5} outside [0.020, 0.022]",
        overhead.ratio
    );
}

/// Criterion 2 — alias-table fidelity: for 20 random weight vectors the
/// closed-form reconstructed distribution matches the normalized weights to
/// 1e-10, and a million draws match empirically within L∞ < 0.005.
#[test]
fn criterion_02_alias_sampler_matches_weights() {
    const DRAWS: usize = 1_000_000;
    let mut rng = seeding::derive_rng(2, "acceptance/alias", &[]);
    let mut worst_exact = 0.0f64;
    let mut worst_empirical = 0.0f64;
    for case in 0..20 {
        let n = rng.random_range(2..=64usize);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let total: f64 = weights.iter().sum();
        let table = AliasTable::new(&weights).expect("positive weights build a table");

        for (i, reconstructed) in table.reconstructed().iter().enumerate() {
            let err = (reconstructed - weights[i] / total).abs();
            worst_exact = worst_exact.max(err);
            assert!(
                err <= 1e-10,
                "case {case}: reconstruction error {err:.3e} at outcome {i}"
            );
        }

        let mut counts = vec![0u64; n];
        for _ in 0..DRAWS {
            counts[table.sample(&mut rng)] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            let err = (count as f64 / DRAWS as f64 - weights[i] / total).abs();
            worst_empirical = worst_empirical.max(err);
            assert!(
                err < 0.005,
                "case {case}: empirical error {err:.4} at outcome {i} over {DRAWS} draws"
            );
        }
    }
    println!(
        "20 vectors: worst reconstruction error {worst_exact:.3e}, \
         worst empirical error {worst_empirical:.3e} at {DRAWS} draws each"
    );
}

/// Criterion 3 — gradient correctness: on a double-precision model (2
/// layers, hidden 8, 2 heads, feed-forward 16, batch 2, vocab 50, sequence
/// 6, adapters injected) the analytic gradient of the masked-language loss
/// matches central finite differences with step 1e-5 for every trainable
/// parameter, within max relative error 1e-4.
#[test]
fn criterion_03_analytic_gradients_match_finite_differences() {
    let config = EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 50,
        max_seq_len: 8,
        dropout: 0.0,
    };
    let mut model = EncoderModel::<f64>::init_base(config, 301).expect("valid config");
    model
        .inject_adapters(
            AdapterConfig {
                bottleneck: 4,
                init_std: 0.05,
            },
            302,
        )
        .expect("adapters fit the encoder");
    model.unfreeze_all();
    // Up-projections start at zero, which would leave the loss exactly
    // insensitive to the down-projections; perturb them so every adapter
    // gradient is generic.
    for layer in 0..2u64 {
        for site in ["attn", "ffn"] {
            let name = format!("layer{layer}.adapter.{site}.up");
            let mut up_rng = seeding::derive_rng(303, "acceptance/up-init", &[layer]);
            model
                .store
                .trainable_value_mut(&name)
                .expect("unfrozen adapter tensor")
                .mapv_inplace(|_| math::normal_draw(&mut up_rng, 0.05));
        }
    }

    // Batch of two rows exercising masked, kept-as-is, and padded positions.
    let batch = MaskedBatch {
        input_ids: ndarray::array![
            [2, 10, MASK_ID, 17, 23, 3],
            [2, MASK_ID, 40, 8, 3, PAD_ID],
        ],
        labels: ndarray::array![
            [-100, -100, 31, -100, 23, -100],
            [-100, 12, -100, 8, -100, -100],
        ],
        attention_mask: ndarray::array![[1, 1, 1, 1, 1, 1], [1, 1, 1, 1, 1, 0]],
    };

    let step = forward_backward(&model, &batch, true, None).expect("training step");
    assert!(step.masked_positions > 0);

    let eps = 1e-5;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let names: Vec<String> = step.grads.iter().map(|(n, _)| n.to_string()).collect();
    assert_eq!(names.len(), model.store.len(), "every tensor has a gradient");
    let mut probe = model.clone();
    for name in names {
        let analytic = step.grads.get(&name).expect("tracked tensor").clone();
        for i in 0..analytic.len() {
            let slice = probe
                .store
                .trainable_value_mut(&name)
                .expect("unfrozen tensor")
                .as_slice_mut()
                .expect("contiguous tensor");
            let original = slice[i];
            slice[i] = original + eps;
            let plus = loss_of(&probe, &batch);
            probe
                .store
                .trainable_value_mut(&name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[i] = original - eps;
            let minus = loss_of(&probe, &batch);
            probe
                .store
                .trainable_value_mut(&name)
                .unwrap()
                .as_slice_mut()
                .unwrap()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_slice().expect("contiguous gradient")[i];
            let rel = (numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-6);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}]: numeric {numeric:.6e}, analytic {a:.6e}");
            }
        }
    }
    println!("checked {checked} parameters, worst relative error {worst:.3e} at {worst_at}");
    assert!(
        worst <= 1e-4,
        "worst relative error {worst:.3e} exceeds 1e-4 at {worst_at}"
    );
}

fn loss_of(model: &EncoderModel<f64>, batch: &MaskedBatch) -> f64 {
    let logits = forward(model, &batch.input_ids, &batch.attention_mask, true, None)
        .expect("forward pass");
    mlm_loss(&logits, &batch.labels).0
}

/// Criterion 4 — freeze and identity invariants: 500 adapter-training steps
/// on a demo-world corpus leave every base and head tensor checksum
/// untouched, and a zero-initialized adapterized model reproduces the base
/// model's logits within 1e-6 relative.
#[test]
fn criterion_04_frozen_base_and_zero_init_identity() {
    let preset = DemoPreset::smoke();
    let world = generate_world(
        derive_u64(4, "acceptance/world"),
        preset.concepts,
        preset.facts_per_concept,
    );
    let params = WalkParams {
        length: preset.walk_length,
        walks_per_node: preset.walks_per_node,
        seed: derive_u64(4, "acceptance/walk"),
        start_nodes: StartNodes::All,
    };
    let (_, fact_lines) = walk_corpus(&world.target, &params, &TemplateTable::bundled_train())
        .expect("walkable graph");
    let vocab = Vocabulary::build(&fact_lines, 1);

    let mut model_cfg = preset.model.clone();
    model_cfg.vocab_size = vocab.size();
    let base =
        EncoderModel::<f32>::init_base(model_cfg, derive_u64(4, "acceptance/init")).unwrap();

    // Identity at injection: freshly injected adapters have hard-zero
    // up-projections, so the adapter path contributes exactly nothing and
    // logits must agree with the base to 1e-6 relative.
    let mut adapted = base.clone();
    adapted
        .inject_adapters(
            AdapterConfig {
                bottleneck: preset.bottleneck,
                init_std: 0.01,
            },
            derive_u64(4, "acceptance/adapters"),
        )
        .unwrap();
    let probe_batch = corpus_batch(&fact_lines[..4], &vocab, preset.model.max_seq_len);
    let mask = Array2::ones(probe_batch.dim());
    let base_logits = forward(&base, &probe_batch, &mask, false, None).unwrap();
    let injected_logits = forward(&adapted, &probe_batch, &mask, true, None).unwrap();
    let mut worst_rel = 0.0f64;
    for (a, b) in base_logits.iter().zip(injected_logits.iter()) {
        let (a, b) = (*a as f64, *b as f64);
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        worst_rel = worst_rel.max(rel);
    }
    println!("zero-init identity: worst relative logit difference {worst_rel:.3e}");
    assert!(
        worst_rel <= 1e-6,
        "zero-initialized adapters change logits by {worst_rel:.3e} relative"
    );

    // Frozen base: train the adapters for 500 steps and compare per-tensor
    // checksums of the base and head groups before and after.
    let frozen_groups = [ParamGroup::Base, ParamGroup::Head];
    let before = adapted.store.group_checksums(&frozen_groups);
    let adapters_before = adapted.store.group_checksums(&[ParamGroup::Adapter]);

    let train_cfg = TrainConfig {
        mode: TrainMode::TrainAdapter,
        peak_lr: 5e-3,
        warmup_steps: 50,
        total_steps: 500,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        grad_clip: Some(1.0),
        log_interval: 100,
        seed: derive_u64(4, "acceptance/train"),
    };
    let masking = MaskingConfig {
        mlm_probability: 0.3,
        mask_fraction: 1.0,
        random_fraction: 0.0,
        keep_fraction: 0.0,
        seed: derive_u64(4, "acceptance/mask"),
    };
    let batch_cfg = BatchConfig {
        batch_size: 16,
        mode: BatchMode::LineByLine,
        max_len: preset.model.max_seq_len,
    };
    let report = train(
        &mut adapted,
        &fact_lines,
        &vocab,
        &masking,
        &batch_cfg,
        &train_cfg,
        |_| {},
    )
    .expect("adapter training runs");
    assert_eq!(report.steps_run, 500);

    let after = adapted.store.group_checksums(&frozen_groups);
    let mut unchanged = 0usize;
    for (name, checksum) in &before {
        assert_eq!(
            after.get(name),
            Some(checksum),
            "frozen tensor {name} changed during adapter training"
        );
        unchanged += 1;
    }
    assert_eq!(before.len(), after.len());
    let adapters_after = adapted.store.group_checksums(&[ParamGroup::Adapter]);
    assert_ne!(
        adapters_before, adapters_after,
        "adapter tensors never moved — training had no effect"
    );
    println!(
        "{unchanged} base/head tensors unchanged across {} adapter steps (final loss {:?})",
        report.steps_run, report.final_loss
    );
}

/// Rows of encoded corpus lines, padded to one rectangle.
fn corpus_batch(lines: &[String], vocab: &Vocabulary, max_len: usize) -> Array2<u32> {
    let rows: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| encode_line(l, vocab, max_len))
        .collect();
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Array2::from_elem((rows.len(), width), PAD_ID);
    for (r, row) in rows.iter().enumerate() {
        for (c, &id) in row.iter().enumerate() {
            out[[r, c]] = id;
        }
    }
    out
}

/// Criterion 5 — masking statistics: over 2·10^5 candidate positions at
/// probability 0.15, the selected fraction lands in [0.14, 0.16] and the
/// mask/random/keep sub-splits stay within ±2 points of 80/10/10.
#[test]
fn criterion_05_masking_statistics_match_configuration() {
    const POSITIONS: usize = 200_000;
    let vocab_size = 50_000usize;
    let cfg = MaskingConfig::default();
    assert_eq!(cfg.mlm_probability, 0.15);
    cfg.validate().unwrap();

    let mut rng = seeding::derive_rng(5, "acceptance/masking", &[]);
    let sequence: Vec<u32> = (0..POSITIONS)
        .map(|_| rng.random_range(5..vocab_size as u32))
        .collect();
    let (corrupted, labels) = apply_mlm_masking(&sequence, &cfg, vocab_size, &mut rng);

    let mut selected = 0usize;
    let (mut masked, mut randomized, mut kept) = (0usize, 0usize, 0usize);
    for i in 0..POSITIONS {
        if labels[i] == IGNORE_LABEL {
            assert_eq!(corrupted[i], sequence[i], "unselected position rewritten");
            continue;
        }
        selected += 1;
        if corrupted[i] == MASK_ID {
            masked += 1;
        } else if corrupted[i] != sequence[i] {
            randomized += 1;
        } else {
            kept += 1;
        }
    }

    let selected_fraction = selected as f64 / POSITIONS as f64;
    println!(
        "selected {selected_fraction:.4} of {POSITIONS} positions; splits: \
         mask {:.4}, random {:.4}, keep {:.4}",
        masked as f64 / selected as f64,
        randomized as f64 / selected as f64,
        kept as f64 / selected as f64
    );
    assert!(
        (0.14..=0.16).contains(&selected_fraction),
        "selected fraction {selected_fraction:.4} outside [0.14, 0.16]"
    );
    for (label, count, target) in [
        ("mask", masked, 0.80),
        ("random", randomized, 0.10),
        ("keep", kept, 0.10),
    ] {
        let fraction = count as f64 / selected as f64;
        assert!(
            (fraction - target).abs() <= 0.02,
            "{label} split {fraction:.4} further than 2 points from {target}"
        );
    }
}

/// Criterion 6 — metric oracle equivalence: ranked-hit judgments agree with
/// brute-force top-k membership on 1,000 random cases, and mean-precision
/// curves are non-decreasing in k, reaching exactly 1.0 once k covers the
/// whole vocabulary.
#[test]
fn criterion_06_precision_agrees_with_brute_force_oracle() {
    let mut rng = seeding::derive_rng(6, "acceptance/metric", &[]);
    for case in 0..1_000 {
        let n = rng.random_range(5..200usize);
        let mut ranking: Vec<u32> = (0..n as u32).collect();
        ranking.shuffle(&mut rng);
        let gold = rng.random_range(0..n as u32);
        let k = rng.random_range(1..=n);
        let oracle = ranking[..k].contains(&gold);
        let verdict = precision_at_k(&ranking, gold, k).expect("gold is rankable");
        assert_eq!(verdict, oracle, "case {case}: ranking of {n}, k {k}");
    }
    println!("1000 random (ranking, gold, k) cases agree with the membership oracle");

    // Curves from live models over a shared probe stay monotone and top out
    // at exactly 1.0 once k is at least the rankable vocabulary size.
    let words = [
        "lamp", "crate", "river", "stone", "cloud", "ember", "field", "grove", "ridge", "vale",
    ];
    let lines: Vec<String> = words
        .iter()
        .map(|w| format!("the {w} sits by the {w}"))
        .collect();
    let vocab = Vocabulary::build(&lines, 1);
    let predicate = target_predicates()[0].clone();
    let items: Vec<ProbeItem> = words
        .iter()
        .map(|w| {
            ProbeItem::new(format!("The [MASK] sits by the {w}"), *w, predicate.clone(), None)
                .unwrap()
        })
        .collect();
    let grid: Vec<usize> = DEFAULT_K_GRID.to_vec();
    for model_seed in [61, 62, 63] {
        let config = EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_dim: 32,
            vocab_size: vocab.size(),
            max_seq_len: 12,
            dropout: 0.0,
        };
        let model = EncoderModel::<f32>::init_base(config, model_seed).unwrap();
        let curve = mean_p_at_k(&model, &items, &vocab, &grid).expect("scorable probe");
        assert!(
            curve.is_non_decreasing(),
            "curve decreased for model seed {model_seed}: {:?}",
            curve.points
        );
        let full_coverage = curve.p_at(100).unwrap();
        assert_eq!(
            full_coverage, 1.0,
            "k=100 covers every rankable id, yet mean precision is {full_coverage}"
        );
    }
    println!("3 random models produced non-decreasing curves ending at exactly 1.0");
}

/// Three full-scale demo experiments shared by criteria 7 and 8. Each run
/// builds its own synthetic world from the seed, pretrains a base model on
/// fact-free text, trains fact adapters and disjoint-predicate control
/// adapters, and probes all three models with paraphrase cloze questions.
static FULL_RUNS: OnceLock<Vec<(u64, DemoReport)>> = OnceLock::new();

fn full_runs() -> &'static [(u64, DemoReport)] {
    FULL_RUNS.get_or_init(|| {
        [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let dir = tempfile::tempdir().expect("temp dir");
                let report = run_demo(dir.path(), seed, &DemoPreset::full(), |line| {
                    println!("[seed {seed}] {line}");
                })
                .expect("demo experiment completes");
                (seed, report)
            })
            .collect()
    })
}

/// Criterion 7 — direction of effect: across three seeded full-scale runs,
/// the adapter-injected model beats the fact-free base by at least 10
/// points absolute at both mean P@10 and mean P@50 in a majority of runs.
#[test]
fn criterion_07_adapter_injection_lifts_probe_precision() {
    let runs = full_runs();
    let mut passes = 0usize;
    for (seed, report) in runs {
        for curve in [
            &report.base_curve,
            &report.adapted_curve,
            &report.control_curve,
        ] {
            assert!(curve.is_non_decreasing(), "seed {seed}: curve decreased");
        }
        let gain10 = report.gain_at(10).expect("k=10 on the grid");
        let gain50 = report.gain_at(50).expect("k=50 on the grid");
        let hit = gain10 >= 0.10 && gain50 >= 0.10;
        println!(
            "seed {seed}: adapted−base at k=10 {:+.1} points, at k=50 {:+.1} points ({})",
            gain10 * 100.0,
            gain50 * 100.0,
            if hit { "pass" } else { "miss" }
        );
        if hit {
            passes += 1;
        }
    }
    assert!(
        2 * passes > runs.len(),
        "adapter lift of ≥10 points at both k=10 and k=50 in only {passes} of {} runs",
        runs.len()
    );
}

/// Criterion 8 — predicate specificity: adapters trained on a disjoint
/// predicate set must not lift probe precision at k=10 by more than 3
/// points over the base, again by majority across the three runs.
#[test]
fn criterion_08_disjoint_predicate_adapters_do_not_transfer() {
    let runs = full_runs();
    let mut passes = 0usize;
    for (seed, report) in runs {
        let control10 = report.control_gain_at(10).expect("k=10 on the grid");
        let hit = control10 <= 0.03;
        println!(
            "seed {seed}: control−base at k=10 {:+.1} points ({})",
            control10 * 100.0,
            if hit { "pass" } else { "miss" }
        );
        if hit {
            passes += 1;
        }
    }
    assert!(
        2 * passes > runs.len(),
        "control adapters stayed within 3 points at k=10 in only {passes} of {} runs",
        runs.len()
    );
}

/// Criterion 9 — overlap accounting: gold/training-object overlap matches
/// hand-computed fractions exactly on constructed splits, including a
/// 36-in-100 split and the case-folding rule.
#[test]
fn criterion_09_object_overlap_matches_hand_counts() {
    let predicate = PredicateId::new("isA").unwrap();
    let triple = |s: &str, o: &str| {
        Triple::new(
            ConceptLabel::new(s).unwrap(),
            predicate.clone(),
            ConceptLabel::new(o).unwrap(),
            1.0,
        )
        .unwrap()
    };
    let item = |gold: &str| {
        ProbeItem::new(format!("Thing is [MASK] {gold}"), gold, predicate.clone(), None).unwrap()
    };

    // Empty probe: zero items, zero fraction.
    let empty = object_overlap(&[triple("a", "b")], &[]);
    assert_eq!((empty.probe_items, empty.matched), (0, 0));
    assert_eq!(empty.fraction, 0.0);

    // Two of four golds occur as training objects: exactly one half.
    let training = vec![triple("x", "apple"), triple("y", "pear")];
    let half = object_overlap(
        &training,
        &[item("apple"), item("pear"), item("plum"), item("fig")],
    );
    assert_eq!((half.probe_items, half.matched), (4, 2));
    assert_eq!(half.fraction, 0.5);

    // 36 of 100 golds covered: exactly 0.36.
    let covered: Vec<Triple> = (0..36)
        .map(|i| triple(&format!("subj{i:03}"), &format!("obj{i:03}")))
        .collect();
    let hundred: Vec<ProbeItem> = (0..100).map(|i| item(&format!("obj{i:03}"))).collect();
    let split = object_overlap(&covered, &hundred);
    assert_eq!((split.probe_items, split.matched), (100, 36));
    assert_eq!(split.fraction, 0.36);
    println!(
        "36-in-100 split reports fraction {} ({})",
        split.fraction, split.match_definition
    );

    // Matching folds case: an uppercase gold still matches its training
    // object, which normalization stores lowercased.
    let folded = object_overlap(&[triple("city", "Amsterdam")], &[item("AMSTERDAM")]);
    assert_eq!((folded.matched, folded.fraction), (1, 1.0));
}

/// Criterion 10 — determinism: two demo runs from one seed write
/// byte-identical corpora, checkpoints, and precision CSVs.
#[test]
fn criterion_10_demo_reruns_are_bit_identical() {
    let preset = DemoPreset::smoke();
    let first_dir = tempfile::tempdir().unwrap();
    let second_dir = tempfile::tempdir().unwrap();
    let first = run_demo(first_dir.path(), 33, &preset, |_| {}).unwrap();
    let second = run_demo(second_dir.path(), 33, &preset, |_| {}).unwrap();

    let first_files = first.paths.all_files();
    let second_files = second.paths.all_files();
    assert_eq!(first_files.len(), second_files.len());
    for (a, b) in first_files.iter().zip(&second_files) {
        let bytes_a = std::fs::read(a).unwrap();
        let bytes_b = std::fs::read(b).unwrap();
        assert_eq!(
            bytes_a,
            bytes_b,
            "{} differs between reruns with one seed",
            a.file_name().unwrap().to_string_lossy()
        );
    }
    println!(
        "{} artifacts byte-identical across independent reruns",
        first_files.len()
    );
}
