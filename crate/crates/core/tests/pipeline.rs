// SPDX-License-Identifier: Apache-2.0

//! End-to-end behaviour on the committed reference checkpoint.

use std::path::PathBuf;

use ttalab::data::{corrupt, generate_dataset, CorruptionKind, CorruptionSpec, ShapesToyConfig};
use ttalab::experiment::{
    corruption_seed, emit_iteration_curve, parse_records, run_experiment, seed_accuracies, write_outputs, ExperimentConfig, Method,
};
use ttalab::model::{zero_shot_accuracy, DualEncoderModel};
use ttalab::par::Execution;
use ttalab::tta::{adapt_batch, normalize_rows, zero_shot_probs, AdaptationConfig};
use ttalab::Error;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/reference.ckpt")
}

fn small_grid(methods: Vec<Method>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(fixture());
    cfg.methods = methods;
    cfg.corruptions = vec![CorruptionKind::GaussianNoise];
    cfg.seeds = vec![0];
    cfg.batch_sizes = vec![64];
    cfg.max_batches = Some(2);
    cfg.iterations = vec![3];
    cfg
}

#[test]
fn reference_checkpoint_is_accurate_on_clean_data() {
    let model = DualEncoderModel::load(&fixture()).unwrap();
    let data = generate_dataset(&ShapesToyConfig::default()).unwrap();
    let acc = zero_shot_accuracy(&model, &data.test, &data.vocab).unwrap();
    assert!(acc >= 0.85, "clean zero-shot accuracy {acc}");
}

#[test]
fn zero_shot_accuracy_does_not_rise_with_gaussian_severity() {
    let model = DualEncoderModel::load(&fixture()).unwrap();
    let data = generate_dataset(&ShapesToyConfig::default()).unwrap();
    let mut medians = Vec::new();
    for severity in 0..=5u8 {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, severity).unwrap();
        let mut accs: Vec<f64> = (0..3u64)
            .map(|seed| {
                let images = corrupt(&data.test.images, spec, seed).unwrap();
                let test = ttalab::data::Dataset {
                    images,
                    labels: data.test.labels.clone(),
                };
                zero_shot_accuracy(&model, &test, &data.vocab).unwrap()
            })
            .collect();
        accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(accs[1]);
    }
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn zero_iterations_and_zero_lr_leave_predictions_alone() {
    let model = DualEncoderModel::load(&fixture()).unwrap();
    let data = generate_dataset(&ShapesToyConfig {
        train_per_class: 1,
        test_per_class: 4,
        ..ShapesToyConfig::default()
    })
    .unwrap();
    let images = &data.test.images;
    let z = normalize_rows(&model.embed_images(images).unwrap()).unwrap();
    let class_unit = normalize_rows(&model.class_prompt_embeddings(&data.vocab).unwrap()).unwrap();
    let zero_shot = zero_shot_probs(&z, &class_unit, model.tau()).unwrap();

    let mut m = model.clone();
    let none = AdaptationConfig {
        iterations: 0,
        ..AdaptationConfig::default()
    };
    let out = adapt_batch(&mut m, images, &data.vocab, &none).unwrap();
    assert!(out.predictions.is_empty() && out.losses.is_empty());
    assert!(out.final_probs().max_abs_diff(&zero_shot) < 1e-12);

    let frozen = AdaptationConfig {
        lr: 0.0,
        iterations: 4,
        episodic: false,
        ..AdaptationConfig::default()
    };
    let out = adapt_batch(&mut m, images, &data.vocab, &frozen).unwrap();
    assert!(m.params().bitwise_eq(model.params()));
    assert_eq!(out.predictions.len(), 4);
    assert!(out.losses.windows(2).all(|w| w[0] == w[1]), "{:?}", out.losses);
}

#[test]
fn none_only_grid_reports_plain_zero_shot() {
    let mut cfg = small_grid(vec![Method::None]);
    cfg.max_batches = None;
    let out = run_experiment(&cfg, Execution::available()).unwrap();
    assert!(out.records.iter().all(|r| r.trace.is_empty() && r.loss.is_none()));

    let model = DualEncoderModel::load(&fixture()).unwrap();
    let data = generate_dataset(&ShapesToyConfig::default()).unwrap();
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap();
    let test = ttalab::data::Dataset {
        images: corrupt(&data.test.images, spec, corruption_seed(0, CorruptionKind::GaussianNoise, 5)).unwrap(),
        labels: data.test.labels.clone(),
    };
    let direct = 100.0 * zero_shot_accuracy(&model, &test, &data.vocab).unwrap();
    let acc = seed_accuracies(&out.records);
    assert_eq!(acc.len(), 1);
    let (t1, _) = acc.values().next().unwrap()[0];
    assert!((t1 - direct).abs() < 1e-9, "{t1} vs {direct}");
    assert_eq!(out.records.iter().map(|r| r.n_eval).sum::<usize>(), data.test.len());
}

#[test]
fn runs_are_deterministic_and_schedule_independent() {
    let cfg = small_grid(vec![Method::None, Method::Clipartt, Method::Tent, Method::Lame]);
    let a = run_experiment(&cfg, Execution::Parallel).unwrap();
    let b = run_experiment(&cfg, Execution::Sequential).unwrap();
    assert_eq!(a.summary_csv, b.summary_csv);
    assert_eq!(a.records, b.records);
    assert_eq!(a.manifest, b.manifest);

    // Every record survives the JSON-lines round trip and reaches the summary.
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &a).unwrap();
    let text = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    let back = parse_records(&text).unwrap();
    assert_eq!(back, a.records);
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for m in &cfg.methods {
        assert!(header.split(',').any(|h| h == m.name()));
    }
    for r in &back {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{},{}", r.corruption.name(), r.severity))));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoint_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn iteration_curve_spans_every_update() {
    let out = run_experiment(&small_grid(vec![Method::Clipartt]), Execution::available()).unwrap();
    let curve = emit_iteration_curve(&out.records).unwrap();
    let iterations: Vec<usize> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(iterations, vec![1, 2, 3]);

    let single = emit_iteration_curve(&out.records[..1]).unwrap();
    for (line, t) in single.lines().skip(1).zip(&out.records[0].trace) {
        let top1: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((top1 - t.top1).abs() < 1e-6);
    }
}

#[test]
fn clipartt_curve_ends_above_its_start_on_gaussian_noise() {
    let mut cfg = ExperimentConfig::new(fixture());
    cfg.methods = vec![Method::Clipartt];
    cfg.corruptions = vec![CorruptionKind::GaussianNoise];
    cfg.seeds = vec![0];
    let out = run_experiment(&cfg, Execution::available()).unwrap();
    let curve = emit_iteration_curve(&out.records).unwrap();
    let top1: Vec<f64> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(top1.len(), 10);
    assert!(top1[9] >= top1[0], "{top1:?}");
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let cfg = ExperimentConfig::new("/nonexistent/model.ckpt");
    assert!(matches!(run_experiment(&cfg, Execution::Sequential), Err(Error::Config(_))));
}
