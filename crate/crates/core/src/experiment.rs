// SPDX-License-Identifier: Apache-2.0

//! Config-driven experiment grids: methods × corruptions × ablation axes × seeds.
//!
//! Configs are flat `key = value` text. Repeating a list key appends to it,
//! `#` starts a comment. See the README for the full grammar.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{lame_refine, tent_adapt_masked, Affinity, BaselineConfig, LameConfig};
use crate::data::corrupt::parameter_table;
use crate::data::shapes::generate_ood;
use crate::data::{corrupt, generate_dataset, mix_seed, plan_batches, BatchPlan, CorruptionKind, CorruptionSpec, Sampler, ShapesToyConfig};
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;
use crate::par::{self, Execution};
use crate::tensor::Tensor;
use crate::tta::{
    adapt_batch_masked, argmax, normalize_rows, zero_shot_probs, AdaptationConfig, AdaptationOutcome, QOrientation,
    TargetMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Clipartt,
    Tent,
    Lame,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Clipartt, Method::Tent, Method::Lame];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Clipartt => "clipartt",
            Method::Tent => "tent",
            Method::Lame => "lame",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// A fully resolved experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    pub dataset: ShapesToyConfig,
    pub methods: Vec<Method>,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub seeds: Vec<u64>,
    pub sampler: Sampler,
    pub batch_sizes: Vec<usize>,
    pub top_ks: Vec<usize>,
    pub iterations: Vec<usize>,
    pub target_modes: Vec<TargetMode>,
    pub lr: f64,
    pub tau: f64,
    pub episodic: bool,
    pub detach_targets: bool,
    pub orientation: QOrientation,
    pub tent_lr: f64,
    pub tent_iterations: usize,
    pub lame: LameConfig,
    /// Caps the number of batches per (corruption, severity, seed) group.
    pub max_batches: Option<usize>,
}

impl ExperimentConfig {
    /// The default grid around `checkpoint`: every method and corruption at
    /// severity 5, seeds 0..3, B = 128, K = 3, 10 iterations.
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        let a = AdaptationConfig::default();
        let b = BaselineConfig::default();
        Self {
            checkpoint: checkpoint.into(),
            dataset: ShapesToyConfig::default(),
            methods: Method::ALL.to_vec(),
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![5],
            seeds: vec![0, 1, 2],
            sampler: Sampler::Iid,
            batch_sizes: vec![a.batch_size],
            top_ks: vec![a.top_k],
            iterations: vec![a.iterations],
            target_modes: vec![a.target_mode],
            lr: a.lr,
            tau: a.tau,
            episodic: a.episodic,
            detach_targets: a.detach_targets,
            orientation: a.orientation,
            tent_lr: b.lr,
            tent_iterations: b.iterations,
            lame: b.lame,
            max_batches: None,
        }
    }

    /// Parses config text. Relative checkpoint paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
            }
            entries.push((n + 1, k.to_string(), v.to_string()));
        }

        let checkpoint = entries
            .iter()
            .find(|(_, k, _)| k == "checkpoint")
            .map(|(_, _, v)| base_dir.join(v))
            .ok_or_else(|| Error::Config("missing `checkpoint`".into()))?;
        let mut cfg = Self::new(checkpoint);
        let mut lists: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
        let mut seen_scalars: Vec<&str> = Vec::new();

        for (line, key, value) in &entries {
            let key = key.as_str();
            let bad = |what: &str| Error::Config(format!("line {line}: bad {what} `{value}` for `{key}`"));
            if LIST_KEYS.contains(&key) {
                lists.entry(key).or_default().push((*line, value.as_str()));
                continue;
            }
            if seen_scalars.contains(&key) {
                return Err(Error::Config(format!("line {line}: `{key}` given more than once")));
            }
            seen_scalars.push(key);
            match key {
                "checkpoint" => {}
                "dataset.num_classes" => cfg.dataset.num_classes = value.parse().map_err(|_| bad("integer"))?,
                "dataset.train_per_class" => cfg.dataset.train_per_class = value.parse().map_err(|_| bad("integer"))?,
                "dataset.test_per_class" => cfg.dataset.test_per_class = value.parse().map_err(|_| bad("integer"))?,
                "dataset.seed" => cfg.dataset.seed = value.parse().map_err(|_| bad("integer"))?,
                "sampler" => cfg.sampler = value.parse()?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
                "tau" => cfg.tau = value.parse().map_err(|_| bad("number"))?,
                "episodic" => cfg.episodic = parse_bool(value).ok_or_else(|| bad("boolean"))?,
                "detach_targets" => cfg.detach_targets = parse_bool(value).ok_or_else(|| bad("boolean"))?,
                "orientation" => {
                    cfg.orientation = match value.as_str() {
                        "as_written" => QOrientation::AsWritten,
                        "transposed" => QOrientation::Transposed,
                        _ => return Err(bad("orientation")),
                    }
                }
                "tent.lr" => cfg.tent_lr = value.parse().map_err(|_| bad("number"))?,
                "tent.iterations" => cfg.tent_iterations = value.parse().map_err(|_| bad("integer"))?,
                "lame.affinity" => cfg.lame.affinity = value.parse::<Affinity>().map_err(|_| bad("affinity"))?,
                "lame.scale" => cfg.lame.affinity_scale = value.parse().map_err(|_| bad("number"))?,
                "lame.max_iterations" => cfg.lame.max_iterations = value.parse().map_err(|_| bad("integer"))?,
                "lame.tolerance" => cfg.lame.tolerance = value.parse().map_err(|_| bad("number"))?,
                "max_batches" => cfg.max_batches = Some(value.parse().map_err(|_| bad("integer"))?),
                _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
            }
        }

        for (key, values) in &lists {
            let parse_all = |f: &dyn Fn(&str) -> Option<()>| -> Result<()> {
                for (line, v) in values {
                    f(v).ok_or_else(|| Error::Config(format!("line {line}: bad value `{v}` for `{key}`")))?;
                }
                Ok(())
            };
            match *key {
                "methods" => {
                    cfg.methods = values.iter().map(|(_, v)| v.parse()).collect::<Result<_>>()?;
                }
                "corruption" => {
                    cfg.corruptions = values
                        .iter()
                        .map(|(_, v)| v.parse().map_err(|_| Error::Config(format!("unknown corruption `{v}`"))))
                        .collect::<Result<_>>()?;
                }
                "target_mode" => {
                    cfg.target_modes = values.iter().map(|(_, v)| v.parse()).collect::<Result<_>>()?;
                }
                "severity" => {
                    let mut out = Vec::new();
                    parse_all(&|v| v.parse::<u8>().ok().filter(|s| *s <= 5).map(|_| ()))?;
                    for (_, v) in values {
                        out.push(v.parse().unwrap());
                    }
                    cfg.severities = out;
                }
                "seed" => {
                    parse_all(&|v| v.parse::<u64>().ok().map(|_| ()))?;
                    cfg.seeds = values.iter().map(|(_, v)| v.parse().unwrap()).collect();
                }
                "batch_size" | "top_k" | "iterations" => {
                    parse_all(&|v| v.parse::<usize>().ok().map(|_| ()))?;
                    let parsed: Vec<usize> = values.iter().map(|(_, v)| v.parse().unwrap()).collect();
                    match *key {
                        "batch_size" => cfg.batch_sizes = parsed,
                        "top_k" => cfg.top_ks = parsed,
                        _ => cfg.iterations = parsed,
                    }
                }
                _ => unreachable!("list keys are enumerated"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let non_empty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("`{name}` must list at least one value")))
            } else {
                Ok(())
            }
        };
        non_empty("methods", self.methods.len())?;
        non_empty("corruption", self.corruptions.len())?;
        non_empty("severity", self.severities.len())?;
        non_empty("seed", self.seeds.len())?;
        non_empty("batch_size", self.batch_sizes.len())?;
        non_empty("top_k", self.top_ks.len())?;
        non_empty("iterations", self.iterations.len())?;
        non_empty("target_mode", self.target_modes.len())?;
        if self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.iterations.contains(&0) || self.tent_iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.tent_lr >= 0.0 && self.lr.is_finite() && self.tent_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        for &k in &self.top_ks {
            if k == 0 || k > self.dataset.num_classes {
                return Err(Error::Config(format!(
                    "top_k {k} must be in 1..={}",
                    self.dataset.num_classes
                )));
            }
        }
        if self.max_batches == Some(0) {
            return Err(Error::Config("max_batches must be positive".into()));
        }
        Ok(())
    }

    /// Every distinct `(method, axes)` pair. Axes a method ignores are
    /// collapsed, so `none` runs once per batch size whatever the other axes are.
    pub fn variants(&self) -> Vec<(Method, Axes)> {
        let mut out: Vec<(Method, Axes)> = Vec::new();
        for &method in &self.methods {
            for &batch_size in &self.batch_sizes {
                for &top_k in &self.top_ks {
                    for &iterations in &self.iterations {
                        for &target_mode in &self.target_modes {
                            let axes = match method {
                                Method::Clipartt => Axes {
                                    batch_size,
                                    top_k: Some(top_k),
                                    iterations,
                                    target_mode: Some(target_mode),
                                },
                                Method::Tent => Axes {
                                    batch_size,
                                    top_k: None,
                                    iterations: self.tent_iterations,
                                    target_mode: None,
                                },
                                Method::None | Method::Lame => Axes {
                                    batch_size,
                                    top_k: None,
                                    iterations: 0,
                                    target_mode: None,
                                },
                            };
                            if !out.contains(&(method, axes)) {
                                out.push((method, axes));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

const LIST_KEYS: [&str; 8] = [
    "methods",
    "corruption",
    "severity",
    "seed",
    "batch_size",
    "top_k",
    "iterations",
    "target_mode",
];

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Ablation coordinates of one run. `None` marks an axis the method ignores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Axes {
    pub batch_size: usize,
    pub top_k: Option<usize>,
    pub iterations: usize,
    pub target_mode: Option<TargetMode>,
}

/// Accuracy of one batch after a given number of updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Loss evaluated before the update that produced this point.
    pub loss: f64,
    pub top1: f64,
    pub top3: f64,
}

/// One JSON-lines record: a single batch under one method and axis setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub method: Method,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    pub batch_id: usize,
    #[serde(flatten)]
    pub axes: Axes,
    /// Rows counted toward accuracy.
    pub n_eval: usize,
    pub correct_top1: usize,
    pub correct_top3: usize,
    pub top1: f64,
    pub top3: f64,
    /// Updates applied before the final prediction.
    pub iteration: usize,
    /// Loss before the last update, when one was made.
    pub loss: Option<f64>,
    /// Per-update accuracies; empty for methods without gradient steps.
    pub trace: Vec<TracePoint>,
    /// LAME only: whether the fixed-point iteration met its tolerance.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
}

impl BatchRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Parses JSON-lines records, skipping blank lines.
pub fn parse_records(text: &str) -> Result<Vec<BatchRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Counts correct top-1 and top-k predictions over the masked rows.
fn score(probs: &Tensor, labels: &[Option<usize>], k: usize) -> (usize, usize, usize) {
    let c = probs.cols();
    let k = k.min(c);
    let (mut n, mut c1, mut ck) = (0, 0, 0);
    for (i, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let row = probs.row(i);
        n += 1;
        if argmax(row) == y {
            c1 += 1;
        }
        let py = row[y];
        // Ties resolve toward the lower index, as in `argmax`.
        let above = row
            .iter()
            .enumerate()
            .filter(|&(j, &p)| p > py || (p == py && j < y))
            .count();
        if above < k {
            ck += 1;
        }
    }
    (n, c1, ck)
}

fn ratio(a: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a as f64 / n as f64
    }
}

/// Noise seed used to corrupt the test split for one grid cell.
pub fn corruption_seed(seed: u64, kind: CorruptionKind, severity: u8) -> u64 {
    mix_seed(&[seed, kind as u64, severity as u64, 0])
}

/// Images and evaluation labels of one planned batch.
struct Prepared {
    images: Tensor,
    labels: Vec<Option<usize>>,
    adapt_rows: Option<Vec<usize>>,
}

struct Job<'a> {
    method: Method,
    axes: Axes,
    batch_id: usize,
    batch: &'a Prepared,
}

/// Everything a run produced, in deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<BatchRecord>,
    pub summary_csv: String,
    pub manifest: serde_json::Value,
}

/// Runs the grid. Batches of each (corruption, severity, seed, batch size)
/// group are distributed over workers, each owning its own model clone.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<RunOutput> {
    cfg.validate()?;
    if !cfg.checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint `{}` not found", cfg.checkpoint.display())));
    }
    let model = DualEncoderModel::load(&cfg.checkpoint)?;
    let checkpoint_sha256 = model.checkpoint_hash()?;
    let data = generate_dataset(&cfg.dataset)?;
    let vocab = &data.vocab;
    let class_unit = normalize_rows(&model.class_prompt_embeddings(vocab)?)?;
    let variants = cfg.variants();

    let mut records = Vec::new();
    for &corruption in &cfg.corruptions {
        for &severity in &cfg.severities {
            let spec = CorruptionSpec::new(corruption, severity).map_err(|e| Error::Config(e.to_string()))?;
            for &seed in &cfg.seeds {
                let test_images = corrupt(&data.test.images, spec, corruption_seed(seed, corruption, severity))?;
                for &batch_size in &cfg.batch_sizes {
                    let prepared = prepare_batches(cfg, &data.test.labels, &test_images, batch_size, spec, seed)?;
                    let jobs: Vec<Job<'_>> = variants
                        .iter()
                        .filter(|(_, a)| a.batch_size == batch_size)
                        .flat_map(|&(method, axes)| {
                            prepared
                                .iter()
                                .enumerate()
                                .map(move |(batch_id, batch)| Job { method, axes, batch_id, batch })
                        })
                        .collect();
                    let results = par::map_slice(exec, &jobs, |job| {
                        run_job(cfg, &model, vocab, &class_unit, job).map(|r| BatchRecord {
                            corruption,
                            severity,
                            seed,
                            ..r
                        })
                    });
                    for r in results {
                        records.push(r?);
                    }
                }
            }
        }
    }

    let summary_csv = summarize(&records, &cfg.methods)?;
    let manifest = manifest(cfg, &checkpoint_sha256, records.len());
    Ok(RunOutput {
        records,
        summary_csv,
        manifest,
    })
}

fn prepare_batches(
    cfg: &ExperimentConfig,
    labels: &[usize],
    test_images: &Tensor,
    batch_size: usize,
    spec: CorruptionSpec,
    seed: u64,
) -> Result<Vec<Prepared>> {
    let plan = BatchPlan {
        sampler: cfg.sampler,
        batch_size,
    };
    let (ood_images, pool) = match cfg.sampler {
        Sampler::OpenSet { ood_fraction } if (0.0..1.0).contains(&ood_fraction) => {
            let per = (batch_size as f64 * ood_fraction / (1.0 - ood_fraction)).round() as usize;
            let pool = per * labels.len().div_ceil(batch_size);
            let ood = generate_ood(pool, mix_seed(&[cfg.dataset.seed, 0x00d]));
            let kind_id = spec.kind as u64;
            let img = corrupt(&ood.images, spec, mix_seed(&[seed, kind_id, spec.severity as u64, 1]))?;
            (Some(img), pool)
        }
        _ => (None, 0),
    };
    let mut batches = plan_batches(labels, cfg.dataset.num_classes, &plan, pool, mix_seed(&[seed, batch_size as u64]))
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(cap) = cfg.max_batches {
        batches.truncate(cap);
    }
    Ok(batches
        .into_iter()
        .map(|b| {
            let mut images = test_images.select_rows(&b.indices);
            if let Some(ood) = &ood_images {
                if !b.ood_indices.is_empty() {
                    images = Tensor::concat_rows(&[images, ood.select_rows(&b.ood_indices)])
                        .expect("test and OOD images share a layout");
                }
            }
            let labels = b
                .indices
                .iter()
                .map(|&i| Some(labels[i]))
                .chain(std::iter::repeat_n(None, b.ood_indices.len()))
                .zip(&b.eval_mask)
                .map(|(l, &m)| if m { l } else { None })
                .collect();
            let adapt_rows = (!b.adapt_mask.iter().all(|&m| m))
                .then(|| (0..b.adapt_mask.len()).filter(|&i| b.adapt_mask[i]).collect());
            Prepared {
                images,
                labels,
                adapt_rows,
            }
        })
        .collect())
}

fn run_job(
    cfg: &ExperimentConfig,
    model: &DualEncoderModel,
    vocab: &crate::prompting::ClassVocabulary,
    class_unit: &Tensor,
    job: &Job<'_>,
) -> Result<BatchRecord> {
    let batch = job.batch;
    let adapt_rows = batch.adapt_rows.as_deref();
    let trace_of = |outcome: &AdaptationOutcome| -> Vec<TracePoint> {
        outcome
            .predictions
            .iter()
            .zip(&outcome.losses)
            .enumerate()
            .map(|(i, (p, &loss))| {
                let (n, c1, c3) = score(p, &batch.labels, 3);
                TracePoint {
                    iteration: i + 1,
                    loss,
                    top1: ratio(c1, n),
                    top3: ratio(c3, n),
                }
            })
            .collect()
    };
    let (probs, trace, converged) = match job.method {
        Method::None => {
            let z = normalize_rows(&model.embed_images(&batch.images)?)?;
            (zero_shot_probs(&z, class_unit, cfg.tau)?, Vec::new(), None)
        }
        Method::Lame => {
            let z = normalize_rows(&model.embed_images(&batch.images)?)?;
            let p = zero_shot_probs(&z, class_unit, cfg.tau)?;
            let out = lame_refine(&z, &p, &cfg.lame)?;
            (out.probs, Vec::new(), Some(out.converged))
        }
        Method::Clipartt => {
            let config = AdaptationConfig {
                lr: cfg.lr,
                iterations: job.axes.iterations,
                top_k: job.axes.top_k.expect("clipartt axes carry top_k"),
                tau: cfg.tau,
                target_mode: job.axes.target_mode.expect("clipartt axes carry a target mode"),
                episodic: cfg.episodic,
                batch_size: job.axes.batch_size,
                detach_targets: cfg.detach_targets,
                orientation: cfg.orientation,
            };
            let mut m = model.clone();
            let outcome = adapt_batch_masked(&mut m, &batch.images, adapt_rows, vocab, &config)?;
            (outcome.final_probs().clone(), trace_of(&outcome), None)
        }
        Method::Tent => {
            let config = BaselineConfig {
                iterations: job.axes.iterations,
                lr: cfg.tent_lr,
                tau: cfg.tau,
                episodic: cfg.episodic,
                ..BaselineConfig::default()
            };
            let mut m = model.clone();
            let outcome = tent_adapt_masked(&mut m, &batch.images, adapt_rows, vocab, &config)?;
            (outcome.final_probs().clone(), trace_of(&outcome), None)
        }
    };
    let (n_eval, correct_top1, correct_top3) = score(&probs, &batch.labels, 3);
    Ok(BatchRecord {
        method: job.method,
        corruption: CorruptionKind::GaussianNoise,
        severity: 0,
        seed: 0,
        batch_id: job.batch_id,
        axes: job.axes,
        n_eval,
        correct_top1,
        correct_top3,
        top1: ratio(correct_top1, n_eval),
        top3: ratio(correct_top3, n_eval),
        iteration: trace.len(),
        loss: trace.last().map(|t| t.loss),
        trace,
        converged,
    })
}

/// Row key of the summary table.
type RowKey = (CorruptionKind, u8, usize, Option<usize>, usize, Option<TargetMode>);

/// Pooled accuracy (percent) per seed, keyed by summary row and method.
pub fn seed_accuracies(records: &[BatchRecord]) -> BTreeMap<(RowKey, Method), Vec<(f64, f64)>> {
    let mut pooled: BTreeMap<(RowKey, Method, u64), (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let key = (
            r.corruption,
            r.severity,
            r.axes.batch_size,
            r.axes.top_k,
            r.axes.iterations,
            r.axes.target_mode,
        );
        let e = pooled.entry((key, r.method, r.seed)).or_default();
        e.0 += r.n_eval;
        e.1 += r.correct_top1;
        e.2 += r.correct_top3;
    }
    let mut out: BTreeMap<(RowKey, Method), Vec<(f64, f64)>> = BTreeMap::new();
    for ((key, method, _), (n, c1, c3)) in pooled {
        out.entry((key, method))
            .or_default()
            .push((100.0 * ratio(c1, n), 100.0 * ratio(c3, n)));
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_cell(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.2} ± {s:.2}")
}

/// CSV with corruptions (and ablation settings) as rows and methods as
/// columns. Methods ignoring an axis are matched to every row that shares the
/// axes they do use. Cells hold `mean ± std` over seeds, in percent.
pub fn summarize(records: &[BatchRecord], methods: &[Method]) -> Result<String> {
    let acc = seed_accuracies(records);
    // Rows come from the full-axis variants when present.
    let mut rows: Vec<RowKey> = Vec::new();
    let has_clipartt = acc.keys().any(|(_, m)| *m == Method::Clipartt);
    for (key, m) in acc.keys() {
        if (!has_clipartt || *m == Method::Clipartt) && !rows.contains(key) {
            rows.push(*key);
        }
    }
    rows.sort();
    let lookup = |row: &RowKey, m: Method| -> Option<&Vec<(f64, f64)>> {
        acc.iter()
            .find(|((k, mm), _)| {
                *mm == m
                    && k.0 == row.0
                    && k.1 == row.1
                    && k.2 == row.2
                    && (k.3.is_none() || k.3 == row.3)
                    && (k.5.is_none() || k.5 == row.5)
                    && (m != Method::Clipartt || k.4 == row.4)
            })
            .map(|(_, v)| v)
    };
    let mut csv = String::from("corruption,severity,batch_size,top_k,iterations,target_mode,metric");
    for m in methods {
        csv.push(',');
        csv.push_str(m.name());
    }
    csv.push('\n');
    for row in &rows {
        for (metric, pick) in [("top1", 0usize), ("top3", 1)] {
            let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
            csv.push_str(&format!(
                "{},{},{},{},{},{},{metric}",
                row.0.name(),
                row.1,
                row.2,
                opt(row.3),
                if has_clipartt { row.4.to_string() } else { String::new() },
                row.5.map_or(String::new(), |t| t.name().to_string()),
            ));
            for &m in methods {
                csv.push(',');
                if let Some(v) = lookup(row, m) {
                    let xs: Vec<f64> = v.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
                    csv.push_str(&fmt_cell(&xs));
                }
            }
            csv.push('\n');
        }
    }
    Ok(csv)
}

fn manifest(cfg: &ExperimentConfig, checkpoint_sha256: &str, n_records: usize) -> serde_json::Value {
    let table: Vec<serde_json::Value> = parameter_table()
        .into_iter()
        .map(|(k, levels)| serde_json::json!({ "corruption": k.name(), "levels": levels }))
        .collect();
    serde_json::json!({
        "checkpoint": cfg.checkpoint.display().to_string(),
        "checkpoint_sha256": checkpoint_sha256,
        "dataset": {
            "num_classes": cfg.dataset.num_classes,
            "train_per_class": cfg.dataset.train_per_class,
            "test_per_class": cfg.dataset.test_per_class,
            "seed": cfg.dataset.seed,
        },
        "methods": cfg.methods,
        "corruptions": cfg.corruptions,
        "severities": cfg.severities,
        "seeds": cfg.seeds,
        "sampler": cfg.sampler,
        "batch_size": cfg.batch_sizes,
        "top_k": cfg.top_ks,
        "iterations": cfg.iterations,
        "target_mode": cfg.target_modes,
        "lr": cfg.lr,
        "tau": cfg.tau,
        "episodic": cfg.episodic,
        "detach_targets": cfg.detach_targets,
        "orientation": match cfg.orientation {
            QOrientation::AsWritten => "as_written",
            QOrientation::Transposed => "transposed",
        },
        "tent": { "lr": cfg.tent_lr, "iterations": cfg.tent_iterations },
        "lame": cfg.lame,
        "max_batches": cfg.max_batches,
        "corruption_table": table,
        "records": n_records,
    })
}

/// Writes `records.jsonl`, `summary.csv` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for r in &out.records {
        lines.push_str(&r.to_json_line()?);
        lines.push('\n');
    }
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("records.jsonl", &lines)?;
    write("summary.csv", &out.summary_csv)?;
    write("manifest.json", &(serde_json::to_string_pretty(&out.manifest)? + "\n"))
}

/// Mean accuracy against iteration, one row per (method, iteration).
/// Records without a trace are skipped.
pub fn emit_iteration_curve(records: &[BatchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut acc: BTreeMap<(Method, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        for t in &r.trace {
            let e = acc.entry((r.method, t.iteration)).or_default();
            e.0 += t.top1;
            e.1 += t.top3;
            e.2 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::InvalidArgument("records carry no per-iteration predictions".into()));
    }
    let mut csv = String::from("method,iteration,top1,top3,batches\n");
    for ((m, it), (s1, s3, n)) in acc {
        csv.push_str(&format!(
            "{},{it},{:.6},{:.6},{n}\n",
            m.name(),
            s1 / n as f64,
            s3 / n as f64
        ));
    }
    Ok(csv)
}
