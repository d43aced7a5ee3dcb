// SPDX-License-Identifier: Apache-2.0

//! Comparison methods: entropy minimization on the LayerNorm affine
//! parameters (TENT) and Laplacian-regularized prediction refinement (LAME,
//! reimplemented as a concave-convex fixed point, not the original code).

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::{log_sum_exp, Var};
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;
use crate::prompting::ClassVocabulary;
use crate::tensor::{dot, Tensor};
use crate::tta::{normalize_rows, run_session, AdaptationOutcome, Objective, ObjectiveInputs, SessionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    None,
    Tent,
    Lame,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::None => "none",
            BaselineMethod::Tent => "tent",
            BaselineMethod::Lame => "lame",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineMethod::None),
            "tent" => Ok(BaselineMethod::Tent),
            "lame" => Ok(BaselineMethod::Lame),
            _ => Err(Error::Config(format!("unknown baseline `{s}`"))),
        }
    }
}

/// Affinity restriction for LAME.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Affinity {
    #[default]
    Full,
    /// Keep each row's `k` strongest neighbours, then symmetrize by max.
    Knn(usize),
}

impl FromStr for Affinity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Affinity::Full);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .map(Affinity::Knn)
            .ok_or_else(|| Error::Config(format!("lame affinity must be `full` or a positive integer, got `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LameConfig {
    pub affinity: Affinity,
    /// Multiplier on the clamped cosine affinities.
    pub affinity_scale: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for LameConfig {
    fn default() -> Self {
        Self {
            affinity: Affinity::Full,
            affinity_scale: 1.0,
            max_iterations: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub iterations: usize,
    pub lr: f64,
    pub tau: f64,
    pub episodic: bool,
    pub lame: LameConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Tent,
            iterations: 10,
            lr: 1e-3,
            tau: 0.01,
            episodic: true,
            lame: LameConfig::default(),
        }
    }
}

impl BaselineConfig {
    fn session(&self) -> SessionConfig {
        SessionConfig {
            lr: self.lr,
            iterations: self.iterations,
            tau: self.tau,
            episodic: self.episodic,
        }
    }
}

/// Mean Shannon entropy of the rows, `−(1/B) Σᵢₖ pᵢₖ log pᵢₖ`.
pub fn tent_loss(probs: &Tensor) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    let s: f64 = probs.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    -s / probs.rows() as f64
}

/// Differentiable batch entropy of the class probabilities.
pub fn entropy_objective<'t>(inputs: &ObjectiveInputs<'_, 't>) -> Result<Var<'t>> {
    let tape = inputs.z_v.tape();
    let cos = inputs.z_v.matmul_t(tape.constant(inputs.class_unit.clone()))?;
    let p = cos.softmax_rows(inputs.tau)?;
    let logp = cos.log_softmax_rows(inputs.tau)?;
    let b = inputs.z_v.shape()[0] as f64;
    Ok(p.mul(logp)?.sum().scale(-1.0 / b))
}

struct Entropy;

impl Objective for Entropy {
    fn loss<'t>(&mut self, inputs: &ObjectiveInputs<'_, 't>) -> Result<Var<'t>> {
        entropy_objective(inputs)
    }
}

/// Entropy minimization over the visual LayerNorm affine parameters.
/// The loss trace holds the batch entropy before each update.
pub fn tent_adapt(
    model: &mut DualEncoderModel,
    images: &Tensor,
    vocab: &ClassVocabulary,
    config: &BaselineConfig,
) -> Result<AdaptationOutcome> {
    tent_adapt_masked(model, images, None, vocab, config)
}

pub fn tent_adapt_masked(
    model: &mut DualEncoderModel,
    images: &Tensor,
    adapt_rows: Option<&[usize]>,
    vocab: &ClassVocabulary,
    config: &BaselineConfig,
) -> Result<AdaptationOutcome> {
    if !(config.lr >= 0.0 && config.tau > 0.0) {
        return Err(Error::InvalidArgument("tent needs lr >= 0 and tau > 0".into()));
    }
    let class_unit = normalize_rows(&model.class_prompt_embeddings(vocab)?)?;
    run_session(model, images, adapt_rows, &class_unit, config.session(), &mut Entropy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LameOutput {
    pub probs: Tensor,
    pub iterations: usize,
    /// False when the iteration cap was hit before the tolerance.
    pub converged: bool,
}

/// Clamped cosine affinities with a zero diagonal.
pub fn lame_affinity(z_v: &Tensor, config: &LameConfig) -> Result<Tensor> {
    let b = z_v.rows();
    let mut w = z_v.matmul_t(z_v)?;
    for i in 0..b {
        for j in 0..b {
            let v = if i == j { 0.0 } else { w.get(i, j).max(0.0) * config.affinity_scale };
            w.set(i, j, v);
        }
    }
    if let Affinity::Knn(k) = config.affinity {
        let mut keep = vec![false; b * b];
        for i in 0..b {
            let mut idx: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            idx.sort_by(|&x, &y| w.get(i, y).total_cmp(&w.get(i, x)).then(x.cmp(&y)));
            for &j in idx.iter().take(k) {
                keep[i * b + j] = true;
                keep[j * b + i] = true;
            }
        }
        for (v, k) in w.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(w)
}

/// Maximizes `Σᵢₖ yᵢₖ log pᵢₖ + ½ Σᵢⱼ wᵢⱼ yᵢᵀyⱼ − Σᵢₖ yᵢₖ log yᵢₖ` over
/// row-stochastic `Y` by sweeping `yᵢ ∝ pᵢ ⊙ exp(Σⱼ wᵢⱼ yⱼ)` one row at a time.
/// Model parameters are never involved.
pub fn lame_refine(z_v: &Tensor, probs: &Tensor, config: &LameConfig) -> Result<LameOutput> {
    let (b, c) = (probs.rows(), probs.cols());
    if z_v.rows() != b {
        return Err(Error::dim("lame_refine", format!("{} embeddings for {b} rows", z_v.rows())));
    }
    if !probs.is_finite() || probs.data().iter().any(|&p| p < 0.0) {
        return Err(Error::numeric("lame_refine", "probabilities must be finite and non-negative"));
    }
    let w = lame_affinity(z_v, config)?;
    let log_p: Vec<f64> = probs.data().iter().map(|&p| p.max(f64::MIN_POSITIVE).ln()).collect();
    let mut y = probs.clone();
    let mut logits = vec![0.0; c];
    for sweep in 1..=config.max_iterations {
        let mut change = 0.0f64;
        for i in 0..b {
            for (k, l) in logits.iter_mut().enumerate() {
                *l = log_p[i * c + k];
            }
            for j in 0..b {
                let wij = w.get(i, j);
                if wij != 0.0 {
                    for (l, yj) in logits.iter_mut().zip(y.row(j)) {
                        *l += wij * yj;
                    }
                }
            }
            let lse = log_sum_exp(&logits);
            let row = y.row_mut(i);
            for (v, l) in row.iter_mut().zip(&logits) {
                let nv = (l - lse).exp();
                change = change.max((nv - *v).abs());
                *v = nv;
            }
        }
        if change < config.tolerance {
            return Ok(LameOutput {
                probs: y,
                iterations: sweep,
                converged: true,
            });
        }
    }
    Ok(LameOutput {
        probs: y,
        iterations: config.max_iterations,
        converged: false,
    })
}

/// LAME objective value for a candidate `Y` (used to check monotone ascent).
pub fn lame_objective(y: &Tensor, probs: &Tensor, w: &Tensor) -> f64 {
    let (b, c) = (y.rows(), y.cols());
    let mut total = 0.0;
    for i in 0..b {
        for k in 0..c {
            let yv = y.get(i, k);
            if yv > 0.0 {
                total += yv * probs.get(i, k).max(f64::MIN_POSITIVE).ln() - yv * yv.ln();
            }
        }
        for j in 0..b {
            total += 0.5 * w.get(i, j) * dot(y.row(i), y.row(j));
        }
    }
    total
}
