// SPDX-License-Identifier: Apache-2.0

//! Numerical checks of the loss algebra: the softmax expansion of the
//! transductive loss, the scaled LogSumExp bounds, the graph-Laplacian form
//! obtained by replacing `τ·LSE` with the row maximum, and the unit-vector
//! distance/cosine identity.
//!
//! With `sᵢⱼ = z_vᵢ · z_tⱼ` and `LSEᵢ = log Σₖ exp(sᵢₖ/τ)`:
//!
//! * exact: `L = (1/τB) Σᵢⱼ qᵢⱼ (−sᵢⱼ + τ·LSEᵢ)`
//! * bounds: `maxₖ sᵢₖ < τ·LSEᵢ ≤ maxₖ sᵢₖ + τ log B`
//! * Laplacian: with `L_Q = diag(Q·1) − Q` the bipartite Laplacian of `Q`,
//!   `(1/τB)·tr(Z_vᵀ L_Q Z_t) = (1/τB) Σᵢⱼ qᵢⱼ (sᵢᵢ − sᵢⱼ)`. When every
//!   diagonal entry is its row maximum, this equals the loss with `τ·LSE`
//!   replaced by the maximum, and the gap to the exact loss is
//!   `(1/B) Σᵢ rᵢ (LSEᵢ − sᵢᵢ/τ)` with `rᵢ = Σⱼ qᵢⱼ`, which shrinks as τ → 0.

use serde::Serialize;

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use crate::model::DualEncoderModel;
use crate::prompting::ClassVocabulary;
use crate::tta::{build_instance_prompts, clipartt_loss, compute_p_hat, compute_q, normalize_rows, zero_shot_probs};

fn check_bundle(q: &Tensor, z_v: &Tensor, z_t: &Tensor, tau: f64) -> Result<usize> {
    let b = z_v.rows();
    if b == 0 || z_t.shape() != z_v.shape() || q.shape() != [b, b] {
        return Err(Error::dim(
            "theory",
            format!("Q {:?}, Z_v {:?}, Z_t {:?}", q.shape(), z_v.shape(), z_t.shape()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    Ok(b)
}

/// Number of rows of `Z_v Z_tᵀ` violating the scaled LogSumExp bounds.
///
/// The lower bound is strict for `B > 1`; it is evaluated through `log1p`
/// of the non-maximal terms so that tiny positive gaps survive rounding.
pub fn check_lse_bounds(z_v: &Tensor, z_t: &Tensor, tau: f64) -> Result<usize> {
    let b = z_v.rows();
    if z_t.shape() != z_v.shape() {
        return Err(Error::dim("check_lse_bounds", format!("{:?} vs {:?}", z_v.shape(), z_t.shape())));
    }
    let s = z_v.matmul_t(z_t)?;
    let mut violations = 0;
    for i in 0..b {
        let row = s.row(i);
        let (arg, m) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != arg)
            .map(|(_, &v)| ((v - m) / tau).exp())
            .sum();
        let gap = tau * rest.ln_1p();
        let lower_ok = if b > 1 { gap > 0.0 } else { gap == 0.0 };
        let upper_ok = gap <= tau * (b as f64).ln() * (1.0 + 1e-12);
        if !(lower_ok && upper_ok) {
            violations += 1;
        }
    }
    Ok(violations)
}

/// `(1/τB) Σᵢⱼ qᵢⱼ (−sᵢⱼ + τ·LSEᵢ)`, computed without forming `P̂`.
pub fn softmax_expansion(q: &Tensor, z_v: &Tensor, z_t: &Tensor, tau: f64) -> Result<f64> {
    let b = check_bundle(q, z_v, z_t, tau)?;
    let mut total = 0.0;
    for i in 0..b {
        let s: Vec<f64> = (0..b).map(|j| dot(z_v.row(i), z_t.row(j))).collect();
        let scaled: Vec<f64> = s.iter().map(|v| v / tau).collect();
        let tlse = tau * log_sum_exp(&scaled);
        for j in 0..b {
            total += q.get(i, j) * (tlse - s[j]);
        }
    }
    Ok(total / (tau * b as f64))
}

/// `|L(Q, P̂) − expansion|`.
pub fn check_exact_expansion(q: &Tensor, z_v: &Tensor, z_t: &Tensor, tau: f64) -> Result<f64> {
    check_bundle(q, z_v, z_t, tau)?;
    let loss = clipartt_loss(q, &compute_p_hat(z_v, z_t, tau)?)?;
    Ok((loss - softmax_expansion(q, z_v, z_t, tau)?).abs())
}

/// `diag(Q·1) − Q`.
pub fn bipartite_laplacian(q: &Tensor) -> Tensor {
    let b = q.rows();
    let mut l = q.map(|v| -v);
    for i in 0..b {
        let r: f64 = q.row(i).iter().sum();
        l.set(i, i, l.get(i, i) + r);
    }
    l
}

fn trace_form(m: &Tensor, z_v: &Tensor, z_t: &Tensor) -> Result<f64> {
    // tr(Z_vᵀ M Z_t) = Σᵢⱼ mᵢⱼ (z_vᵢ · z_tⱼ)
    let s = z_v.matmul_t(z_t)?;
    Ok(m.data().iter().zip(s.data()).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplacianReport {
    pub tau: f64,
    pub loss: f64,
    /// `(1/τB)·tr(Z_vᵀ L_Q Z_t)`.
    pub laplacian_form: f64,
    /// `|loss − laplacian_form|`.
    pub abs_gap: f64,
    /// Gap when the identity is added to the Laplacian, `(1/τB)·tr(Z_vᵀ (L_Q + I) Z_t)`.
    pub identity_augmented_abs_gap: f64,
    /// Fraction of rows whose diagonal similarity is the row maximum.
    pub premise_rate: f64,
}

pub fn premise_rate(z_v: &Tensor, z_t: &Tensor) -> Result<f64> {
    let s = z_v.matmul_t(z_t)?;
    let b = s.rows();
    if b == 0 {
        return Ok(1.0);
    }
    let hits = (0..b)
        .filter(|&i| s.row(i).iter().all(|&v| v <= s.get(i, i)))
        .count();
    Ok(hits as f64 / b as f64)
}

pub fn check_laplacian_form(q: &Tensor, z_v: &Tensor, z_t: &Tensor, tau: f64) -> Result<LaplacianReport> {
    let b = check_bundle(q, z_v, z_t, tau)?;
    let loss = clipartt_loss(q, &compute_p_hat(z_v, z_t, tau)?)?;
    let scale = 1.0 / (tau * b as f64);
    let lap = bipartite_laplacian(q);
    let laplacian_form = scale * trace_form(&lap, z_v, z_t)?;
    let diag_term = scale * (0..b).map(|i| dot(z_v.row(i), z_t.row(i))).sum::<f64>();
    Ok(LaplacianReport {
        tau,
        loss,
        laplacian_form,
        abs_gap: (loss - laplacian_form).abs(),
        identity_augmented_abs_gap: (loss - laplacian_form - diag_term).abs(),
        premise_rate: premise_rate(z_v, z_t)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceIdentityReport {
    pub pairs: usize,
    /// `max |‖xᵢ − xⱼ‖² − (2 − 2 cos)|`.
    pub max_abs_err: f64,
    /// `max |cos − (2 − ‖xᵢ − xⱼ‖²)|`, the residual of the form without the factor ½.
    pub uncorrected_form_max_residual: f64,
}

/// Checks the unit-vector identity over all pairs of rows (including `i = j`).
pub fn check_distance_cosine_identity(z: &Tensor) -> Result<DistanceIdentityReport> {
    let n = z.rows();
    let (mut err, mut residual, mut pairs) = (0.0f64, 0.0f64, 0);
    for i in 0..n {
        let norm = dot(z.row(i), z.row(i)).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("row {i} is not unit-norm ({norm})")));
        }
        for j in i..n {
            let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let cos = dot(z.row(i), z.row(j));
            err = err.max((d2 - (2.0 - 2.0 * cos)).abs());
            residual = residual.max((cos - (2.0 - d2)).abs());
            pairs += 1;
        }
    }
    Ok(DistanceIdentityReport {
        pairs,
        max_abs_err: err,
        uncorrected_form_max_residual: residual,
    })
}

/// Summary over a set of bundles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionReport {
    pub bundles: usize,
    pub lse_bound_violations: usize,
    pub exact_expansion_max_abs_err: f64,
    pub laplacian_form_abs_gap: f64,
    pub diag_dominance_rate: f64,
    /// Per-τ Laplacian reports, in input order.
    pub laplacian_sweep: Vec<LaplacianReport>,
    pub distance_identity: Option<DistanceIdentityReport>,
}

impl PropositionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs every check on each `(Q, Z_v, Z_t, τ)` bundle.
pub fn proposition_report(bundles: &[(Tensor, Tensor, Tensor, f64)]) -> Result<PropositionReport> {
    let mut report = PropositionReport {
        bundles: bundles.len(),
        lse_bound_violations: 0,
        exact_expansion_max_abs_err: 0.0,
        laplacian_form_abs_gap: 0.0,
        diag_dominance_rate: 0.0,
        laplacian_sweep: Vec::with_capacity(bundles.len()),
        distance_identity: None,
    };
    for (q, zv, zt, tau) in bundles {
        report.lse_bound_violations += check_lse_bounds(zv, zt, *tau)?;
        report.exact_expansion_max_abs_err = report.exact_expansion_max_abs_err.max(check_exact_expansion(q, zv, zt, *tau)?);
        let lap = check_laplacian_form(q, zv, zt, *tau)?;
        report.laplacian_form_abs_gap = report.laplacian_form_abs_gap.max(lap.abs_gap);
        report.diag_dominance_rate += lap.premise_rate / bundles.len() as f64;
        report.laplacian_sweep.push(lap);
    }
    Ok(report)
}

/// Bundles from a model: consecutive `batch_size` chunks of `images`, each
/// paired with its top-`top_k` instance prompts and evaluated at every τ.
pub fn model_bundles(
    model: &DualEncoderModel,
    images: &Tensor,
    vocab: &ClassVocabulary,
    top_k: usize,
    batch_size: usize,
    taus: &[f64],
) -> Result<Vec<(Tensor, Tensor, Tensor, f64)>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let class_unit = normalize_rows(&model.class_prompt_embeddings(vocab)?)?;
    let n = images.rows();
    let mut out = Vec::new();
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let z_v = normalize_rows(&model.embed_images(&images.select_rows(&idx))?)?;
        let probs = zero_shot_probs(&z_v, &class_unit, model.tau())?;
        let prompts = build_instance_prompts(&probs, top_k, vocab)?;
        let z_t = normalize_rows(&model.embed_text(&prompts)?)?;
        for &tau in taus {
            let q = compute_q(&z_v, &z_t, tau)?.q;
            out.push((q, z_v.clone(), z_t.clone(), tau));
        }
    }
    Ok(out)
}
