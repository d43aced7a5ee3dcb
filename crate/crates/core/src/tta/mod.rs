// SPDX-License-Identifier: Apache-2.0

//! Zero-shot classification, batch pseudo-labels and the transductive
//! cross-entropy objective.
//!
//! For a batch with unit-normalized visual rows `Z_v` and instance-prompt rows
//! `Ẑ_t`:
//!
//! * `S_v = Z_v Z_vᵀ`, `S_t = Ẑ_t Ẑ_tᵀ`
//! * `Q = softmax_col((S_v + S_t) / 2τ)` (column-stochastic pseudo-labels)
//! * `P̂ = softmax_row(Z_v Ẑ_tᵀ / τ)` (row-stochastic predictions)
//! * `L = −(1/B) Σᵢⱼ qᵢⱼ log p̂ᵢⱼ`

mod adapt;

pub use adapt::{
    adapt_batch, adapt_batch_masked, clipartt_objective, run_session, AdaptationOutcome, Objective,
    ObjectiveInputs, PromptCache, SessionConfig,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_raw, MIN_NORM};
use crate::error::{Error, Result};
use crate::prompting::{render_multi, topk_ids, ClassVocabulary};
use crate::tensor::{dot, Tensor};

/// Source of the pseudo-label matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    ImageText,
    ImageOnly,
    TextOnly,
    Identity,
    AvgPrompt,
}

impl TargetMode {
    pub const ALL: [TargetMode; 5] = [
        TargetMode::ImageText,
        TargetMode::ImageOnly,
        TargetMode::TextOnly,
        TargetMode::Identity,
        TargetMode::AvgPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetMode::ImageText => "image_text",
            TargetMode::ImageOnly => "image_only",
            TargetMode::TextOnly => "text_only",
            TargetMode::Identity => "identity",
            TargetMode::AvgPrompt => "avg_prompt",
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown target mode `{s}`")))
    }
}

/// How `Q` enters the cross-entropy: as computed, or transposed so that its
/// rows (rather than columns) are distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QOrientation {
    #[default]
    AsWritten,
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationConfig {
    pub lr: f64,
    pub iterations: usize,
    pub top_k: usize,
    pub tau: f64,
    pub target_mode: TargetMode,
    pub episodic: bool,
    pub batch_size: usize,
    /// Stop gradients through `Q`.
    pub detach_targets: bool,
    pub orientation: QOrientation,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            iterations: 10,
            top_k: 3,
            tau: 0.01,
            target_mode: TargetMode::ImageText,
            episodic: true,
            batch_size: 128,
            detach_targets: true,
            orientation: QOrientation::AsWritten,
        }
    }
}

impl AdaptationConfig {
    /// `iterations == 0` is accepted and means "no adaptation".
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.top_k == 0 || self.top_k > num_classes {
            return Err(Error::InvalidArgument(format!(
                "top_k must be in 1..={num_classes}, got {}",
                self.top_k
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Unit-normalizes each row; zero rows are a numeric error.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt();
        if !(n.is_finite() && n > MIN_NORM) {
            return Err(Error::numeric("normalize_rows", format!("row {i} has norm {n}")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Class probabilities from cosine similarity: `softmax_k(cos(z_v, z_t_k) / τ)`.
pub fn zero_shot_probs(z_v: &Tensor, z_t_classes: &Tensor, tau: f64) -> Result<Tensor> {
    if z_v.cols() != z_t_classes.cols() {
        return Err(Error::dim(
            "zero_shot_probs",
            format!("image dim {} vs text dim {}", z_v.cols(), z_t_classes.cols()),
        ));
    }
    if !z_v.is_finite() || !z_t_classes.is_finite() {
        return Err(Error::numeric("zero_shot_probs", "non-finite embeddings"));
    }
    positive(tau, "tau")?;
    let cos = normalize_rows(z_v)?.matmul_t(&normalize_rows(z_t_classes)?)?;
    Ok(softmax_rows_raw(&cos, tau).0)
}

fn positive(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")))
    }
}

/// Top-k class ids for every row, descending.
pub fn instance_topk(probs: &Tensor, top_k: usize) -> Result<Vec<Vec<usize>>> {
    (0..probs.rows()).map(|i| topk_ids(probs.row(i), top_k)).collect()
}

/// `"a photo of a {c1} or … or {ck}"` for each row's top-k classes.
pub fn build_instance_prompts(probs: &Tensor, top_k: usize, vocab: &ClassVocabulary) -> Result<Vec<String>> {
    instance_topk(probs, top_k)?
        .iter()
        .map(|ids| render_multi(vocab, ids))
        .collect()
}

pub fn softmax_cols(x: &Tensor, tau: f64) -> Tensor {
    softmax_rows_raw(&x.transpose(), tau).0.transpose()
}

pub fn softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    softmax_rows_raw(x, tau).0
}

/// Per-batch similarity matrices with the resulting pseudo-labels and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle {
    pub s_v: Tensor,
    pub s_t: Tensor,
    pub q: Tensor,
    pub p_hat: Tensor,
    pub mode: TargetMode,
}

fn check_pair(z_v: &Tensor, z_t: &Tensor) -> Result<()> {
    if z_v.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if z_v.rows() != z_t.rows() || z_v.cols() != z_t.cols() {
        return Err(Error::dim(
            "similarity",
            format!("{:?} vs {:?}", z_v.shape(), z_t.shape()),
        ));
    }
    Ok(())
}

/// `Q = softmax_col((Z_v Z_vᵀ + Ẑ_t Ẑ_tᵀ) / 2τ)`.
pub fn compute_q(z_v: &Tensor, z_t_hat: &Tensor, tau: f64) -> Result<SimilarityBundle> {
    check_pair(z_v, z_t_hat)?;
    positive(tau, "tau")?;
    let s_v = z_v.matmul_t(z_v)?;
    let s_t = z_t_hat.matmul_t(z_t_hat)?;
    let q = build_target(TargetMode::ImageText, &s_v, &s_t, tau)?;
    let p_hat = compute_p_hat(z_v, z_t_hat, tau)?;
    Ok(SimilarityBundle {
        s_v,
        s_t,
        q,
        p_hat,
        mode: TargetMode::ImageText,
    })
}

/// `P̂ = softmax_row(Z_v Ẑ_tᵀ / τ)`.
pub fn compute_p_hat(z_v: &Tensor, z_t_hat: &Tensor, tau: f64) -> Result<Tensor> {
    check_pair(z_v, z_t_hat)?;
    positive(tau, "tau")?;
    Ok(softmax_rows(&z_v.matmul_t(z_t_hat)?, tau))
}

/// Pseudo-label matrix for `mode`. For [`TargetMode::AvgPrompt`], pass the
/// text-side similarity built from averaged class-prompt embeddings as `s_t`.
pub fn build_target(mode: TargetMode, s_v: &Tensor, s_t: &Tensor, tau: f64) -> Result<Tensor> {
    positive(tau, "tau")?;
    let b = s_v.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if s_v.shape() != [b, b] || s_t.shape() != s_v.shape() {
        return Err(Error::dim("build_target", format!("{:?} vs {:?}", s_v.shape(), s_t.shape())));
    }
    Ok(match mode {
        TargetMode::ImageOnly => softmax_cols(s_v, tau),
        TargetMode::TextOnly => softmax_cols(s_t, tau),
        TargetMode::ImageText | TargetMode::AvgPrompt => {
            let mean = Tensor::new(
                vec![b, b],
                s_v.data().iter().zip(s_t.data()).map(|(a, c)| (a + c) / 2.0).collect(),
            )?;
            softmax_cols(&mean, tau)
        }
        TargetMode::Identity => Tensor::eye(b),
    })
}

/// Unit rows of the mean of each sample's top-k single-class prompt embeddings.
pub fn average_prompt_embeddings(class_unit: &Tensor, topk: &[Vec<usize>]) -> Result<Tensor> {
    let d = class_unit.cols();
    let mut out = Tensor::zeros(&[topk.len(), d]);
    for (i, ids) in topk.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty top-k list".into()));
        }
        let row = out.row_mut(i);
        for &c in ids {
            for (o, v) in row.iter_mut().zip(class_unit.row(c)) {
                *o += v / ids.len() as f64;
            }
        }
    }
    normalize_rows(&out)
}

/// `−(1/B) Σᵢⱼ qᵢⱼ log p̂ᵢⱼ`.
pub fn clipartt_loss(q: &Tensor, p_hat: &Tensor) -> Result<f64> {
    if q.shape() != p_hat.shape() {
        return Err(Error::dim("clipartt_loss", format!("{:?} vs {:?}", q.shape(), p_hat.shape())));
    }
    let b = q.rows() as f64;
    let s: f64 = q
        .data()
        .iter()
        .zip(p_hat.data())
        .filter(|(qv, _)| **qv != 0.0)
        .map(|(qv, pv)| qv * pv.ln())
        .sum();
    Ok(-s / b)
}

/// Fraction of rows whose label is among the `k` highest probabilities.
pub fn accuracy_topk(probs: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let c = probs.cols();
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("k must be in 1..={c}, got {k}")));
    }
    if labels.len() != probs.rows() {
        return Err(Error::dim("accuracy_topk", format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::ClassOutOfRange { id: y, size: c });
        }
        if topk_ids(probs.row(i), k)?.contains(&y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        let raw = Tensor::matrix(b, d, (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        normalize_rows(&raw).unwrap()
    }

    fn naive_col_softmax(x: &Tensor, tau: f64) -> Tensor {
        let (m, n) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for j in 0..n {
            let denom: f64 = (0..m).map(|i| (x.get(i, j) / tau).exp()).sum();
            for i in 0..m {
                out.set(i, j, (x.get(i, j) / tau).exp() / denom);
            }
        }
        out
    }

    fn naive_row_softmax(x: &Tensor, tau: f64) -> Tensor {
        naive_col_softmax(&x.transpose(), tau).transpose()
    }

    fn naive_dots(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[a.rows(), b.rows()]);
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                out.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(j, k)).sum());
            }
        }
        out
    }

    #[test]
    fn zero_shot_examples() {
        let zv = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let one = Tensor::matrix(1, 2, vec![0.3, 0.9]).unwrap();
        assert_eq!(zero_shot_probs(&zv, &one, 0.01).unwrap().data(), &[1.0]);
        let two = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = zero_shot_probs(&zv, &two, 1.0).unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.data()[0] - s).abs() < 1e-15 && (p.data()[1] - (1.0 - s)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!(zero_shot_probs(&zv, &two, 0.01).unwrap().data()[0] > 1.0 - 1e-9);
        let zero = Tensor::zeros(&[1, 2]);
        assert!(matches!(zero_shot_probs(&zero, &two, 1.0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn scale_invariance_of_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zv = unit_rows(&mut rng, 6, 5);
        let zt = unit_rows(&mut rng, 4, 5);
        let p = zero_shot_probs(&zv, &zt, 0.1).unwrap();
        let p2 = zero_shot_probs(&zv.map(|v| v * 37.0), &zt.map(|v| v * 0.02), 0.1).unwrap();
        for i in 0..6 {
            assert_eq!(argmax(p.row(i)), argmax(p2.row(i)));
        }
    }

    #[test]
    fn instance_prompt_examples() {
        let vocab = ClassVocabulary::new(["cat", "dog", "ship"]).unwrap();
        let probs = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.6, 0.3, 0.1]).unwrap();
        assert_eq!(build_instance_prompts(&probs, 1, &vocab).unwrap()[0], "a photo of a dog");
        assert_eq!(build_instance_prompts(&probs, 3, &vocab).unwrap()[1], "a photo of a cat or dog or ship");
        let a = Tensor::matrix(2, 3, vec![0.5, 0.3, 0.2, 0.2, 0.3, 0.5]).unwrap();
        let p = build_instance_prompts(&a, 3, &vocab).unwrap();
        assert_ne!(p[0], p[1]);
    }

    #[test]
    fn q_examples() {
        let e = Tensor::eye(2);
        let b = compute_q(&e, &e, 0.01).unwrap();
        assert!(b.q.max_abs_diff(&Tensor::eye(2)) < 1e-9);
        assert!(b.p_hat.max_abs_diff(&Tensor::eye(2)) < 1e-9);

        let same = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let b = compute_q(&same, &same, 0.01).unwrap();
        assert!(b.q.data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let zv = unit_rows(&mut rng, 5, 4);
        let zt = unit_rows(&mut rng, 5, 4);
        let b = compute_q(&zv, &zt, 0.1).unwrap();
        let sum = naive_dots(&zv, &zv);
        let st = naive_dots(&zt, &zt);
        let mean = Tensor::new(vec![5, 5], sum.data().iter().zip(st.data()).map(|(a, c)| 0.5 * (a + c)).collect()).unwrap();
        assert!(b.q.max_abs_diff(&naive_col_softmax(&mean, 0.1)) < 1e-12);
        assert!(b.p_hat.max_abs_diff(&naive_row_softmax(&naive_dots(&zv, &zt), 0.1)) < 1e-12);
        assert!(compute_q(&Tensor::zeros(&[0, 4]), &Tensor::zeros(&[0, 4]), 0.1).is_err());
    }

    #[test]
    fn p_hat_uniform_when_text_rows_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zv = unit_rows(&mut rng, 4, 3);
        let zt = Tensor::from_rows(&vec![vec![0.0, 1.0, 0.0]; 4]).unwrap();
        let p = compute_p_hat(&zv, &zt, 0.01).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn loss_examples() {
        let q = Tensor::eye(2);
        let p = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let l = clipartt_loss(&q, &p).unwrap();
        assert!((l - (-(0.9f64.ln() + 0.8f64.ln()) / 2.0)).abs() < 1e-15);
        assert!((l - 0.16425).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let q = softmax_cols(&s, 0.3);
        let uniform = Tensor::full(&[4, 4], 0.25);
        assert!((clipartt_loss(&q, &uniform).unwrap() - 4f64.ln()).abs() < 1e-12);

        let near_i = compute_p_hat(&Tensor::eye(3), &Tensor::eye(3), 0.001).unwrap();
        assert!(clipartt_loss(&Tensor::eye(3), &near_i).unwrap() < 1e-12);
    }

    #[test]
    fn target_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zv = unit_rows(&mut rng, 3, 4);
        let zt = unit_rows(&mut rng, 3, 4);
        let sv = zv.matmul_t(&zv).unwrap();
        let st = zt.matmul_t(&zt).unwrap();
        assert_eq!(build_target(TargetMode::Identity, &sv, &st, 0.01).unwrap(), Tensor::eye(3));
        assert_eq!(
            build_target(TargetMode::ImageOnly, &sv, &st, 0.05).unwrap(),
            compute_q(&zv, &zv, 0.05).unwrap().q
        );
        assert_eq!(
            build_target(TargetMode::ImageText, &sv, &sv, 0.05).unwrap(),
            softmax_cols(&sv, 0.05)
        );
        assert_eq!(
            build_target(TargetMode::TextOnly, &sv, &st, 0.05).unwrap(),
            softmax_cols(&st, 0.05)
        );
        assert!("bogus".parse::<TargetMode>().is_err());
    }

    #[test]
    fn average_prompts_are_unit() {
        let classes = Tensor::eye(3);
        let avg = average_prompt_embeddings(&classes, &[vec![0, 1], vec![2]]).unwrap();
        let h = 0.5f64.sqrt();
        assert!(avg.max_abs_diff(&Tensor::matrix(2, 3, vec![h, h, 0.0, 0.0, 0.0, 1.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let one_hot = Tensor::eye(3);
        for k in 1..=3 {
            assert_eq!(accuracy_topk(&one_hot, &[0, 1, 2], k).unwrap(), 1.0);
        }
        let probs = Tensor::matrix(
            4,
            3,
            vec![
                0.6, 0.3, 0.1, // label 1 second
                0.2, 0.5, 0.3, // label 2 second
                0.7, 0.2, 0.1, // label 0 first
                0.1, 0.8, 0.1, // label 1 first
            ],
        )
        .unwrap();
        let labels = [1, 2, 0, 1];
        assert_eq!(accuracy_topk(&probs, &labels, 1).unwrap(), 0.5);
        assert_eq!(accuracy_topk(&probs, &labels, 3).unwrap(), 1.0);
        assert!(matches!(accuracy_topk(&probs, &[1, 2, 0, 3], 1), Err(Error::ClassOutOfRange { .. })));
        assert!(accuracy_topk(&probs, &labels, 4).is_err());
    }
}
