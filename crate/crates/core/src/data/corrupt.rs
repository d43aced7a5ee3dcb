// SPDX-License-Identifier: Apache-2.0

//! Image corruptions with pinned five-level severity tables.
//!
//! Every corruption operates in `[0, 1]` pixel space and clamps its output.
//! Severity 0 is the identity for every kind. Random corruptions draw from a
//! per-image stream seeded by `(seed, kind, severity, image index)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::mix_seed;
use super::shapes::{IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
    JpegLikeBlocking,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 9] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegLikeBlocking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegLikeBlocking => "jpeg_like_blocking",
        }
    }

    /// The pinned severity table, levels 1 through 5.
    pub fn table(self) -> [f64; 5] {
        match self {
            // noise standard deviation
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            // photon count scale: x' = Poisson(x·λ)/λ
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            // salt-and-pepper fraction
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            // disk radius in pixels
            CorruptionKind::DefocusBlur => [0.6, 0.9, 1.2, 1.6, 2.0],
            // streak length in pixels
            CorruptionKind::MotionBlur => [2.0, 3.0, 4.0, 5.0, 6.0],
            // additive offset
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            // contrast factor around the image mean
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            // block size; fractional part is the blend weight toward the blocked image
            CorruptionKind::Pixelate => [2.5, 2.0, 3.75, 4.75, 4.0],
            // base quantization step for 4×4 DCT coefficients
            CorruptionKind::JpegLikeBlocking => [0.03, 0.06, 0.1, 0.16, 0.25],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::InvalidArgument(format!("severity must be 0..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    /// Severity parameter, or `None` for the pass-through level 0.
    pub fn parameter(&self) -> Option<f64> {
        (self.severity > 0).then(|| self.kind.table()[self.severity as usize - 1])
    }
}

const HW: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Applies `spec` to every image of a `[N, 3, 16, 16]` batch.
pub fn corrupt(images: &Tensor, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    if images.cols() != PIXELS {
        return Err(Error::dim("corrupt", format!("expected {PIXELS} values per image, got {}", images.cols())));
    }
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("corrupt expects pixels in [0, 1]".into()));
    }
    let Some(param) = spec.parameter() else {
        return Ok(images.clone());
    };
    let n = images.rows();
    let rows = par::map_range(Execution::available(), n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            seed,
            spec.kind as u64,
            spec.severity as u64,
            i as u64,
        ]));
        let mut px = images.row(i).to_vec();
        apply(spec.kind, param, &mut px, &mut rng);
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        px
    });
    Tensor::new(images.shape().to_vec(), rows.into_iter().flatten().collect())
}

fn apply(kind: CorruptionKind, p: f64, px: &mut [f64], rng: &mut ChaCha8Rng) {
    match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p).expect("positive sigma");
            px.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        CorruptionKind::ShotNoise => {
            for v in px.iter_mut() {
                let rate = *v * p;
                *v = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(rng) / p
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in px.iter_mut() {
                if rng.random::<f64>() < p {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            let r = p;
            let reach = r.ceil() as i64;
            let mut kernel = Vec::new();
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    let w = (r + 0.5 - d).clamp(0.0, 1.0);
                    if w > 0.0 {
                        kernel.push((dx, dy, w));
                    }
                }
            }
            convolve(px, &kernel);
        }
        CorruptionKind::MotionBlur => {
            let len = p as usize;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (c, s) = (theta.cos(), theta.sin());
            let kernel: Vec<(i64, i64, f64)> = (0..len)
                .map(|k| {
                    let t = (k as i64 - (len as i64 - 1) / 2) as f64;
                    ((t * c).round() as i64, (t * s).round() as i64, 1.0)
                })
                .collect();
            convolve(px, &kernel);
        }
        CorruptionKind::Brightness => px.iter_mut().for_each(|v| *v += p),
        CorruptionKind::Contrast => {
            let mean = px.iter().sum::<f64>() / px.len() as f64;
            px.iter_mut().for_each(|v| *v = (*v - mean) * p + mean);
        }
        CorruptionKind::Pixelate => {
            let block = p.floor() as usize;
            let alpha = if p.fract() == 0.0 { 1.0 } else { p.fract() };
            for ch in px.chunks_mut(HW) {
                let orig = ch.to_vec();
                for by in (0..IMAGE_SIZE).step_by(block) {
                    for bx in (0..IMAGE_SIZE).step_by(block) {
                        let ys = by..(by + block).min(IMAGE_SIZE);
                        let xs = bx..(bx + block).min(IMAGE_SIZE);
                        let cells: Vec<usize> = ys
                            .flat_map(|y| xs.clone().map(move |x| y * IMAGE_SIZE + x))
                            .collect();
                        let m = cells.iter().map(|&c| orig[c]).sum::<f64>() / cells.len() as f64;
                        for c in cells {
                            ch[c] = (1.0 - alpha) * orig[c] + alpha * m;
                        }
                    }
                }
            }
        }
        CorruptionKind::JpegLikeBlocking => {
            for ch in px.chunks_mut(HW) {
                for by in (0..IMAGE_SIZE).step_by(4) {
                    for bx in (0..IMAGE_SIZE).step_by(4) {
                        quantize_block(ch, bx, by, p);
                    }
                }
            }
        }
    }
}

/// Clamp-to-edge convolution with a normalized sparse kernel.
fn convolve(px: &mut [f64], kernel: &[(i64, i64, f64)]) {
    let total: f64 = kernel.iter().map(|k| k.2).sum();
    let n = IMAGE_SIZE as i64;
    for ch in px.chunks_mut(HW) {
        let orig = ch.to_vec();
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for &(dx, dy, w) in kernel {
                    let sx = (x + dx).clamp(0, n - 1);
                    let sy = (y + dy).clamp(0, n - 1);
                    acc += w * orig[(sy * n + sx) as usize];
                }
                ch[(y * n + x) as usize] = acc / total;
            }
        }
    }
}

fn dct_basis() -> [[f64; 4]; 4] {
    let mut b = [[0.0; 4]; 4];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { 0.5 } else { (0.5f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 8.0).cos();
        }
    }
    b
}

/// Orthonormal 4×4 DCT, frequency-weighted quantization, inverse DCT.
fn quantize_block(ch: &mut [f64], bx: usize, by: usize, step: f64) {
    let b = dct_basis();
    let mut block = [[0.0; 4]; 4];
    for (y, row) in block.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = ch[(by + y) * IMAGE_SIZE + bx + x];
        }
    }
    let mut coef = [[0.0; 4]; 4];
    for u in 0..4 {
        for v in 0..4 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    s += b[u][y] * b[v][x] * block[y][x];
                }
            }
            let q = step * (1.0 + (u + v) as f64);
            coef[u][v] = (s / q).round() * q;
        }
    }
    for y in 0..4 {
        for x in 0..4 {
            let mut s = 0.0;
            for u in 0..4 {
                for v in 0..4 {
                    s += b[u][y] * b[v][x] * coef[u][v];
                }
            }
            ch[(by + y) * IMAGE_SIZE + bx + x] = s;
        }
    }
}

/// Corruption parameters for the run manifest.
pub fn parameter_table() -> Vec<(CorruptionKind, [f64; 5])> {
    CorruptionKind::ALL.iter().map(|&k| (k, k.table())).collect()
}
