// SPDX-License-Identifier: Apache-2.0

//! ShapesToy: 16×16 RGB renderings of simple shapes.
//!
//! Class identity is carried only by the shape. Position, size, foreground
//! color and background level are drawn per image, so color alone is not
//! predictive. Pixel values stay inside [0.2, 0.9] before corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mix_seed;
use crate::container::BlockSet;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::prompting::ClassVocabulary;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// In-distribution generators; the class name is the shape name.
pub const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::HBar,
    Shape::VBar,
];

/// Disjoint generators used only as out-of-distribution images.
pub const OOD_SHAPES: [Shape; 4] = [Shape::Checker, Shape::Dots, Shape::Crescent, Shape::Stripes];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
    Checker,
    Dots,
    Crescent,
    Stripes,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::HBar => "hbar",
            Shape::VBar => "vbar",
            Shape::Checker => "checker",
            Shape::Dots => "dots",
            Shape::Crescent => "crescent",
            Shape::Stripes => "stripes",
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of half-extent `s`.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let r = (dx * dx + dy * dy).sqrt();
        let bar = 0.32 * s;
        match self {
            Shape::Circle => r <= s,
            Shape::Square => dx.abs().max(dy.abs()) <= 0.85 * s,
            Shape::Triangle => {
                // apex up; dy grows downward
                let t = (dy + s) / (2.0 * s);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * s
            }
            Shape::Cross => {
                (dx.abs() <= bar && dy.abs() <= s) || (dy.abs() <= bar && dx.abs() <= s)
            }
            Shape::Ring => r <= s && r >= 0.55 * s,
            Shape::Diamond => dx.abs() + dy.abs() <= s,
            Shape::HBar => dy.abs() <= bar && dx.abs() <= s,
            Shape::VBar => dx.abs() <= bar && dy.abs() <= s,
            Shape::Checker => {
                dx.abs() <= s && dy.abs() <= s && {
                    let cx = ((dx + s) / (0.5 * s)).floor() as i64;
                    let cy = ((dy + s) / (0.5 * s)).floor() as i64;
                    (cx + cy) % 2 == 0
                }
            }
            Shape::Dots => {
                let g = 0.6 * s;
                let fx = (dx / g).round() * g - dx;
                let fy = (dy / g).round() * g - dy;
                dx.abs() <= s && dy.abs() <= s && (fx * fx + fy * fy).sqrt() <= 0.22 * s
            }
            Shape::Crescent => {
                let ox = dx - 0.45 * s;
                r <= s && (ox * ox + dy * dy).sqrt() > 0.8 * s
            }
            Shape::Stripes => {
                dx.abs() <= s && dy.abs() <= s && (((dx + dy + 4.0 * s) / (0.5 * s)).floor() as i64) % 2 == 0
            }
        }
    }
}

const BG_RANGE: (f64, f64) = (0.0, 0.15);
const FG_RANGE: (f64, f64) = (0.85, 1.0);
/// Half-width of the uniform per-pixel grain of the source domain.
const GRAIN: f64 = 0.05;

/// Renders one image into `out` (CHW order).
pub fn render(shape: Shape, rng: &mut impl Rng, out: &mut [f64]) {
    debug_assert_eq!(out.len(), PIXELS);
    let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let cx = c + rng.random_range(-2.0..2.0);
    let cy = c + rng.random_range(-2.0..2.0);
    let s = rng.random_range(4.5..6.5);
    let bg = rng.random_range(BG_RANGE.0..BG_RANGE.1);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(FG_RANGE.0..FG_RANGE.1));
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    const SS: usize = 4;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut cover = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - 0.5;
                    if shape.contains(px - cx, py - cy, s) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SS * SS) as f64;
            for ch in 0..CHANNELS {
                let grain = GRAIN * (rng.random::<f64>() - 0.5) * 2.0;
                let v = (1.0 - cover) * (bg + bg_tint[ch]) + cover * fg[ch] + grain;
                out[ch * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapesToyConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ShapesToyConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 512,
            test_per_class: 128,
            seed: 0,
        }
    }
}

/// Images `[N, 3, 16, 16]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesToy {
    pub config: ShapesToyConfig,
    pub vocab: ClassVocabulary,
    pub train: Dataset,
    pub test: Dataset,
}

fn render_split(shapes: &[Shape], per_class: usize, seed: u64, split: u64) -> Dataset {
    let n = shapes.len() * per_class;
    // Interleave classes so any prefix is close to balanced.
    let labels: Vec<usize> = (0..n).map(|i| i % shapes.len()).collect();
    let rows = par::map_range(Execution::available(), n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, split, i as u64]));
        let mut px = vec![0.0; PIXELS];
        render(shapes[labels[i]], &mut rng, &mut px);
        px
    });
    let data = rows.into_iter().flatten().collect();
    Dataset {
        images: Tensor::new(vec![n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
            .expect("rendered pixel count"),
        labels,
    }
}

pub fn generate_dataset(config: &ShapesToyConfig) -> Result<ShapesToy> {
    if config.num_classes == 0 || config.num_classes > SHAPES.len() {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 1..={}, got {}",
            SHAPES.len(),
            config.num_classes
        )));
    }
    let shapes = &SHAPES[..config.num_classes];
    let vocab = ClassVocabulary::new(shapes.iter().map(|s| s.name()))?;
    Ok(ShapesToy {
        config: *config,
        vocab,
        train: render_split(shapes, config.train_per_class, config.seed, 0),
        test: render_split(shapes, config.test_per_class, config.seed, 1),
    })
}

/// Out-of-distribution images from the disjoint generator set; labels index [`OOD_SHAPES`].
pub fn generate_ood(count: usize, seed: u64) -> Dataset {
    let per = count.div_ceil(OOD_SHAPES.len());
    let full = render_split(&OOD_SHAPES, per, seed, 2);
    let idx: Vec<usize> = (0..count).collect();
    full.subset(&idx)
}

impl ShapesToy {
    pub fn to_blocks(&self) -> BlockSet {
        let c = &self.config;
        let mut b = BlockSet::new();
        b.push(
            "meta.config",
            Tensor::vector(vec![
                c.num_classes as f64,
                c.train_per_class as f64,
                c.test_per_class as f64,
                c.seed as f64,
            ]),
        );
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            b.push(format!("{name}.images"), split.images.clone());
            b.push(
                format!("{name}.labels"),
                Tensor::vector(split.labels.iter().map(|&l| l as f64).collect()),
            );
        }
        b
    }

    pub fn from_blocks(b: &BlockSet) -> Result<Self> {
        let meta = b.require("meta.config")?.data();
        if meta.len() != 4 {
            return Err(Error::Format("meta.config must have 4 entries".into()));
        }
        let config = ShapesToyConfig {
            num_classes: meta[0] as usize,
            train_per_class: meta[1] as usize,
            test_per_class: meta[2] as usize,
            seed: meta[3] as u64,
        };
        let vocab = ClassVocabulary::new(SHAPES[..config.num_classes].iter().map(|s| s.name()))?;
        let split = |name: &str| -> Result<Dataset> {
            let images = b.require(&format!("{name}.images"))?.clone();
            let labels = b
                .require(&format!("{name}.labels"))?
                .data()
                .iter()
                .map(|&l| l as usize)
                .collect();
            Ok(Dataset { images, labels })
        };
        Ok(Self {
            config,
            vocab,
            train: split("train")?,
            test: split("test")?,
        })
    }
}
