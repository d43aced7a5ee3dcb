// SPDX-License-Identifier: Apache-2.0

//! Batch samplers over a labelled test split.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Iid,
    /// Each batch holds samples from exactly `classes` randomly chosen classes.
    Imbalanced { classes: usize },
    /// OOD images are appended so they make up `ood_fraction` of every batch.
    OpenSet { ood_fraction: f64 },
    /// `adapt_fraction` of each batch drives adaptation; the rest is held out.
    Split { adapt_fraction: f64 },
}

impl FromStr for Sampler {
    type Err = Error;

    /// `iid`, `imbalanced:C`, `open_set:F` or `split:F`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = s.split_once(':').map_or((s, None), |(h, a)| (h, Some(a)));
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::Config(format!("sampler `{head}` needs an argument")))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sampler argument in `{s}`")))
        };
        match head {
            "iid" => Ok(Sampler::Iid),
            "imbalanced" => Ok(Sampler::Imbalanced {
                classes: num(arg)? as usize,
            }),
            "open_set" => Ok(Sampler::OpenSet {
                ood_fraction: num(arg)?,
            }),
            "split" => Ok(Sampler::Split {
                adapt_fraction: num(arg)?,
            }),
            _ => Err(Error::Config(format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchPlan {
    pub sampler: Sampler,
    pub batch_size: usize,
}

/// One planned batch. `indices` point into the test split, `ood_indices`
/// into the OOD pool; rows are laid out in-distribution first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub ood_indices: Vec<usize>,
    /// Rows that count toward accuracy (the held-out rows for the split sampler).
    pub eval_mask: Vec<bool>,
    /// Rows that take part in the adaptation loss.
    pub adapt_mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len() + self.ood_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn plain(indices: Vec<usize>) -> Self {
        let n = indices.len();
        Self {
            indices,
            ood_indices: Vec::new(),
            eval_mask: vec![true; n],
            adapt_mask: vec![true; n],
        }
    }
}

/// Plans batches over `labels` (the test split). `ood_pool` is the number of
/// available OOD images, only consulted by the open-set sampler.
pub fn plan_batches(
    labels: &[usize],
    num_classes: usize,
    plan: &BatchPlan,
    ood_pool: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let b = plan.batch_size;
    if b == 0 || b > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} must be in 1..={}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);

    match plan.sampler {
        Sampler::Iid => Ok(order.chunks(b).map(|c| Batch::plain(c.to_vec())).collect()),
        Sampler::Imbalanced { classes } => {
            if classes == 0 || classes > num_classes {
                return Err(Error::InvalidArgument(format!(
                    "imbalanced sampler needs 1..={num_classes} classes, got {classes}"
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for &i in &order {
                pools[labels[i]].push(i);
            }
            let mut batches = Vec::new();
            loop {
                let mut live: Vec<usize> = (0..num_classes).filter(|&c| !pools[c].is_empty()).collect();
                if live.len() < classes {
                    break;
                }
                live.shuffle(&mut rng);
                let chosen = &live[..classes];
                let available: usize = chosen.iter().map(|&c| pools[c].len()).sum();
                if available < b {
                    break;
                }
                // Round-robin over the chosen classes keeps them all present.
                let mut idx = Vec::with_capacity(b);
                let mut k = 0;
                while idx.len() < b {
                    let c = chosen[k % classes];
                    if let Some(i) = pools[c].pop() {
                        idx.push(i);
                    }
                    k += 1;
                }
                batches.push(Batch::plain(idx));
            }
            Ok(batches)
        }
        Sampler::OpenSet { ood_fraction } => {
            if !(0.0..1.0).contains(&ood_fraction) {
                return Err(Error::InvalidArgument(format!("ood_fraction must be in [0, 1), got {ood_fraction}")));
            }
            let per = (b as f64 * ood_fraction / (1.0 - ood_fraction)).round() as usize;
            let mut ood: Vec<usize> = (0..ood_pool).collect();
            ood.shuffle(&mut rng);
            let batches: Vec<_> = order.chunks(b).collect();
            if per * batches.len() > ood_pool {
                return Err(Error::InvalidArgument(format!(
                    "open-set plan needs {} OOD images, pool has {ood_pool}",
                    per * batches.len()
                )));
            }
            Ok(batches
                .into_iter()
                .enumerate()
                .map(|(k, c)| {
                    let n = c.len();
                    let mut batch = Batch::plain(c.to_vec());
                    batch.ood_indices = ood[k * per..(k + 1) * per].to_vec();
                    batch.eval_mask.extend(std::iter::repeat_n(false, per));
                    batch.adapt_mask.extend(std::iter::repeat_n(true, per));
                    debug_assert_eq!(batch.eval_mask.len(), n + per);
                    batch
                })
                .collect())
        }
        Sampler::Split { adapt_fraction } => {
            if !(0.0 < adapt_fraction && adapt_fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!("adapt_fraction must be in (0, 1], got {adapt_fraction}")));
            }
            Ok(order
                .chunks(b)
                .map(|c| {
                    let n = c.len();
                    let adapt = (n as f64 * adapt_fraction).round() as usize;
                    let mut batch = Batch::plain(c.to_vec());
                    batch.adapt_mask = (0..n).map(|i| i < adapt).collect();
                    if adapt < n {
                        batch.eval_mask = (0..n).map(|i| i >= adapt).collect();
                    }
                    batch
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n_per: usize, classes: usize) -> Vec<usize> {
        (0..n_per * classes).map(|i| i % classes).collect()
    }

    #[test]
    fn iid_partitions_every_index_once() {
        let l = labels(20, 8);
        let plan = BatchPlan { sampler: Sampler::Iid, batch_size: 32 };
        let batches = plan_batches(&l, 8, &plan, 0, 1).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..160).collect::<Vec<_>>());
    }

    #[test]
    fn imbalanced_restricts_label_set() {
        let l = labels(128, 8);
        let plan = BatchPlan { sampler: Sampler::Imbalanced { classes: 2 }, batch_size: 64 };
        let batches = plan_batches(&l, 8, &plan, 0, 5).unwrap();
        assert!(!batches.is_empty());
        for b in &batches {
            let mut set: Vec<usize> = b.indices.iter().map(|&i| l[i]).collect();
            set.sort();
            set.dedup();
            assert!(set.len() <= 2);
            assert_eq!(b.len(), 64);
        }
        let bad = BatchPlan { sampler: Sampler::Imbalanced { classes: 9 }, batch_size: 64 };
        assert!(plan_batches(&l, 8, &bad, 0, 5).is_err());
    }

    #[test]
    fn open_set_appends_ood_rows() {
        let l = labels(32, 8);
        let plan = BatchPlan { sampler: Sampler::OpenSet { ood_fraction: 0.5 }, batch_size: 128 };
        let batches = plan_batches(&l, 8, &plan, 256, 2).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.indices.len(), 128);
            assert_eq!(b.ood_indices.len(), 128);
            assert_eq!(b.eval_mask.iter().filter(|&&m| m).count(), 128);
            assert_eq!(b.len(), 256);
        }
    }

    #[test]
    fn split_reserves_held_out_rows() {
        let l = labels(20, 8);
        let plan = BatchPlan { sampler: Sampler::Split { adapt_fraction: 0.75 }, batch_size: 160 };
        let batches = plan_batches(&l, 8, &plan, 0, 2).unwrap();
        assert_eq!(batches.len(), 1);
        let adapt = batches[0].adapt_mask.iter().filter(|&&m| m).count();
        assert_eq!((adapt, 160 - adapt), (120, 40));
        let eval: Vec<bool> = batches[0].adapt_mask.iter().map(|m| !m).collect();
        assert_eq!(batches[0].eval_mask, eval);
    }

    #[test]
    fn sampler_parsing() {
        assert_eq!("iid".parse::<Sampler>().unwrap(), Sampler::Iid);
        assert_eq!("imbalanced:3".parse::<Sampler>().unwrap(), Sampler::Imbalanced { classes: 3 });
        assert_eq!("split:0.75".parse::<Sampler>().unwrap(), Sampler::Split { adapt_fraction: 0.75 });
        assert!("open_set".parse::<Sampler>().is_err());
        assert!("shuffle".parse::<Sampler>().is_err());
    }
}
