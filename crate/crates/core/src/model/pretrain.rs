// SPDX-License-Identifier: Apache-2.0

//! Contrastive pretraining on the clean source split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DualEncoderModel, ParamFilter};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::prompting::{render_single, ClassVocabulary};
use crate::tensor::Tensor;

/// Upper clamp on the learnable logit scale (`exp(4.6) ≈ 100`).
const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Symmetric InfoNCE between images and their class prompts.
///
/// Samples sharing a class are all positives for each other: the target row
/// for image `i` is uniform over batch columns with the same label, and the
/// same matrix serves the text-to-image direction.
pub fn pretrain_contrastive(
    model: &mut DualEncoderModel,
    data: &Dataset,
    vocab: &ClassVocabulary,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidArgument(format!("bad pretraining batch size {}", cfg.batch_size)));
    }
    let prompts = (0..vocab.len())
        .map(|c| render_single(vocab, c))
        .collect::<Result<Vec<_>>>()?;
    let names = model.params().names().to_vec();
    let mut state = AdamState::new(names.iter().map(|n| model.params().get(n).unwrap().len()));
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let images = data.images.select_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

        let tape = Tape::new();
        let bound = model.bind(&tape, ParamFilter::All);
        let forward = || -> Result<_> {
            let zi = model.encode_image(&bound, &images)?.l2_normalize_rows()?;
            let zc = model.encode_text(&bound, &prompts)?.l2_normalize_rows()?;
            let zt = zc.gather_rows(&labels)?;
            let logits = zi.matmul_t(zt)?.mul_scalar(bound.var("logit_scale").exp())?;
            let targets = tape.constant(positive_targets(&labels));
            Ok(logits
                .cross_entropy_rows(targets)?
                .add(logits.transpose().cross_entropy_rows(targets)?)?
                .scale(0.5))
        };
        // Non-finite parameters surface as numeric errors inside the forward pass.
        let loss = forward().map_err(|e| if e.is_numeric() { Error::Diverged { step, loss: f64::NAN } } else { e })?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        losses.push(value);

        let grads = tape.backward(loss)?;
        let grad_list: Vec<Tensor> = names.iter().map(|n| grads.wrt(bound.var(n))).collect();
        let store = model.params_mut();
        let mut params: Vec<&mut Tensor> = store.tensors.iter_mut().collect();
        adam_step(&mut params, &grad_list, &mut state, &adam)?;
        let s = store.get_mut("logit_scale").unwrap();
        s.data_mut()[0] = s.data()[0].clamp(0.0, MAX_LOG_SCALE);
    }
    Ok(PretrainReport { losses })
}

fn positive_targets(labels: &[usize]) -> Tensor {
    let b = labels.len();
    let mut t = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let count = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        for j in 0..b {
            if labels[j] == labels[i] {
                t.set(i, j, 1.0 / count);
            }
        }
    }
    t
}

/// Top-1 zero-shot accuracy with single-class prompts.
pub fn zero_shot_accuracy(model: &DualEncoderModel, data: &Dataset, vocab: &ClassVocabulary) -> Result<f64> {
    let classes = model.class_prompt_embeddings(vocab)?;
    let mut correct = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let z = model.embed_images(&data.images.select_rows(chunk))?;
        let probs = crate::tta::zero_shot_probs(&z, &classes, model.tau())?;
        for (r, &i) in chunk.iter().enumerate() {
            if crate::tta::argmax(probs.row(r)) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
