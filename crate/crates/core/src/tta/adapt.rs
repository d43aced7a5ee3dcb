// SPDX-License-Identifier: Apache-2.0

//! The per-batch adaptation loop shared by the transductive objective and the
//! entropy baseline.

use std::collections::HashMap;
use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, ParamFilter};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::prompting::{render_multi, ClassVocabulary};
use crate::tensor::Tensor;

use super::{
    average_prompt_embeddings, instance_topk, normalize_rows, softmax_rows, AdaptationConfig, QOrientation,
    TargetMode,
};

/// What an objective sees at one iteration.
pub struct ObjectiveInputs<'a, 't> {
    pub model: &'a DualEncoderModel,
    /// Unit-normalized image embeddings of the rows used for adaptation.
    pub z_v: Var<'t>,
    /// Current class probabilities of the same rows (values only).
    pub probs: &'a Tensor,
    /// Unit-normalized single-class prompt embeddings, `[C, D]`.
    pub class_unit: &'a Tensor,
    pub tau: f64,
}

/// A differentiable per-batch loss.
pub trait Objective {
    fn loss<'t>(&mut self, inputs: &ObjectiveInputs<'_, 't>) -> Result<Var<'t>>;
}

/// Unit text embeddings keyed by prompt string. The text encoder is frozen
/// during adaptation, so an entry never goes stale within a session.
#[derive(Debug, Default, Clone)]
pub struct PromptCache {
    rows: HashMap<String, Vec<f64>>,
}

impl PromptCache {
    pub fn embed(&mut self, model: &DualEncoderModel, prompts: &[String]) -> Result<Tensor> {
        let missing: Vec<String> = {
            let mut m: Vec<String> = prompts.iter().filter(|p| !self.rows.contains_key(*p)).cloned().collect();
            m.sort();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let emb = normalize_rows(&model.embed_text(&missing)?)?;
            for (i, p) in missing.into_iter().enumerate() {
                self.rows.insert(p, emb.row(i).to_vec());
            }
        }
        let rows: Vec<Vec<f64>> = prompts.iter().map(|p| self.rows[p].clone()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Builds the transductive cross-entropy for one iteration: top-k instance
/// prompts from `probs`, pseudo-labels `Q` and predictions `P̂`.
pub fn clipartt_objective<'t>(
    inputs: &ObjectiveInputs<'_, 't>,
    vocab: &ClassVocabulary,
    config: &AdaptationConfig,
    cache: &mut PromptCache,
) -> Result<Var<'t>> {
    let tape = inputs.z_v.tape();
    let tau = config.tau;
    let topk = instance_topk(inputs.probs, config.top_k)?;
    let prompts = topk.iter().map(|ids| render_multi(vocab, ids)).collect::<Result<Vec<_>>>()?;
    let z_t = cache.embed(inputs.model, &prompts)?;
    let z_v = inputs.z_v;
    let b = z_t.rows();

    let text_side = match config.target_mode {
        TargetMode::AvgPrompt => average_prompt_embeddings(inputs.class_unit, &topk)?,
        _ => z_t.clone(),
    };
    let s_t = text_side.matmul_t(&text_side)?;
    let q = if config.detach_targets {
        let zv = z_v.value();
        let s_v = zv.matmul_t(&zv)?;
        tape.constant(super::build_target(config.target_mode, &s_v, &s_t, tau)?)
    } else {
        let s_v = z_v.matmul_t(z_v)?;
        match config.target_mode {
            TargetMode::Identity => tape.constant(Tensor::eye(b)),
            TargetMode::ImageOnly => s_v.softmax_cols(tau)?,
            TargetMode::TextOnly => tape.constant(super::softmax_cols(&s_t, tau)),
            TargetMode::ImageText | TargetMode::AvgPrompt => {
                s_v.add(tape.constant(s_t))?.scale(0.5).softmax_cols(tau)?
            }
        }
    };
    let q = match config.orientation {
        QOrientation::AsWritten => q,
        QOrientation::Transposed => q.transpose(),
    };
    let logits = z_v.matmul_t(tape.constant(z_t))?.scale(1.0 / tau);
    logits.cross_entropy_rows(q)
}

struct Clipartt<'a> {
    vocab: &'a ClassVocabulary,
    config: &'a AdaptationConfig,
    cache: PromptCache,
}

impl Objective for Clipartt<'_> {
    fn loss<'t>(&mut self, inputs: &ObjectiveInputs<'_, 't>) -> Result<Var<'t>> {
        clipartt_objective(inputs, self.vocab, self.config, &mut self.cache)
    }
}

/// Everything one adaptation session produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationOutcome {
    /// Zero-shot probabilities of the unadapted model, all rows.
    pub initial: Tensor,
    /// Probabilities after each update; `predictions.len() == iterations`.
    pub predictions: Vec<Tensor>,
    /// Loss evaluated before each update.
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
    /// `(name, ‖θ_final − θ_initial‖₂)` for every adapted tensor.
    pub ln_deltas: Vec<(String, f64)>,
    /// Parameters whose values differed from the start at the end of adaptation.
    pub touched: Vec<String>,
}

impl AdaptationOutcome {
    /// Probabilities after the last update (the initial ones when nothing ran).
    pub fn final_probs(&self) -> &Tensor {
        self.predictions.last().unwrap_or(&self.initial)
    }
}

/// Optimization settings common to every objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub lr: f64,
    pub iterations: usize,
    pub tau: f64,
    pub episodic: bool,
}

impl From<&AdaptationConfig> for SessionConfig {
    fn from(c: &AdaptationConfig) -> Self {
        Self {
            lr: c.lr,
            iterations: c.iterations,
            tau: c.tau,
            episodic: c.episodic,
        }
    }
}

/// Runs `iterations` Adam steps of `objective` on the visual LayerNorm
/// parameters. `adapt_rows` restricts the loss to a subset of rows;
/// predictions always cover the whole batch. With `episodic` the model is
/// restored afterwards (also on error).
pub fn run_session<O: Objective>(
    model: &mut DualEncoderModel,
    images: &Tensor,
    adapt_rows: Option<&[usize]>,
    class_unit: &Tensor,
    session: SessionConfig,
    objective: &mut O,
) -> Result<AdaptationOutcome> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(rows) = adapt_rows {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no rows selected for adaptation".into()));
        }
    }
    let snapshot = model.params().clone();
    let start = Instant::now();
    let result = session_loop(model, images, adapt_rows, class_unit, session, objective);
    let finish = |model: &mut DualEncoderModel| -> Result<(Vec<(String, f64)>, Vec<String>)> {
        let mut deltas = Vec::new();
        for name in model.ln_parameter_names() {
            let (a, b) = (&snapshot.get(&name).unwrap(), model.params().get(&name).unwrap());
            let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            deltas.push((name, d.sqrt()));
        }
        let touched = model.params().changed_names(&snapshot);
        if session.episodic {
            model.restore(&snapshot)?;
        }
        Ok((deltas, touched))
    };
    match result {
        Ok((initial, predictions, losses)) => {
            let (ln_deltas, touched) = finish(model)?;
            Ok(AdaptationOutcome {
                initial,
                predictions,
                losses,
                wall_seconds: start.elapsed().as_secs_f64(),
                ln_deltas,
                touched,
            })
        }
        Err(e) => {
            finish(model)?;
            Err(e)
        }
    }
}

type LoopOutput = (Tensor, Vec<Tensor>, Vec<f64>);

fn session_loop<O: Objective>(
    model: &mut DualEncoderModel,
    images: &Tensor,
    adapt_rows: Option<&[usize]>,
    class_unit: &Tensor,
    session: SessionConfig,
    objective: &mut O,
) -> Result<LoopOutput> {
    let adam = AdamConfig::with_lr(session.lr);
    let names = model.ln_parameter_names();
    let sizes: Vec<usize> = names.iter().map(|n| model.params().get(n).unwrap().len()).collect();
    let mut state = AdamState::new(sizes);
    let mut predictions = Vec::with_capacity(session.iterations);
    let mut losses = Vec::with_capacity(session.iterations);
    let mut initial = None;

    for iteration in 0..=session.iterations {
        let tape = Tape::new();
        let bound = model.bind(&tape, ParamFilter::VisualLayerNorm);
        let z_all = model.encode_image(&bound, images)?.l2_normalize_rows()?;
        let probs_all = softmax_rows(&z_all.value().matmul_t(class_unit)?, session.tau);
        if iteration == 0 {
            initial = Some(probs_all.clone());
        } else {
            predictions.push(probs_all.clone());
        }
        if iteration == session.iterations {
            break;
        }
        let (z_v, probs) = match adapt_rows {
            Some(rows) => (z_all.gather_rows(rows)?, probs_all.select_rows(rows)),
            None => (z_all, probs_all),
        };
        let inputs = ObjectiveInputs {
            model,
            z_v,
            probs: &probs,
            class_unit,
            tau: session.tau,
        };
        let loss = objective.loss(&inputs)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let trainable = bound.trainable();
        let grad_list: Vec<Tensor> = trainable.iter().map(|(_, v)| grads.wrt(*v)).collect();
        let grad_names: Vec<&String> = trainable.iter().map(|(n, _)| n).collect();
        debug_assert!(grad_names.iter().zip(&names).all(|(a, b)| *a == b));
        drop(bound);
        let mut ln = model.collect_ln_parameters();
        let mut params = ln.tensors_mut();
        adam_step(&mut params, &grad_list, &mut state, &adam)?;
    }
    Ok((initial.expect("loop runs at least once"), predictions, losses))
}

/// Adapts the visual LayerNorm parameters on one batch with the transductive
/// objective and returns per-iteration predictions over `vocab`.
pub fn adapt_batch(
    model: &mut DualEncoderModel,
    images: &Tensor,
    vocab: &ClassVocabulary,
    config: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    adapt_batch_masked(model, images, None, vocab, config)
}

/// As [`adapt_batch`], with the loss restricted to `adapt_rows`.
pub fn adapt_batch_masked(
    model: &mut DualEncoderModel,
    images: &Tensor,
    adapt_rows: Option<&[usize]>,
    vocab: &ClassVocabulary,
    config: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    config.validate(vocab.len())?;
    let class_unit = normalize_rows(&model.class_prompt_embeddings(vocab)?)?;
    let mut objective = Clipartt {
        vocab,
        config,
        cache: PromptCache::default(),
    };
    run_session(model, images, adapt_rows, &class_unit, config.into(), &mut objective)
}
