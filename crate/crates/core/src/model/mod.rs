// SPDX-License-Identifier: Apache-2.0

//! Toy dual encoder: a patch-MLP visual tower and a bag-of-tokens text tower
//! projecting into a shared embedding space.
//!
//! Visual: patchify → linear → `depth` × [LN → linear → GELU → linear] residual
//! blocks applied per patch → mean over patches → final LN → projection.
//! Text: token embedding → mean over tokens → one residual
//! [LN → linear → GELU → linear] block → projection.

mod checkpoint;
mod pretrain;

pub use pretrain::{pretrain_contrastive, zero_shot_accuracy, PretrainConfig, PretrainReport};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::prompting::{render_single, ClassVocabulary, Tokenizer, DEFAULT_MAX_TOKENS};
use crate::tensor::Tensor;

/// Initial contrastive logit scale, `ln(1 / 0.07)`.
pub const INIT_LOG_SCALE: f64 = 4.605_170_185_988_092;

/// Standard deviation of the token-embedding initialization.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub text_width: usize,
    pub max_tokens: usize,
    /// Test-time softmax temperature.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 4,
            width: 64,
            depth: 2,
            mlp_hidden: 64,
            embed_dim: 32,
            text_width: 64,
            max_tokens: DEFAULT_MAX_TOKENS,
            tau: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.image_size.is_multiple_of(self.patch)
            && self.width > 0
            && self.embed_dim > 0
            && self.text_width > 0
            && self.mlp_hidden > 0
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid model config {self:?}")))
        }
    }

    pub(crate) fn to_vec(self) -> Vec<f64> {
        vec![
            self.image_size as f64,
            self.channels as f64,
            self.patch as f64,
            self.width as f64,
            self.depth as f64,
            self.mlp_hidden as f64,
            self.embed_dim as f64,
            self.text_width as f64,
            self.max_tokens as f64,
            self.tau,
        ]
    }

    pub(crate) fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 10 {
            return Err(Error::Format(format!("model config needs 10 values, got {}", v.len())));
        }
        let c = Self {
            image_size: v[0] as usize,
            channels: v[1] as usize,
            patch: v[2] as usize,
            width: v[3] as usize,
            depth: v[4] as usize,
            mlp_hidden: v[5] as usize,
            embed_dim: v[6] as usize,
            text_width: v[7] as usize,
            max_tokens: v[8] as usize,
            tau: v[9],
        };
        c.validate()?;
        Ok(c)
    }
}

/// Which parameters become differentiable leaves when a model is bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    /// Only the visual encoder's LayerNorm gamma/beta.
    VisualLayerNorm,
    All,
    Frozen,
}

impl ParamFilter {
    pub fn admits(self, name: &str) -> bool {
        match self {
            ParamFilter::VisualLayerNorm => is_visual_ln(name),
            ParamFilter::All => true,
            ParamFilter::Frozen => false,
        }
    }
}

fn is_visual_ln(name: &str) -> bool {
    name.starts_with("visual.")
        && (name.ends_with("ln.gamma") || name.ends_with("ln.beta"))
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// True when every parameter is bitwise identical.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Names of parameters that differ bitwise from `other`.
    pub fn changed_names(&self, other: &ParamStore) -> Vec<String> {
        self.iter()
            .filter(|(n, t)| {
                other.get(n).is_none_or(|o| {
                    o.data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits())
                })
            })
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

/// Mutable view of the visual LayerNorm affine parameters.
pub struct LnParams<'a> {
    entries: Vec<(&'a str, &'a mut Tensor)>,
}

impl<'a> LnParams<'a> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&'a str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'a str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (*n, &mut **t))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| &mut **t).collect()
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
    trainable: Vec<usize>,
}

impl<'t> Bound<'t> {
    fn var(&self, name: &str) -> Var<'t> {
        self.vars[self.index[name]]
    }

    /// `(name, var)` for every parameter admitted by the bind filter, in store order.
    pub fn trainable(&self) -> Vec<(String, Var<'t>)> {
        let mut names: Vec<(&String, &usize)> = self.index.iter().collect();
        names.sort_by_key(|(_, &i)| i);
        names
            .into_iter()
            .filter(|(_, i)| self.trainable.contains(i))
            .map(|(n, &i)| (n.clone(), self.vars[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("init shape")
}

impl DualEncoderModel {
    pub fn new(config: ModelConfig, vocab: &ClassVocabulary, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::for_classes(vocab, config.max_tokens)?;
        Self::with_tokenizer(config, tokenizer, seed)
    }

    pub fn with_tokenizer(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let (w, h, d, tw) = (config.width, config.mlp_hidden, config.embed_dim, config.text_width);
        let pd = config.patch_dim();

        p.insert("visual.patch_embed.weight", uniform(&mut rng, &[pd, w], pd));
        p.insert("visual.patch_embed.bias", Tensor::zeros(&[w]));
        for l in 0..config.depth {
            p.insert(format!("visual.blocks.{l}.ln.gamma"), Tensor::full(&[w], 1.0));
            p.insert(format!("visual.blocks.{l}.ln.beta"), Tensor::zeros(&[w]));
            p.insert(format!("visual.blocks.{l}.fc1.weight"), uniform(&mut rng, &[w, h], w));
            p.insert(format!("visual.blocks.{l}.fc1.bias"), Tensor::zeros(&[h]));
            p.insert(format!("visual.blocks.{l}.fc2.weight"), uniform(&mut rng, &[h, w], h));
            p.insert(format!("visual.blocks.{l}.fc2.bias"), Tensor::zeros(&[w]));
        }
        p.insert("visual.final_ln.gamma", Tensor::full(&[w], 1.0));
        p.insert("visual.final_ln.beta", Tensor::zeros(&[w]));
        p.insert("visual.proj.weight", uniform(&mut rng, &[w, d], w));

        let normal = Normal::new(0.0, TOKEN_INIT_STD).expect("valid std");
        let v = tokenizer.size();
        let table: Vec<f64> = (0..v * tw).map(|_| normal.sample(&mut rng)).collect();
        p.insert("text.token_embed", Tensor::matrix(v, tw, table)?);
        p.insert("text.mlp.ln.gamma", Tensor::full(&[tw], 1.0));
        p.insert("text.mlp.ln.beta", Tensor::zeros(&[tw]));
        p.insert("text.mlp.fc1.weight", uniform(&mut rng, &[tw, h], tw));
        p.insert("text.mlp.fc1.bias", Tensor::zeros(&[h]));
        p.insert("text.mlp.fc2.weight", uniform(&mut rng, &[h, tw], h));
        p.insert("text.mlp.fc2.bias", Tensor::zeros(&[tw]));
        p.insert("text.proj.weight", uniform(&mut rng, &[tw, d], tw));
        p.insert("logit_scale", Tensor::scalar(INIT_LOG_SCALE));

        Ok(Self {
            config,
            tokenizer,
            params: p,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Overwrites all parameters from a snapshot with the same layout.
    pub fn restore(&mut self, snapshot: &ParamStore) -> Result<()> {
        if snapshot.names != self.params.names {
            return Err(Error::InvalidArgument("snapshot layout does not match model".into()));
        }
        self.params.tensors.clone_from(&snapshot.tensors);
        Ok(())
    }

    /// Names of the visual encoder's LayerNorm gammas and betas, in order.
    pub fn ln_parameter_names(&self) -> Vec<String> {
        self.params
            .names
            .iter()
            .filter(|n| is_visual_ln(n))
            .cloned()
            .collect()
    }

    /// Mutable view of exactly the visual encoder's LayerNorm gamma/beta.
    pub fn collect_ln_parameters(&mut self) -> LnParams<'_> {
        let entries = self
            .params
            .names
            .iter()
            .zip(self.params.tensors.iter_mut())
            .filter(|(n, _)| is_visual_ln(n))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        LnParams { entries }
    }

    /// Records every parameter on `tape`; those admitted by `filter` require gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, filter: ParamFilter) -> Bound<'t> {
        let mut trainable = Vec::new();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                if filter.admits(name) {
                    trainable.push(i);
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.params.index.clone(),
            trainable,
        }
    }

    /// Rearranges `[B, C, H, W]` images into `[B·P, C·p·p]` patch rows.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "expected [B, {}, {}, {}], got {shape:?}",
                    c.channels, c.image_size, c.image_size
                ),
            ));
        }
        let b = shape[0];
        let (s, p) = (c.image_size, c.patch);
        let g = s / p;
        let pd = c.patch_dim();
        let mut out = vec![0.0; b * g * g * pd];
        let src = images.data();
        for img in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    let row = (img * g * g + gy * g + gx) * pd;
                    let mut k = 0;
                    for ch in 0..c.channels {
                        for y in 0..p {
                            let base = img * c.pixels() + ch * s * s + (gy * p + y) * s + gx * p;
                            out[row + k..row + k + p].copy_from_slice(&src[base..base + p]);
                            k += p;
                        }
                    }
                }
            }
        }
        Tensor::matrix(b * g * g, pd, out)
    }

    /// Unnormalized image embeddings `[B, D]` recorded on `bound`'s tape.
    pub fn encode_image<'t>(&self, bound: &Bound<'t>, images: &Tensor) -> Result<Var<'t>> {
        let patches = self.patchify(images)?;
        let tape = bound.vars[0].tape();
        let x = tape.constant(patches);
        let mut h = x
            .matmul(bound.var("visual.patch_embed.weight"))?
            .add_row(bound.var("visual.patch_embed.bias"))?;
        for l in 0..self.config.depth {
            h = residual_mlp(bound, &format!("visual.blocks.{l}"), h)?;
        }
        let pooled = h.group_mean(self.config.patches_per_image())?;
        let normed = pooled.layer_norm(
            bound.var("visual.final_ln.gamma"),
            bound.var("visual.final_ln.beta"),
            LN_EPS,
        )?;
        normed.matmul(bound.var("visual.proj.weight"))
    }

    /// Unnormalized text embeddings `[n, D]`, one row per token sequence.
    pub fn encode_tokens<'t>(&self, bound: &Bound<'t>, sequences: &[Vec<usize>]) -> Result<Var<'t>> {
        if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("encode_text needs non-empty sequences".into()));
        }
        let mut flat = Vec::new();
        let mut offsets = vec![0];
        for s in sequences {
            if let Some(&bad) = s.iter().find(|&&t| t >= self.tokenizer.size()) {
                return Err(Error::UnknownToken(format!("#{bad}")));
            }
            flat.extend_from_slice(s);
            offsets.push(flat.len());
        }
        let tokens = bound.var("text.token_embed").gather_rows(&flat)?;
        let pooled = tokens.segment_mean(&offsets)?;
        let h = residual_mlp(bound, "text.mlp", pooled)?;
        h.matmul(bound.var("text.proj.weight"))
    }

    pub fn encode_text<'t>(&self, bound: &Bound<'t>, prompts: &[String]) -> Result<Var<'t>> {
        let seqs = prompts
            .iter()
            .map(|p| self.tokenizer.encode(p))
            .collect::<Result<Vec<_>>>()?;
        self.encode_tokens(bound, &seqs)
    }

    /// Gradient-free image embeddings.
    pub fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, ParamFilter::Frozen);
        Ok((*self.encode_image(&bound, images)?.value()).clone())
    }

    /// Gradient-free text embeddings.
    pub fn embed_text(&self, prompts: &[String]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, ParamFilter::Frozen);
        Ok((*self.encode_text(&bound, prompts)?.value()).clone())
    }

    /// Embeddings of `"a photo of a {class}"` for every class, `[C, D]`.
    pub fn class_prompt_embeddings(&self, vocab: &ClassVocabulary) -> Result<Tensor> {
        let prompts = (0..vocab.len())
            .map(|c| render_single(vocab, c))
            .collect::<Result<Vec<_>>>()?;
        self.embed_text(&prompts)
    }
}

fn residual_mlp<'t>(bound: &Bound<'t>, prefix: &str, h: Var<'t>) -> Result<Var<'t>> {
    let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let inner = h
        .layer_norm(v("ln.gamma"), v("ln.beta"), LN_EPS)?
        .matmul(v("fc1.weight"))?
        .add_row(v("fc1.bias"))?
        .gelu()
        .matmul(v("fc2.weight"))?
        .add_row(v("fc2.bias"))?;
    h.add(inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gelu;
    use crate::data::shapes::{generate_dataset, ShapesToyConfig};

    fn fixture() -> (DualEncoderModel, ShapesToySmall) {
        let data = generate_dataset(&ShapesToyConfig {
            train_per_class: 1,
            test_per_class: 2,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let model = DualEncoderModel::new(ModelConfig::default(), &data.vocab, 7).unwrap();
        (model, ShapesToySmall { images: data.test.images, vocab: data.vocab })
    }

    struct ShapesToySmall {
        images: Tensor,
        vocab: ClassVocabulary,
    }

    #[test]
    fn ln_parameter_count() {
        let (mut m, _) = fixture();
        let n = m.collect_ln_parameters().len();
        assert_eq!(n, 2 * (m.config().depth + 1));
        let names = m.ln_parameter_names();
        assert!(names.iter().all(|n| n.starts_with("visual.")));
        assert!(!names.iter().any(|n| n.starts_with("text.")));
        assert!(m.params().get("text.mlp.ln.gamma").is_some());
    }

    #[test]
    fn ln_view_aliases_model() {
        let (mut m, s) = fixture();
        let x = s.images.select_rows(&[0]);
        let before = m.embed_images(&x).unwrap();
        for (_, t) in m.collect_ln_parameters().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
        }
        let after = m.embed_images(&x).unwrap();
        assert!(before.max_abs_diff(&after) > 1e-6);
    }

    #[test]
    fn zero_projection_gives_zero_embedding() {
        let (mut m, _) = fixture();
        m.params_mut().get_mut("visual.proj.weight").unwrap().data_mut().fill(0.0);
        let z = m.embed_images(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_identical_rows_and_batch_independence() {
        let (m, s) = fixture();
        let x = s.images.select_rows(&[0, 0, 3, 5]);
        let z = m.embed_images(&x).unwrap();
        assert_eq!(z.row(0), z.row(1));
        for i in 0..4 {
            let single = m.embed_images(&x.select_rows(&[i])).unwrap();
            let d = single.row(0).iter().zip(z.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12);
        }
        let perm = m.embed_images(&x.select_rows(&[3, 2, 1, 0])).unwrap();
        assert_eq!(perm.row(0), z.row(3));
    }

    #[test]
    fn image_shape_checked() {
        let (m, _) = fixture();
        assert!(matches!(m.embed_images(&Tensor::zeros(&[2, 3, 8, 8])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn text_determinism_and_order() {
        let (m, s) = fixture();
        let p: Vec<String> = (0..3).map(|c| render_single(&s.vocab, c).unwrap()).collect();
        let a = m.embed_text(&[p[0].clone(), p[0].clone(), p[1].clone(), p[2].clone()]).unwrap();
        assert_eq!(a.row(0), a.row(1));
        let b = m.embed_text(&[p[2].clone(), p[1].clone(), p[0].clone()]).unwrap();
        assert_eq!(b.row(0), a.row(3));
        assert_eq!(b.row(2), a.row(0));
        assert!(matches!(m.embed_text(&["a photo of a zebra".to_string()]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn single_token_matches_manual_forward() {
        let (m, _) = fixture();
        let tok = m.tokenizer().encode("circle").unwrap();
        let got = {
            let tape = Tape::new();
            let b = m.bind(&tape, ParamFilter::Frozen);
            (*m.encode_tokens(&b, &[tok.clone()]).unwrap().value()).clone()
        };
        let p = m.params();
        let e = p.get("text.token_embed").unwrap().row(tok[0]).to_vec();
        let w = e.len();
        let mu = e.iter().sum::<f64>() / w as f64;
        let var = e.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / w as f64;
        let g = p.get("text.mlp.ln.gamma").unwrap().data();
        let bt = p.get("text.mlp.ln.beta").unwrap().data();
        let ln: Vec<f64> = (0..w).map(|j| g[j] * (e[j] - mu) / (var + LN_EPS).sqrt() + bt[j]).collect();
        let affine = |x: &[f64], wname: &str, bname: Option<&str>| -> Vec<f64> {
            let wt = p.get(wname).unwrap();
            let (rows, cols) = (wt.rows(), wt.cols());
            (0..cols)
                .map(|j| {
                    let s: f64 = (0..rows).map(|i| x[i] * wt.get(i, j)).sum();
                    s + bname.map_or(0.0, |b| p.get(b).unwrap().data()[j])
                })
                .collect()
        };
        let h1: Vec<f64> = affine(&ln, "text.mlp.fc1.weight", Some("text.mlp.fc1.bias")).into_iter().map(gelu).collect();
        let h2 = affine(&h1, "text.mlp.fc2.weight", Some("text.mlp.fc2.bias"));
        let res: Vec<f64> = e.iter().zip(&h2).map(|(a, b)| a + b).collect();
        let out = affine(&res, "text.proj.weight", None);
        for (a, b) in out.iter().zip(got.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bind_filter_marks_only_ln() {
        let (m, _) = fixture();
        let tape = Tape::new();
        let b = m.bind(&tape, ParamFilter::VisualLayerNorm);
        let names: Vec<String> = b.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, m.ln_parameter_names());
    }
}
