// SPDX-License-Identifier: Apache-2.0

//! Class vocabularies and prompt rendering.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Template words, in the order they are assigned token ids.
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "or"];

/// Default token budget of the text encoder.
pub const DEFAULT_MAX_TOKENS: usize = 77;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidArgument("class vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.split_whitespace().any(|w| w == "or") {
                return Err(Error::InvalidArgument(format!("invalid class name `{n}`")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// One class name per line; the line number is the class index.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.names.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Result<&str> {
        self.names
            .get(id)
            .map(String::as_str)
            .ok_or(Error::ClassOutOfRange {
                id,
                size: self.names.len(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Single,
    Multi,
}

/// A rendered prompt with the classes it mentions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub kind: TemplateKind,
    pub class_ids: Vec<usize>,
    pub text: String,
}

pub fn render_single(vocab: &ClassVocabulary, class_id: usize) -> Result<String> {
    Ok(format!("a photo of a {}", vocab.name(class_id)?))
}

/// `"a photo of a {c1} or {c2} or … or {ck}"` in the given order.
pub fn render_multi(vocab: &ClassVocabulary, ordered_ids: &[usize]) -> Result<String> {
    if ordered_ids.is_empty() {
        return Err(Error::InvalidArgument("multi-class prompt needs at least one class".into()));
    }
    let mut seen = HashSet::new();
    let mut names = Vec::with_capacity(ordered_ids.len());
    for &id in ordered_ids {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate class id {id} in prompt")));
        }
        names.push(vocab.name(id)?);
    }
    Ok(format!("a photo of a {}", names.join(" or ")))
}

pub fn prompt_spec(vocab: &ClassVocabulary, ordered_ids: &[usize]) -> Result<PromptSpec> {
    let text = render_multi(vocab, ordered_ids)?;
    let kind = if ordered_ids.len() == 1 {
        TemplateKind::Single
    } else {
        TemplateKind::Multi
    };
    Ok(PromptSpec {
        kind,
        class_ids: ordered_ids.to_vec(),
        text,
    })
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn topk_ids(probabilities: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k requires k >= 1".into()));
    }
    if k > probabilities.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} classes",
            probabilities.len()
        )));
    }
    if probabilities.iter().any(|p| !p.is_finite()) {
        return Err(Error::numeric("topk_ids", "non-finite probability"));
    }
    let mut idx: Vec<usize> = (0..probabilities.len()).collect();
    idx.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Closed whitespace tokenizer: template words followed by class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    max_tokens: usize,
}

impl Tokenizer {
    pub fn new(words: Vec<String>, max_tokens: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for w in &words {
            if w.contains(char::is_whitespace) || !seen.insert(w.as_str()) {
                return Err(Error::InvalidArgument(format!("bad token `{w}`")));
            }
        }
        Ok(Self { words, max_tokens })
    }

    pub fn for_classes(vocab: &ClassVocabulary, max_tokens: usize) -> Result<Self> {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        for n in vocab.names() {
            for w in n.split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        Self::new(words, max_tokens)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn encode(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids = prompt
            .split_whitespace()
            .map(|w| {
                self.words
                    .iter()
                    .position(|x| x == w)
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if ids.len() > self.max_tokens {
            return Err(Error::PromptTooLong {
                tokens: ids.len(),
                max: self.max_tokens,
            });
        }
        Ok(ids)
    }
}
