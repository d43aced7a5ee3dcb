// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DualEncoderModel, ModelConfig, ParamStore};
use crate::container::BlockSet;
use crate::error::{Error, Result};
use crate::prompting::Tokenizer;
use crate::tensor::Tensor;

const CONFIG_BLOCK: &str = "meta.model_config";
const TOKENS_BLOCK: &str = "meta.tokens";

impl DualEncoderModel {
    pub fn to_blocks(&self) -> BlockSet {
        let mut b = BlockSet::new();
        b.push(CONFIG_BLOCK, Tensor::vector(self.config.to_vec()));
        let words = self.tokenizer.words().join("\n");
        b.push(
            TOKENS_BLOCK,
            Tensor::vector(words.bytes().map(f64::from).collect()),
        );
        for (name, t) in self.params.iter() {
            b.push(name, t.clone());
        }
        b
    }

    pub fn from_blocks(b: &BlockSet) -> Result<Self> {
        let config = ModelConfig::from_slice(b.require(CONFIG_BLOCK)?.data())?;
        let bytes: Vec<u8> = b
            .require(TOKENS_BLOCK)?
            .data()
            .iter()
            .map(|&v| v as u8)
            .collect();
        let words = String::from_utf8(bytes)
            .map_err(|_| Error::Format("token block is not UTF-8".into()))?
            .split('\n')
            .map(str::to_string)
            .collect();
        let tokenizer = Tokenizer::new(words, config.max_tokens)?;
        // Build the layout, then overwrite every tensor from the file.
        let mut model = Self::with_tokenizer(config, tokenizer, 0)?;
        let mut params = ParamStore::default();
        for name in model.params.names() {
            let t = b.require(name)?;
            let expected = model.params.get(name).unwrap().shape();
            if t.shape() != expected {
                return Err(Error::Format(format!(
                    "block `{name}` has shape {:?}, expected {expected:?}",
                    t.shape()
                )));
            }
            params.insert(name.clone(), t.clone());
        }
        model.params = params;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_blocks().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blocks().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blocks(&BlockSet::load(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checkpoint_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
