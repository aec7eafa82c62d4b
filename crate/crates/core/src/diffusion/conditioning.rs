use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Token positions per prompt embedding.
pub const TOKEN_POSITIONS: usize = 4;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {class}";

/// Fixed-seed embedding per class prompt, standing in for a text encoder.
/// Each row is drawn from a stream keyed by the class name, so a class keeps
/// its embedding regardless of vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningTable {
    vocab: Vec<String>,
    embed_dim: usize,
    template: String,
    embeddings: Tensor,
}

impl ConditioningTable {
    pub fn new(vocab: &[String], embed_dim: usize, seed: u64) -> Result<Self> {
        Self::with_template(vocab, embed_dim, seed, DEFAULT_PROMPT_TEMPLATE)
    }

    pub fn with_template(vocab: &[String], embed_dim: usize, seed: u64, template: &str) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Config("conditioning vocabulary is empty".into()));
        }
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if !template.contains("{class}") {
            return Err(Error::Config(format!(
                "prompt template `{template}` lacks a {{class}} placeholder"
            )));
        }
        let mut rows = Vec::with_capacity(vocab.len());
        for name in vocab {
            let mut r = rng::stream(seed, &format!("cond:{name}"), 0);
            rows.push(Tensor::randn(&[TOKEN_POSITIONS, embed_dim], 1.0, &mut r));
        }
        Ok(ConditioningTable {
            vocab: vocab.to_vec(),
            embed_dim,
            template: template.to_string(),
            embeddings: Tensor::stack(&rows)?,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn prompt(&self, class: &str) -> String {
        self.template.replace("{class}", class)
    }

    /// Resolves a class name or a fully rendered prompt to its index.
    pub fn index_of(&self, prompt: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|c| c == prompt || self.prompt(c) == prompt)
            .ok_or_else(|| Error::Vocabulary {
                prompt: prompt.to_string(),
                vocab: self.vocab.clone(),
            })
    }

    /// Cross-attention context `[N, L, D]` for the given ids.
    pub fn context(&self, cond_ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = cond_ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Validation(format!(
                "cond id {bad} outside vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(self.embeddings.select_rows(cond_ids))
    }

    /// Embedding averaged over token positions, `[D]`.
    pub fn pooled(&self, id: usize) -> Vec<f64> {
        let row = self.embeddings.row(id);
        (0..self.embed_dim)
            .map(|d| (0..TOKEN_POSITIONS).map(|l| row[l * self.embed_dim + d]).sum::<f64>() / TOKEN_POSITIONS as f64)
            .collect()
    }
}
