//! Gated recurrent sequence encoder producing unit-norm embeddings, with
//! hand-written backpropagation through time for the triplet objective.

mod checkpoint;
mod gru;
mod params;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{PanelDataset, Vocab, WeekSequence};

pub use checkpoint::{decode_params, encode_params, load_params, save_params, HEADER_LEN, MAGIC};
pub use gru::{
    backward, backward_triplet, embed_tokens, final_hidden, forward, triplet_loss, Encoder,
    ForwardTrace, TripletLoss,
};
pub use params::{init_params, GradientBuffer, ModelParams, Weights, TENSOR_NAMES};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub token_embed_dim: usize,
    pub hidden_dim: usize,
    /// Embedding dimensionality.
    pub output_dim: usize,
    /// Longer sequences keep only their most recent `max_seq_len` tokens.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            token_embed_dim: 32,
            hidden_dim: 64,
            output_dim: 32,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("vocab_size", self.vocab_size),
            ("token_embed_dim", self.token_embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
            ("max_seq_len", self.max_seq_len),
        ] {
            if value < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.output_dim > 4 * self.hidden_dim {
            return Err(Error::config(
                "output_dim",
                format!("{} exceeds 4 x hidden_dim ({})", self.output_dim, self.hidden_dim),
            ));
        }
        Ok(())
    }
}

/// Unit-length latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn embed_sequence(
    params: &ModelParams,
    config: &ModelConfig,
    seq: &WeekSequence,
) -> Result<Embedding> {
    embed_tokens(params, config, &seq.tokens)
}

/// A trained encoder together with the vocabulary its token ids refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Arc<Vocab>,
}

impl Model {
    /// Path of the vocabulary file stored next to a checkpoint.
    pub fn vocab_path(checkpoint: &Path) -> PathBuf {
        let mut name = checkpoint.as_os_str().to_owned();
        name.push(".vocab.json");
        PathBuf::from(name)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        save_params(&self.params, &self.config, checkpoint)?;
        let vocab_path = Self::vocab_path(checkpoint);
        let json = serde_json::to_vec(self.vocab.tokens())?;
        std::fs::write(&vocab_path, json).map_err(|e| Error::io(vocab_path, e))
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let (config, params) = load_params(checkpoint)?;
        let vocab_path = Self::vocab_path(checkpoint);
        let bytes = std::fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let tokens: Vec<String> = serde_json::from_slice(&bytes)?;
        let vocab = Vocab::from_tokens(tokens)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary file has {} tokens, checkpoint expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        Ok(Self {
            config,
            params,
            vocab: Arc::new(vocab),
        })
    }

    /// Re-expresses `data` in this model's token ids. Returns the number of
    /// events dropped because their token is unknown to the model.
    pub fn align(&self, data: &PanelDataset) -> (PanelDataset, usize) {
        if data.vocab() == &self.vocab {
            return (data.clone(), 0);
        }
        data.reindex(Arc::clone(&self.vocab))
    }

    pub fn embed(&self, seq: &WeekSequence) -> Result<Embedding> {
        embed_sequence(&self.params, &self.config, seq)
    }
}
