use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a LLaMA-style decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_rms_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// The desk-scale model: 8 blocks, width 128, byte vocabulary.
    pub fn desk() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 128,
            n_heads: 4,
            n_blocks: 8,
            ffn_hidden: 352,
            max_seq_len: 256,
            rms_eps: default_rms_eps(),
            rope_base: default_rope_base(),
        }
    }

    /// Small enough for coordinate-wise finite differences.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 17,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            ffn_hidden: 24,
            max_seq_len: 8,
            rms_eps: default_rms_eps(),
            rope_base: default_rope_base(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("model: {msg}")));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail("head dimension must be even for rotary embeddings");
        }
        if self.n_blocks < 1 {
            return fail("n_blocks must be >= 1");
        }
        if self.max_seq_len < 1 {
            return fail("max_seq_len must be >= 1");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2");
        }
        if self.ffn_hidden < 1 {
            return fail("ffn_hidden must be >= 1");
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return fail("rms_eps must be positive");
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return fail("rope_base must be positive");
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let block = 2 * d + 4 * d * d + 3 * d * self.ffn_hidden;
        2 * self.vocab_size * d + d + self.n_blocks * block
    }
}

/// Depths at which sub-models exit. Strictly ascending; always ends at full depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExitSet(Vec<usize>);

impl ExitSet {
    pub fn new(exits: Vec<usize>, n_blocks: usize) -> Result<Self> {
        if exits.is_empty() {
            return Err(Error::Config("exit set is empty".into()));
        }
        if exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "exit set {exits:?} must be strictly ascending without duplicates"
            )));
        }
        if exits[0] < 1 {
            return Err(Error::Config("exit depths start at 1".into()));
        }
        if *exits.last().unwrap() != n_blocks {
            return Err(Error::Config(format!(
                "exit set {exits:?} must end at the full depth {n_blocks}"
            )));
        }
        Ok(Self(exits))
    }

    /// Only the full-depth exit.
    pub fn full(n_blocks: usize) -> Self {
        Self(vec![n_blocks])
    }

    /// Every `stride`-th block, ending at full depth.
    pub fn every(stride: usize, n_blocks: usize) -> Result<Self> {
        if stride == 0 || !n_blocks.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "stride {stride} does not divide n_blocks {n_blocks}"
            )));
        }
        Self::new((1..=n_blocks / stride).map(|i| i * stride).collect(), n_blocks)
    }

    /// Re-checks an exit set obtained through deserialization.
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        Self::new(self.0.clone(), n_blocks).map(|_| ())
    }

    pub fn depths(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, depth: usize) -> bool {
        self.0.binary_search(&depth).is_ok()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("exit set is never empty")
    }

    pub fn position(&self, depth: usize) -> Option<usize> {
        self.0.binary_search(&depth).ok()
    }

    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if self.contains(depth) {
            Ok(())
        } else {
            Err(Error::InvalidDepth {
                depth,
                valid: self.0.clone(),
            })
        }
    }
}
