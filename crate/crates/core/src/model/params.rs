use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{add_assign, Scalar, Tensor};

/// Weights of one pre-norm decoder block. Projection matrices are stored as
/// `[in × out]` so that `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_hidden);
        Self {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm: Tensor::zeros(&[d]),
            w_gate: Tensor::zeros(&[d, f]),
            w_up: Tensor::zeros(&[d, f]),
            w_down: Tensor::zeros(&[f, d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("ffn_norm", &self.ffn_norm),
            ("w_down", &self.w_down),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("wk", &self.wk),
            ("wo", &self.wo),
            ("wq", &self.wq),
            ("wv", &self.wv),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("ffn_norm", &mut self.ffn_norm),
            ("w_down", &mut self.w_down),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("wk", &mut self.wk),
            ("wo", &mut self.wo),
            ("wq", &mut self.wq),
            ("wv", &mut self.wv),
        ]
    }
}

/// The full learnable parameter set. Every exit shares `final_norm` and
/// `head`; sub-model `n` is the embedding, blocks `0..n`, and that shared pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

/// Initialisation scales. Norm gains start at one.
#[derive(Debug, Clone, Copy)]
pub struct InitScheme {
    pub std: f64,
    /// Output projections of each residual branch use `std / sqrt(2 n_blocks)`.
    pub scale_residual: bool,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            std: 0.02,
            scale_residual: true,
        }
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d) = (config.vocab_size, config.d_model);
        Self {
            config: config.clone(),
            token_embedding: Tensor::zeros(&[v, d]),
            blocks: (0..config.n_blocks).map(|_| BlockParams::zeros(config)).collect(),
            final_norm: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[d, v]),
        }
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, InitScheme::default())
    }

    /// Seeded initialisation. Values are drawn in `f64` and rounded, so the
    /// `f32` and `f64` models built from one seed agree up to rounding.
    pub fn init_with(config: &ModelConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scheme.std).map_err(|e| Error::InvalidArgument(format!("init std: {e}")))?;
        let residual_std = if scheme.scale_residual {
            scheme.std / (2.0 * config.n_blocks as f64).sqrt()
        } else {
            scheme.std
        };
        let residual = Normal::new(0.0, residual_std).map_err(|e| Error::InvalidArgument(format!("init std: {e}")))?;

        let mut p = Self::zeros(config);
        let mut fill = |t: &mut Tensor<T>, dist: &Normal<f64>| {
            for x in t.data_mut() {
                *x = T::from_f64_lossy(dist.sample(&mut rng));
            }
        };
        fill(&mut p.token_embedding, &normal);
        for b in &mut p.blocks {
            b.attn_norm.fill(T::one());
            b.ffn_norm.fill(T::one());
            fill(&mut b.wq, &normal);
            fill(&mut b.wk, &normal);
            fill(&mut b.wv, &normal);
            fill(&mut b.wo, &residual);
            fill(&mut b.w_gate, &normal);
            fill(&mut b.w_up, &normal);
            fill(&mut b.w_down, &residual);
        }
        p.final_norm.fill(T::one());
        fill(&mut p.head, &normal);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// All tensors with their canonical names, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out.push(("token_embedding".into(), &self.token_embedding));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Mutable counterpart of [`Parameters::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.named_mut() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out.push(("token_embedding".into(), &mut self.token_embedding));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, dst), (_, src)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            add_assign(dst.data_mut(), src.data());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn_norm: b.attn_norm.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ffn_norm: b.ffn_norm.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}

/// A private final-norm gain and output head for one exit (early-exit baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead<T> {
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

/// Per-exit head copies trained on top of frozen blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerExitHeads<T> {
    pub heads: BTreeMap<usize, ExitHead<T>>,
}

impl<T: Scalar> PerExitHeads<T> {
    /// Warm start: every exit gets a copy of the shared pair.
    pub fn cloned_from(params: &Parameters<T>, depths: &[usize]) -> Self {
        Self {
            heads: depths
                .iter()
                .map(|&d| {
                    (
                        d,
                        ExitHead {
                            final_norm: params.final_norm.clone(),
                            head: params.head.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, depth: usize) -> Option<&ExitHead<T>> {
        self.heads.get(&depth)
    }

    pub fn depths(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_sorted_and_unique() {
        let p = Parameters::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(names, sorted);
        assert_eq!(p.num_parameters(), p.config.parameter_count());
    }

    #[test]
    fn one_shared_head() {
        let p = Parameters::<f32>::init(&ModelConfig::desk(), 0).unwrap();
        let heads = p
            .named_tensors()
            .iter()
            .filter(|(n, _)| n.contains("head") || n.contains("final_norm"))
            .count();
        assert_eq!(heads, 2);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny();
        let a = Parameters::<f32>::init(&cfg, 7).unwrap();
        let b = Parameters::<f32>::init(&cfg, 7).unwrap();
        let c = Parameters::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
