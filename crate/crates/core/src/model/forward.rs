use super::config::{ExitSet, ModelConfig};
use super::ops::{causal_softmax, rms_norm_rows, silu, Rope};
use super::params::{BlockParams, Parameters, PerExitHeads};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, matmul, matmul_acc, MatMut, MatRef, Scalar, Tensor};

/// Which final-norm/head pair an exit reads.
#[derive(Debug, Clone, Copy)]
pub enum HeadSource<'a, T> {
    /// The single pair shared by every exit.
    Shared,
    /// Per-exit copies; exits without an entry fall back to the shared pair.
    Adapted(&'a PerExitHeads<T>),
}

impl<'a, T: Scalar> HeadSource<'a, T> {
    pub(crate) fn resolve<'p>(&self, params: &'p Parameters<T>, depth: usize) -> (&'p Tensor<T>, &'p Tensor<T>)
    where
        'a: 'p,
    {
        match self {
            HeadSource::Adapted(h) => match h.get(depth) {
                Some(e) => (&e.final_norm, &e.head),
                None => (&params.final_norm, &params.head),
            },
            HeadSource::Shared => (&params.final_norm, &params.head),
        }
    }
}

/// Intermediate values of one block kept for the backward pass.
pub(crate) struct BlockCache<T> {
    pub input: Vec<T>,
    pub attn_inv: Vec<T>,
    pub attn_in: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub mid: Vec<T>,
    pub ffn_inv: Vec<T>,
    pub ffn_in: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub act: Vec<T>,
}

pub(crate) struct ExitState<T> {
    pub depth: usize,
    pub pre: Vec<T>,
    pub inv: Vec<T>,
    pub post: Vec<T>,
    pub logits: Vec<T>,
}

/// Result of running one token sequence through the decoder.
pub(crate) struct SequenceRun<T> {
    pub len: usize,
    pub blocks: Vec<BlockCache<T>>,
    pub exits: Vec<ExitState<T>>,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some((index, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidToken {
            id,
            index,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn block_forward_seq<T: Scalar>(
    bp: &BlockParams<T>,
    cfg: &ModelConfig,
    rope: &Rope<T>,
    h: &[T],
    s: usize,
) -> (Vec<T>, BlockCache<T>) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let eps = T::from_f64_lossy(cfg.rms_eps);
    let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());

    let (attn_in, attn_inv) = rms_norm_rows(h, bp.attn_norm.data(), eps, d);
    let x = MatRef::new(&attn_in, s, d);
    let mut q = matmul(x, bp.wq.mat());
    let mut k = matmul(x, bp.wk.mat());
    let v = matmul(x, bp.wv.mat());
    rope.apply(&mut q, s, d, false);
    rope.apply(&mut k, s, d, false);

    let mut probs = vec![T::zero(); cfg.n_heads * s * s];
    let mut ctx = vec![T::zero(); s * d];
    for (head, p) in probs.chunks_exact_mut(s * s).enumerate() {
        let c0 = head * hd;
        let qh = MatRef::columns(&q, s, d, c0, hd);
        let kh = MatRef::columns(&k, s, d, c0, hd);
        gemm(scale, qh, kh.t(), T::zero(), MatMut::new(p, s, s));
        causal_softmax(p, s);
        let vh = MatRef::columns(&v, s, d, c0, hd);
        gemm(
            T::one(),
            MatRef::new(p, s, s),
            vh,
            T::zero(),
            MatMut::columns(&mut ctx, s, d, c0, hd),
        );
    }

    let mut mid = h.to_vec();
    matmul_acc(MatRef::new(&ctx, s, d), bp.wo.mat(), &mut mid);

    let (ffn_in, ffn_inv) = rms_norm_rows(&mid, bp.ffn_norm.data(), eps, d);
    let xf = MatRef::new(&ffn_in, s, d);
    let gate = matmul(xf, bp.w_gate.mat());
    let up = matmul(xf, bp.w_up.mat());
    let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let mut out = mid.clone();
    matmul_acc(MatRef::new(&act, s, cfg.ffn_hidden), bp.w_down.mat(), &mut out);

    let cache = BlockCache {
        input: h.to_vec(),
        attn_inv,
        attn_in,
        q,
        k,
        v,
        probs,
        ctx,
        mid,
        ffn_inv,
        ffn_in,
        gate,
        up,
        act,
    };
    (out, cache)
}

pub(crate) fn exit_forward<T: Scalar>(
    cfg: &ModelConfig,
    final_norm: &Tensor<T>,
    head: &Tensor<T>,
    depth: usize,
    pre: Vec<T>,
    s: usize,
) -> ExitState<T> {
    let eps = T::from_f64_lossy(cfg.rms_eps);
    let (post, inv) = rms_norm_rows(&pre, final_norm.data(), eps, cfg.d_model);
    let logits = matmul(MatRef::new(&post, s, cfg.d_model), head.mat());
    ExitState {
        depth,
        pre,
        inv,
        post,
        logits,
    }
}

/// Runs `tokens` through blocks `1..=max(exits)`, branching off the shared
/// (or adapted) final norm and head at every requested depth. The residual
/// stream itself is never normalised.
pub(crate) fn run_sequence<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    exits: &[usize],
    heads: HeadSource<'_, T>,
    keep_blocks: bool,
) -> Result<SequenceRun<T>> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    let s = tokens.len();
    let d = cfg.d_model;
    let deepest = exits.iter().copied().max().unwrap_or(0);
    if deepest > cfg.n_blocks {
        return Err(Error::InvalidDepth {
            depth: deepest,
            valid: (1..=cfg.n_blocks).collect(),
        });
    }
    let rope = Rope::new(s, cfg.head_dim(), cfg.rope_base);

    let emb = params.token_embedding.data();
    let mut h = Vec::with_capacity(s * d);
    for &t in tokens {
        h.extend_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }

    let mut blocks = Vec::new();
    let mut out_exits = Vec::with_capacity(exits.len());
    for depth in 1..=deepest {
        let (next, cache) = block_forward_seq(&params.blocks[depth - 1], cfg, &rope, &h, s);
        if keep_blocks {
            blocks.push(cache);
        }
        h = next;
        if exits.contains(&depth) {
            let (norm, head) = heads.resolve(params, depth);
            out_exits.push(exit_forward(cfg, norm, head, depth, h.clone(), s));
        }
    }
    Ok(SequenceRun {
        len: s,
        blocks,
        exits: out_exits,
    })
}

/// A `[batch × seq]` grid of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::InvalidArgument(format!(
                "token batch expects {} ids, got {}",
                batch * seq,
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::InvalidArgument("token rows differ in length".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq..(i + 1) * self.seq]
    }

    pub fn rows(&self) -> Vec<&[u32]> {
        (0..self.batch).map(|i| self.row(i)).collect()
    }
}

/// Outputs of one exit for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutput<T> {
    /// `[batch × seq × vocab]`
    pub logits: Tensor<T>,
    /// `[batch × seq × d_model]`, block output before the final norm.
    pub hidden_pre_norm: Tensor<T>,
    /// `[batch × seq × d_model]`
    pub hidden_post_norm: Tensor<T>,
}

/// Per-exit outputs, indexed by exactly the depths of the exit set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs<T> {
    depths: Vec<usize>,
    outputs: Vec<ExitOutput<T>>,
}

impl<T> ExitOutputs<T> {
    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn at(&self, depth: usize) -> Option<&ExitOutput<T>> {
        self.depths.iter().position(|&d| d == depth).map(|i| &self.outputs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ExitOutput<T>)> {
        self.depths.iter().copied().zip(&self.outputs)
    }
}

/// One pass over the blocks producing logits and hidden states at every exit.
pub fn forward_exits<T: Scalar>(
    params: &Parameters<T>,
    exit_set: &ExitSet,
    tokens: &TokenBatch,
) -> Result<ExitOutputs<T>> {
    forward_exits_with(params, exit_set, tokens, HeadSource::Shared)
}

pub fn forward_exits_with<T: Scalar>(
    params: &Parameters<T>,
    exit_set: &ExitSet,
    tokens: &TokenBatch,
    heads: HeadSource<'_, T>,
) -> Result<ExitOutputs<T>> {
    exit_set.validate(params.config.n_blocks)?;
    let rows = tokens.rows();
    let runs = par::map_ordered(&rows, |row| run_sequence(params, row, exit_set.depths(), heads, false));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(collect_outputs(&params.config, exit_set.depths(), tokens, runs))
}

fn collect_outputs<T: Scalar>(
    cfg: &ModelConfig,
    depths: &[usize],
    tokens: &TokenBatch,
    runs: Vec<SequenceRun<T>>,
) -> ExitOutputs<T> {
    let (b, s, d, v) = (tokens.batch, tokens.seq, cfg.d_model, cfg.vocab_size);
    let mut outputs: Vec<ExitOutput<T>> = depths
        .iter()
        .map(|_| ExitOutput {
            logits: Tensor::zeros(&[b, s, v]),
            hidden_pre_norm: Tensor::zeros(&[b, s, d]),
            hidden_post_norm: Tensor::zeros(&[b, s, d]),
        })
        .collect();
    for (r, run) in runs.into_iter().enumerate() {
        for (out, ex) in outputs.iter_mut().zip(run.exits) {
            out.logits.data_mut()[r * s * v..(r + 1) * s * v].copy_from_slice(&ex.logits);
            out.hidden_pre_norm.data_mut()[r * s * d..(r + 1) * s * d].copy_from_slice(&ex.pre);
            out.hidden_post_norm.data_mut()[r * s * d..(r + 1) * s * d].copy_from_slice(&ex.post);
        }
    }
    ExitOutputs {
        depths: depths.to_vec(),
        outputs,
    }
}

/// Logits and post-norm hidden state of sub-model `depth` alone; blocks
/// deeper than `depth` are never read.
pub fn forward_single<T: Scalar>(
    params: &Parameters<T>,
    depth: usize,
    tokens: &TokenBatch,
) -> Result<(Tensor<T>, Tensor<T>)> {
    forward_single_with(params, depth, tokens, HeadSource::Shared)
}

pub fn forward_single_with<T: Scalar>(
    params: &Parameters<T>,
    depth: usize,
    tokens: &TokenBatch,
    heads: HeadSource<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = params.config.n_blocks;
    if depth < 1 || depth > n {
        return Err(Error::InvalidDepth {
            depth,
            valid: (1..=n).collect(),
        });
    }
    let rows = tokens.rows();
    let runs = par::map_ordered(&rows, |row| run_sequence(params, row, &[depth], heads, false));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut outs = collect_outputs(&params.config, &[depth], tokens, runs);
    let out = outs.outputs.pop().expect("one exit");
    Ok((out.logits, out.hidden_post_norm))
}

/// One decoder block applied to a `[batch × seq × d_model]` hidden state at
/// positions `0..seq`.
pub fn block_forward<T: Scalar>(block: &BlockParams<T>, config: &ModelConfig, h: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = h.shape();
    if shape.len() != 3 || shape[2] != config.d_model {
        return Err(Error::InvalidArgument(format!(
            "block input must be [batch, seq, {}], got {shape:?}",
            config.d_model
        )));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if s > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: s,
            max: config.max_seq_len,
        });
    }
    let rope = Rope::new(s, config.head_dim(), config.rope_base);
    let mut out = Vec::with_capacity(h.len());
    for row in h.data().chunks_exact((s * d).max(1)).take(b) {
        let (y, _) = block_forward_seq(block, config, &rope, row, s);
        out.extend(y);
    }
    Ok(Tensor::from_vec(shape, out))
}
