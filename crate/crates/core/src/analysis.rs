//! Layer-wise analyses: per-position KL divergence between exit output
//! distributions and cosine similarity between exit hidden states.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{prompt_ids, InstructionRecord};
use crate::error::{Error, Result};
use crate::inference::greedy_decode;
use crate::model::{run_sequence, ExitSet, HeadSource, Parameters, PerExitHeads};
use crate::par;
use crate::tensor::Scalar;

const NORMALIZATION_TOL: f64 = 1e-6;

/// `Σ p_i ln(p_i / q_i)` in nats, with `0 · ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let sum: f64 = dist.iter().sum();
        if dist.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!("{name} sums to {sum}")));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InvalidDistribution("q is zero where p is positive".into()));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// `u·v / (‖u‖‖v‖)`; 0 when either norm is below 1e-12.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!(
            "vectors have lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu.sqrt() < 1e-12 || nv.sqrt() < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// KL between the softmax distributions of two logit rows, computed in log
/// space so that identical rows give exactly zero.
fn kl_from_logits<T: Scalar>(p_logits: &[T], q_logits: &[T]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| {
            if *a == f64::NEG_INFINITY {
                0.0
            } else {
                a.exp() * (a - b)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    KlNats,
    Cosine,
}

/// Argument order of the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(exit ‖ reference)`
    #[default]
    ExitToReference,
    /// `KL(reference ‖ exit)`
    ReferenceToExit,
}

/// Which hidden state the cosine metric compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenState {
    /// Block output before the final norm.
    #[default]
    PreNorm,
    PostNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Requested number of generated positions.
    pub positions: usize,
    pub metric: Metric,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub hidden_state: HiddenState,
}

/// A model under analysis: parameters, its exit set and optional adapted heads.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a, T> {
    pub tag: &'a str,
    pub params: &'a Parameters<T>,
    pub exits: &'a ExitSet,
    pub heads: Option<&'a PerExitHeads<T>>,
}

impl<'a, T: Scalar> ModelRef<'a, T> {
    fn source(&self) -> HeadSource<'a, T> {
        match self.heads {
            Some(h) => HeadSource::Adapted(h),
            None => HeadSource::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTag {
    pub model: String,
    pub exit: usize,
}

/// Exits × positions grid of KL or cosine values averaged over prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalMatrix {
    pub model: String,
    pub row_exits: Vec<usize>,
    /// Number of positions actually compared.
    pub positions: usize,
    pub requested_positions: usize,
    /// `values[i][t]` for row exit `i` at generated position `t`.
    pub values: Vec<Vec<f64>>,
    pub metric: Metric,
    pub kl_direction: KlDirection,
    pub hidden_state: HiddenState,
    pub reference: ReferenceTag,
    pub prompts_averaged: usize,
    pub warnings: Vec<String>,
}

impl PositionalMatrix {
    pub fn row_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
            .collect()
    }

    /// CSV with `#`-prefixed metadata lines, then `exit,0,1,..` and one row per exit.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let metric = match self.metric {
            Metric::KlNats => "KL_NATS",
            Metric::Cosine => "COSINE",
        };
        let _ = writeln!(out, "# metric: {metric}");
        let _ = writeln!(out, "# model: {}", self.model);
        let _ = writeln!(
            out,
            "# reference: {} exit {}",
            self.reference.model, self.reference.exit
        );
        match self.metric {
            Metric::KlNats => {
                let dir = match self.kl_direction {
                    KlDirection::ExitToReference => "KL(exit || reference)",
                    KlDirection::ReferenceToExit => "KL(reference || exit)",
                };
                let _ = writeln!(out, "# direction: {dir}");
            }
            Metric::Cosine => {
                let h = match self.hidden_state {
                    HiddenState::PreNorm => "pre_norm",
                    HiddenState::PostNorm => "post_norm",
                };
                let _ = writeln!(out, "# hidden_state: {h}");
            }
        }
        let _ = writeln!(out, "# prompts_averaged: {}", self.prompts_averaged);
        let _ = writeln!(
            out,
            "# positions: {} (requested {})",
            self.positions, self.requested_positions
        );
        for w in &self.warnings {
            let _ = writeln!(out, "# warning: {w}");
        }
        out.push_str("exit");
        for t in 0..self.positions {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for (depth, row) in self.row_exits.iter().zip(&self.values) {
            let _ = write!(out, "{depth}");
            for x in row {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }
}

/// Compares every row exit of `model` against `reference` at each generated
/// position. The reference greedily generates the continuation once per
/// prompt; the same tokens are then teacher-forced through all exits, so every
/// compared position shares its context. Position `t` is the prediction of the
/// `t`-th generated token.
pub fn positional_matrix<T: Scalar>(
    model: ModelRef<'_, T>,
    row_exits: &[usize],
    reference: (ModelRef<'_, T>, usize),
    prompts: &[InstructionRecord],
    opts: &AnalysisOptions,
) -> Result<PositionalMatrix> {
    let (ref_model, ref_exit) = reference;
    if opts.positions < 1 {
        return Err(Error::InvalidArgument("positions must be >= 1".into()));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to analyse".into()));
    }
    if row_exits.is_empty() {
        return Err(Error::InvalidArgument("no row exits".into()));
    }
    for &d in row_exits {
        model.exits.check_depth(d)?;
    }
    ref_model.exits.check_depth(ref_exit)?;
    if model.params.config.d_model != ref_model.params.config.d_model
        || model.params.config.vocab_size != ref_model.params.config.vocab_size
    {
        return Err(Error::InvalidArgument("models differ in width or vocabulary".into()));
    }

    let max_len = model.params.config.max_seq_len.min(ref_model.params.config.max_seq_len);
    let mut warnings = Vec::new();
    let mut contexts = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let ids = prompt_ids(p);
        if ids.len() > max_len {
            warnings.push(format!(
                "prompt {i} ({} tokens) exceeds the context and was skipped",
                ids.len()
            ));
        } else {
            contexts.push(ids);
        }
    }
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("every prompt exceeds the context length".into()));
    }
    let room = contexts.iter().map(|c| max_len - c.len() + 1).min().expect("non-empty");
    let positions = opts.positions.min(room);
    if positions < opts.positions {
        warnings.push(format!(
            "requested {} positions but the longest prompt leaves room for {positions}",
            opts.positions
        ));
        log::warn!("positional matrix truncated to {positions} positions");
    }

    let per_prompt = par::map_ordered(&contexts, |ctx| -> Result<Vec<Vec<f64>>> {
        let gen = greedy_decode(
            ref_model.params,
            ref_model.source(),
            ref_exit,
            ctx,
            positions - 1,
            false,
        )?;
        let mut seq = ctx.clone();
        seq.extend(&gen);
        let start = ctx.len() - 1;
        let ref_run = run_sequence(ref_model.params, &seq, &[ref_exit], ref_model.source(), false)?;
        let run = run_sequence(model.params, &seq, row_exits, model.source(), false)?;
        let r = &ref_run.exits[0];
        let (v, d) = (model.params.config.vocab_size, model.params.config.d_model);
        let mut rows = Vec::with_capacity(row_exits.len());
        for ex in &run.exits {
            let mut row = Vec::with_capacity(positions);
            for t in start..start + positions {
                let x = match opts.metric {
                    Metric::KlNats => {
                        let a = &ex.logits[t * v..(t + 1) * v];
                        let b = &r.logits[t * v..(t + 1) * v];
                        match opts.kl_direction {
                            KlDirection::ExitToReference => kl_from_logits(a, b),
                            KlDirection::ReferenceToExit => kl_from_logits(b, a),
                        }
                    }
                    Metric::Cosine => {
                        let (a, b) = match opts.hidden_state {
                            HiddenState::PreNorm => (&ex.pre, &r.pre),
                            HiddenState::PostNorm => (&ex.post, &r.post),
                        };
                        let a: Vec<f64> = a[t * d..(t + 1) * d]
                            .iter()
                            .map(|x| x.to_f64().unwrap_or(f64::NAN))
                            .collect();
                        let b: Vec<f64> = b[t * d..(t + 1) * d]
                            .iter()
                            .map(|x| x.to_f64().unwrap_or(f64::NAN))
                            .collect();
                        cosine_similarity(&a, &b)?
                    }
                };
                if !x.is_finite() {
                    return Err(Error::NumericFailure(format!(
                        "non-finite metric at position {}",
                        t - start
                    )));
                }
                row.push(x);
            }
            rows.push(row);
        }
        Ok(rows)
    });

    let mut values = vec![vec![0.0; positions]; row_exits.len()];
    let n = per_prompt.len();
    for rows in per_prompt {
        for (acc, row) in values.iter_mut().zip(rows?) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
    }
    for row in &mut values {
        for x in row.iter_mut() {
            *x /= n as f64;
        }
    }
    Ok(PositionalMatrix {
        model: model.tag.to_string(),
        row_exits: row_exits.to_vec(),
        positions,
        requested_positions: opts.positions,
        values,
        metric: opts.metric,
        kl_direction: opts.kl_direction,
        hidden_state: opts.hidden_state,
        reference: ReferenceTag {
            model: ref_model.tag.to_string(),
            exit: ref_exit,
        },
        prompts_averaged: n,
        warnings,
    })
}
