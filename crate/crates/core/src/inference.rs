//! Dynamic-depth greedy decoding and per-exit likelihood evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{build_batches, tokenize, Batch, TokenizedExample, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::ops::argmax;
use crate::model::{run_sequence, ExitSet, HeadSource, Parameters, PerExitHeads};
use crate::par;
use crate::tensor::Scalar;
use crate::training::cross_entropy_rows;

/// Which head an exit decodes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadChoice {
    #[default]
    Shared,
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Text the model continues (already rendered through a template, if any).
    pub prompt: String,
    pub exit_depth: usize,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub head_source: HeadChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated ids, including a terminating EOS when one was produced.
    pub tokens: Vec<u32>,
    pub text: String,
}

pub(crate) fn resolve_heads<'a, T: Scalar>(
    exit_set: &ExitSet,
    heads: Option<&'a PerExitHeads<T>>,
    depth: usize,
    choice: HeadChoice,
) -> Result<HeadSource<'a, T>> {
    exit_set.check_depth(depth)?;
    match choice {
        HeadChoice::Shared => Ok(HeadSource::Shared),
        HeadChoice::Adapted => match heads {
            Some(h) if h.get(depth).is_some() => Ok(HeadSource::Adapted(h)),
            _ => Err(Error::Config(format!("no adapted head for exit {depth}"))),
        },
    }
}

/// Greedy continuation of `context` through blocks `1..=depth` only.
/// Stops after `max_new` tokens, at the context limit, or (when `stop_at_eos`)
/// after emitting EOS.
pub(crate) fn greedy_decode<T: Scalar>(
    params: &Parameters<T>,
    heads: HeadSource<'_, T>,
    depth: usize,
    context: &[u32],
    max_new: usize,
    stop_at_eos: bool,
) -> Result<Vec<u32>> {
    let v = params.config.vocab_size;
    let mut seq = context.to_vec();
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new && seq.len() < params.config.max_seq_len {
        let run = run_sequence(params, &seq, &[depth], heads, false)?;
        let logits = &run.exits[0].logits;
        let last = &logits[logits.len() - v..];
        let next = argmax(last) as u32;
        out.push(next);
        seq.push(next);
        if stop_at_eos && next == EOS_ID {
            break;
        }
    }
    Ok(out)
}

pub fn generate<T: Scalar>(
    params: &Parameters<T>,
    exit_set: &ExitSet,
    heads: Option<&PerExitHeads<T>>,
    request: &GenerationRequest,
) -> Result<Generation> {
    if request.max_new_tokens < 1 {
        return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
    }
    let source = resolve_heads(exit_set, heads, request.exit_depth, request.head_source)?;
    let mut context = vec![BOS_ID];
    context.extend(tokenize(&request.prompt));
    if context.len() > params.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: context.len(),
            max: params.config.max_seq_len,
        });
    }
    let tokens = greedy_decode(
        params,
        source,
        request.exit_depth,
        &context,
        request.max_new_tokens,
        true,
    )?;
    let text = crate::data::detokenize(&tokens);
    Ok(Generation { tokens, text })
}

/// Summed masked NLL and token count per exit over `batches`.
pub fn exit_nll<T: Scalar>(
    params: &Parameters<T>,
    heads: HeadSource<'_, T>,
    batches: &[Batch],
    depths: &[usize],
) -> Result<BTreeMap<usize, (f64, usize)>> {
    let v = params.config.vocab_size;
    let rows: Vec<(usize, usize)> = batches
        .iter()
        .enumerate()
        .flat_map(|(b, batch)| (0..batch.rows).map(move |r| (b, r)))
        .collect();
    let per_row = par::map_ordered(&rows, |&(b, r)| -> Result<Vec<(f64, usize)>> {
        let batch = &batches[b];
        let run = run_sequence(params, batch.row_inputs(r), depths, heads, false)?;
        let count = batch.row_mask(r).iter().filter(|&&m| m == 1).count();
        Ok(run
            .exits
            .iter()
            .map(|ex| {
                let (nll, _) = cross_entropy_rows::<T>(&ex.logits, v, batch.row_targets(r), batch.row_mask(r), None);
                (nll, count)
            })
            .collect())
    });
    let mut out: BTreeMap<usize, (f64, usize)> = depths.iter().map(|&d| (d, (0.0, 0))).collect();
    for row in per_row {
        for (&d, (nll, n)) in depths.iter().zip(row?) {
            let e = out.get_mut(&d).expect("depth present");
            e.0 += nll;
            e.1 += n;
        }
    }
    Ok(out)
}

/// Mean masked NLL per exit.
pub fn exit_losses<T: Scalar>(
    params: &Parameters<T>,
    heads: HeadSource<'_, T>,
    batches: &[Batch],
    depths: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    exit_nll(params, heads, batches, depths)?
        .into_iter()
        .map(|(d, (nll, n))| {
            if n == 0 {
                Err(Error::EmptyLoss)
            } else {
                Ok((d, nll / n as f64))
            }
        })
        .collect()
}

/// Batch size used when evaluating a plain example list.
pub const EVAL_BATCH_SIZE: usize = 8;

/// `exp(mean masked NLL)` at one exit.
pub fn perplexity<T: Scalar>(
    params: &Parameters<T>,
    exit_set: &ExitSet,
    heads: Option<&PerExitHeads<T>>,
    head_choice: HeadChoice,
    exit_depth: usize,
    dataset: &[TokenizedExample],
    mask_prompt: bool,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("perplexity needs a non-empty dataset".into()));
    }
    let source = resolve_heads(exit_set, heads, exit_depth, head_choice)?;
    let batches = build_batches(dataset, params.config.max_seq_len, EVAL_BATCH_SIZE, EOS_ID, mask_prompt)?.batches;
    let (nll, count) = exit_nll(params, source, &batches, &[exit_depth])?[&exit_depth];
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((nll / count as f64).exp())
}
