//! Early-exit baseline: per-exit copies of the final norm and head trained on
//! top of frozen blocks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::cross_entropy_rows;
use super::optimizer::{step_tensors, OptimizerState};
use super::train::TrainConfig;
use crate::data::{build_batches, shuffled, TokenizedExample};
use crate::error::{Error, Result};
use crate::model::{exit_backward, run_sequence, ExitSet, HeadSource, Parameters, PerExitHeads};
use crate::par;
use crate::tensor::{add_assign, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub steps: usize,
    /// Mean training loss per exit for each step.
    pub history: Vec<BTreeMap<usize, f64>>,
}

struct HeadGrad<T> {
    norm: Vec<T>,
    head: Vec<T>,
}

/// Clones the shared final norm and head for every exit and trains only the
/// clones, each against its own exit's cross-entropy. Block and embedding
/// parameters are read, never written; no gradient flows into them.
pub fn adapt_exit_heads<T: Scalar>(
    params: &Parameters<T>,
    exit_set: &ExitSet,
    data: &[TokenizedExample],
    cfg: &TrainConfig,
) -> Result<(PerExitHeads<T>, AdaptReport)> {
    params.config.validate()?;
    exit_set.validate(params.config.n_blocks)?;
    cfg.validate(exit_set)?;
    let depths = exit_set.depths();
    let (d, v) = (params.config.d_model, params.config.vocab_size);
    let mut heads = PerExitHeads::cloned_from(params, depths);
    let mut states: Vec<OptimizerState<T>> = depths.iter().map(|_| OptimizerState::new(&[d, d * v])).collect();
    let mut report = AdaptReport {
        steps: 0,
        history: Vec::new(),
    };

    let mut epoch = 0u64;
    'outer: loop {
        if epoch as usize >= cfg.epochs && cfg.max_steps.is_none() {
            break;
        }
        let order = shuffled(data, cfg.seed, epoch);
        let batches = build_batches(
            &order,
            params.config.max_seq_len,
            cfg.batch_size,
            cfg.pad_id,
            cfg.mask_prompt,
        )?
        .batches;
        if batches.is_empty() {
            return Err(Error::InvalidArgument("adaptation data yields no batches".into()));
        }
        for batch in &batches {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'outer;
            }
            let count = batch.masked_count() as f64;
            let scale = T::from_f64_lossy(1.0 / count);
            let rows: Vec<usize> = (0..batch.rows).collect();
            let current = &heads;
            let per_row = par::map_ordered(&rows, |&r| -> Result<Vec<(HeadGrad<T>, f64)>> {
                let run = run_sequence(params, batch.row_inputs(r), depths, HeadSource::Adapted(current), false)?;
                let mut out = Vec::with_capacity(depths.len());
                for ex in &run.exits {
                    let eh = current.get(ex.depth).expect("every exit has a head copy");
                    let (nll, dl) =
                        cross_entropy_rows(&ex.logits, v, batch.row_targets(r), batch.row_mask(r), Some(scale));
                    let mut g = HeadGrad {
                        norm: vec![T::zero(); d],
                        head: vec![T::zero(); d * v],
                    };
                    exit_backward(
                        &params.config,
                        &eh.final_norm,
                        &eh.head,
                        ex,
                        &dl.expect("gradient requested"),
                        &mut g.norm,
                        &mut g.head,
                    );
                    out.push((g, nll));
                }
                Ok(out)
            });

            let mut sums: Vec<(HeadGrad<T>, f64)> = depths
                .iter()
                .map(|_| {
                    (
                        HeadGrad {
                            norm: vec![T::zero(); d],
                            head: vec![T::zero(); d * v],
                        },
                        0.0,
                    )
                })
                .collect();
            for row in per_row {
                for (acc, (g, nll)) in sums.iter_mut().zip(row?) {
                    add_assign(&mut acc.0.norm, &g.norm);
                    add_assign(&mut acc.0.head, &g.head);
                    acc.1 += nll;
                }
            }

            let mut losses = BTreeMap::new();
            for ((depth, (g, nll)), state) in depths.iter().zip(sums).zip(states.iter_mut()) {
                let loss = nll / count;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        step: report.steps,
                        loss,
                    });
                }
                losses.insert(*depth, loss);
                let eh = heads.heads.get_mut(depth).expect("head copy");
                let gn = Tensor::from_vec(&[d], g.norm);
                let gh = Tensor::from_vec(&[d, v], g.head);
                step_tensors(
                    &mut [&mut eh.final_norm, &mut eh.head],
                    &[&gn, &gh],
                    state,
                    cfg.learning_rate,
                    &cfg.optimizer,
                )?;
            }
            report.history.push(losses);
            report.steps += 1;
        }
        epoch += 1;
    }
    Ok((heads, report))
}
