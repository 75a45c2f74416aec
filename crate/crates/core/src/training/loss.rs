use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ops::log_sum_exp;
use crate::tensor::{Scalar, Tensor};

/// Masked cross-entropy over `s` rows of `v` logits.
///
/// Returns the summed negative log-likelihood (in `f64`) of the selected rows
/// and, when `grad_scale` is given, `d loss / d logits` for a loss of
/// `grad_scale * Σ nll` (zero on unselected rows).
pub(crate) fn cross_entropy_rows<T: Scalar>(
    logits: &[T],
    v: usize,
    targets: &[u32],
    mask: &[u8],
    grad_scale: Option<T>,
) -> (f64, Option<Vec<T>>) {
    let mut nll = 0.0f64;
    let mut grad = grad_scale.map(|_| vec![T::zero(); logits.len()]);
    for (r, row) in logits.chunks_exact(v).enumerate() {
        if mask[r] == 0 {
            continue;
        }
        let target = targets[r] as usize;
        let lse = log_sum_exp(row);
        nll += (lse - row[target]).to_f64().unwrap_or(f64::NAN);
        if let (Some(g), Some(scale)) = (grad.as_mut(), grad_scale) {
            let gr = &mut g[r * v..(r + 1) * v];
            for (gi, &x) in gr.iter_mut().zip(row) {
                *gi = (x - lse).exp() * scale;
            }
            gr[target] = gr[target] - scale;
        }
    }
    (nll, grad)
}

/// Mean over unmasked positions of `-log softmax(logits)[target]`.
///
/// `logits` is `[batch × seq × vocab]`; `targets` and `loss_mask` are `[batch × seq]`.
pub fn token_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32], loss_mask: &[u8]) -> Result<f64> {
    let shape = logits.shape();
    let v = *shape
        .last()
        .ok_or_else(|| Error::InvalidArgument("logits must have a vocabulary axis".into()))?;
    let positions = logits.len().checked_div(v).unwrap_or(0);
    if targets.len() != positions || loss_mask.len() != positions {
        return Err(Error::InvalidArgument(format!(
            "logits cover {positions} positions but targets/mask have {}/{}",
            targets.len(),
            loss_mask.len()
        )));
    }
    if let Some(&bad) = targets
        .iter()
        .zip(loss_mask)
        .find(|(t, &m)| m == 1 && **t as usize >= v)
        .map(|(t, _)| t)
    {
        return Err(Error::InvalidArgument(format!(
            "target {bad} outside vocabulary of {v}"
        )));
    }
    let count = loss_mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let (nll, _) = cross_entropy_rows(logits.data(), v, targets, loss_mask, None);
    Ok(nll / count as f64)
}

/// `Σ_n weight_n · L_n`, with `per_exit` iterated in ascending depth.
pub fn sorted_objective(per_exit: &BTreeMap<usize, f64>, weights: &[f64]) -> Result<f64> {
    if per_exit.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} exit losses but {} weights",
            per_exit.len(),
            weights.len()
        )));
    }
    Ok(per_exit.values().zip(weights).map(|(l, w)| w * l).sum())
}

/// Per-exit losses of one optimizer step and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_exit: BTreeMap<usize, f64>,
    pub total: f64,
    pub tokens_counted: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        for v in [2usize, 17, 258] {
            let logits = Tensor::<f64>::zeros(&[1, 3, v]);
            let ce = token_cross_entropy(&logits, &[0, 1, 1], &[1, 1, 0]).unwrap();
            assert!((ce - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn near_one_hot_has_tiny_loss() {
        let logits = Tensor::from_vec(&[1, 1, 4], vec![0.0f64, 30.0, 0.0, 0.0]);
        assert!(token_cross_entropy(&logits, &[1], &[1]).unwrap() < 1e-9);
    }

    #[test]
    fn three_way_example_matches_direct_oracle() {
        // Direct softmax and negative log.
        let e = 1.0f64.exp();
        let oracle = -(e / (e + 1.0 + 1.0)).ln();
        let logits = Tensor::from_vec(&[1, 1, 3], vec![1.0f64, 0.0, 0.0]);
        let ce = token_cross_entropy(&logits, &[0], &[1]).unwrap();
        assert!((ce - oracle).abs() < 1e-12);
        assert!((ce - 0.551445).abs() < 1e-6);
    }

    #[test]
    fn all_masked_is_an_error() {
        let logits = Tensor::<f32>::zeros(&[1, 2, 3]);
        assert!(matches!(
            token_cross_entropy(&logits, &[0, 1], &[0, 0]),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = vec![0.3f64, -1.0, 2.0, 0.5, 0.5, 0.5];
        let (_, g) = cross_entropy_rows(&logits, 3, &[2, 0], &[1, 0], Some(0.5));
        let g = g.unwrap();
        assert!(g[0..3].iter().sum::<f64>().abs() < 1e-15);
        assert!(g[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn objective_examples() {
        let losses = BTreeMap::from([(2, 1.0), (4, 2.0), (8, 3.0)]);
        assert_eq!(sorted_objective(&losses, &[1.0, 1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(sorted_objective(&losses, &[0.0, 0.0, 1.0]).unwrap(), 3.0);
        let single = BTreeMap::from([(8, 2.5)]);
        assert_eq!(sorted_objective(&single, &[1.0]).unwrap(), 2.5);
        assert!(sorted_objective(&losses, &[1.0]).is_err());
    }
}
