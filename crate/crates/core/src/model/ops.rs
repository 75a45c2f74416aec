//! Row-wise kernels shared by the forward and backward passes.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() {
        return Err(Error::InvalidArgument(format!(
            "rms_norm: input has {} elements, gain has {}",
            x.len(),
            gain.len()
        )));
    }
    if eps < T::zero() {
        return Err(Error::InvalidArgument("rms_norm: eps must be >= 0".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    let inv = inv_rms(x, eps);
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xi * inv;
    }
    Ok(out)
}

fn inv_rms<T: Scalar>(x: &[T], eps: T) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let ms = x.iter().map(|&v| v * v).sum::<T>() / T::from_usize(x.len()).unwrap();
    let denom = (ms + eps).sqrt();
    // Zero rows with eps = 0 map to zero rather than NaN.
    if denom == T::zero() {
        T::zero()
    } else {
        denom.recip()
    }
}

/// Normalises each `d`-wide row; returns the output and the per-row `1/rms`.
pub(crate) fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: T, d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut invs = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let inv = inv_rms(xr, eps);
        for ((o, &xi), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = g * xi * inv;
        }
        invs.push(inv);
    }
    (out, invs)
}

/// Backward of [`rms_norm_rows`]: adds the input gradient into `dx` and the
/// gain gradient into `dgain`.
pub(crate) fn rms_norm_rows_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    invs: &[T],
    gain: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let dt = T::from_usize(d).unwrap();
    for (((dyr, xr), &inv), dxr) in dy
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(invs)
        .zip(dx.chunks_exact_mut(d))
    {
        let mut dot = T::zero();
        for i in 0..d {
            dgain[i] = dgain[i] + dyr[i] * xr[i] * inv;
            dot = dot + gain[i] * dyr[i] * xr[i];
        }
        let coef = inv * inv * inv * dot / dt;
        for i in 0..d {
            dxr[i] = dxr[i] + inv * gain[i] * dyr[i] - xr[i] * coef;
        }
    }
}

/// Rotary position tables for positions `0..len`, pairs `(2i, 2i+1)` in each head.
pub(crate) struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub(crate) fn new(len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every head of an `s × (n_heads * head_dim)` matrix in place.
    /// `inverse` applies the transpose rotation (used for gradients).
    pub(crate) fn apply(&self, x: &mut [T], s: usize, width: usize, inverse: bool) {
        let hd = 2 * self.half;
        for pos in 0..s {
            let row = &mut x[pos * width..(pos + 1) * width];
            let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
            for head in row.chunks_exact_mut(hd) {
                for i in 0..self.half {
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// In-place causal softmax over an `s × s` score matrix: row `i` keeps
/// columns `0..=i`, later columns become exactly zero.
pub(crate) fn causal_softmax<T: Scalar>(scores: &mut [T], s: usize) {
    for (i, row) in scores.chunks_exact_mut(s).enumerate() {
        let (live, masked) = row.split_at_mut(i + 1);
        softmax_in_place(live);
        masked.iter_mut().for_each(|x| *x = T::zero());
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = sum.recip();
    row.iter_mut().for_each(|x| *x = *x * inv);
}

/// Numerically stable `log(sum(exp(row)))`.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().map(|&x| (x - max).exp()).sum::<T>();
    max + sum.ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_norm_examples() {
        assert_eq!(rms_norm(&[0.0f64, 0.0], &[1.0, 1.0], 1e-5).unwrap(), vec![0.0, 0.0]);

        // Scalar oracle: x_i / sqrt((9 + 16) / 2).
        let denom = (25.0f64 / 2.0).sqrt();
        let y = rms_norm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 3.0 / denom).abs() < 1e-12);
        assert!((y[1] - 4.0 / denom).abs() < 1e-12);
        assert!((y[0] - 0.848528).abs() < 1e-6 && (y[1] - 1.131371).abs() < 1e-6);

        for c in [-2.5f64, 0.1, 7.0] {
            let y = rms_norm(&[c, c, c], &[1.0; 3], 0.0).unwrap();
            for v in y {
                assert!((v - c.signum()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rms_norm_dimension_mismatch() {
        assert!(matches!(
            rms_norm(&[1.0f32, 2.0], &[1.0], 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let rope = Rope::<f64>::new(4, 4, 10_000.0);
        let orig: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let mut x = orig.clone();
        rope.apply(&mut x, 4, 8, false);
        assert_ne!(x, orig);
        rope.apply(&mut x, 4, 8, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut s = vec![1.0f64; 9];
        causal_softmax(&mut s, 3);
        assert_eq!(&s[0..3], &[1.0, 0.0, 0.0]);
        assert!((s[3] - 0.5).abs() < 1e-15 && s[5] == 0.0);
        assert!((s[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }
}
