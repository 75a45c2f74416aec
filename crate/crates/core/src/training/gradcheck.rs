//! Central-difference validation of the analytic gradient of the summed
//! multi-exit loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::batch_loss_and_grad;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{ExitSet, InitScheme, ModelConfig, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub exits: Vec<usize>,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub samples_per_tensor: usize,
    pub init_std: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            exits: vec![1, 2],
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            batch: 2,
            seq_len: 5,
            samples_per_tensor: 200,
            init_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-12)`, with `0/0 := 0`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn random_batch(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Batch {
    let (b, s, v) = (cfg.batch, cfg.seq_len, cfg.model.vocab_size as u32);
    let inputs: Vec<u32> = (0..b * s).map(|_| rng.random_range(0..v)).collect();
    let targets: Vec<u32> = (0..b * s).map(|_| rng.random_range(0..v)).collect();
    let mut mask: Vec<u8> = (0..b * s).map(|_| u8::from(rng.random_bool(0.7))).collect();
    mask[0] = 1;
    Batch {
        rows: b,
        seq_len: s,
        inputs,
        targets,
        mask,
        lengths: vec![s; b],
    }
}

fn total_loss(params: &Parameters<f64>, batch: &Batch, exits: &[(usize, f64)]) -> Result<f64> {
    let (_, nll, count) = batch_loss_and_grad(params, batch, exits)?;
    Ok(nll.iter().zip(exits).map(|(n, (_, w))| w * n / count as f64).sum())
}

/// Compares the analytic gradient against `(L(θ+h) − L(θ−h)) / 2h` on up to
/// `samples_per_tensor` coordinates of every tensor, in `f64`.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    if cfg.seq_len > cfg.model.max_seq_len || cfg.batch == 0 || cfg.seq_len == 0 {
        return Err(Error::InvalidArgument("batch/seq_len do not fit the model".into()));
    }
    let exit_set = ExitSet::new(cfg.exits.clone(), cfg.model.n_blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Parameters::<f64>::init_with(
        &cfg.model,
        cfg.seed,
        InitScheme {
            std: cfg.init_std,
            scale_residual: false,
        },
    )?;
    // Non-unit gains exercise the norm gradients.
    for (name, t) in params.named_tensors_mut() {
        if name.ends_with("norm") {
            for x in t.data_mut() {
                *x = 1.0 + 0.2 * (rng.random::<f64>() - 0.5);
            }
        }
    }
    let batch = random_batch(cfg, &mut rng);
    let exits: Vec<(usize, f64)> = exit_set.depths().iter().map(|&d| (d, 1.0)).collect();
    let (analytic, _, _) = batch_loss_and_grad(&params, &batch, &exits)?;

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    let analytic_tensors = analytic.named_tensors();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic_tensors[ti].1.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut p = sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            p.sort_unstable();
            p
        };
        for idx in picks {
            let orig = params.named_tensors()[ti].1.data()[idx];
            let set = |p: &mut Parameters<f64>, x: f64| {
                p.named_tensors_mut()[ti].1.data_mut()[idx] = x;
            };
            set(&mut params, orig + cfg.step);
            let plus = total_loss(&params, &batch, &exits)?;
            set(&mut params, orig - cfg.step);
            let minus = total_loss(&params, &batch, &exits)?;
            set(&mut params, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "finite difference for {name}[{idx}] is {numeric}"
                )));
            }
            let a = analytic_tensors[ti].1.data()[idx];
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = idx;
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}
