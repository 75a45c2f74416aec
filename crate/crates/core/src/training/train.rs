use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy_rows, LossBreakdown};
use super::optimizer::{apply_update, OptimizerConfig, OptimizerState};
use crate::data::{build_batches, shuffled, Batch, TokenizedExample, EOS_ID};
use crate::error::{Error, Result};
use crate::inference::exit_losses;
use crate::model::{backward_sequence, run_sequence, ExitSet, HeadSource, Parameters};
use crate::par;
use crate::tensor::Scalar;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Which exits carry loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Weighted sum of every exit's loss, one backward pass per step.
    #[serde(rename = "soft")]
    SoftSum,
    /// One uniformly sampled exit per micro-step, gradients accumulated.
    #[serde(rename = "soft-sampled")]
    SoftSampled,
    /// Full-depth loss only.
    #[serde(rename = "sft")]
    Sft,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::SoftSum => "soft",
            TrainMode::SoftSampled => "soft-sampled",
            TrainMode::Sft => "sft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Caps the number of optimizer steps; `None` runs `epochs` full passes.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Per-exit weights aligned with the exit set; `None` means all 1.0.
    pub exit_weights: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
    pub grad_accum_steps: usize,
    pub mask_prompt: bool,
    pub pad_id: u32,
    /// Validation interval in steps; 0 validates only after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 2,
            max_steps: None,
            batch_size: 4,
            seed: 0,
            mode: TrainMode::SoftSum,
            exit_weights: None,
            optimizer: OptimizerConfig::default(),
            grad_accum_steps: 1,
            mask_prompt: true,
            pad_id: EOS_ID,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, exits: &ExitSet) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive".into());
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 1 || self.grad_accum_steps < 1 {
            return fail("batch_size and grad_accum_steps must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be >= 1".into());
        }
        if let Some(w) = &self.exit_weights {
            if w.len() != exits.len() {
                return fail(format!("{} exit weights for {} exits", w.len(), exits.len()));
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return fail("exit weights must be finite and non-negative".into());
            }
            if w.iter().all(|&x| x == 0.0) {
                return fail("exit weights are all zero".into());
            }
        }
        self.optimizer.validate()
    }

    pub fn weights(&self, exits: &ExitSet) -> Vec<f64> {
        self.exit_weights.clone().unwrap_or_else(|| vec![1.0; exits.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub per_exit: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: usize,
    pub dropped_examples: usize,
    pub history: Vec<LossBreakdown>,
    pub validation: Vec<ValidationPoint>,
    /// Wall-clock seconds per step. Kept out of the serialized report so that
    /// reruns produce identical bytes.
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn final_validation(&self) -> Option<&BTreeMap<usize, f64>> {
        self.validation.last().map(|v| &v.per_exit)
    }
}

/// Summed per-row result of a loss/gradient evaluation.
pub(crate) struct RowGrad<T> {
    pub grads: Parameters<T>,
    /// NLL sum per computed exit, aligned with the requested exits.
    pub nll: Vec<f64>,
}

/// Loss and gradient of `Σ_e weight_e · mean_nll_e` for one batch.
///
/// `exits` lists `(depth, weight)`; zero-weight exits are evaluated for the
/// report but skipped in the backward pass. Rows run through
/// [`par::map_ordered`] and are summed in row order.
pub(crate) fn batch_loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    batch: &Batch,
    exits: &[(usize, f64)],
) -> Result<(Parameters<T>, Vec<f64>, usize)> {
    let count = batch.masked_count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let depths: Vec<usize> = exits.iter().map(|e| e.0).collect();
    let v = params.config.vocab_size;
    let rows: Vec<usize> = (0..batch.rows).collect();
    let per_row = par::map_ordered(&rows, |&r| -> Result<RowGrad<T>> {
        let inputs = batch.row_inputs(r);
        let run = run_sequence(params, inputs, &depths, HeadSource::Shared, true)?;
        let mut nll = Vec::with_capacity(exits.len());
        let mut dlogits = Vec::with_capacity(exits.len());
        for (ex, &(_, w)) in run.exits.iter().zip(exits) {
            let scale = (w != 0.0).then(|| T::from_f64_lossy(w / count as f64));
            let (sum, g) = cross_entropy_rows(&ex.logits, v, batch.row_targets(r), batch.row_mask(r), scale);
            nll.push(sum);
            dlogits.push(g);
        }
        let mut grads = params.zeros_like();
        backward_sequence(params, inputs, &run, &dlogits, &mut grads);
        Ok(RowGrad { grads, nll })
    });
    let mut total = params.zeros_like();
    let mut nll = vec![0.0; exits.len()];
    for row in per_row {
        let row = row?;
        total.add_assign(&row.grads);
        for (acc, x) in nll.iter_mut().zip(&row.nll) {
            *acc += x;
        }
    }
    Ok((total, nll, count))
}

/// Cycles through shuffled epochs of batches.
struct BatchStream<'a> {
    examples: &'a [TokenizedExample],
    cfg: &'a TrainConfig,
    max_seq_len: usize,
    epoch: u64,
    batches: Vec<Batch>,
    next: usize,
    dropped: usize,
}

impl<'a> BatchStream<'a> {
    fn new(examples: &'a [TokenizedExample], cfg: &'a TrainConfig, max_seq_len: usize) -> Result<Self> {
        let mut s = Self {
            examples,
            cfg,
            max_seq_len,
            epoch: 0,
            batches: Vec::new(),
            next: 0,
            dropped: 0,
        };
        s.load_epoch()?;
        if s.batches.is_empty() {
            return Err(Error::InvalidArgument(
                "training data yields no batches (empty, or every prompt overflows)".into(),
            ));
        }
        Ok(s)
    }

    fn load_epoch(&mut self) -> Result<()> {
        let order = shuffled(self.examples, self.cfg.seed, self.epoch);
        let set = build_batches(
            &order,
            self.max_seq_len,
            self.cfg.batch_size,
            self.cfg.pad_id,
            self.cfg.mask_prompt,
        )?;
        if self.epoch == 0 {
            self.dropped = set.dropped;
        }
        self.batches = set.batches;
        self.next = 0;
        Ok(())
    }

    fn per_epoch(&self) -> usize {
        self.batches.len()
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.next == self.batches.len() {
            self.epoch += 1;
            self.load_epoch()?;
        }
        self.next += 1;
        Ok(self.batches[self.next - 1].clone())
    }
}

/// Trains `params` with the configured mode; deterministic given the seed.
pub fn train<T: Scalar>(
    mut params: Parameters<T>,
    exit_set: &ExitSet,
    train_data: &[TokenizedExample],
    val_data: &[TokenizedExample],
    cfg: &TrainConfig,
) -> Result<(Parameters<T>, TrainReport)> {
    let n_blocks = params.config.n_blocks;
    params.config.validate()?;
    exit_set.validate(n_blocks)?;
    cfg.validate(exit_set)?;
    if train_data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }

    let weights = cfg.weights(exit_set);
    let depths = exit_set.depths();
    let mut stream = BatchStream::new(train_data, cfg, params.config.max_seq_len)?;
    let total_steps = cfg
        .max_steps
        .unwrap_or_else(|| cfg.epochs * stream.per_epoch().div_ceil(cfg.grad_accum_steps));
    let val_batches = if val_data.is_empty() {
        Vec::new()
    } else {
        build_batches(
            val_data,
            params.config.max_seq_len,
            cfg.batch_size,
            cfg.pad_id,
            cfg.mask_prompt,
        )?
        .batches
    };

    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut opt = OptimizerState::for_params(&params);
    let mut report = TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: cfg.mode,
        seed: cfg.seed,
        steps: 0,
        dropped_examples: stream.dropped,
        history: Vec::with_capacity(total_steps),
        validation: Vec::new(),
        step_seconds: Vec::with_capacity(total_steps),
    };

    for step in 0..total_steps {
        let started = Instant::now();
        let mut grads = params.zeros_like();
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut tokens = 0;
        for _ in 0..cfg.grad_accum_steps {
            let batch = stream.next_batch()?;
            let active: Vec<(usize, f64)> = match cfg.mode {
                TrainMode::SoftSum => depths.iter().copied().zip(weights.iter().copied()).collect(),
                TrainMode::Sft => vec![(n_blocks, 1.0)],
                TrainMode::SoftSampled => {
                    let i = sampler.random_range(0..depths.len());
                    vec![(depths[i], weights[i])]
                }
            };
            let (g, nll, count) = batch_loss_and_grad(&params, &batch, &active)?;
            grads.add_assign(&g);
            tokens += count;
            for ((d, _), s) in active.iter().zip(nll) {
                let e = sums.entry(*d).or_insert((0.0, 0));
                e.0 += s / count as f64;
                e.1 += 1;
            }
        }
        if cfg.grad_accum_steps > 1 {
            grads.scale(T::from_f64_lossy(1.0 / cfg.grad_accum_steps as f64));
        }

        let per_exit: BTreeMap<usize, f64> = sums.iter().map(|(&d, &(s, n))| (d, s / n as f64)).collect();
        let total: f64 = per_exit
            .iter()
            .map(|(d, l)| {
                let w = match cfg.mode {
                    TrainMode::Sft => 1.0,
                    _ => weights[exit_set.position(*d).expect("active exit is in the set")],
                };
                w * l
            })
            .sum();
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }

        apply_update(&mut params, &grads, &mut opt, cfg.learning_rate, &cfg.optimizer)?;
        report.history.push(LossBreakdown {
            per_exit,
            total,
            tokens_counted: tokens,
        });
        report.step_seconds.push(started.elapsed().as_secs_f64());
        report.steps = step + 1;

        let last = step + 1 == total_steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if !val_batches.is_empty() && (last || due) {
            let per_exit = exit_losses(&params, HeadSource::Shared, &val_batches, depths)?;
            report.validation.push(ValidationPoint {
                step: step + 1,
                per_exit,
            });
        }
        if (step + 1) % 100 == 0 || last {
            log::info!(
                "step {}/{} mode={} total={:.4}",
                step + 1,
                total_steps,
                cfg.mode,
                report.history[step].total
            );
        }
    }
    Ok((params, report))
}
