//! Optimization loop: Adam with global-norm gradient clipping, plateau
//! learning-rate halving, early stopping, best-checkpoint tracking, and
//! original-scale evaluation metrics.
//!
//! All stochasticity (shuffling, incidence noise, dropout) derives from the
//! configured seed, so two runs with identical config and data agree
//! bitwise: same history, same checkpoint.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Normalizer, WindowBatch};
use crate::model::{
    forward_on, mae_terms_on, nll_terms_on, Model, ModelError, ModelParams,
};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Targets smaller than this (original scale) are skipped by MAPE.
pub const MAPE_SKIP_THRESHOLD: f64 = 1e-8;

/// Errors from configuration, optimization, or evaluation.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss became non-finite")]
    Diverged { epoch: usize, step: usize },
    #[error("evaluation set has no observed target entries")]
    EmptyEvaluation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Loss the optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Masked mean absolute error on the point forecast.
    Mae,
    /// Masked Gaussian negative log likelihood (requires the uncertainty
    /// head).
    GaussianNll,
}

impl std::str::FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "gaussian_nll" => Ok(LossKind::GaussianNll),
            other => Err(TrainError::Config(format!(
                "unknown loss `{other}` (expected mae or gaussian_nll)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::GaussianNll => "gaussian_nll",
        })
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before the learning rate is
    /// halved.
    pub plateau_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            plateau_patience: 5,
            early_stop_patience: 10,
            grad_clip: 5.0,
            loss: LossKind::Mae,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config(format!(
                "epochs must be >= 1, got {}",
                self.epochs
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.plateau_patience < 1 || self.early_stop_patience < 1 {
            return Err(TrainError::Config(format!(
                "patience values must be >= 1, got plateau {} / early stop {}",
                self.plateau_patience, self.early_stop_patience
            )));
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            return Err(TrainError::Config(format!(
                "grad_clip must be finite and >= 0 (0 disables), got {}",
                self.grad_clip
            )));
        }
        Ok(())
    }
}

/// Adam optimizer state: first/second moments per parameter (kept in the
/// canonical parameter order) and a shared step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected update. Every tensor must carry a gradient of its
    /// own length; moments are allocated on first use and afterwards must
    /// keep matching the parameter list.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<(), TrainError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TrainError::Config(format!(
                "optimizer state holds {} parameters, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let m_corr = 1.0 - BETA1.powi(self.step as i32);
        let v_corr = 1.0 - BETA2.powi(self.step as i32);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad.as_ref().ok_or_else(|| {
                TrainError::Config(format!("parameter `{name}` has no gradient"))
            })?;
            if grad.len() != tensor.numel() || self.m[i].len() != tensor.numel() {
                return Err(TrainError::Config(format!(
                    "gradient/state length mismatch for parameter `{name}`"
                )));
            }
            let grad = grad.clone();
            let values = tensor.values_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                self.m[i][j] = BETA1 * self.m[i][j] + (1.0 - BETA1) * g;
                self.v[i][j] = BETA2 * self.v[i][j] + (1.0 - BETA2) * g * g;
                let m_hat = self.m[i][j] / m_corr;
                let v_hat = self.v[i][j] / v_corr;
                values[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every parameter gradient.
pub fn global_grad_norm(params: &[(String, &mut Tensor)]) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `clip` (no-op when
/// `clip` is 0). Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [(String, &mut Tensor)], clip: f64) -> f64 {
    let norm = global_grad_norm(params);
    if clip > 0.0 && norm > clip {
        let factor = clip / norm;
        for (_, tensor) in params.iter_mut() {
            if let Some(grad) = tensor.grad.as_mut() {
                for g in grad.iter_mut() {
                    *g *= factor;
                }
            }
        }
    }
    norm
}

/// One error statistic triple. `mape` is a percentage and is NaN when no
/// target passed the magnitude threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Original-scale error report: one row per horizon step plus the pooled
/// aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_horizon: Vec<MetricRow>,
    pub aggregate: MetricRow,
}

/// Streaming accumulator for [`MetricReport`]. Feed `(horizon step,
/// prediction, target)` triples on the original scale; masked entries simply
/// are not fed.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    ape: Vec<f64>,
    count: Vec<usize>,
    ape_count: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        Self {
            abs: vec![0.0; horizon],
            sq: vec![0.0; horizon],
            ape: vec![0.0; horizon],
            count: vec![0; horizon],
            ape_count: vec![0; horizon],
        }
    }

    pub fn add(&mut self, horizon_step: usize, prediction: f64, target: f64) {
        let err = (prediction - target).abs();
        self.abs[horizon_step] += err;
        self.sq[horizon_step] += err * err;
        self.count[horizon_step] += 1;
        if target.abs() >= MAPE_SKIP_THRESHOLD {
            self.ape[horizon_step] += err / target.abs();
            self.ape_count[horizon_step] += 1;
        }
    }

    pub fn total_count(&self) -> usize {
        self.count.iter().sum()
    }

    fn row(abs: f64, sq: f64, ape: f64, count: usize, ape_count: usize) -> MetricRow {
        let n = count as f64;
        MetricRow {
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            mape: if ape_count > 0 {
                100.0 * ape / ape_count as f64
            } else {
                f64::NAN
            },
        }
    }

    /// Finish into a report; errors with [`TrainError::EmptyEvaluation`]
    /// when nothing was fed. Horizon steps that received no entries report
    /// NaN rows.
    pub fn finish(self) -> Result<MetricReport, TrainError> {
        if self.total_count() == 0 {
            return Err(TrainError::EmptyEvaluation);
        }
        let per_horizon = (0..self.abs.len())
            .map(|h| {
                if self.count[h] == 0 {
                    MetricRow {
                        mae: f64::NAN,
                        rmse: f64::NAN,
                        mape: f64::NAN,
                    }
                } else {
                    Self::row(
                        self.abs[h],
                        self.sq[h],
                        self.ape[h],
                        self.count[h],
                        self.ape_count[h],
                    )
                }
            })
            .collect();
        let aggregate = Self::row(
            self.abs.iter().sum(),
            self.sq.iter().sum(),
            self.ape.iter().sum(),
            self.count.iter().sum(),
            self.ape_count.iter().sum(),
        );
        Ok(MetricReport {
            per_horizon,
            aggregate,
        })
    }
}

/// Evaluate a model over a window set. Forecasts and targets are mapped back
/// to the original scale through `normalizer` (pass `None` when the windows
/// are already on the scale you want metrics in); only observed target
/// entries are scored.
pub fn evaluate(
    model: &Model,
    windows: &WindowBatch,
    normalizer: Option<&Normalizer>,
) -> Result<MetricReport, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let upsilon = windows.targets.shape()[2];
    let mut acc = MetricAccumulator::new(upsilon);
    for w in 0..windows.len() {
        let window = windows.window(w);
        let forecast = model.forward(&window.input, Some(&window.input_mask))?;
        let (n, _, c) = (
            window.target.shape()[0],
            upsilon,
            window.target.shape()[2],
        );
        for i in 0..n {
            for h in 0..upsilon {
                for ch in 0..c {
                    let idx = (i * upsilon + h) * c + ch;
                    if window.target_mask.values()[idx] != 1.0 {
                        continue;
                    }
                    let mut pred = forecast.point.values()[idx];
                    let mut truth = window.target.values()[idx];
                    if let Some(norm) = normalizer {
                        pred = norm.denormalize_value(i, ch, pred);
                        truth = norm.denormalize_value(i, ch, truth);
                    }
                    acc.add(h, pred, truth);
                }
            }
        }
    }
    acc.finish()
}

/// One history row; `lr` is the rate in effect during the epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

/// Result of [`train`]: the best-validation checkpoint and the full history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochRecord>,
}

/// Render history as CSV (`epoch,train_loss,val_mae,lr`).
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_mae, row.lr
        ));
    }
    out
}

/// Fit `model` on `train_windows`, selecting the checkpoint with the lowest
/// validation MAE (earliest on ties).
///
/// Per epoch: windows are shuffled with a seed derived from `(config.seed,
/// epoch)`, minibatch losses are pooled sums over observed entries divided
/// by their count, gradients are clipped to `config.grad_clip` (global
/// norm), and Adam applies the update. When validation MAE fails to improve
/// for `plateau_patience` consecutive epochs the learning rate halves (and
/// the plateau counter resets); after `early_stop_patience` epochs without
/// improvement training stops. Validation MAE is computed by [`evaluate`]
/// with the given normalizer.
pub fn train(
    mut model: Model,
    train_windows: &WindowBatch,
    val_windows: &WindowBatch,
    normalizer: Option<&Normalizer>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.config.validate()?;
    if config.loss == LossKind::GaussianNll && !model.config.uncertainty {
        return Err(TrainError::Config(
            "gaussian_nll loss requires a model with the uncertainty head enabled".into(),
        ));
    }
    if train_windows.is_empty() {
        return Err(TrainError::Config("training split has no windows".into()));
    }
    if val_windows.is_empty() {
        return Err(TrainError::Config("validation split has no windows".into()));
    }
    if !train_windows.target_mask.values().iter().any(|m| *m == 1.0) {
        return Err(TrainError::Config(
            "training windows contain no observed target entries".into(),
        ));
    }

    let mut adam = Adam::new(config.lr);
    // Separate stream from the shuffler so batch-size changes do not couple
    // into incidence/dropout noise.
    let mut model_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_params: ModelParams = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut lr = config.lr;
    let mut plateau = 0usize;
    let mut since_improve = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            config
                .seed
                .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut shuffle_rng);
        adam.lr = lr;

        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for (step0, batch) in order.chunks(config.batch_size).enumerate() {
            let step = step0 + 1;
            let mut tape = Tape::new();
            let ids = model.params.place_tracked(&mut tape);
            let mut window_sums: Vec<TensorId> = Vec::new();
            let mut count_total = 0usize;
            for &w in batch {
                let window = train_windows.window(w);
                let x = tape.place(&window.input);
                let m = tape.place(&window.input_mask);
                let t = tape.place(&window.target);
                let tm = tape.place(&window.target_mask);
                let (mu, logvar) = forward_on(
                    &mut tape,
                    &model.config,
                    &ids,
                    x,
                    Some(m),
                    true,
                    &mut model_rng,
                )?;
                let (sum, count) = match config.loss {
                    LossKind::Mae => mae_terms_on(&mut tape, mu, t, Some(tm))?,
                    LossKind::GaussianNll => {
                        let lv = logvar.expect("uncertainty head checked above");
                        nll_terms_on(&mut tape, mu, lv, t, Some(tm))?
                    }
                };
                if count > 0 {
                    window_sums.push(sum);
                    count_total += count;
                }
            }
            if count_total == 0 {
                continue;
            }
            let mut total = window_sums[0];
            for sum in &window_sums[1..] {
                total = tape.add(total, *sum)?;
            }
            let batch_sum = tape.values(total)[0];
            let loss_id = tape.scale(total, 1.0 / count_total as f64)?;
            let loss_val = tape.values(loss_id)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            epoch_sum += batch_sum;
            epoch_count += count_total;

            tape.backward(loss_id)?;
            let mut named = model.params.named_params_mut();
            for (_, tensor) in named.iter_mut() {
                tape.read_grad_into(tensor)?;
            }
            let norm = clip_global_norm(&mut named, config.grad_clip);
            if !norm.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            adam.step(&mut named)?;
        }
        if epoch_count == 0 {
            return Err(TrainError::Config(
                "no observed target entries were seen this epoch".into(),
            ));
        }
        let train_loss = epoch_sum / epoch_count as f64;
        let val_mae = evaluate(&model, val_windows, normalizer)?.aggregate.mae;
        if !val_mae.is_finite() {
            return Err(TrainError::Diverged { epoch, step: 0 });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            lr,
        });

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_params = model.params.clone();
            plateau = 0;
            since_improve = 0;
        } else {
            plateau += 1;
            since_improve += 1;
            if plateau >= config.plateau_patience {
                lr /= 2.0;
                plateau = 0;
            }
            if since_improve >= config.early_stop_patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best: Model {
            config: model.config,
            params: best_params,
        },
        best_epoch,
        best_val_mae: best_val,
        history,
    })
}
