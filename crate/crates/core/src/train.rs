//! Supervised training (MSE + Adam), regression metrics and the mean
//! baseline.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Matrix};
use crate::dataset::{fit_standardizer, InstanceRecord};
use crate::error::{Error, Result};
use crate::gats::{GraphInput, ModelParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 1e-4, batch_size: 32, seed: 123, validation_fraction: 0.1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss after every optimizer step.
    pub steps: Vec<LossPoint>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation MSE after every epoch (empty without a validation split).
    pub validation_loss: Vec<f64>,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Computes per-example loss and gradients for a batch. Results must come
/// back in batch order; the trainer reduces them sequentially so any
/// implementation gives the same parameters.
pub trait BatchEvaluator {
    fn evaluate(&self, model: &ModelParams, batch: &[(&GraphInput, f64)]) -> Result<Vec<(f64, Vec<Matrix>)>>;
}

/// Evaluates a batch one example at a time.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl BatchEvaluator for Serial {
    fn evaluate(&self, model: &ModelParams, batch: &[(&GraphInput, f64)]) -> Result<Vec<(f64, Vec<Matrix>)>> {
        batch.iter().map(|(g, y)| model.loss_and_grads(g, *y)).collect()
    }
}

/// Seeded split into `(train, validation)` index sets.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed ^ 0x5EED_5011));
    let n_val = libm::floor(validation_fraction * n as f64) as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub fn train(model: ModelParams, records: &[InstanceRecord], cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    train_with(model, records, cfg, &Serial)
}

/// Fits the standardizer on the training split (when it has at least two
/// records), then runs `cfg.epochs` epochs of mini-batch Adam on the mean
/// squared error.
pub fn train_with<E: BatchEvaluator>(
    mut model: ModelParams,
    records: &[InstanceRecord],
    cfg: &TrainConfig,
    evaluator: &E,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let labels = records
        .iter()
        .map(|r| r.label.ok_or(Error::InvalidConfig("training records must be labeled".into())))
        .collect::<Result<Vec<f64>>>()?;
    let (train_idx, val_idx) = split_indices(records.len(), cfg.validation_fraction, cfg.seed);
    if train_idx.len() >= 2 {
        let train_records: Vec<InstanceRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
        model.standardizer = fit_standardizer(&train_records)?;
    }
    let inputs = records
        .iter()
        .map(|r| GraphInput::from_standardized(&model.standardizer.apply(r)))
        .collect::<Result<Vec<_>>>()?;

    let mut flat = model.to_flat();
    let mut adam = AdamState::new(&flat, cfg.learning_rate);
    let mut order = train_idx.clone();
    let mut shuffler = rng::seeded(cfg.seed);
    let mut report = TrainReport { n_train: train_idx.len(), n_validation: val_idx.len(), ..TrainReport::default() };
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&GraphInput, f64)> = chunk.iter().map(|&i| (&inputs[i], labels[i])).collect();
            let results = evaluator.evaluate(&model, &batch)?;
            if results.len() != batch.len() {
                return Err(Error::ShapeMismatch(format!(
                    "evaluator returned {} results for {} examples",
                    results.len(),
                    batch.len()
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            let mut grads: Vec<Matrix> = flat.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                        *a += b * inv;
                    }
                }
            }
            adam_step(&mut flat, &grads, &mut adam)?;
            model.set_flat(&flat)?;
            epoch_sum += batch_loss;
            report.steps.push(LossPoint { epoch, step, loss: batch_loss * inv });
            step += 1;
        }
        report.epoch_loss.push(epoch_sum / train_idx.len() as f64);
        if !val_idx.is_empty() {
            let mut sum = 0.0;
            for &i in &val_idx {
                let y = model.predict_input(&inputs[i])?.prediction.y_hat;
                sum += (y - labels[i]) * (y - labels[i]);
            }
            report.validation_loss.push(sum / val_idx.len() as f64);
        }
    }
    Ok((model, report))
}

/// Labels closer to zero than this are left out of MAPE.
pub const MAPE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    /// `None` when every label is below [`MAPE_GUARD`].
    pub mape: Option<f64>,
    pub n_samples: usize,
    /// Seconds spent producing the predictions, when measured.
    pub wall_time: Option<f64>,
}

pub fn metrics(predictions: &[f64], labels: &[f64]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("metrics over zero samples"));
    }
    let n = labels.len() as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut pct = 0.0;
    let mut n_pct = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        let err = p - y;
        mse += err * err;
        mae += libm::fabs(err);
        if libm::fabs(y) > MAPE_GUARD {
            pct += libm::fabs(err) / libm::fabs(y);
            n_pct += 1;
        }
    }
    Ok(MetricsReport {
        mse: mse / n,
        mae: mae / n,
        mape: (n_pct > 0).then(|| pct / n_pct as f64),
        n_samples: labels.len(),
        wall_time: None,
    })
}

/// Predicts the training-label mean for every input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanBaseline {
    pub mean: f64,
}

impl MeanBaseline {
    pub fn predict(&self) -> f64 {
        self.mean
    }
}

pub fn mean_baseline(train_labels: &[f64]) -> Result<MeanBaseline> {
    if train_labels.is_empty() {
        return Err(Error::EmptyInput("mean baseline over zero labels"));
    }
    Ok(MeanBaseline { mean: train_labels.iter().sum::<f64>() / train_labels.len() as f64 })
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
