//! The pipeline stages as plain functions of their inputs; the CLI only adds
//! file handling around them.

use std::time::Instant;

use gridshed_core::attack::disruption_probabilities;
use gridshed_core::dataset::{extract_features, label_ks_distance, resample, InstanceRecord, ResamplePlan};
use gridshed_core::gats::{init_params, ModelConfig, ModelParams};
use gridshed_core::microgrid::{generate_microgrid, GenerationConfig, Microgrid, LITERAL_Q_RANGE};
use gridshed_core::shedding::node_vulnerability;
use gridshed_core::train::{
    mean_baseline, metrics, split_indices, train_with, MetricsReport, TrainConfig, TrainReport,
};
use serde::{Deserialize, Serialize};

use crate::formats::{AnyRecord, FormatError, LabeledInstance};
use crate::parallel::{estimate_elsr_par, Jobs, PoolEvaluator};

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] gridshed_core::Error),
    #[error("{0}")]
    Input(String),
}

pub type StageResult<T> = Result<T, StageError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub n_instances: usize,
    pub base: GenerationConfig,
    pub literal_q: bool,
}

/// Instance `i` is generated from seed `base.seed + i`.
pub fn generate(opts: &GenerateOptions) -> StageResult<Vec<Microgrid>> {
    let mut cfg = opts.base.clone();
    if opts.literal_q {
        cfg.q_load_range = LITERAL_Q_RANGE;
    }
    cfg.validate()?;
    (0..opts.n_instances as u64)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            Ok(generate_microgrid(&c)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelOptions {
    pub n_scenarios: usize,
    pub seed: u64,
    pub p_min: f64,
    pub p_max: f64,
}

/// Monte Carlo ELSR for every grid; grid `i` uses scenario stream `seed + i`.
pub fn label(grids: &[Microgrid], opts: &LabelOptions, jobs: &Jobs) -> StageResult<Vec<LabeledInstance>> {
    grids
        .iter()
        .enumerate()
        .map(|(i, mg)| {
            let seed = opts.seed.wrapping_add(i as u64);
            let probs = disruption_probabilities(mg, opts.p_min, opts.p_max)?;
            let est = estimate_elsr_par(jobs, mg, &probs, opts.n_scenarios, seed)?;
            Ok(LabeledInstance {
                instance: mg.clone(),
                elsr: est.mean,
                std_error: est.std_error,
                n_scenarios: est.n_scenarios,
                seed,
            })
        })
        .collect()
}

/// Feature records carrying labels; unlabeled inputs are rejected.
pub fn labeled_records(records: &[AnyRecord]) -> StageResult<Vec<InstanceRecord>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let f = r.features();
            if f.label.is_none() {
                return Err(StageError::Input(format!("record {} has no label", i + 1)));
            }
            Ok(f)
        })
        .collect()
}

fn labels_of(records: &[InstanceRecord]) -> Vec<f64> {
    records.iter().filter_map(|r| r.label).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOutcome {
    pub records: Vec<InstanceRecord>,
    pub ks_before: f64,
    pub ks_after: f64,
}

impl ResampleOutcome {
    /// Empirical CDF rows `(series, label, cdf)` of both label sets.
    pub fn cdf_rows(&self, original: &[InstanceRecord]) -> Vec<(&'static str, f64, f64)> {
        let mut rows = empirical_cdf("original", &labels_of(original));
        rows.extend(empirical_cdf("resampled", &labels_of(&self.records)));
        rows
    }
}

pub fn empirical_cdf(series: &'static str, values: &[f64]) -> Vec<(&'static str, f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (series, x, (i + 1) as f64 / n)).collect()
}

pub fn resample_stage(records: &[InstanceRecord], plan: &ResamplePlan) -> StageResult<ResampleOutcome> {
    let out = resample(records, plan)?;
    Ok(ResampleOutcome {
        ks_before: label_ks_distance(&labels_of(records)),
        ks_after: label_ks_distance(&labels_of(&out)),
        records: out,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub report: TrainReport,
    /// Mean label over the training split.
    pub train_label_mean: f64,
}

pub fn train_stage(
    records: &[InstanceRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    jobs: &Jobs,
) -> StageResult<TrainOutcome> {
    let labels = labels_of(records);
    if labels.len() != records.len() {
        return Err(StageError::Input("every training record needs a label".into()));
    }
    if records.is_empty() {
        return Err(gridshed_core::Error::EmptyInput("training dataset").into());
    }
    let (train_idx, _) = split_indices(records.len(), cfg.validation_fraction, cfg.seed);
    let train_labels: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    let model = init_params(model_cfg, cfg.seed)?;
    let (model, report) = train_with(model, records, cfg, &PoolEvaluator { jobs })?;
    Ok(TrainOutcome { model, report, train_label_mean: mean_baseline(&train_labels)?.mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub predictions: Vec<f64>,
    /// Seconds spent in feature extraction and inference.
    pub wall_time: f64,
}

pub fn assess(model: &ModelParams, records: &[AnyRecord], jobs: &Jobs) -> StageResult<Assessment> {
    let start = Instant::now();
    let predictions = jobs
        .map_indexed(records.len(), |i| model.predict(&records[i].features()).map(|p| p.y_hat))
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(Assessment { predictions, wall_time: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusExplanation {
    pub id: usize,
    pub attention_weight: f64,
    pub node_vulnerability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance: usize,
    pub prediction: f64,
    pub buses: Vec<BusExplanation>,
}

/// Learned attention per bus next to the shed rate of losing that bus alone.
pub fn explain(model: &ModelParams, mg: &Microgrid, instance: usize, jobs: &Jobs) -> StageResult<Explanation> {
    let pred = model.predict(&extract_features(mg))?;
    let vulnerability =
        jobs.map_indexed(mg.buses.len(), |b| node_vulnerability(mg, b)).into_iter().collect::<Result<Vec<f64>, _>>()?;
    Ok(Explanation {
        instance,
        prediction: pred.y_hat,
        buses: mg
            .buses
            .iter()
            .zip(pred.node_weights.iter().zip(vulnerability))
            .map(|(bus, (&w, v))| BusExplanation { id: bus.id, attention_weight: w, node_vulnerability: v })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: MetricsReport,
    pub baseline: MetricsReport,
    pub baseline_mean: f64,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub test: Evaluation,
    /// In-size evaluation used as the reference for cross-size runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Evaluation>,
    /// `test.model.mse / reference.model.mse`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_degradation: Option<f64>,
}

/// Model and mean-baseline metrics on labeled records.
pub fn evaluate(
    model: &ModelParams,
    records: &[AnyRecord],
    baseline_mean: f64,
    jobs: &Jobs,
) -> StageResult<Evaluation> {
    let features = labeled_records(records)?;
    let labels = labels_of(&features);
    let start = Instant::now();
    let predictions = jobs
        .map_indexed(features.len(), |i| model.predict(&features[i]).map(|p| p.y_hat))
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
    let wall_time = start.elapsed().as_secs_f64();
    let mut model_metrics = metrics(&predictions, &labels)?;
    model_metrics.wall_time = Some(wall_time);
    let baseline = metrics(&vec![baseline_mean; labels.len()], &labels)?;
    Ok(Evaluation { model: model_metrics, baseline, baseline_mean, predictions, labels })
}

pub fn evaluate_report(test: Evaluation, reference: Option<Evaluation>) -> EvaluationReport {
    let mse_degradation = reference.as_ref().filter(|r| r.model.mse > 0.0).map(|r| test.model.mse / r.model.mse);
    EvaluationReport { test, reference, mse_degradation }
}
