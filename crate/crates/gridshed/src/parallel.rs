//! Thread-pool drivers. Work is split freely across threads but results are
//! always gathered in index order, so every job count yields the same values.

use gridshed_core::attack::DisruptionProbabilities;
use gridshed_core::autodiff::Matrix;
use gridshed_core::gats::{GraphInput, ModelParams};
use gridshed_core::microgrid::Microgrid;
use gridshed_core::shedding::{scenario_shed_rate, ElsrEstimate};
use gridshed_core::train::{BatchEvaluator, Serial};
use gridshed_core::Error;
use rayon::prelude::*;

/// Number of worker threads; `1` runs everything on the calling thread.
#[derive(Debug)]
pub struct Jobs {
    pool: Option<rayon::ThreadPool>,
}

impl Jobs {
    pub fn new(jobs: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = if jobs > 1 { Some(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?) } else { None };
        Ok(Self { pool })
    }

    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Maps `f` over `0..n` and returns the results in index order.
    pub fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}

/// ELSR with scenarios spread over the pool.
pub fn estimate_elsr_par(
    jobs: &Jobs,
    mg: &Microgrid,
    probs: &DisruptionProbabilities,
    n_scenarios: usize,
    base_seed: u64,
) -> gridshed_core::Result<ElsrEstimate> {
    if n_scenarios == 0 {
        return Err(Error::InvalidConfig("n_scenarios must be at least 1".into()));
    }
    let rates = jobs
        .map_indexed(n_scenarios, |i| scenario_shed_rate(mg, probs, base_seed, i as u64))
        .into_iter()
        .collect::<gridshed_core::Result<Vec<f64>>>()?;
    ElsrEstimate::from_rates(&rates)
}

/// Evaluates batch examples on the pool; the trainer's sequential reduction
/// keeps parameters identical to [`Serial`].
pub struct PoolEvaluator<'a> {
    pub jobs: &'a Jobs,
}

impl BatchEvaluator for PoolEvaluator<'_> {
    fn evaluate(
        &self,
        model: &ModelParams,
        batch: &[(&GraphInput, f64)],
    ) -> gridshed_core::Result<Vec<(f64, Vec<Matrix>)>> {
        if self.jobs.threads() == 1 {
            return Serial.evaluate(model, batch);
        }
        self.jobs.map_indexed(batch.len(), |i| model.loss_and_grads(batch[i].0, batch[i].1)).into_iter().collect()
    }
}
