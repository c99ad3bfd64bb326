//! ML instances: feature extraction, z-score standardization and
//! inverse-frequency label resampling.

use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microgrid::Microgrid;
use crate::rng;

/// Node feature columns: active load (MW), reactive load (MVar), generator
/// flag, degree.
pub const NODE_FEATURES: usize = 4;
/// Edge feature columns: resistance (ohm), reactance (ohm).
pub const EDGE_FEATURES: usize = 2;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub node_features: Vec<[f64; NODE_FEATURES]>,
    pub edge_features: Vec<[f64; EDGE_FEATURES]>,
    /// Undirected edges; row `k` of `edge_features` belongs to `edges[k]`.
    pub edges: Vec<(usize, usize)>,
    pub label: Option<f64>,
}

impl InstanceRecord {
    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn with_label(mut self, label: f64) -> Self {
        self.label = Some(label);
        self
    }

    /// Shape and label checks.
    pub fn check(&self) -> Result<()> {
        let n = self.node_features.len();
        if self.edge_features.len() != self.edges.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} edge feature rows for {} edges",
                self.edge_features.len(),
                self.edges.len()
            )));
        }
        for &(u, v) in &self.edges {
            if u >= n || v >= n {
                return Err(Error::ShapeMismatch(alloc::format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
        }
        if let Some(y) = self.label {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::ShapeMismatch(alloc::format!("label {y} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Same instance with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut node_features = vec![[0.0; NODE_FEATURES]; self.n_nodes()];
        for (i, row) in self.node_features.iter().enumerate() {
            node_features[perm[i]] = *row;
        }
        Self {
            node_features,
            edge_features: self.edge_features.clone(),
            edges: self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            label: self.label,
        }
    }
}

/// Unlabeled features of a microgrid, columns in the fixed order above.
pub fn extract_features(mg: &Microgrid) -> InstanceRecord {
    let deg = mg.degrees();
    InstanceRecord {
        node_features: mg
            .buses
            .iter()
            .map(|b| [b.p_load, b.q_load, if b.is_generator() { 1.0 } else { 0.0 }, deg[b.id] as f64])
            .collect(),
        edge_features: mg.lines.iter().map(|l| [l.resistance, l.reactance]).collect(),
        edges: mg.lines.iter().map(|l| (l.from_bus, l.to_bus)).collect(),
        label: None,
    }
}

/// Per-column z-score statistics over all nodes and all edges of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub node_mean: [f64; NODE_FEATURES],
    pub node_std: [f64; NODE_FEATURES],
    pub edge_mean: [f64; EDGE_FEATURES],
    pub edge_std: [f64; EDGE_FEATURES],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            node_mean: [0.0; NODE_FEATURES],
            node_std: [1.0; NODE_FEATURES],
            edge_mean: [0.0; EDGE_FEATURES],
            edge_std: [1.0; EDGE_FEATURES],
        }
    }

    pub fn apply(&self, record: &InstanceRecord) -> InstanceRecord {
        InstanceRecord {
            node_features: record
                .node_features
                .iter()
                .map(|r| core::array::from_fn(|c| (r[c] - self.node_mean[c]) / self.node_std[c]))
                .collect(),
            edge_features: record
                .edge_features
                .iter()
                .map(|r| core::array::from_fn(|c| (r[c] - self.edge_mean[c]) / self.edge_std[c]))
                .collect(),
            edges: record.edges.clone(),
            label: record.label,
        }
    }

    pub fn invert(&self, record: &InstanceRecord) -> InstanceRecord {
        InstanceRecord {
            node_features: record
                .node_features
                .iter()
                .map(|r| core::array::from_fn(|c| r[c] * self.node_std[c] + self.node_mean[c]))
                .collect(),
            edge_features: record
                .edge_features
                .iter()
                .map(|r| core::array::from_fn(|c| r[c] * self.edge_std[c] + self.edge_mean[c]))
                .collect(),
            edges: record.edges.clone(),
            label: record.label,
        }
    }
}

fn column_stats<const C: usize>(rows: impl Iterator<Item = [f64; C]> + Clone) -> ([f64; C], [f64; C]) {
    let mut count = 0usize;
    let mut mean = [0.0; C];
    for r in rows.clone() {
        count += 1;
        for c in 0..C {
            mean[c] += r[c];
        }
    }
    if count == 0 {
        return ([0.0; C], [1.0; C]);
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = [0.0; C];
    for r in rows {
        for c in 0..C {
            var[c] += (r[c] - mean[c]) * (r[c] - mean[c]);
        }
    }
    let std = core::array::from_fn(|c| libm::sqrt(var[c] / count as f64).max(STD_FLOOR));
    (mean, std)
}

/// Fits population mean / std per column. Needs at least two records.
pub fn fit_standardizer(records: &[InstanceRecord]) -> Result<Standardizer> {
    if records.len() < 2 {
        return Err(Error::EmptyInput("standardizer needs at least two records"));
    }
    let (node_mean, node_std) = column_stats(records.iter().flat_map(|r| r.node_features.iter().copied()));
    let (edge_mean, edge_std) = column_stats(records.iter().flat_map(|r| r.edge_features.iter().copied()));
    Ok(Standardizer { node_mean, node_std, edge_mean, edge_std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub n_bins: usize,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for ResamplePlan {
    fn default() -> Self {
        Self { n_bins: 20, n_draws: 4000, seed: 123 }
    }
}

/// Equal-width bin over `[0, 1]`; label 1 falls in the last bin.
pub fn label_bin(label: f64, n_bins: usize) -> usize {
    let b = libm::floor(label.clamp(0.0, 1.0) * n_bins as f64) as usize;
    b.min(n_bins - 1)
}

/// Sampling probability of every record: inverse bin count, normalized.
pub fn resample_weights(labels: &[f64], n_bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_bins];
    for &y in labels {
        counts[label_bin(y, n_bins)] += 1;
    }
    let raw: Vec<f64> = labels.iter().map(|&y| 1.0 / counts[label_bin(y, n_bins)] as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Indices of `n_draws` records drawn with replacement by inverse bin
/// frequency.
pub fn resample_indices(labels: &[f64], plan: &ResamplePlan) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("resampling an empty dataset"));
    }
    if plan.n_bins < 2 || plan.n_draws == 0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "resample plan needs n_bins >= 2 and n_draws >= 1, got {} / {}",
            plan.n_bins,
            plan.n_draws
        )));
    }
    let weights = resample_weights(labels, plan.n_bins);
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(alloc::format!("{e}")))?;
    let mut r = rng::seeded(plan.seed);
    Ok((0..plan.n_draws).map(|_| dist.sample(&mut r)).collect())
}

pub fn resample(records: &[InstanceRecord], plan: &ResamplePlan) -> Result<Vec<InstanceRecord>> {
    let labels = records
        .iter()
        .map(|r| r.label.ok_or(Error::InvalidConfig("resampling needs labeled records".into())))
        .collect::<Result<Vec<f64>>>()?;
    Ok(resample_indices(&labels, plan)?.into_iter().map(|i| records[i].clone()).collect())
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `values` and
/// the uniform CDF on `[lo, hi]`.
pub fn ks_distance_uniform(values: &[f64], lo: f64, hi: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let width = hi - lo;
    let cdf = |x: f64| {
        if width <= 0.0 {
            if x >= lo {
                1.0
            } else {
                0.0
            }
        } else {
            ((x - lo) / width).clamp(0.0, 1.0)
        }
    };
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let above = (i + 1) as f64 / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// KS distance to uniform over the occupied label range `[min, max]`.
pub fn label_ks_distance(labels: &[f64]) -> f64 {
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ks_distance_uniform(labels, lo, hi)
}
