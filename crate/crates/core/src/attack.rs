//! Probabilistic attacks: centrality-weighted failure probabilities and
//! independent Bernoulli disruption of every bus and line.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{components_masked, degree_centrality, edge_betweenness};
use crate::microgrid::{BusSpec, LineSpec, Microgrid};
use crate::rng;

pub const DEFAULT_P_MIN: f64 = 0.01;
pub const DEFAULT_P_MAX: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisruptionProbabilities {
    pub p_bus: Vec<f64>,
    /// Indexed like `Microgrid::lines`.
    pub p_line: Vec<f64>,
    pub p_min: f64,
    pub p_max: f64,
}

impl DisruptionProbabilities {
    /// Every bus and line fails with the same probability `p`.
    pub fn uniform(n_buses: usize, n_lines: usize, p: f64) -> Self {
        Self { p_bus: vec![p; n_buses], p_line: vec![p; n_lines], p_min: p, p_max: p }
    }
}

/// Buses and lines knocked out in one scenario, as sorted ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttackScenario {
    pub disrupted_buses: Vec<usize>,
    /// Line indices into `Microgrid::lines`.
    pub disrupted_lines: Vec<usize>,
}

impl AttackScenario {
    pub fn is_empty(&self) -> bool {
        self.disrupted_buses.is_empty() && self.disrupted_lines.is_empty()
    }

    pub fn single_bus(bus: usize) -> Self {
        Self { disrupted_buses: vec![bus], disrupted_lines: Vec::new() }
    }
}

fn check_bounds(p_min: f64, p_max: f64) -> Result<()> {
    let ok = (0.0..=1.0).contains(&p_min) && (0.0..=1.0).contains(&p_max) && p_min <= p_max;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "disruption bounds must satisfy 0 <= p_min <= p_max <= 1, got [{p_min}, {p_max}]"
        )))
    }
}

/// `p = p_min + (p_max - p_min) * C`, with `C` the normalized degree
/// centrality for buses and normalized edge betweenness for lines.
pub fn disruption_probabilities(mg: &Microgrid, p_min: f64, p_max: f64) -> Result<DisruptionProbabilities> {
    check_bounds(p_min, p_max)?;
    let g = mg.graph();
    let span = p_max - p_min;
    let p_bus = degree_centrality(&g)?.into_iter().map(|c| p_min + span * c).collect();
    let p_line = edge_betweenness(&g)?.into_iter().map(|c| p_min + span * c).collect();
    Ok(DisruptionProbabilities { p_bus, p_line, p_min, p_max })
}

/// One independent Bernoulli draw per bus, then per line.
pub fn sample_scenario<R: rand::Rng + ?Sized>(probs: &DisruptionProbabilities, rng: &mut R) -> AttackScenario {
    let disrupted_buses =
        probs.p_bus.iter().enumerate().filter_map(|(i, &p)| (rng.gen::<f64>() < p).then_some(i)).collect();
    let disrupted_lines =
        probs.p_line.iter().enumerate().filter_map(|(k, &p)| (rng.gen::<f64>() < p).then_some(k)).collect();
    AttackScenario { disrupted_buses, disrupted_lines }
}

/// Scenario `index` of the stream rooted at `base_seed`.
pub fn scenario_for_index(probs: &DisruptionProbabilities, base_seed: u64, index: u64) -> AttackScenario {
    let mut r = rng::seeded(rng::derive_seed(base_seed, index));
    sample_scenario(probs, &mut r)
}

/// The network that survives a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct DisruptedNetwork {
    pub bus_alive: Vec<bool>,
    pub line_alive: Vec<bool>,
    /// Surviving buses, in id order, with their original parameters.
    pub buses: Vec<BusSpec>,
    /// Surviving lines: not disrupted and both endpoints alive.
    pub lines: Vec<LineSpec>,
    /// Islands (connected components) of surviving buses.
    pub islands: Vec<Vec<usize>>,
}

impl DisruptedNetwork {
    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }
}

pub fn apply_scenario(mg: &Microgrid, s: &AttackScenario) -> Result<DisruptedNetwork> {
    let n = mg.buses.len();
    let m = mg.lines.len();
    let mut bus_alive = vec![true; n];
    for &b in &s.disrupted_buses {
        if b >= n {
            return Err(Error::UnknownId { kind: "bus", id: b });
        }
        bus_alive[b] = false;
    }
    let mut line_alive = vec![true; m];
    for &k in &s.disrupted_lines {
        if k >= m {
            return Err(Error::UnknownId { kind: "line", id: k });
        }
        line_alive[k] = false;
    }
    for (k, l) in mg.lines.iter().enumerate() {
        if !bus_alive[l.from_bus] || !bus_alive[l.to_bus] {
            line_alive[k] = false;
        }
    }
    let islands = components_masked(&mg.graph(), &bus_alive, &line_alive);
    let buses = mg.buses.iter().filter(|b| bus_alive[b.id]).cloned().collect();
    let lines = mg.lines.iter().zip(&line_alive).filter(|(_, &alive)| alive).map(|(l, _)| l.clone()).collect();
    Ok(DisruptedNetwork { bus_alive, line_alive, buses, lines, islands })
}
