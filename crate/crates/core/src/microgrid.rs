//! Radial microgrid model and random instance generation.
//!
//! Units follow a single-phase per-unit convention with S_base = 1 MVA and
//! V_base = 1 kV, so a line limit reads `sqrt(P^2 + Q^2) / V <= I` with P in
//! MW, Q in MVar, V in kV and I in kA.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SimpleGraph;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub id: usize,
    /// Voltage magnitude, p.u.
    #[serde(rename = "v_mag")]
    pub voltage_mag: f64,
    /// Active load demand, MW.
    pub p_load: f64,
    /// Reactive load injection, MVar.
    pub q_load: f64,
    /// Active generation capacity, MW. Zero for pure load buses.
    #[serde(rename = "gen_cap")]
    pub gen_capacity: f64,
}

impl BusSpec {
    pub fn is_generator(&self) -> bool {
        self.gen_capacity > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    #[serde(rename = "from")]
    pub from_bus: usize,
    #[serde(rename = "to")]
    pub to_bus: usize,
    /// Ohm.
    #[serde(rename = "r")]
    pub resistance: f64,
    /// Ohm.
    #[serde(rename = "x")]
    pub reactance: f64,
    /// kA.
    #[serde(rename = "i_rated")]
    pub rated_current: f64,
}

/// Closed interval `[lo, hi]` a parameter is drawn from uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    fn sample(&self, rng: &mut rng::Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.gen_range(self.0..=self.1)
        }
    }

    fn is_valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_buses: usize,
    pub generator_fraction: f64,
    pub capacity_ratio: f64,
    pub voltage_range: Range,
    pub p_load_range: Range,
    pub q_load_range: Range,
    pub resistance_range: Range,
    pub reactance_range: Range,
    pub rated_current: f64,
    pub seed: u64,
}

/// Reactive load range used by default: keeps the no-attack grid feasible
/// under the 1 MVA / 1 kV base.
pub const DEFAULT_Q_RANGE: Range = Range(-0.10, 0.0);
/// Reactive load range exactly as tabulated for the original study.
pub const LITERAL_Q_RANGE: Range = Range(-10.0, 0.0);

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_buses: 33,
            generator_fraction: 0.15,
            capacity_ratio: 1.2,
            voltage_range: Range(0.95, 1.05),
            p_load_range: Range(0.1, 0.5),
            q_load_range: DEFAULT_Q_RANGE,
            resistance_range: Range(0.01, 1.0),
            reactance_range: Range(0.01, 1.0),
            rated_current: 1.0,
            seed: 123,
        }
    }
}

impl GenerationConfig {
    pub fn with_size(n_buses: usize, seed: u64) -> Self {
        Self { n_buses, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_buses < 2 {
            return Err(Error::InvalidConfig(format!("n_buses must be at least 2, got {}", self.n_buses)));
        }
        if !(self.generator_fraction > 0.0 && self.generator_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "generator_fraction must lie in (0, 1], got {}",
                self.generator_fraction
            )));
        }
        if !(self.capacity_ratio.is_finite() && self.capacity_ratio > 0.0) {
            return Err(Error::InvalidConfig(format!("capacity_ratio must be positive, got {}", self.capacity_ratio)));
        }
        if !(self.rated_current.is_finite() && self.rated_current > 0.0) {
            return Err(Error::InvalidConfig(format!("rated_current must be positive, got {}", self.rated_current)));
        }
        let ranges = [
            ("voltage_range", self.voltage_range),
            ("p_load_range", self.p_load_range),
            ("q_load_range", self.q_load_range),
            ("resistance_range", self.resistance_range),
            ("reactance_range", self.reactance_range),
        ];
        for (name, r) in ranges {
            if !r.is_valid() {
                return Err(Error::InvalidConfig(format!("{name} [{}, {}] is empty", r.0, r.1)));
            }
        }
        if self.p_load_range.lo() < 0.0 {
            return Err(Error::InvalidConfig("p_load_range must be nonnegative".into()));
        }
        if self.voltage_range.lo() <= 0.0 {
            return Err(Error::InvalidConfig("voltage_range must be positive".into()));
        }
        Ok(())
    }

    /// Number of generator buses: `round(fraction * N)`, at least one.
    pub fn n_generators(&self) -> usize {
        let n = libm::round(self.generator_fraction * self.n_buses as f64) as usize;
        n.clamp(1, self.n_buses)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub config: GenerationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Microgrid {
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    #[serde(rename = "meta")]
    pub metadata: Metadata,
}

impl Microgrid {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn graph(&self) -> SimpleGraph {
        SimpleGraph { n_nodes: self.buses.len(), edges: self.lines.iter().map(|l| (l.from_bus, l.to_bus)).collect() }
    }

    pub fn total_load(&self) -> f64 {
        total_load(self)
    }

    pub fn total_gen_capacity(&self) -> f64 {
        self.buses.iter().map(|b| b.gen_capacity).sum()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = alloc::vec![0usize; self.buses.len()];
        for l in &self.lines {
            if l.from_bus < deg.len() {
                deg[l.from_bus] += 1;
            }
            if l.to_bus < deg.len() {
                deg[l.to_bus] += 1;
            }
        }
        deg
    }
}

/// Sum of active load over all buses, MW.
pub fn total_load(mg: &Microgrid) -> f64 {
    mg.buses.iter().map(|b| b.p_load).sum()
}

/// Builds a random radial microgrid.
///
/// Bus 0 is the root; bus `i` attaches to a parent drawn uniformly from
/// `0..i`. Generator buses are drawn without replacement and share
/// `capacity_ratio * total_load` equally, so the total capacity ratio holds
/// exactly.
pub fn generate_microgrid(config: &GenerationConfig) -> Result<Microgrid> {
    config.validate()?;
    let n = config.n_buses;
    let mut rng = rng::seeded(config.seed);

    let mut buses: Vec<BusSpec> = (0..n)
        .map(|id| {
            let voltage_mag = config.voltage_range.sample(&mut rng);
            let p_load = config.p_load_range.sample(&mut rng);
            let q_load = config.q_load_range.sample(&mut rng);
            BusSpec { id, voltage_mag, p_load, q_load, gen_capacity: 0.0 }
        })
        .collect();

    let lines: Vec<LineSpec> = (1..n)
        .map(|child| {
            let parent = rng.gen_range(0..child);
            let resistance = config.resistance_range.sample(&mut rng);
            let reactance = config.reactance_range.sample(&mut rng);
            LineSpec { from_bus: parent, to_bus: child, resistance, reactance, rated_current: config.rated_current }
        })
        .collect();

    let n_gen = config.n_generators();
    let load: f64 = buses.iter().map(|b| b.p_load).sum();
    let per_gen = config.capacity_ratio * load / n_gen as f64;
    let mut gen_ids = index::sample(&mut rng, n, n_gen).into_vec();
    gen_ids.sort_unstable();
    for id in gen_ids {
        buses[id].gen_capacity = per_gen;
    }

    Ok(Microgrid { buses, lines, metadata: Metadata { seed: config.seed, config: config.clone() } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check { name: name.into(), passed, detail });
    }
}

pub const CHECK_EDGE_COUNT: &str = "edge_count";
pub const CHECK_RADIAL: &str = "radial_topology";
pub const CHECK_CONNECTED: &str = "connected";
pub const CHECK_IDS: &str = "ids";
pub const CHECK_RANGES: &str = "parameter_ranges";
pub const CHECK_CAPACITY: &str = "capacity_ratio";

/// Checks every structural and parametric invariant of a microgrid. Ranges
/// are taken from the generation config echoed in the metadata.
pub fn validate(mg: &Microgrid) -> ValidationReport {
    let mut report = ValidationReport { checks: Vec::new() };
    let n = mg.buses.len();
    let cfg = &mg.metadata.config;

    let ids_ok = mg.buses.iter().enumerate().all(|(i, b)| b.id == i)
        && mg.lines.iter().all(|l| l.from_bus < n && l.to_bus < n && l.from_bus != l.to_bus);
    report.push(
        CHECK_IDS,
        ids_ok,
        if ids_ok {
            "bus ids are 0..N and lines reference existing distinct buses".into()
        } else {
            "bus ids out of order, or a line has a bad endpoint".into()
        },
    );

    let edge_ok = n > 0 && mg.lines.len() == n - 1;
    report.push(CHECK_EDGE_COUNT, edge_ok, format!("{} lines for {} buses", mg.lines.len(), n));

    // Union-find for both acyclicity and connectivity.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut cycle = false;
    let mut merges = 0usize;
    if ids_ok {
        for l in &mg.lines {
            let (a, b) = (find(&mut parent, l.from_bus), find(&mut parent, l.to_bus));
            if a == b {
                cycle = true;
            } else {
                parent[a] = b;
                merges += 1;
            }
        }
    }
    let radial_ok = ids_ok && edge_ok && !cycle;
    report.push(
        CHECK_RADIAL,
        radial_ok,
        if cycle {
            "line set contains a loop".into()
        } else if !edge_ok {
            "line count is not N - 1".into()
        } else {
            "no loops".into()
        },
    );
    let connected = ids_ok && n > 0 && merges == n - 1;
    report.push(CHECK_CONNECTED, connected, format!("{} components", n.saturating_sub(merges)));

    let mut bad: Vec<String> = Vec::new();
    for b in &mg.buses {
        if !cfg.voltage_range.contains(b.voltage_mag) {
            bad.push(format!("bus {} voltage {}", b.id, b.voltage_mag));
        }
        if !cfg.p_load_range.contains(b.p_load) {
            bad.push(format!("bus {} p_load {}", b.id, b.p_load));
        }
        if !cfg.q_load_range.contains(b.q_load) {
            bad.push(format!("bus {} q_load {}", b.id, b.q_load));
        }
        if b.gen_capacity.is_nan() || b.gen_capacity < 0.0 {
            bad.push(format!("bus {} gen_capacity {}", b.id, b.gen_capacity));
        }
    }
    for (k, l) in mg.lines.iter().enumerate() {
        if !cfg.resistance_range.contains(l.resistance) {
            bad.push(format!("line {k} resistance {}", l.resistance));
        }
        if !cfg.reactance_range.contains(l.reactance) {
            bad.push(format!("line {k} reactance {}", l.reactance));
        }
        if l.rated_current.is_nan() || l.rated_current <= 0.0 {
            bad.push(format!("line {k} rated current {}", l.rated_current));
        }
    }
    report.push(
        CHECK_RANGES,
        bad.is_empty(),
        if bad.is_empty() { "all parameters within configured ranges".into() } else { bad.join("; ") },
    );

    let load = mg.total_load();
    let cap = mg.total_gen_capacity();
    let target = cfg.capacity_ratio * load;
    let cap_ok = load > 0.0 && libm::fabs(cap - target) <= 1e-9 * target.max(1.0);
    report.push(CHECK_CAPACITY, cap_ok, format!("capacity {cap:.6} MW vs target {target:.6} MW"));

    report
}
