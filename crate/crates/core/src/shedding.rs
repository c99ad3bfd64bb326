//! Post-attack optimal dispatch, shed rate and the Monte Carlo expected load
//! shedding rate (ELSR).
//!
//! Each island is dispatched independently with a lossless radial flow model:
//! the flow on a tree line equals the net demand of the subtree below it. The
//! current limit `sqrt(P^2 + Q^2) <= I_rated * V` is replaced by its eight
//! tangent half-planes at angles `k * pi / 4` (an outer octagon), and the
//! voltage used is the lower of the two endpoint magnitudes.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::FRAC_PI_4;
use serde::{Deserialize, Serialize};

use crate::attack::{
    apply_scenario, disruption_probabilities, scenario_for_index, AttackScenario, DisruptionProbabilities,
    DEFAULT_P_MAX, DEFAULT_P_MIN,
};
use crate::error::{Error, Result};
use crate::lp::{LinearProgram, Relation};
use crate::microgrid::{BusSpec, Microgrid};

/// Slack allowed on the linearized line limits of a returned solution.
pub const FLOW_TOLERANCE: f64 = 1e-7;
/// Trailing window of the ELSR convergence monitor.
pub const CONVERGENCE_WINDOW: usize = 100;

fn octagon() -> [(f64, f64); 8] {
    core::array::from_fn(|k| {
        let t = k as f64 * FRAC_PI_4;
        (libm::cos(t), libm::sin(t))
    })
}

/// A line of an island in local bus indices, oriented parent -> child.
#[derive(Debug, Clone, PartialEq)]
pub struct IslandLine {
    pub parent: usize,
    pub child: usize,
    /// Apparent-power limit `I_rated * min(V_parent, V_child)`, MVA.
    pub limit: f64,
}

/// One connected, acyclic island ready for dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentProblem {
    pub buses: Vec<BusSpec>,
    /// Tree lines rooted at local bus 0, in BFS order.
    pub lines: Vec<IslandLine>,
    /// `parent[i]` for every local bus; `None` for the root.
    pub parent: Vec<Option<usize>>,
    /// Local buses in BFS order from the root.
    order: Vec<usize>,
}

impl ComponentProblem {
    /// Builds an island from buses and undirected lines `(a, b, limit)` in
    /// local indices. Fails unless the lines form a spanning tree.
    pub fn new(buses: Vec<BusSpec>, lines: &[(usize, usize, f64)]) -> Result<Self> {
        let n = buses.len();
        if n == 0 {
            return Err(Error::EmptyInput("island with no buses"));
        }
        if lines.len() != n - 1 {
            return Err(Error::InvalidGraph(format!(
                "island with {n} buses has {} lines; expected a tree",
                lines.len()
            )));
        }
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(a, b, limit) in lines {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidGraph(format!("bad island line ({a}, {b})")));
            }
            adj[a].push((b, limit));
            adj[b].push((a, limit));
        }
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut tree_lines = Vec::with_capacity(n - 1);
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, limit) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    tree_lines.push(IslandLine { parent: u, child: v, limit });
                    queue.push_back(v);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidGraph("island is not connected".into()));
        }
        Ok(Self { buses, lines: tree_lines, parent, order })
    }

    /// Island made of the given microgrid buses, using every line of `mg`
    /// with `line_alive` set and both endpoints inside the island.
    pub fn from_island(mg: &Microgrid, island: &[usize], line_alive: &[bool]) -> Result<Self> {
        let mut local = vec![usize::MAX; mg.buses.len()];
        for (i, &b) in island.iter().enumerate() {
            local[b] = i;
        }
        let buses: Vec<BusSpec> = island.iter().map(|&b| mg.buses[b].clone()).collect();
        let lines: Vec<(usize, usize, f64)> = mg
            .lines
            .iter()
            .zip(line_alive)
            .filter(|(l, &alive)| alive && local[l.from_bus] != usize::MAX && local[l.to_bus] != usize::MAX)
            .map(|(l, _)| {
                let v = mg.buses[l.from_bus].voltage_mag.min(mg.buses[l.to_bus].voltage_mag);
                (local[l.from_bus], local[l.to_bus], l.rated_current * v)
            })
            .collect();
        Self::new(buses, &lines)
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.p_load).sum()
    }

    /// Line flows `(P, Q)` from parent to child implied by a dispatch, in the
    /// order of `self.lines`.
    pub fn flows(&self, sol: &DispatchSolution) -> Vec<(f64, f64)> {
        let n = self.buses.len();
        let mut p: Vec<f64> =
            (0..n).map(|i| self.buses[i].p_load * sol.served_fraction[i] - sol.gen_output[i]).collect();
        let mut q: Vec<f64> =
            (0..n).map(|i| self.buses[i].q_load * sol.served_fraction[i] - sol.reactive_output[i]).collect();
        for &v in self.order.iter().rev() {
            if let Some(u) = self.parent[v] {
                p[u] += p[v];
                q[u] += q[v];
            }
        }
        self.lines.iter().map(|l| (p[l.child], q[l.child])).collect()
    }

    /// Smallest slack of any octagon constraint under `sol` (negative means
    /// violated).
    pub fn min_line_slack(&self, sol: &DispatchSolution) -> f64 {
        let dirs = octagon();
        self.flows(sol)
            .iter()
            .zip(&self.lines)
            .flat_map(|(&(p, q), l)| dirs.iter().map(move |&(c, s)| l.limit - (c * p + s * q)))
            .fold(f64::INFINITY, f64::min)
    }

    fn subtree_members(&self) -> Vec<Vec<usize>> {
        let n = self.buses.len();
        let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &v in self.order.iter().rev() {
            if let Some(u) = self.parent[v] {
                let child = core::mem::take(&mut members[v]);
                members[u].extend_from_slice(&child);
                members[v] = child;
            }
        }
        members
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    /// Served share of each bus's load, local order.
    pub served_fraction: Vec<f64>,
    /// Active generation, MW, local order.
    pub gen_output: Vec<f64>,
    /// Reactive generation, MVar, local order.
    pub reactive_output: Vec<f64>,
    pub served_active_load: f64,
    pub objective_value: f64,
}

impl DispatchSolution {
    fn blackout(n: usize) -> Self {
        Self {
            served_fraction: vec![0.0; n],
            gen_output: vec![0.0; n],
            reactive_output: vec![0.0; n],
            served_active_load: 0.0,
            objective_value: 0.0,
        }
    }
}

/// Maximizes served active load on one island.
///
/// Variables per bus: served fraction `s` in `[0, 1]` scaling both P and Q
/// demand; per generator: `g` in `[0, cap]` and reactive output in
/// `[-cap, cap]`. Island-wide active and reactive balance are equalities and
/// every line carries the eight octagon rows. Line rows are added lazily:
/// the LP is solved without them, violated rows are appended and the LP is
/// solved again until the solution satisfies all of them, which yields the
/// optimum of the full program.
pub fn solve_component_dispatch(cp: &ComponentProblem) -> Result<DispatchSolution> {
    let n = cp.buses.len();
    let gens: Vec<usize> = (0..n).filter(|&i| cp.buses[i].is_generator()).collect();
    if gens.is_empty() || cp.total_load() <= 0.0 {
        return Ok(DispatchSolution::blackout(n));
    }
    let ng = gens.len();
    // Layout: s_0..s_{n-1}, g_0..g_{ng-1}, r_0..r_{ng-1} with reactive
    // output q = r - cap so that r >= 0.
    let s_var = |i: usize| i;
    let g_var = |k: usize| n + k;
    let r_var = |k: usize| n + ng + k;
    let n_vars = n + 2 * ng;
    let mut gen_slot = vec![usize::MAX; n];
    for (k, &i) in gens.iter().enumerate() {
        gen_slot[i] = k;
    }

    let mut lp = LinearProgram::new(n_vars);
    for (i, b) in cp.buses.iter().enumerate() {
        lp.objective[s_var(i)] = b.p_load;
        lp.add_sparse(&[(s_var(i), 1.0)], Relation::Le, 1.0);
    }
    for (k, &i) in gens.iter().enumerate() {
        let cap = cp.buses[i].gen_capacity;
        lp.add_sparse(&[(g_var(k), 1.0)], Relation::Le, cap);
        lp.add_sparse(&[(r_var(k), 1.0)], Relation::Le, 2.0 * cap);
    }
    let mut active: Vec<(usize, f64)> = (0..ng).map(|k| (g_var(k), 1.0)).collect();
    active.extend(cp.buses.iter().enumerate().map(|(i, b)| (s_var(i), -b.p_load)));
    lp.add_sparse(&active, Relation::Eq, 0.0);
    let mut reactive: Vec<(usize, f64)> = (0..ng).map(|k| (r_var(k), 1.0)).collect();
    reactive.extend(cp.buses.iter().enumerate().map(|(i, b)| (s_var(i), -b.q_load)));
    let total_cap: f64 = gens.iter().map(|&i| cp.buses[i].gen_capacity).sum();
    lp.add_sparse(&reactive, Relation::Eq, total_cap);

    let members = cp.subtree_members();
    let dirs = octagon();
    let mut added = vec![[false; 8]; cp.lines.len()];

    let max_rounds = 8 * cp.lines.len() + 1;
    for _ in 0..=max_rounds {
        let sol = lp.solve_checked()?;
        let dispatch = unpack(cp, &gens, &sol.x, sol.objective);
        let flows = cp.flows(&dispatch);
        let mut violated = false;
        for (li, (line, &(p, q))) in cp.lines.iter().zip(&flows).enumerate() {
            if !line.limit.is_finite() {
                continue;
            }
            for (k, &(c, s)) in dirs.iter().enumerate() {
                if added[li][k] || c * p + s * q <= line.limit + FLOW_TOLERANCE * 0.1 {
                    continue;
                }
                added[li][k] = true;
                violated = true;
                // c * sum(p s - g) + s * sum(q s - r) <= limit - s * sum(cap)
                let mut terms = Vec::new();
                let mut cap_sum = 0.0;
                for &b in &members[line.child] {
                    let bus = &cp.buses[b];
                    terms.push((s_var(b), c * bus.p_load + s * bus.q_load));
                    let gk = gen_slot[b];
                    if gk != usize::MAX {
                        terms.push((g_var(gk), -c));
                        terms.push((r_var(gk), -s));
                        cap_sum += bus.gen_capacity;
                    }
                }
                lp.add_sparse(&terms, Relation::Le, line.limit - s * cap_sum);
            }
        }
        if !violated {
            return Ok(dispatch);
        }
    }
    Err(Error::Solver("line-constraint generation did not converge".into()))
}

fn unpack(cp: &ComponentProblem, gens: &[usize], x: &[f64], objective: f64) -> DispatchSolution {
    let n = cp.buses.len();
    let ng = gens.len();
    let mut sol = DispatchSolution::blackout(n);
    for (s, &v) in sol.served_fraction.iter_mut().zip(x) {
        *s = v.clamp(0.0, 1.0);
    }
    for (k, &i) in gens.iter().enumerate() {
        let cap = cp.buses[i].gen_capacity;
        sol.gen_output[i] = x[n + k].clamp(0.0, cap);
        sol.reactive_output[i] = x[n + ng + k] - cap;
    }
    sol.served_active_load = cp.buses.iter().zip(&sol.served_fraction).map(|(b, s)| b.p_load * s).sum();
    sol.objective_value = objective;
    sol
}

/// Unserved active load of one scenario, MW: loads on disrupted buses plus
/// the curtailment of every surviving island.
pub fn unserved_load(mg: &Microgrid, s: &AttackScenario) -> Result<f64> {
    let net = apply_scenario(mg, s)?;
    let mut unserved: f64 = mg.buses.iter().filter(|b| !net.bus_alive[b.id]).map(|b| b.p_load).sum();
    for island in &net.islands {
        let cp = ComponentProblem::from_island(mg, island, &net.line_alive)?;
        let sol = solve_component_dispatch(&cp)?;
        unserved += (cp.total_load() - sol.served_active_load).max(0.0);
    }
    Ok(unserved)
}

/// Shed load over the pre-attack total load, in `[0, 1]`.
pub fn shed_rate(mg: &Microgrid, s: &AttackScenario) -> Result<f64> {
    let total = mg.total_load();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok((unserved_load(mg, s)? / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElsrEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_scenarios: usize,
    /// Relative change of the running mean over the last
    /// [`CONVERGENCE_WINDOW`] scenarios, when enough were run.
    pub relative_change: Option<f64>,
}

impl ElsrEstimate {
    /// Summarizes per-scenario shed rates given in scenario-index order.
    pub fn from_rates(rates: &[f64]) -> Result<Self> {
        let n = rates.len();
        if n == 0 {
            return Err(Error::EmptyInput("no scenarios"));
        }
        let sum: f64 = rates.iter().sum();
        let mean = sum / n as f64;
        let std_error = if n > 1 {
            let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
            libm::sqrt(var / n as f64)
        } else {
            0.0
        };
        let relative_change = (n > CONVERGENCE_WINDOW).then(|| {
            let m = n - CONVERGENCE_WINDOW;
            let earlier = rates[..m].iter().sum::<f64>() / m as f64;
            if mean == 0.0 {
                if earlier == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                libm::fabs(mean - earlier) / mean
            }
        });
        Ok(Self { mean: mean.clamp(0.0, 1.0), std_error, n_scenarios: n, relative_change })
    }
}

/// ELSR with the default disruption bounds.
pub fn estimate_elsr(mg: &Microgrid, n_scenarios: usize, base_seed: u64) -> Result<ElsrEstimate> {
    let probs = disruption_probabilities(mg, DEFAULT_P_MIN, DEFAULT_P_MAX)?;
    estimate_elsr_with(mg, &probs, n_scenarios, base_seed)
}

/// Mean shed rate over `n_scenarios` scenarios, scenario `i` drawn from
/// seed `derive_seed(base_seed, i)`.
pub fn estimate_elsr_with(
    mg: &Microgrid,
    probs: &DisruptionProbabilities,
    n_scenarios: usize,
    base_seed: u64,
) -> Result<ElsrEstimate> {
    if n_scenarios == 0 {
        return Err(Error::InvalidConfig("n_scenarios must be at least 1".into()));
    }
    let rates =
        (0..n_scenarios).map(|i| scenario_shed_rate(mg, probs, base_seed, i as u64)).collect::<Result<Vec<f64>>>()?;
    ElsrEstimate::from_rates(&rates)
}

/// Shed rate of scenario `index` in the stream rooted at `base_seed`.
pub fn scenario_shed_rate(mg: &Microgrid, probs: &DisruptionProbabilities, base_seed: u64, index: u64) -> Result<f64> {
    shed_rate(mg, &scenario_for_index(probs, base_seed, index))
}

/// Shed rate when only bus `bus` is disrupted.
pub fn node_vulnerability(mg: &Microgrid, bus: usize) -> Result<f64> {
    if bus >= mg.buses.len() {
        return Err(Error::UnknownId { kind: "bus", id: bus });
    }
    shed_rate(mg, &AttackScenario::single_bus(bus))
}
