//! Dense two-phase primal simplex for small linear programs.
//!
//! Problems are `maximize c.x subject to rows, x >= 0`. Pivoting uses the
//! largest reduced cost and falls back to Bland's rule once a run of
//! degenerate pivots suggests cycling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpFailure {
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl LinearProgram {
    pub fn new(n_vars: usize) -> Self {
        Self { objective: vec![0.0; n_vars], constraints: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        debug_assert_eq!(coeffs.len(), self.n_vars());
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    /// Adds a constraint given as sparse `(var, coeff)` terms.
    pub fn add_sparse(&mut self, terms: &[(usize, f64)], relation: Relation, rhs: f64) {
        let mut coeffs = vec![0.0; self.n_vars()];
        for &(j, c) in terms {
            coeffs[j] += c;
        }
        self.add(coeffs, relation, rhs);
    }

    pub fn solve(&self) -> core::result::Result<LpSolution, LpFailure> {
        Tableau::build(self).run(self)
    }

    /// [`solve`](Self::solve) with failures mapped into the crate error.
    pub fn solve_checked(&self) -> Result<LpSolution> {
        self.solve()
            .map_err(|f| Error::Solver(format!("{f:?} on a {}x{} program", self.constraints.len(), self.n_vars())))
    }
}

struct Tableau {
    /// Row-major `m x (cols + 1)`; the last column is the right-hand side.
    a: Vec<f64>,
    m: usize,
    cols: usize,
    basis: Vec<usize>,
    /// First artificial column; artificials are `art_start..cols`.
    art_start: usize,
    pivots: usize,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.width() + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn build(lp: &LinearProgram) -> Self {
        let n = lp.n_vars();
        let m = lp.constraints.len();
        // Normalize so every rhs is nonnegative.
        let rows: Vec<(Vec<f64>, Relation, f64)> = lp
            .constraints
            .iter()
            .map(|c| {
                if c.rhs < 0.0 {
                    let rel = match c.relation {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (c.coeffs.iter().map(|x| -x).collect(), rel, -c.rhs)
                } else {
                    (c.coeffs.clone(), c.relation, c.rhs)
                }
            })
            .collect();
        let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
        let art_start = n + n_slack;
        let cols = art_start + n_art;
        let width = cols + 1;
        let mut a = vec![0.0; m * width];
        let mut basis = vec![0; m];
        let (mut slack, mut art) = (n, art_start);
        for (i, (coeffs, rel, rhs)) in rows.into_iter().enumerate() {
            let row = &mut a[i * width..(i + 1) * width];
            row[..n].copy_from_slice(&coeffs);
            row[cols] = rhs;
            match rel {
                Relation::Le => {
                    row[slack] = 1.0;
                    basis[i] = slack;
                    slack += 1;
                }
                Relation::Ge => {
                    row[slack] = -1.0;
                    slack += 1;
                    row[art] = 1.0;
                    basis[i] = art;
                    art += 1;
                }
                Relation::Eq => {
                    row[art] = 1.0;
                    basis[i] = art;
                    art += 1;
                }
            }
        }
        Self { a, m, cols, basis, art_start, pivots: 0 }
    }

    /// Reduced-cost row `z_j - c_j` for maximizing `cost` over the current basis.
    fn objective_row(&self, cost: &[f64]) -> Vec<f64> {
        let w = self.width();
        let mut z: Vec<f64> = (0..w).map(|j| if j < self.cols { -cost[j] } else { 0.0 }).collect();
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                let row = &self.a[r * w..(r + 1) * w];
                for (zj, &aj) in z.iter_mut().zip(row) {
                    *zj += cb * aj;
                }
            }
        }
        z
    }

    fn pivot(&mut self, z: &mut [f64], pr: usize, pc: usize) {
        let w = self.width();
        let inv = 1.0 / self.a[pr * w + pc];
        for x in &mut self.a[pr * w..(pr + 1) * w] {
            *x *= inv;
        }
        self.a[pr * w + pc] = 1.0;
        let (before, rest) = self.a.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f != 0.0 {
                for (x, &p) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * p;
                }
                row[pc] = 0.0;
            }
        };
        before.chunks_exact_mut(w).for_each(eliminate);
        after.chunks_exact_mut(w).for_each(eliminate);
        let f = z[pc];
        if f != 0.0 {
            for (x, &p) in z.iter_mut().zip(prow.iter()) {
                *x -= f * p;
            }
            z[pc] = 0.0;
        }
        self.basis[pr] = pc;
        self.pivots += 1;
    }

    /// Optimizes the objective encoded in `z` over columns `< allowed`.
    fn optimize(&mut self, z: &mut [f64], allowed: usize) -> core::result::Result<(), LpFailure> {
        let limit = 50 * (self.m + self.cols) + 1000;
        let mut degenerate_run = 0usize;
        for _ in 0..limit {
            let bland = degenerate_run > 50;
            let mut enter = None;
            let mut best = -TOLERANCE;
            for (j, &zj) in z.iter().enumerate().take(allowed) {
                if zj < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = zj;
                }
            }
            let Some(pc) = enter else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.m {
                let arc = self.at(r, pc);
                if arc > TOLERANCE {
                    let ratio = self.rhs(r) / arc;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - TOLERANCE
                                || (ratio <= lratio + TOLERANCE && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((pr, ratio)) = leave else {
                return Err(LpFailure::Unbounded);
            };
            if ratio <= TOLERANCE {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(z, pr, pc);
        }
        Err(LpFailure::IterationLimit)
    }

    fn run(mut self, lp: &LinearProgram) -> core::result::Result<LpSolution, LpFailure> {
        let n = lp.n_vars();
        if self.art_start < self.cols {
            // Phase 1: maximize -sum(artificials).
            let mut cost = vec![0.0; self.cols];
            for c in &mut cost[self.art_start..] {
                *c = -1.0;
            }
            let mut z = self.objective_row(&cost);
            self.optimize(&mut z, self.cols)?;
            let infeasibility = -z[self.cols];
            let scale = 1.0 + lp.constraints.iter().map(|c| libm::fabs(c.rhs)).fold(0.0, f64::max);
            if infeasibility > 1e-7 * scale {
                return Err(LpFailure::Infeasible);
            }
            // Drive zero-valued artificials out of the basis.
            for r in 0..self.m {
                if self.basis[r] >= self.art_start {
                    let col = (0..self.art_start).find(|&j| libm::fabs(self.at(r, j)) > 1e-7);
                    if let Some(pc) = col {
                        self.pivot(&mut z, r, pc);
                    }
                    // Otherwise the row is redundant; its artificial stays
                    // basic at zero and is never allowed to re-enter.
                }
            }
        }
        let mut cost = vec![0.0; self.cols];
        cost[..n].copy_from_slice(&lp.objective);
        let mut z = self.objective_row(&cost);
        self.optimize(&mut z, self.art_start)?;

        let mut x = vec![0.0; n];
        for (r, &b) in self.basis.iter().enumerate() {
            if b < n {
                x[b] = self.rhs(r).max(0.0);
            }
        }
        let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(LpSolution { x, objective, pivots: self.pivots })
    }
}
