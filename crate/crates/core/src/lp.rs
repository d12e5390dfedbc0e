//! Dense bounded-variable primal simplex.
//!
//! Every constraint row `a·x {<=,=,>=} b` gets a row variable `r = a·x` whose
//! bounds carry the relation, so the working system is `[A | -I] y = 0` with
//! simple bounds on every column. Rows whose starting activity violates their
//! bounds receive an artificial column; phase 1 drives the artificials to zero,
//! phase 2 optimizes the real objective from the feasible basis.
//!
//! Pricing is Dantzig's rule with a permanent switch to Bland's rule after a
//! run of degenerate pivots, which rules out cycling.

use thiserror::Error;

/// Default primal feasibility tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// Default reduced-cost (optimality) tolerance.
pub const OPTIMALITY_TOL: f64 = 1e-7;

const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_STEP: f64 = 1e-12;
const DEGENERATE_RUN_BEFORE_BLAND: usize = 50;
const REFRESH_EVERY: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("malformed linear program: {0}")]
    Malformed(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub feasibility: f64,
    pub optimality: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            feasibility: FEASIBILITY_TOL,
            optimality: OPTIMALITY_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    /// Sparse coefficients `(variable, value)`.
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates this row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let act = self.activity(x);
        match self.relation {
            Relation::Le => (act - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - act).max(0.0),
            Relation::Eq => (act - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    lower: Vec<f64>,
    upper: Vec<f64>,
    constraints: Vec<Constraint>,
    objective: Option<(Vec<f64>, Sense)>,
    malformed: Option<String>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable with bounds `[lo, hi]` (either may be infinite) and
    /// returns its index.
    pub fn add_var(&mut self, lo: f64, hi: f64) -> usize {
        self.lower.push(lo);
        self.upper.push(hi);
        self.lower.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn bounds(&self, var: usize) -> (f64, f64) {
        (self.lower[var], self.upper[var])
    }

    pub fn set_bounds(&mut self, var: usize, lo: f64, hi: f64) {
        self.lower[var] = lo;
        self.upper[var] = hi;
    }

    /// Dense row; `coeffs.len()` must equal the variable count.
    pub fn add_constraint(&mut self, coeffs: &[f64], relation: Relation, rhs: f64) {
        let sparse = coeffs
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(j, a)| (j, *a))
            .collect();
        self.constraints.push(Constraint {
            coeffs: sparse,
            relation,
            rhs,
        });
        if coeffs.len() != self.num_vars() && self.malformed.is_none() {
            self.malformed = Some(format!(
                "row {} has {} coefficients for {} variables",
                self.constraints.len() - 1,
                coeffs.len(),
                self.num_vars()
            ));
        }
    }

    pub fn add_sparse(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn set_objective(&mut self, coeffs: Vec<f64>, sense: Sense) {
        self.objective = Some((coeffs, sense));
    }

    pub fn clear_objective(&mut self) {
        self.objective = None;
    }

    fn validate(&self) -> Result<(), LpError> {
        if let Some(msg) = &self.malformed {
            return Err(LpError::Malformed(msg.clone()));
        }
        let n = self.num_vars();
        for (j, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(LpError::Malformed(format!("variable {j} has bounds [{lo}, {hi}]")));
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() {
                return Err(LpError::Malformed(format!("row {i} has non-finite rhs")));
            }
            for &(j, a) in &c.coeffs {
                if j >= n {
                    return Err(LpError::Malformed(format!("row {i} has wrong length")));
                }
                if !a.is_finite() {
                    return Err(LpError::Malformed(format!("row {i} has non-finite coefficient")));
                }
            }
        }
        if let Some((c, _)) = &self.objective {
            if c.len() != n || c.iter().any(|v| !v.is_finite()) {
                return Err(LpError::Malformed("objective length or values invalid".into()));
            }
        }
        Ok(())
    }

    /// Largest bound or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = self
            .lower
            .iter()
            .zip(&self.upper)
            .zip(x)
            .map(|((lo, hi), v)| (lo - v).max(v - hi).max(0.0));
        let rows = self.constraints.iter().map(|c| c.violation(x));
        bounds.chain(rows).fold(0.0, f64::max)
    }

    pub fn solve(&self) -> Result<LpOutcome, LpError> {
        self.solve_with(&Tolerances::default())
    }

    pub fn solve_with(&self, tol: &Tolerances) -> Result<LpOutcome, LpError> {
        self.validate()?;
        // Crossed bounds are infeasible before any pivoting.
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| lo > hi) {
            return Ok(LpOutcome::infeasible(0));
        }
        let mut s = Simplex::new(self, tol);
        s.run_phase_one()?;
        if s.max_artificial() > tol.feasibility {
            return Ok(LpOutcome::infeasible(s.iterations));
        }
        s.expel_artificials();
        let assignment_after = |s: &Simplex| s.val[..self.num_vars()].to_vec();
        let Some((coeffs, sense)) = &self.objective else {
            let x = assignment_after(&s);
            self.check_solution(&x, tol)?;
            return Ok(LpOutcome {
                status: LpStatus::Optimal,
                assignment: x,
                objective_value: Some(0.0),
                iterations: s.iterations,
            });
        };
        let sign = match sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cost = vec![0.0; s.ncols];
        for (j, c) in coeffs.iter().enumerate() {
            cost[j] = sign * c;
        }
        let status = s.run_phase_two(cost)?;
        let x = assignment_after(&s);
        self.check_solution(&x, tol)?;
        let value: f64 = coeffs.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(match status {
            PhaseResult::Optimal => LpOutcome {
                status: LpStatus::Optimal,
                assignment: x,
                objective_value: Some(value),
                iterations: s.iterations,
            },
            PhaseResult::Unbounded => LpOutcome {
                status: LpStatus::Unbounded,
                assignment: x,
                objective_value: None,
                iterations: s.iterations,
            },
        })
    }

    fn check_solution(&self, x: &[f64], tol: &Tolerances) -> Result<(), LpError> {
        let scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let viol = self.max_violation(x);
        if viol > 100.0 * tol.feasibility * scale {
            return Err(LpError::NumericalBreakdown(format!(
                "final assignment violates constraints by {viol:e}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Empty when infeasible.
    pub assignment: Vec<f64>,
    pub objective_value: Option<f64>,
    pub iterations: usize,
}

impl LpOutcome {
    fn infeasible(iterations: usize) -> Self {
        LpOutcome {
            status: LpStatus::Infeasible,
            assignment: Vec::new(),
            objective_value: None,
            iterations,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.status != LpStatus::Infeasible
    }
}

/// Optimizes the program's objective.
pub fn lp_solve(prog: &LinearProgram) -> Result<LpOutcome, LpError> {
    prog.solve()
}

/// Phase 1 only: decides whether the constraint set is satisfiable.
pub fn lp_feasible(prog: &LinearProgram) -> Result<LpOutcome, LpError> {
    let mut p = prog.clone();
    p.clear_objective();
    p.solve()
}

enum PhaseResult {
    Optimal,
    Unbounded,
}

const NOT_BASIC: usize = usize::MAX;

struct Simplex {
    m: usize,
    ncols: usize,
    art_start: usize,
    /// Row-major `m x ncols` tableau `B^-1 [A | -I | art]`.
    tab: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    val: Vec<f64>,
    basis: Vec<usize>,
    row_of: Vec<usize>,
    cost: Vec<f64>,
    reduced: Vec<f64>,
    tol: Tolerances,
    bland: bool,
    degenerate_run: usize,
    iterations: usize,
    max_iterations: usize,
}

fn resting_value(lo: f64, hi: f64) -> f64 {
    if lo.is_finite() {
        lo
    } else if hi.is_finite() {
        hi
    } else {
        0.0
    }
}

impl Simplex {
    fn new(prog: &LinearProgram, tol: &Tolerances) -> Self {
        let n = prog.num_vars();
        let m = prog.constraints.len();
        let mut val: Vec<f64> = (0..n).map(|j| resting_value(prog.lower[j], prog.upper[j])).collect();

        // Row variable bounds and starting activities.
        let mut row_lo = Vec::with_capacity(m);
        let mut row_hi = Vec::with_capacity(m);
        let mut activity = Vec::with_capacity(m);
        for c in &prog.constraints {
            let (l, h) = match c.relation {
                Relation::Le => (f64::NEG_INFINITY, c.rhs),
                Relation::Ge => (c.rhs, f64::INFINITY),
                Relation::Eq => (c.rhs, c.rhs),
            };
            row_lo.push(l);
            row_hi.push(h);
            activity.push(c.activity(&val));
        }
        let violated: Vec<usize> = (0..m)
            .filter(|&i| activity[i] < row_lo[i] || activity[i] > row_hi[i])
            .collect();
        let art_start = n + m;
        let ncols = art_start + violated.len();

        let mut lo = prog.lower.clone();
        let mut hi = prog.upper.clone();
        lo.extend_from_slice(&row_lo);
        hi.extend_from_slice(&row_hi);
        lo.extend(std::iter::repeat(0.0).take(violated.len()));
        hi.extend(std::iter::repeat(f64::INFINITY).take(violated.len()));
        val.extend(std::iter::repeat(0.0).take(m + violated.len()));

        let mut tab = vec![0.0; m * ncols];
        let mut basis = vec![0; m];
        let mut row_of = vec![NOT_BASIC; ncols];
        let mut art_of_row = vec![NOT_BASIC; m];
        for (k, &i) in violated.iter().enumerate() {
            art_of_row[i] = art_start + k;
        }
        for (i, c) in prog.constraints.iter().enumerate() {
            let row = &mut tab[i * ncols..(i + 1) * ncols];
            let r_col = n + i;
            if art_of_row[i] == NOT_BASIC {
                // Basis column is -e_i: the row is negated.
                for &(j, a) in &c.coeffs {
                    row[j] -= a;
                }
                row[r_col] = 1.0;
                basis[i] = r_col;
                row_of[r_col] = i;
                val[r_col] = activity[i];
            } else {
                let bound = if activity[i] < row_lo[i] { row_lo[i] } else { row_hi[i] };
                let sigma = if bound > activity[i] { 1.0 } else { -1.0 };
                for &(j, a) in &c.coeffs {
                    row[j] += sigma * a;
                }
                row[r_col] = -sigma;
                let a_col = art_of_row[i];
                row[a_col] = 1.0;
                basis[i] = a_col;
                row_of[a_col] = i;
                val[r_col] = bound;
                val[a_col] = (bound - activity[i]).abs();
            }
        }

        Simplex {
            m,
            ncols,
            art_start,
            tab,
            lo,
            hi,
            val,
            basis,
            row_of,
            cost: vec![0.0; ncols],
            reduced: vec![0.0; ncols],
            tol: *tol,
            bland: false,
            degenerate_run: 0,
            iterations: 0,
            max_iterations: 50 * (m + ncols) + 1000,
        }
    }

    fn max_artificial(&self) -> f64 {
        (self.art_start..self.ncols).map(|j| self.val[j]).fold(0.0, f64::max)
    }

    fn set_costs(&mut self, cost: Vec<f64>) {
        self.cost = cost;
        self.reduced.clone_from(&self.cost);
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.tab[i * self.ncols..(i + 1) * self.ncols];
                for (d, t) in self.reduced.iter_mut().zip(row) {
                    *d -= cb * t;
                }
            }
        }
        self.bland = false;
        self.degenerate_run = 0;
    }

    fn run_phase_one(&mut self) -> Result<(), LpError> {
        let mut cost = vec![0.0; self.ncols];
        cost[self.art_start..].iter_mut().for_each(|c| *c = 1.0);
        self.set_costs(cost);
        match self.iterate()? {
            PhaseResult::Optimal => Ok(()),
            PhaseResult::Unbounded => Err(LpError::NumericalBreakdown("phase 1 reported unbounded".into())),
        }
    }

    fn run_phase_two(&mut self, cost: Vec<f64>) -> Result<PhaseResult, LpError> {
        self.set_costs(cost);
        self.iterate()
    }

    /// Pivots basic artificials out where possible and pins every artificial at 0.
    fn expel_artificials(&mut self) {
        for r in 0..self.m {
            let b = self.basis[r];
            if b < self.art_start {
                continue;
            }
            let row = &self.tab[r * self.ncols..(r + 1) * self.ncols];
            let mut best = None;
            let mut best_abs = PIVOT_TOL * 100.0;
            for (j, t) in row[..self.art_start].iter().enumerate() {
                if self.row_of[j] == NOT_BASIC && t.abs() > best_abs {
                    best_abs = t.abs();
                    best = Some(j);
                }
            }
            if let Some(q) = best {
                self.val[b] = 0.0;
                self.pivot(r, q);
            }
        }
        for j in self.art_start..self.ncols {
            self.lo[j] = 0.0;
            self.hi[j] = 0.0;
            if self.row_of[j] == NOT_BASIC {
                self.val[j] = 0.0;
            }
        }
        self.refresh_basic_values();
    }

    /// Recomputes basic values from the nonbasic ones: `x_B = -T_N x_N`.
    fn refresh_basic_values(&mut self) {
        for i in 0..self.m {
            let row = &self.tab[i * self.ncols..(i + 1) * self.ncols];
            let mut acc = 0.0;
            for (j, t) in row.iter().enumerate() {
                if *t != 0.0 && self.row_of[j] == NOT_BASIC {
                    acc -= t * self.val[j];
                }
            }
            self.val[self.basis[i]] = acc;
        }
    }

    fn choose_entering(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for j in 0..self.ncols {
            if self.row_of[j] != NOT_BASIC || self.lo[j] == self.hi[j] {
                continue;
            }
            let d = self.reduced[j];
            let dir = if d < -self.tol.optimality && self.val[j] < self.hi[j] {
                1.0
            } else if d > self.tol.optimality && self.val[j] > self.lo[j] {
                -1.0
            } else {
                continue;
            };
            if self.bland {
                return Some((j, dir));
            }
            if d.abs() > best_score {
                best_score = d.abs();
                best = Some((j, dir));
            }
        }
        best
    }

    fn iterate(&mut self) -> Result<PhaseResult, LpError> {
        loop {
            if self.iterations >= self.max_iterations {
                return Err(LpError::NumericalBreakdown(format!(
                    "iteration limit {} reached",
                    self.max_iterations
                )));
            }
            if self.iterations % REFRESH_EVERY == REFRESH_EVERY - 1 {
                self.refresh_basic_values();
            }
            let Some((q, dir)) = self.choose_entering() else {
                self.refresh_basic_values();
                return Ok(PhaseResult::Optimal);
            };
            self.iterations += 1;

            // Ratio test. Basic value in row i moves by `-dir * T[i][q]` per unit step.
            let own = self.hi[q] - self.lo[q];
            let own = if own.is_finite() { own } else { f64::INFINITY };
            let (step, leave) = if self.bland {
                self.ratio_test_bland(q, dir, own)
            } else {
                self.ratio_test_harris(q, dir, own)
            };
            if step == f64::INFINITY {
                return Ok(PhaseResult::Unbounded);
            }
            if step <= DEGENERATE_STEP {
                self.degenerate_run += 1;
                if self.degenerate_run > DEGENERATE_RUN_BEFORE_BLAND {
                    self.bland = true;
                }
            } else {
                self.degenerate_run = 0;
            }

            for i in 0..self.m {
                let t = self.tab[i * self.ncols + q];
                if t != 0.0 {
                    self.val[self.basis[i]] -= dir * t * step;
                }
            }
            match leave {
                None => {
                    // Bound flip of the entering variable.
                    self.val[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                }
                Some(r) => {
                    let b = self.basis[r];
                    let rate = -dir * self.tab[r * self.ncols + q];
                    self.val[b] = if rate < 0.0 { self.lo[b] } else { self.hi[b] };
                    self.val[q] += dir * step;
                    self.pivot(r, q);
                }
            }
        }
    }

    /// Exact distance basic row `i` can move before hitting a bound, with
    /// `slack` added to that bound.
    fn row_limit(&self, i: usize, q: usize, dir: f64, slack: f64) -> Option<(f64, f64)> {
        let rate = -dir * self.tab[i * self.ncols + q];
        if rate.abs() <= PIVOT_TOL {
            return None;
        }
        let b = self.basis[i];
        let limit = if rate < 0.0 {
            if !self.lo[b].is_finite() {
                return None;
            }
            (self.val[b] - self.lo[b] + slack) / -rate
        } else {
            if !self.hi[b].is_finite() {
                return None;
            }
            (self.hi[b] - self.val[b] + slack) / rate
        };
        Some((limit.max(0.0), rate.abs()))
    }

    /// Textbook minimum-ratio test with lowest-index tie breaking.
    fn ratio_test_bland(&self, q: usize, dir: f64, own: f64) -> (f64, Option<usize>) {
        let mut step = own;
        let mut leave: Option<usize> = None;
        for i in 0..self.m {
            let Some((limit, _)) = self.row_limit(i, q, dir, 0.0) else {
                continue;
            };
            let better = if limit < step - 1e-12 {
                true
            } else if limit <= step + 1e-12 {
                match leave {
                    Some(l) => self.basis[i] < self.basis[l],
                    None => limit < step,
                }
            } else {
                false
            };
            if better {
                step = step.min(limit);
                leave = Some(i);
            }
        }
        (step, leave)
    }

    /// Two-pass ratio test: bounds relaxed by the feasibility tolerance fix
    /// the admissible step, then the largest pivot within it is chosen.
    fn ratio_test_harris(&self, q: usize, dir: f64, own: f64) -> (f64, Option<usize>) {
        let slack = self.tol.feasibility;
        let mut relaxed = f64::INFINITY;
        for i in 0..self.m {
            if let Some((limit, _)) = self.row_limit(i, q, dir, slack) {
                relaxed = relaxed.min(limit);
            }
        }
        if own <= relaxed {
            return (own, None);
        }
        let mut leave: Option<(usize, f64, f64)> = None;
        for i in 0..self.m {
            let Some((limit, rate)) = self.row_limit(i, q, dir, 0.0) else {
                continue;
            };
            if limit <= relaxed && leave.map_or(true, |(_, _, best)| rate > best) {
                leave = Some((i, limit, rate));
            }
        }
        match leave {
            Some((i, limit, _)) => (limit, Some(i)),
            None => (f64::INFINITY, None),
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let nc = self.ncols;
        let piv = self.tab[r * nc + q];
        {
            let row = &mut self.tab[r * nc..(r + 1) * nc];
            row.iter_mut().for_each(|v| *v /= piv);
            row[q] = 1.0;
        }
        let nz: Vec<usize> = (0..nc).filter(|&j| self.tab[r * nc + j] != 0.0).collect();
        let (before, rest) = self.tab.split_at_mut(r * nc);
        let (pivot_row, after) = rest.split_at_mut(nc);
        for row in before.chunks_exact_mut(nc).chain(after.chunks_exact_mut(nc)) {
            let f = row[q];
            if f != 0.0 {
                for &j in &nz {
                    row[j] -= f * pivot_row[j];
                }
                row[q] = 0.0;
            }
        }
        let f = self.reduced[q];
        if f != 0.0 {
            for &j in &nz {
                self.reduced[j] -= f * pivot_row[j];
            }
            self.reduced[q] = 0.0;
        }
        let old = self.basis[r];
        self.row_of[old] = NOT_BASIC;
        self.basis[r] = q;
        self.row_of[q] = r;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_only_maximum() {
        let mut lp = LinearProgram::new();
        lp.add_var(0.2, 0.7);
        lp.set_objective(vec![1.0], Sense::Maximize);
        let out = lp_solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.assignment[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut lp = LinearProgram::new();
        lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
        lp.add_constraint(&[1.0], Relation::Ge, 2.0);
        lp.add_constraint(&[1.0], Relation::Le, 1.0);
        assert_eq!(lp_feasible(&lp).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn satisfiable_linear_fragment() {
        // 2.5 x1 + 3.1 x2 >= 6, x1 = 2, x2 <= 1.1
        let mut lp = LinearProgram::new();
        lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
        lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
        lp.add_constraint(&[2.5, 3.1], Relation::Ge, 6.0);
        lp.add_constraint(&[1.0, 0.0], Relation::Eq, 2.0);
        lp.add_constraint(&[0.0, 1.0], Relation::Le, 1.1);
        let out = lp_feasible(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!(lp.max_violation(&out.assignment) < 1e-9);
        // The witness from the text also satisfies it.
        assert!(lp.max_violation(&[2.0, 1.05]) < 1e-12);
    }

    #[test]
    fn vacuous_and_contradictory_equalities() {
        let mut lp = LinearProgram::new();
        lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
        assert!(lp_feasible(&lp).unwrap().is_feasible());
        lp.add_constraint(&[1.0], Relation::Eq, 2.0);
        lp.add_constraint(&[1.0], Relation::Eq, 3.0);
        assert_eq!(lp_feasible(&lp).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut lp = LinearProgram::new();
        lp.add_var(0.0, f64::INFINITY);
        lp.add_var(0.0, f64::INFINITY);
        lp.add_constraint(&[1.0, -1.0], Relation::Le, 1.0);
        lp.set_objective(vec![1.0, 1.0], Sense::Maximize);
        assert_eq!(lp_solve(&lp).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn free_variables_reach_optimum() {
        // min x + y s.t. x + 2y >= 4, 3x + y >= 6, x,y free
        let mut lp = LinearProgram::new();
        lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
        lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
        lp.add_constraint(&[1.0, 2.0], Relation::Ge, 4.0);
        lp.add_constraint(&[3.0, 1.0], Relation::Ge, 6.0);
        lp.set_objective(vec![1.0, 1.0], Sense::Minimize);
        let out = lp_solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.objective_value.unwrap() - 2.8).abs() < 1e-9);
    }

    #[test]
    fn rejects_malformed_rows() {
        let mut lp = LinearProgram::new();
        lp.add_var(0.0, 1.0);
        lp.add_constraint(&[1.0, 2.0], Relation::Le, 1.0);
        assert!(matches!(lp.solve(), Err(LpError::Malformed(_))));
    }

    /// Relaxation with z in [0, 1] linked by big-M rows.
    #[test]
    fn relaxation_of_small_milp() {
        // vars: x1 in [1,3], y1 in [0,7], s1 in [0,7], z1 in [0,1]
        let mut lp = LinearProgram::new();
        let x = lp.add_var(1.0, 3.0);
        let y = lp.add_var(0.0, 7.0);
        let s = lp.add_var(0.0, 7.0);
        let z = lp.add_var(0.0, 1.0);
        lp.add_sparse(vec![(x, 3.0), (s, 1.0), (y, -1.0)], Relation::Eq, 2.0);
        lp.add_sparse(vec![(y, 1.0), (x, -3.0)], Relation::Le, -2.0);
        lp.add_sparse(vec![(s, 1.0), (x, -3.0)], Relation::Le, -2.0);
        lp.add_sparse(vec![(y, 1.0), (z, 7.0)], Relation::Le, 7.0);
        lp.add_sparse(vec![(s, 1.0), (z, -7.0)], Relation::Le, 0.0);
        let mut obj = vec![0.0; 4];
        obj[y] = 1.0;
        lp.set_objective(obj, Sense::Minimize);
        let out = lp_solve(&lp).unwrap();
        // Independent grid over (x1, z1); y1 and s1 follow from the rows.
        let mut grid_best = f64::INFINITY;
        for xi in 0..=200 {
            let xv = 1.0 + xi as f64 * 0.01;
            for zi in 0..=100 {
                let zv = zi as f64 * 0.01;
                // s1 <= 3x1-2 and y1 = 3x1-2+s1 <= 3x1-2 force s1 = 0.
                let (sv, yv) = (0.0, 3.0 * xv - 2.0);
                if yv <= 7.0 * (1.0 - zv) + 1e-12 && sv <= 7.0 * zv + 1e-12 {
                    grid_best = grid_best.min(yv);
                }
            }
        }
        assert!((grid_best - 1.0).abs() < 1e-9);
        let v = out.objective_value.unwrap();
        assert!(v <= 1.0 + 1e-9 && (v - grid_best).abs() < 1e-6);
    }

    // ---- vertex-enumeration oracle -------------------------------------

    struct Dense {
        n: usize,
        rows: Vec<(Vec<f64>, Relation, f64)>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        obj: Vec<f64>,
    }

    fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for col in 0..n {
            let p = (col..n).max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs()))?;
            if a[p][col].abs() < 1e-10 {
                return None;
            }
            a.swap(p, col);
            b.swap(p, col);
            for i in 0..n {
                if i != col {
                    let f = a[i][col] / a[col][col];
                    for k in col..n {
                        a[i][k] -= f * a[col][k];
                    }
                    b[i] -= f * b[col];
                }
            }
        }
        Some((0..n).map(|i| b[i] / a[i][i]).collect())
    }

    fn oracle(p: &Dense) -> Option<f64> {
        let mut planes: Vec<(Vec<f64>, f64)> = p.rows.iter().map(|(a, _, b)| (a.clone(), *b)).collect();
        for j in 0..p.n {
            let mut e = vec![0.0; p.n];
            e[j] = 1.0;
            planes.push((e.clone(), p.lo[j]));
            planes.push((e, p.hi[j]));
        }
        let feasible = |x: &[f64]| {
            let ok_bounds = (0..p.n).all(|j| x[j] >= p.lo[j] - 1e-9 && x[j] <= p.hi[j] + 1e-9);
            ok_bounds
                && p.rows.iter().all(|(a, rel, b)| {
                    let act: f64 = a.iter().zip(x).map(|(u, v)| u * v).sum();
                    match rel {
                        Relation::Le => act <= b + 1e-9,
                        Relation::Ge => act >= b - 1e-9,
                        Relation::Eq => (act - b).abs() <= 1e-9,
                    }
                })
        };
        let mut best: Option<f64> = None;
        let mut idx: Vec<usize> = (0..p.n).collect();
        let total = planes.len();
        loop {
            let a = idx.iter().map(|&i| planes[i].0.clone()).collect();
            let b = idx.iter().map(|&i| planes[i].1).collect();
            if let Some(x) = solve_square(a, b) {
                if feasible(&x) {
                    let v: f64 = p.obj.iter().zip(&x).map(|(c, v)| c * v).sum();
                    best = Some(best.map_or(v, |bv: f64| bv.min(v)));
                }
            }
            // next combination
            let mut k = p.n;
            loop {
                if k == 0 {
                    return best;
                }
                k -= 1;
                if idx[k] < total - (p.n - k) {
                    idx[k] += 1;
                    for t in k + 1..p.n {
                        idx[t] = idx[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn random_dense(rng: &mut ChaCha8Rng) -> Dense {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(0..=8);
        let rows = (0..m)
            .map(|_| {
                let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5..=5) as f64).collect();
                let rel = [Relation::Le, Relation::Ge, Relation::Eq][rng.gen_range(0..3)];
                let rel = if rel == Relation::Eq && rng.gen_bool(0.5) { Relation::Le } else { rel };
                (a, rel, rng.gen_range(-10..=10) as f64)
            })
            .collect();
        let lo: Vec<f64> = (0..n).map(|_| rng.gen_range(-5..=5) as f64).collect();
        let hi = lo.iter().map(|l| l + rng.gen_range(0..=6) as f64).collect();
        let obj = (0..n).map(|_| rng.gen_range(-5..=5) as f64).collect();
        Dense { n, rows, lo, hi, obj }
    }

    fn to_lp(p: &Dense) -> LinearProgram {
        let mut lp = LinearProgram::new();
        for j in 0..p.n {
            lp.add_var(p.lo[j], p.hi[j]);
        }
        for (a, rel, b) in &p.rows {
            lp.add_constraint(a, *rel, *b);
        }
        lp.set_objective(p.obj.clone(), Sense::Minimize);
        lp
    }

    #[test]
    fn agrees_with_vertex_enumeration_on_random_programs() {
        let mut rng = ChaCha8Rng::seed_from_u64(20240611);
        let mut feasible_seen = 0;
        for case in 0..1000 {
            let p = random_dense(&mut rng);
            let expected = oracle(&p);
            let out = lp_solve(&to_lp(&p)).unwrap();
            match expected {
                None => assert_eq!(out.status, LpStatus::Infeasible, "case {case}"),
                Some(v) => {
                    feasible_seen += 1;
                    assert_eq!(out.status, LpStatus::Optimal, "case {case}");
                    let got = out.objective_value.unwrap();
                    assert!((got - v).abs() <= 1e-6 * (1.0 + v.abs()), "case {case}: {got} vs {v}");
                }
            }
        }
        assert!(feasible_seen > 200, "generator too restrictive: {feasible_seen}");
    }

    #[test]
    fn removing_rows_preserves_feasibility_and_duplicates_change_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let p = random_dense(&mut rng);
            let base = lp_solve(&to_lp(&p)).unwrap();
            if !p.rows.is_empty() {
                let mut fewer = clone_dense(&p);
                fewer.rows.remove(rng.gen_range(0..p.rows.len()));
                let out = lp_solve(&to_lp(&fewer)).unwrap();
                if base.is_feasible() {
                    assert!(out.is_feasible());
                }
            }
            let mut dup = clone_dense(&p);
            dup.rows.extend(p.rows.iter().cloned());
            let out = lp_solve(&to_lp(&dup)).unwrap();
            assert_eq!(out.status, base.status);
            if let (Some(a), Some(b)) = (out.objective_value, base.objective_value) {
                assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }
    }

    fn clone_dense(p: &Dense) -> Dense {
        Dense {
            n: p.n,
            rows: p.rows.clone(),
            lo: p.lo.clone(),
            hi: p.hi.clone(),
            obj: p.obj.clone(),
        }
    }
}
