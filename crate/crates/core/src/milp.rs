//! Depth-first branch-and-bound over indicator binaries.
//!
//! Each search node carries a partial assignment of the binaries and the
//! variable bounds inherited from its parent. A node is processed in three
//! steps: row-wise bound propagation (which may also fix binaries), the LP
//! relaxation in which free binaries become `z in [0, 1]` linked by big-M rows
//! `x <= M(1 - z)` / `s <= M z`, and a complementarity test. A node whose LP
//! point already satisfies every indicator under some rounding of the
//! binaries is a leaf.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::encode::QueryView;
use crate::lp::{LinearProgram, LpError, LpStatus, Relation, Sense, Tolerances};

const PROPAGATION_ROUNDS: usize = 20;
const PROPAGATION_MIN_GAIN: f64 = 1e-7;
const PROPAGATION_PAD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MilpError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("objective has {got} coefficients, system has {expected} variables")]
    ObjectiveLength { expected: usize, got: usize },
    #[error("witness violates the mixed system by {violation:e}")]
    WitnessRejected { violation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub max_nodes: u64,
    pub time_limit: Duration,
    /// LP tolerances; the feasibility tolerance also bounds indicator slack.
    pub tolerances: Tolerances,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_nodes: 1_000_000,
            time_limit: Duration::from_secs(60),
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MilpStatus {
    /// Feasibility query: a witness exists.
    Sat,
    /// Feasibility query: the whole tree was refuted.
    Unsat,
    Optimal,
    /// Optimization query over an empty mixed system.
    Infeasible,
    /// Optimization query whose relaxation is unbounded with every binary fixed.
    Unbounded,
    /// Node or time budget exhausted before a verdict.
    NodeLimit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchStats {
    pub nodes: u64,
    pub lp_calls: u64,
    pub lp_iterations: u64,
    pub elapsed: Duration,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpOutcome {
    pub status: MilpStatus,
    /// Values of the system's continuous variables.
    pub witness: Option<Vec<f64>>,
    /// Rounded binaries matching the witness.
    pub binaries: Option<Vec<bool>>,
    pub objective: Option<f64>,
    pub stats: SearchStats,
}

/// A node of the search tree.
#[derive(Debug, Clone)]
struct SearchNode {
    fixed: Vec<Option<bool>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

struct Problem<'a> {
    view: &'a QueryView<'a>,
    rows: Vec<(&'a [(usize, f64)], Relation, f64)>,
    /// Per binary: `(value, var)` pairs of its indicators.
    by_binary: Vec<Vec<(bool, usize)>>,
    tol: Tolerances,
}

impl<'a> Problem<'a> {
    fn new(view: &'a QueryView<'a>, tol: Tolerances) -> Self {
        let rows = view.rows().map(|r| (r.coeffs.as_slice(), r.relation, r.rhs)).collect();
        let mut by_binary = vec![Vec::new(); view.base.binary_count()];
        for ind in view.base.indicators() {
            by_binary[ind.binary].push((ind.value, ind.var));
        }
        Problem {
            view,
            rows,
            by_binary,
            tol,
        }
    }

    fn num_vars(&self) -> usize {
        self.view.base.num_vars()
    }

    fn root(&self) -> SearchNode {
        let (lo, hi) = self.view.bounds().into_iter().unzip();
        SearchNode {
            fixed: vec![None; self.by_binary.len()],
            lo,
            hi,
        }
    }

    /// Tightens `node` in place. Returns false when it is proven empty.
    fn propagate(&self, node: &mut SearchNode) -> bool {
        let feas = self.tol.feasibility;
        for _ in 0..PROPAGATION_ROUNDS {
            let mut changed = false;
            if !self.propagate_indicators(node, &mut changed) || !self.propagate_sites(node, &mut changed) {
                return false;
            }
            for &(coeffs, rel, rhs) in &self.rows {
                let (ok, c) = match rel {
                    Relation::Le => tighten_le(coeffs, 1.0, rhs, node, feas),
                    Relation::Ge => tighten_le(coeffs, -1.0, -rhs, node, feas),
                    Relation::Eq => {
                        let (a, c1) = tighten_le(coeffs, 1.0, rhs, node, feas);
                        let (b, c2) = tighten_le(coeffs, -1.0, -rhs, node, feas);
                        (a && b, c1 || c2)
                    }
                };
                if !ok {
                    return false;
                }
                changed |= c;
            }
            if !changed {
                break;
            }
        }
        self.propagate_indicators(node, &mut false)
    }

    /// Forward interval pass through the network sites, using the phase
    /// semantics that row-wise propagation cannot see.
    fn propagate_sites(&self, node: &mut SearchNode, changed: &mut bool) -> bool {
        let cs = self.view.base;
        let tol = self.tol.feasibility;
        for site in cs.sites() {
            let (mut lo, mut hi) = (cs.site_bias(site), cs.site_bias(site));
            let mut scale = lo.abs();
            for (j, a) in cs.site_terms(site) {
                let (l, h) = if a > 0.0 {
                    (a * node.lo[j], a * node.hi[j])
                } else {
                    (a * node.hi[j], a * node.lo[j])
                };
                lo += l;
                hi += h;
                scale += l.abs().max(h.abs());
            }
            if !(lo.is_finite() && hi.is_finite()) {
                continue;
            }
            let pad = PROPAGATION_PAD * (1.0 + scale);
            let (lo, hi) = (lo - pad, hi + pad);
            let v = site.var;
            // Bounds implied for (var, slack); None leaves the slack alone.
            let (var_bounds, slack_bounds) = match (site.relu, site.binary) {
                (false, _) => ((lo, hi), None),
                (true, None) if node.hi[v] <= 0.0 => continue,
                (true, None) => ((lo.max(0.0), hi), None),
                (true, Some(b)) => {
                    if node.fixed[b].is_none() {
                        if lo >= 0.0 {
                            node.fixed[b] = Some(false);
                            *changed = true;
                        } else if hi <= 0.0 {
                            node.fixed[b] = Some(true);
                            *changed = true;
                        }
                    }
                    match node.fixed[b] {
                        Some(false) => ((lo.max(0.0), hi), Some((0.0, 0.0))),
                        Some(true) => ((0.0, 0.0), Some(((-hi).max(0.0), -lo))),
                        None => ((0.0, hi.max(0.0)), Some((0.0, (-lo).max(0.0)))),
                    }
                }
            };
            let mut apply = |j: usize, (l, h): (f64, f64)| {
                if h < node.hi[j] - PROPAGATION_MIN_GAIN * (1.0 + h.abs()) {
                    node.hi[j] = h;
                    *changed = true;
                }
                if l > node.lo[j] + PROPAGATION_MIN_GAIN * (1.0 + l.abs()) {
                    node.lo[j] = l;
                    *changed = true;
                }
                if node.lo[j] > node.hi[j] {
                    if node.lo[j] - node.hi[j] > tol * (1.0 + node.lo[j].abs().max(node.hi[j].abs())) {
                        return false;
                    }
                    let mid = 0.5 * (node.lo[j] + node.hi[j]);
                    node.lo[j] = mid;
                    node.hi[j] = mid;
                }
                true
            };
            if !apply(v, var_bounds) {
                return false;
            }
            if let (Some(s), Some(b)) = (site.slack, slack_bounds) {
                if !apply(s, b) {
                    return false;
                }
            }
        }
        true
    }

    /// A genuine solution obtained by evaluating the network at the inputs of
    /// an LP point, if it satisfies the whole view.
    fn complete(&self, lp_point: &[f64]) -> Option<(Vec<f64>, Vec<bool>)> {
        let cs = self.view.base;
        let bounds = self.view.bounds();
        let inputs: Vec<f64> = cs
            .inputs()
            .iter()
            .map(|&v| lp_point[v].clamp(bounds[v].0, bounds[v].1))
            .collect();
        let (x, z) = cs.complete(&inputs)?;
        (self.violation(&x, &z) <= self.tol.feasibility).then_some((x, z))
    }

    fn propagate_indicators(&self, node: &mut SearchNode, changed: &mut bool) -> bool {
        let tol = self.tol.feasibility;
        for (b, inds) in self.by_binary.iter().enumerate() {
            if node.fixed[b].is_none() {
                for value in [false, true] {
                    // A side whose variables are forced positive is impossible.
                    if inds.iter().any(|&(v, x)| v == value && node.lo[x] > tol) {
                        node.fixed[b] = Some(!value);
                        *changed = true;
                        break;
                    }
                    // A side that already holds (up to tolerance) dominates the other one.
                    if inds.iter().filter(|(v, _)| *v == value).all(|&(_, x)| node.hi[x] <= tol) {
                        node.fixed[b] = Some(value);
                        *changed = true;
                        break;
                    }
                }
            }
            if let Some(value) = node.fixed[b] {
                for &(v, x) in inds {
                    if v != value {
                        continue;
                    }
                    if node.lo[x] > tol {
                        return false;
                    }
                    if node.hi[x] > 0.0 {
                        node.hi[x] = 0.0;
                        node.lo[x] = node.lo[x].min(0.0);
                        *changed = true;
                    }
                }
            }
        }
        true
    }

    /// The node's LP relaxation. Free binaries get columns after the
    /// continuous variables; `columns[b]` is the column of binary `b`.
    fn relaxation(&self, node: &SearchNode, objective: Option<(&[f64], Sense)>) -> (LinearProgram, Vec<Option<usize>>) {
        let mut lp = LinearProgram::new();
        for (lo, hi) in node.lo.iter().zip(&node.hi) {
            lp.add_var(*lo, *hi);
        }
        for &(coeffs, rel, rhs) in &self.rows {
            lp.add_sparse(coeffs.to_vec(), rel, rhs);
        }
        let mut columns = vec![None; self.by_binary.len()];
        for (b, inds) in self.by_binary.iter().enumerate() {
            if node.fixed[b].is_some() {
                continue;
            }
            let z = lp.add_var(0.0, 1.0);
            columns[b] = Some(z);
            for &(value, x) in inds {
                let m = node.hi[x];
                if !m.is_finite() || m <= 0.0 {
                    continue;
                }
                if value {
                    // z = 1 -> x <= 0
                    lp.add_sparse(vec![(x, 1.0), (z, m)], Relation::Le, m);
                } else {
                    // z = 0 -> x <= 0
                    lp.add_sparse(vec![(x, 1.0), (z, -m)], Relation::Le, 0.0);
                }
            }
        }
        if let Some((c, sense)) = objective {
            let mut full = c.to_vec();
            full.resize(lp.num_vars(), 0.0);
            lp.set_objective(full, sense);
        }
        (lp, columns)
    }

    /// Rounds the binaries if `x` satisfies every indicator under some
    /// rounding. Otherwise returns the binary to branch on.
    fn classify(&self, node: &SearchNode, x: &[f64], columns: &[Option<usize>]) -> Result<Vec<bool>, usize> {
        let mut rounding = Vec::with_capacity(self.by_binary.len());
        let mut branch: Option<(f64, usize)> = None;
        for (b, inds) in self.by_binary.iter().enumerate() {
            if let Some(v) = node.fixed[b] {
                rounding.push(v);
                continue;
            }
            let holds = |value: bool| {
                inds.iter()
                    .filter(|(v, _)| *v == value)
                    .all(|&(_, var)| x[var] <= self.tol.feasibility)
            };
            let z = columns[b].map_or(0.5, |c| x[c]);
            let prefer = z >= 0.5;
            if holds(prefer) {
                rounding.push(prefer);
            } else if holds(!prefer) {
                rounding.push(!prefer);
            } else {
                let frac = (z - 0.5).abs();
                if branch.map_or(true, |(best, _)| frac < best) {
                    branch = Some((frac, b));
                }
                rounding.push(prefer);
            }
        }
        match branch {
            Some((_, b)) => Err(b),
            None => Ok(rounding),
        }
    }

    /// Largest violation of the mixed system, indicators included.
    fn violation(&self, x: &[f64], rounding: &[bool]) -> f64 {
        let scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let bounds = self
            .view
            .bounds()
            .into_iter()
            .zip(x)
            .map(|((lo, hi), v)| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max);
        let rows = self.view.rows().map(|r| r.violation(x)).fold(0.0, f64::max);
        let inds = self
            .by_binary
            .iter()
            .zip(rounding)
            .flat_map(|(inds, &z)| inds.iter().filter(move |(v, _)| *v == z))
            .map(|&(_, var)| x[var].max(0.0))
            .fold(0.0, f64::max);
        (bounds.max(rows) / (100.0 * scale)).max(inds)
    }
}

/// Row `sign * coeffs . x <= rhs`; tightens bounds. Returns (feasible, changed).
fn tighten_le(coeffs: &[(usize, f64)], sign: f64, rhs: f64, node: &mut SearchNode, feas: f64) -> (bool, bool) {
    let (lo, hi) = (&mut node.lo, &mut node.hi);
    let mut min_act = 0.0;
    let mut inf_count = 0;
    let mut inf_var = usize::MAX;
    let mut scale = rhs.abs();
    for &(j, a) in coeffs {
        let a = sign * a;
        let t = if a > 0.0 { a * lo[j] } else { a * hi[j] };
        if t.is_finite() {
            min_act += t;
            scale += t.abs();
        } else {
            inf_count += 1;
            inf_var = j;
        }
    }
    let pad = PROPAGATION_PAD * (1.0 + scale);
    if inf_count == 0 && min_act > rhs + feas * (1.0 + scale) {
        return (false, false);
    }
    if inf_count > 1 {
        return (true, false);
    }
    let mut changed = false;
    for &(j, a) in coeffs {
        let a = sign * a;
        let own = if a > 0.0 { a * lo[j] } else { a * hi[j] };
        let rest = if inf_count == 1 {
            if j != inf_var {
                continue;
            }
            min_act
        } else {
            min_act - own
        };
        let limit = (rhs - rest) / a;
        if a > 0.0 {
            let new_hi = limit + pad;
            if new_hi < hi[j] - PROPAGATION_MIN_GAIN * (1.0 + new_hi.abs()) {
                hi[j] = new_hi.max(lo[j].min(new_hi));
                changed = true;
            }
        } else {
            let new_lo = limit - pad;
            if new_lo > lo[j] + PROPAGATION_MIN_GAIN * (1.0 + new_lo.abs()) {
                lo[j] = new_lo;
                changed = true;
            }
        }
        if lo[j] > hi[j] {
            if lo[j] - hi[j] > feas * (1.0 + lo[j].abs().max(hi[j].abs())) {
                return (false, changed);
            }
            let mid = 0.5 * (lo[j] + hi[j]);
            lo[j] = mid;
            hi[j] = mid;
        }
    }
    (true, changed)
}

/// The root LP relaxation of `view`, without propagation.
pub fn root_relaxation(view: &QueryView<'_>, objective: Option<(&[f64], Sense)>) -> Result<LinearProgram, MilpError> {
    if let Some((c, _)) = objective {
        if c.len() != view.base.num_vars() {
            return Err(MilpError::ObjectiveLength {
                expected: view.base.num_vars(),
                got: c.len(),
            });
        }
    }
    let p = Problem::new(view, Tolerances::default());
    Ok(p.relaxation(&p.root(), objective).0)
}

/// Decides whether the mixed system has a solution.
pub fn milp_feasible(view: &QueryView<'_>, limits: &Limits) -> Result<MilpOutcome, MilpError> {
    search(view, None, limits)
}

/// Optimizes `objective` (one coefficient per system variable).
pub fn milp_optimize(view: &QueryView<'_>, objective: &[f64], sense: Sense, limits: &Limits) -> Result<MilpOutcome, MilpError> {
    if objective.len() != view.base.num_vars() {
        return Err(MilpError::ObjectiveLength {
            expected: view.base.num_vars(),
            got: objective.len(),
        });
    }
    search(view, Some((objective, sense)), limits)
}

struct Incumbent {
    value: f64,
    x: Vec<f64>,
    rounding: Vec<bool>,
}

fn search(view: &QueryView<'_>, objective: Option<(&[f64], Sense)>, limits: &Limits) -> Result<MilpOutcome, MilpError> {
    let start = Instant::now();
    let mut stats = SearchStats::default();
    // Minimization of `sign * objective`.
    let sign = match objective {
        Some((_, Sense::Maximize)) => -1.0,
        _ => 1.0,
    };
    let finish = |status, inc: Option<Incumbent>, mut stats: SearchStats| {
        stats.elapsed = start.elapsed();
        let (witness, binaries, objective) = match inc {
            Some(i) => (Some(i.x), Some(i.rounding), objective.map(|_| sign * i.value)),
            None => (None, None, None),
        };
        Ok(MilpOutcome {
            status,
            witness,
            binaries,
            objective,
            stats,
        })
    };
    let empty = if objective.is_some() {
        MilpStatus::Infeasible
    } else {
        MilpStatus::Unsat
    };
    if view.assumption_infeasible {
        return finish(empty, None, stats);
    }
    let p = Problem::new(view, limits.tolerances);
    let n = p.num_vars();
    // Without an objective the LP is steered towards the largest slack of
    // the query's extra rows, where a real witness is most likely.
    let guide: Option<Vec<f64>> = match objective {
        None if !view.extra_rows.is_empty() => {
            let mut c = vec![0.0; n];
            for row in &view.extra_rows {
                let dir = match row.relation {
                    Relation::Ge => 1.0,
                    Relation::Le => -1.0,
                    Relation::Eq => 0.0,
                };
                for &(v, a) in &row.coeffs {
                    c[v] += dir * a;
                }
            }
            Some(c)
        }
        _ => None,
    };
    let mut incumbent: Option<Incumbent> = None;
    let mut stack = vec![p.root()];
    while let Some(mut node) = stack.pop() {
        if stats.nodes >= limits.max_nodes || start.elapsed() >= limits.time_limit {
            stats.timed_out = start.elapsed() >= limits.time_limit;
            return finish(MilpStatus::NodeLimit, incumbent, stats);
        }
        stats.nodes += 1;
        if !p.propagate(&mut node) {
            continue;
        }
        if stats.nodes == 1 {
            if let Some(c) = &guide {
                // Root only: a guided solve feeds the primal heuristic but
                // not the branching, which works better from plain vertices.
                let (lp, _) = p.relaxation(&node, Some((c, Sense::Maximize)));
                stats.lp_calls += 1;
                let out = lp.solve_with(&limits.tolerances)?;
                stats.lp_iterations += out.iterations as u64;
                if out.status == LpStatus::Infeasible {
                    continue;
                }
                if out.status == LpStatus::Optimal {
                    if let Some((x, rounding)) = p.complete(&out.assignment) {
                        let inc = Incumbent { value: 0.0, x, rounding };
                        return finish(MilpStatus::Sat, Some(inc), stats);
                    }
                }
            }
        }
        let (lp, columns) = p.relaxation(&node, objective);
        stats.lp_calls += 1;
        let out = lp.solve_with(&limits.tolerances)?;
        stats.lp_iterations += out.iterations as u64;
        let bound = match out.status {
            LpStatus::Infeasible => continue,
            LpStatus::Optimal => out.objective_value.map(|v| sign * v),
            LpStatus::Unbounded => None,
        };
        if let (Some(b), Some(inc)) = (bound, &incumbent) {
            if b >= inc.value - limits.tolerances.optimality * (1.0 + inc.value.abs()) {
                continue;
            }
        }
        if out.status == LpStatus::Optimal {
            if let Some((x, rounding)) = p.complete(&out.assignment) {
                let value = objective.map_or(0.0, |(c, _)| sign * c.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>());
                if incumbent.as_ref().map_or(true, |inc| value < inc.value) {
                    incumbent = Some(Incumbent { value, x, rounding });
                }
                if objective.is_none() {
                    return finish(MilpStatus::Sat, incumbent, stats);
                }
            }
        }
        let choice = match out.status {
            LpStatus::Unbounded => match node.fixed.iter().position(Option::is_none) {
                Some(b) => Err(b),
                None => return finish(MilpStatus::Unbounded, None, stats),
            },
            _ => p.classify(&node, &out.assignment, &columns),
        };
        match choice {
            Ok(rounding) => {
                let x = out.assignment[..n].to_vec();
                let violation = p.violation(&x, &rounding);
                if violation > limits.tolerances.feasibility {
                    return Err(MilpError::WitnessRejected { violation });
                }
                let value = bound.unwrap_or(0.0);
                incumbent = Some(Incumbent { value, x, rounding });
                if objective.is_none() {
                    return finish(MilpStatus::Sat, incumbent, stats);
                }
            }
            Err(b) => {
                // Depth-first, nearer rounding of the LP value first.
                let z = columns[b].map_or(0.0, |c| out.assignment[c]);
                let first = z >= 0.5;
                for value in [!first, first] {
                    let mut child = node.clone();
                    child.fixed[b] = Some(value);
                    stack.push(child);
                }
            }
        }
    }
    let status = match (&incumbent, objective) {
        (_, None) => MilpStatus::Unsat,
        (None, Some(_)) => MilpStatus::Infeasible,
        (Some(_), Some(_)) => MilpStatus::Optimal,
    };
    finish(status, incumbent, stats)
}
