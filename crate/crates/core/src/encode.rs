//! Mixed Boolean/linear encoding of a ReLU network over an input box.
//!
//! Every unstable hidden neuron `(l, j)` contributes
//!
//! ```text
//! sum_i w[j][i] * x(l-1)_i + b_j = x(l)_j - s(l)_j
//! z(l)_j = 1 -> x(l)_j <= 0
//! z(l)_j = 0 -> s(l)_j <= 0
//! 0 <= x(l)_j <= ub_x,   0 <= s(l)_j <= ub_s
//! ```
//!
//! Stably active neurons keep only `sum + b = x` with `x` in `[pre_lo, pre_hi]`;
//! stably inactive neurons are pinned to `x = 0`. Indicator constraints are
//! kept symbolic so the solver decides how to relax them.

use std::fmt::Write as _;

use thiserror::Error;

use crate::bounds::{NeuronBounds, Stability};
use crate::lp::{Constraint, Relation};
use crate::model::{Domain, Layer, NeuralNetwork};

pub type Row = Constraint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite bound for {0}")]
    NonFiniteBound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarRole {
    Input(usize),
    Hidden { layer: usize, neuron: usize },
    Slack { layer: usize, neuron: usize },
    Output(usize),
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub role: VarRole,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binary {
    pub name: String,
    /// Hidden neuron `(layer, neuron)` whose phase this binary selects.
    pub site: Option<(usize, usize)>,
}

/// `binary = value -> var <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Indicator {
    pub binary: usize,
    pub value: bool,
    pub var: usize,
}

/// A variable defined by one equality row: `var = sum(row terms) + bias`,
/// passed through a ReLU when `relu` is set. For an unstable neuron the row
/// reads `sum + b = x - s`; `slack` and `binary` are then present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub row: usize,
    pub var: usize,
    pub slack: Option<usize>,
    pub binary: Option<usize>,
    pub relu: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSystem {
    vars: Vec<Variable>,
    rows: Vec<Row>,
    binaries: Vec<Binary>,
    indicators: Vec<Indicator>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    sites: Vec<Site>,
    total_relu_count: usize,
}

impl ConstraintSystem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, role: VarRole, lo: f64, hi: f64) -> usize {
        self.vars.push(Variable {
            name: name.into(),
            role,
            lo,
            hi,
        });
        let idx = self.vars.len() - 1;
        match role {
            VarRole::Input(_) => self.inputs.push(idx),
            VarRole::Output(_) => self.outputs.push(idx),
            _ => {}
        }
        idx
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.rows.push(Row { coeffs, relation, rhs });
    }

    /// Marks the last row as the definition of ReLU variable `var`.
    fn add_site(&mut self, var: usize, slack: Option<usize>, binary: Option<usize>) {
        self.sites.push(Site {
            row: self.rows.len() - 1,
            var,
            slack,
            binary,
            relu: true,
        });
    }

    pub fn add_binary(&mut self, name: impl Into<String>, site: Option<(usize, usize)>) -> usize {
        self.binaries.push(Binary {
            name: name.into(),
            site,
        });
        self.binaries.len() - 1
    }

    pub fn add_indicator(&mut self, binary: usize, value: bool, var: usize) {
        self.indicators.push(Indicator { binary, value, var });
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn binaries(&self) -> &[Binary] {
        &self.binaries
    }

    pub fn indicators(&self) -> &[Indicator] {
        &self.indicators
    }

    /// Input variable index per feature.
    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    /// Output variable index per class.
    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn binary_count(&self) -> usize {
        self.binaries.len()
    }

    pub fn total_relu_count(&self) -> usize {
        self.total_relu_count
    }

    /// Defining rows of every hidden and output variable, in layer order.
    /// Empty for systems not built from a network.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// `sum + bias` of a site's row over the given per-variable values or
    /// intervals, leaving out the site's own variable and slack.
    pub fn site_terms<'a>(&'a self, site: &'a Site) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.rows[site.row]
            .coeffs
            .iter()
            .copied()
            .filter(move |(j, _)| *j != site.var && Some(*j) != site.slack)
    }

    /// `-rhs` of the site's row, i.e. the neuron bias.
    pub fn site_bias(&self, site: &Site) -> f64 {
        -self.rows[site.row].rhs
    }

    /// Evaluates the network encoded by this system at `inputs`, returning
    /// values for every variable and the matching binary assignment. `None`
    /// when the system has no network structure.
    pub fn complete(&self, inputs: &[f64]) -> Option<(Vec<f64>, Vec<bool>)> {
        let covered = self.inputs.len() + self.sites.iter().map(|s| 1 + usize::from(s.slack.is_some())).sum::<usize>();
        if self.sites.is_empty() || covered != self.vars.len() || inputs.len() != self.inputs.len() {
            return None;
        }
        let mut x = vec![0.0; self.vars.len()];
        for (&v, &value) in self.inputs.iter().zip(inputs) {
            x[v] = value;
        }
        let mut z = vec![false; self.binaries.len()];
        for site in &self.sites {
            let pre = self.site_terms(site).map(|(j, a)| a * x[j]).sum::<f64>() + self.site_bias(site);
            if !site.relu {
                x[site.var] = pre;
                continue;
            }
            let hi = self.vars[site.var].hi;
            x[site.var] = if hi <= 0.0 { 0.0 } else { pre.max(0.0) };
            if let Some(s) = site.slack {
                x[s] = (-pre).max(0.0);
            }
            if let Some(b) = site.binary {
                z[b] = pre < 0.0;
            }
        }
        Some((x, z))
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn var_by_role(&self, role: VarRole) -> Option<usize> {
        self.vars.iter().position(|v| v.role == role)
    }

    /// The system with no assumptions.
    pub fn view(&self) -> QueryView<'_> {
        QueryView {
            base: self,
            fixed: Vec::new(),
            extra_rows: Vec::new(),
            assumption_infeasible: false,
        }
    }

    /// Human-readable LP-format-like dump.
    pub fn dump_lp(&self) -> String {
        let mut out = String::new();
        let term = |out: &mut String, coeffs: &[(usize, f64)]| {
            for (k, (j, a)) in coeffs.iter().enumerate() {
                let sign = if *a < 0.0 { "-" } else if k > 0 { "+" } else { "" };
                let _ = write!(out, " {sign} {} {}", a.abs(), self.vars[*j].name);
            }
        };
        let _ = writeln!(out, "\\ relus: {}  binaries: {}", self.total_relu_count, self.binary_count());
        out.push_str("Subject To\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, " r{i}:");
            term(&mut out, &r.coeffs);
            let rel = match r.relation {
                Relation::Le => "<=",
                Relation::Eq => "=",
                Relation::Ge => ">=",
            };
            let _ = writeln!(out, " {rel} {}", r.rhs);
        }
        for ind in &self.indicators {
            let _ = writeln!(
                out,
                " {} = {} -> {} <= 0",
                self.binaries[ind.binary].name,
                u8::from(ind.value),
                self.vars[ind.var].name
            );
        }
        out.push_str("Bounds\n");
        for v in &self.vars {
            let fmt = |x: f64| {
                if x == f64::INFINITY {
                    "+inf".to_string()
                } else if x == f64::NEG_INFINITY {
                    "-inf".to_string()
                } else {
                    x.to_string()
                }
            };
            let _ = writeln!(out, " {} <= {} <= {}", fmt(v.lo), v.name, fmt(v.hi));
        }
        out.push_str("Binaries\n");
        for b in &self.binaries {
            let _ = writeln!(out, " {}", b.name);
        }
        out.push_str("End\n");
        out
    }
}

/// Non-destructive overlay: fixed input values and extra rows on top of a
/// shared base system.
#[derive(Debug, Clone)]
pub struct QueryView<'a> {
    pub base: &'a ConstraintSystem,
    /// `(variable, value)` pins.
    pub fixed: Vec<(usize, f64)>,
    pub extra_rows: Vec<Row>,
    /// A pinned value lies outside its variable's bounds; the premises are
    /// contradictory so every query over this view is vacuously entailed.
    pub assumption_infeasible: bool,
}

impl QueryView<'_> {
    pub fn rows(&self) -> impl Iterator<Item = &Row> {
        self.base.rows.iter().chain(&self.extra_rows)
    }

    /// Effective bounds after pins.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b: Vec<(f64, f64)> = self.base.vars.iter().map(|v| (v.lo, v.hi)).collect();
        for &(var, value) in &self.fixed {
            b[var] = (value, value);
        }
        b
    }
}

/// Snap distance for pins that miss a bound through round-off only.
const PIN_SNAP: f64 = 1e-12;

/// Pins `features` (by feature index) to values and appends `extra_rows`.
pub fn with_assumptions<'a>(
    cs: &'a ConstraintSystem,
    fixed: &[(usize, f64)],
    extra_rows: Vec<Row>,
) -> QueryView<'a> {
    let mut view = QueryView {
        base: cs,
        fixed: Vec::with_capacity(fixed.len()),
        extra_rows,
        assumption_infeasible: false,
    };
    for &(feature, value) in fixed {
        let var = cs.inputs[feature];
        let (lo, hi) = (cs.vars[var].lo, cs.vars[var].hi);
        let v = if value < lo && value >= lo - PIN_SNAP {
            lo
        } else if value > hi && value <= hi + PIN_SNAP {
            hi
        } else {
            value
        };
        if !(lo <= v && v <= hi) {
            view.assumption_infeasible = true;
        }
        view.fixed.push((var, v));
    }
    view
}

/// Negation of "class `target` strictly beats every other class", one
/// non-strict disjunct `o_i - o_target >= 0` per competitor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFormula {
    pub target: usize,
    pub disjuncts: Vec<(usize, Row)>,
}

impl PredictionFormula {
    pub fn new(cs: &ConstraintSystem, target: usize) -> Self {
        let outs = cs.outputs();
        let disjuncts = (0..outs.len())
            .filter(|&i| i != target)
            .map(|i| {
                (
                    i,
                    Row {
                        coeffs: vec![(outs[i], 1.0), (outs[target], -1.0)],
                        relation: Relation::Ge,
                        rhs: 0.0,
                    },
                )
            })
            .collect();
        PredictionFormula { target, disjuncts }
    }

    /// Evaluates the strict conjunction on concrete outputs.
    pub fn holds(&self, outputs: &[f64]) -> bool {
        self.disjuncts.iter().all(|(i, _)| outputs[self.target] > outputs[*i])
    }
}

pub fn encode(net: &NeuralNetwork, domain: &Domain, bounds: &NeuronBounds) -> Result<ConstraintSystem, EncodeError> {
    if domain.len() != net.num_features() {
        return Err(EncodeError::DimensionMismatch(format!(
            "domain has {} intervals, network has {} features",
            domain.len(),
            net.num_features()
        )));
    }
    encode_head(net.hidden_layers(), net.output_layer(), domain, bounds)
}

/// Encodes `hidden` ReLU layers followed by the affine `head` layer whose
/// values become the output variables.
pub fn encode_head(
    hidden: &[Layer],
    head: &Layer,
    domain: &Domain,
    bounds: &NeuronBounds,
) -> Result<ConstraintSystem, EncodeError> {
    if bounds.num_layers() < hidden.len() {
        return Err(EncodeError::DimensionMismatch(format!(
            "bounds cover {} layers, encoding needs {}",
            bounds.num_layers(),
            hidden.len()
        )));
    }
    let mut cs = ConstraintSystem::new();
    let mut prev: Vec<usize> = domain
        .intervals()
        .iter()
        .enumerate()
        .map(|(i, iv)| cs.add_var(format!("x{}", i + 1), VarRole::Input(i), iv.lo, iv.hi))
        .collect();

    for (l, layer) in hidden.iter().enumerate() {
        if layer.inputs() != prev.len() || bounds.layer(l).len() != layer.outputs() {
            return Err(EncodeError::DimensionMismatch(format!("hidden layer {}", l + 1)));
        }
        let mut current = Vec::with_capacity(layer.outputs());
        for (j, (w, b)) in layer.weights.iter().zip(&layer.bias).enumerate() {
            let pre = bounds.pre(l, j);
            let tag = format!("{}_{}", l + 1, j + 1);
            if !(pre.lo.is_finite() && pre.hi.is_finite()) {
                return Err(EncodeError::NonFiniteBound(format!("neuron {tag}")));
            }
            cs.total_relu_count += 1;
            let mut coeffs: Vec<(usize, f64)> = prev
                .iter()
                .zip(w)
                .filter(|(_, w)| **w != 0.0)
                .map(|(&v, &w)| (v, w))
                .collect();
            let role = VarRole::Hidden { layer: l, neuron: j };
            let x = match bounds.stability(l, j) {
                Stability::Active => {
                    let x = cs.add_var(format!("h{tag}"), role, pre.lo, pre.hi);
                    coeffs.push((x, -1.0));
                    cs.add_row(coeffs, Relation::Eq, -b);
                    cs.add_site(x, None, None);
                    x
                }
                Stability::Inactive => {
                    let x = cs.add_var(format!("h{tag}"), role, 0.0, 0.0);
                    cs.add_row(vec![(x, 1.0)], Relation::Eq, 0.0);
                    cs.add_site(x, None, None);
                    x
                }
                Stability::Unstable => {
                    let x = cs.add_var(format!("h{tag}"), role, 0.0, bounds.ub_x(l, j));
                    let s = cs.add_var(
                        format!("s{tag}"),
                        VarRole::Slack { layer: l, neuron: j },
                        0.0,
                        bounds.ub_s(l, j),
                    );
                    coeffs.push((x, -1.0));
                    coeffs.push((s, 1.0));
                    cs.add_row(coeffs, Relation::Eq, -b);
                    let z = cs.add_binary(format!("z{tag}"), Some((l, j)));
                    cs.add_indicator(z, true, x);
                    cs.add_indicator(z, false, s);
                    cs.add_site(x, Some(s), Some(z));
                    x
                }
            };
            current.push(x);
        }
        prev = current;
    }

    if head.inputs() != prev.len() {
        return Err(EncodeError::DimensionMismatch("output layer".into()));
    }
    for (i, (w, b)) in head.weights.iter().zip(&head.bias).enumerate() {
        let o = cs.add_var(format!("o{}", i + 1), VarRole::Output(i), f64::NEG_INFINITY, f64::INFINITY);
        let mut coeffs: Vec<(usize, f64)> = prev
            .iter()
            .zip(w)
            .filter(|(_, w)| **w != 0.0)
            .map(|(&v, &w)| (v, w))
            .collect();
        coeffs.push((o, -1.0));
        cs.add_row(coeffs, Relation::Eq, -b);
        cs.sites.push(Site {
            row: cs.rows.len() - 1,
            var: o,
            slack: None,
            binary: None,
            relu: false,
        });
    }
    Ok(cs)
}

/// Share of ReLUs whose binary was eliminated, in percent.
pub fn binary_removed_pct(cs: &ConstraintSystem) -> f64 {
    if cs.total_relu_count == 0 {
        return 0.0;
    }
    100.0 * (cs.total_relu_count - cs.binary_count()) as f64 / cs.total_relu_count as f64
}
