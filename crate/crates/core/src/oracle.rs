//! Exhaustive reference verifier.
//!
//! Enumerates ReLU phase patterns depth-first in neuron order. Under a fixed
//! pattern the network is affine in its inputs, so every question reduces to
//! an LP over the input variables alone. A prefix whose sign constraints are
//! already infeasible is cut.

use thiserror::Error;

use crate::lp::{LinearProgram, LpError, LpStatus, Relation, Sense};
use crate::model::{Domain, Instance, Interval, NeuralNetwork};

pub const DEFAULT_CAPACITY: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{neurons} hidden neurons exceed the oracle capacity of {capacity}")]
    CapacityExceeded { neurons: usize, capacity: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// One phase bit per hidden neuron in (layer, index) order; true = active.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhasePattern(pub Vec<bool>);

#[derive(Debug, Clone, PartialEq)]
pub enum OracleVerdict {
    Entailed,
    /// An input point, inside the box and matching the fixed values, whose
    /// outputs do not strictly favour the target.
    Refuted(Vec<f64>),
}

impl OracleVerdict {
    pub fn is_entailed(&self) -> bool {
        matches!(self, OracleVerdict::Entailed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verification {
    Ok,
    NotSufficient { witness: Vec<f64> },
    NotMinimal { feature: usize },
}

/// Affine function of the inputs.
#[derive(Debug, Clone)]
struct Affine {
    coeffs: Vec<f64>,
    constant: f64,
}

impl Affine {
    fn zero(n: usize) -> Self {
        Affine {
            coeffs: vec![0.0; n],
            constant: 0.0,
        }
    }

    fn combine(weights: &[f64], bias: f64, terms: &[Affine], n: usize) -> Affine {
        let mut out = Affine::zero(n);
        out.constant = bias;
        for (w, t) in weights.iter().zip(terms) {
            if *w == 0.0 {
                continue;
            }
            for (o, c) in out.coeffs.iter_mut().zip(&t.coeffs) {
                *o += w * c;
            }
            out.constant += w * t.constant;
        }
        out
    }

    /// Row `self >= 0` (`sign = 1`) or `self <= 0` (`sign = -1`).
    fn push_sign(&self, lp: &mut LinearProgram, sign: f64) {
        let rel = if sign > 0.0 { Relation::Ge } else { Relation::Le };
        lp.add_constraint(&self.coeffs, rel, -self.constant);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    pub capacity: usize,
}

impl Default for Oracle {
    fn default() -> Self {
        Oracle {
            capacity: DEFAULT_CAPACITY,
        }
    }
}

enum Flow {
    Continue,
    Stop,
}

struct Walk<'a> {
    net: &'a NeuralNetwork,
    /// Neurons (layer, index) in enumeration order.
    order: Vec<(usize, usize)>,
}

impl<'a> Walk<'a> {
    /// `depth` hidden layers are enumerated.
    fn new(net: &'a NeuralNetwork, depth: usize) -> Self {
        let order = net.hidden_layers()[..depth]
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.outputs()).map(move |j| (l, j)))
            .collect();
        Walk { net, order }
    }

    fn input_lp(domain: &Domain, fixed: &[(usize, f64)]) -> LinearProgram {
        let mut lp = LinearProgram::new();
        for iv in domain.intervals() {
            lp.add_var(iv.lo, iv.hi);
        }
        for &(f, v) in fixed {
            let (lo, hi) = lp.bounds(f);
            if v < lo || v > hi {
                // Out-of-box pins make every query vacuous.
                lp.set_bounds(f, 1.0, 0.0);
            } else {
                lp.set_bounds(f, v, v);
            }
        }
        lp
    }

    /// Visits every feasible full pattern with the LP of its polytope and the
    /// post-activation maps of all enumerated layers.
    fn run(
        &self,
        lp: LinearProgram,
        visit: &mut dyn FnMut(&[bool], &LinearProgram, &[Vec<Affine>]) -> Result<Flow, OracleError>,
    ) -> Result<(), OracleError> {
        let n = self.net.num_features();
        let inputs: Vec<Affine> = (0..n)
            .map(|i| {
                let mut a = Affine::zero(n);
                a.coeffs[i] = 1.0;
                a
            })
            .collect();
        if lp_status(&lp)? == LpStatus::Infeasible {
            return Ok(());
        }
        let mut post: Vec<Vec<Affine>> = Vec::new();
        let mut pattern = Vec::with_capacity(self.order.len());
        self.step(0, lp, &inputs, &mut post, &mut pattern, visit)?;
        Ok(())
    }

    fn step(
        &self,
        k: usize,
        lp: LinearProgram,
        inputs: &[Affine],
        post: &mut Vec<Vec<Affine>>,
        pattern: &mut Vec<bool>,
        visit: &mut dyn FnMut(&[bool], &LinearProgram, &[Vec<Affine>]) -> Result<Flow, OracleError>,
    ) -> Result<Flow, OracleError> {
        if k == self.order.len() {
            return visit(pattern, &lp, post);
        }
        let n = self.net.num_features();
        let (l, j) = self.order[k];
        let layer = &self.net.hidden_layers()[l];
        let prev = if l == 0 { inputs } else { &post[l - 1] };
        let pre = Affine::combine(&layer.weights[j], layer.bias[j], prev, n);
        if j == 0 {
            post.push(Vec::with_capacity(layer.outputs()));
        }
        for active in [true, false] {
            let mut child = lp.clone();
            pre.push_sign(&mut child, if active { 1.0 } else { -1.0 });
            if lp_status(&child)? == LpStatus::Infeasible {
                continue;
            }
            post[l].push(if active { pre.clone() } else { Affine::zero(n) });
            pattern.push(active);
            let flow = self.step(k + 1, child, inputs, post, pattern, visit)?;
            pattern.pop();
            post[l].pop();
            if let Flow::Stop = flow {
                if j == 0 {
                    post.pop();
                }
                return Ok(Flow::Stop);
            }
        }
        if j == 0 {
            post.pop();
        }
        Ok(Flow::Continue)
    }
}

fn lp_status(lp: &LinearProgram) -> Result<LpStatus, OracleError> {
    Ok(lp.solve()?.status)
}

impl Oracle {
    fn check(&self, net: &NeuralNetwork, domain: &Domain, neurons: usize) -> Result<(), OracleError> {
        if domain.len() != net.num_features() {
            return Err(OracleError::DimensionMismatch(format!(
                "domain has {} intervals, network has {} features",
                domain.len(),
                net.num_features()
            )));
        }
        if neurons > self.capacity {
            return Err(OracleError::CapacityExceeded {
                neurons,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    /// Decides whether fixing `fixed` over `domain` forces class `target`
    /// to strictly beat every other class.
    pub fn entails(
        &self,
        net: &NeuralNetwork,
        domain: &Domain,
        fixed: &[(usize, f64)],
        target: usize,
    ) -> Result<OracleVerdict, OracleError> {
        self.check(net, domain, net.hidden_neuron_count())?;
        let walk = Walk::new(net, net.hidden_layers().len());
        let out_layer = net.output_layer();
        let n = net.num_features();
        let mut verdict = OracleVerdict::Entailed;
        walk.run(Walk::input_lp(domain, fixed), &mut |_, lp, post| {
            let last = post.last().expect("at least one hidden layer");
            let outs: Vec<Affine> = out_layer
                .weights
                .iter()
                .zip(&out_layer.bias)
                .map(|(w, b)| Affine::combine(w, *b, last, n))
                .collect();
            for (i, oi) in outs.iter().enumerate() {
                if i == target {
                    continue;
                }
                let diff = Affine {
                    coeffs: oi.coeffs.iter().zip(&outs[target].coeffs).map(|(a, b)| a - b).collect(),
                    constant: oi.constant - outs[target].constant,
                };
                let mut q = lp.clone();
                diff.push_sign(&mut q, 1.0);
                let out = q.solve()?;
                if out.status != LpStatus::Infeasible {
                    verdict = OracleVerdict::Refuted(out.assignment);
                    return Ok(Flow::Stop);
                }
            }
            Ok(Flow::Continue)
        })?;
        Ok(verdict)
    }

    /// Exact range of pre-activation `(layer, neuron)` over `domain`.
    pub fn reachable_range(
        &self,
        net: &NeuralNetwork,
        domain: &Domain,
        layer: usize,
        neuron: usize,
    ) -> Result<Interval, OracleError> {
        let hidden = net.hidden_layers();
        if layer >= hidden.len() || neuron >= hidden[layer].outputs() {
            return Err(OracleError::DimensionMismatch(format!("no hidden neuron ({layer}, {neuron})")));
        }
        let before: usize = hidden[..layer].iter().map(|l| l.outputs()).sum();
        self.check(net, domain, before)?;
        let walk = Walk::new(net, layer);
        let n = net.num_features();
        let row = &hidden[layer];
        let inputs: Vec<Affine> = (0..n)
            .map(|i| {
                let mut a = Affine::zero(n);
                a.coeffs[i] = 1.0;
                a
            })
            .collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        walk.run(Walk::input_lp(domain, &[]), &mut |_, lp, post| {
            let prev = if layer == 0 { &inputs[..] } else { &post[layer - 1][..] };
            let pre = Affine::combine(&row.weights[neuron], row.bias[neuron], prev, n);
            for sense in [Sense::Minimize, Sense::Maximize] {
                let mut q = lp.clone();
                q.set_objective(pre.coeffs.clone(), sense);
                let out = q.solve()?;
                if let (LpStatus::Optimal, Some(v)) = (out.status, out.objective_value) {
                    let v = v + pre.constant;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            Ok(Flow::Continue)
        })?;
        Ok(Interval::new(lo, hi))
    }

    /// Every full phase pattern whose polytope meets `domain`.
    pub fn feasible_patterns(&self, net: &NeuralNetwork, domain: &Domain) -> Result<Vec<PhasePattern>, OracleError> {
        self.check(net, domain, net.hidden_neuron_count())?;
        let walk = Walk::new(net, net.hidden_layers().len());
        let mut found = Vec::new();
        walk.run(Walk::input_lp(domain, &[]), &mut |pattern, _, _| {
            found.push(PhasePattern(pattern.to_vec()));
            Ok(Flow::Continue)
        })?;
        Ok(found)
    }

    /// Checks sufficiency of `kept` and that no kept feature is redundant.
    pub fn verify_explanation(
        &self,
        net: &NeuralNetwork,
        instance: &Instance,
        kept: &[usize],
    ) -> Result<Verification, OracleError> {
        let target = crate::model::argmax(&net.forward(&instance.values));
        let fix = |features: &mut dyn Iterator<Item = usize>| -> Vec<(usize, f64)> {
            features.map(|f| (f, instance.values[f])).collect()
        };
        let all = fix(&mut kept.iter().copied());
        if let OracleVerdict::Refuted(witness) = self.entails(net, net.domain(), &all, target)? {
            return Ok(Verification::NotSufficient { witness });
        }
        for &f in kept {
            let rest = fix(&mut kept.iter().copied().filter(|&g| g != f));
            if self.entails(net, net.domain(), &rest, target)?.is_entailed() {
                return Ok(Verification::NotMinimal { feature: f });
            }
        }
        Ok(Verification::Ok)
    }
}

pub fn oracle_entails(
    net: &NeuralNetwork,
    domain: &Domain,
    fixed: &[(usize, f64)],
    target: usize,
) -> Result<OracleVerdict, OracleError> {
    Oracle::default().entails(net, domain, fixed, target)
}

pub fn verify_explanation(net: &NeuralNetwork, instance: &Instance, kept: &[usize]) -> Result<Verification, OracleError> {
    Oracle::default().verify_explanation(net, instance, kept)
}

pub fn reachable_range(net: &NeuralNetwork, domain: &Domain, layer: usize, neuron: usize) -> Result<Interval, OracleError> {
    Oracle::default().reachable_range(net, domain, layer, neuron)
}

pub fn feasible_patterns(net: &NeuralNetwork, domain: &Domain) -> Result<Vec<PhasePattern>, OracleError> {
    Oracle::default().feasible_patterns(net, domain)
}
