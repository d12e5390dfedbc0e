//! Pre-activation bounds and ReLU stability.
//!
//! Three strengths are available: plain interval arithmetic, LP maximization
//! over the big-M relaxation of earlier layers, and exact MILP maximization.
//! Every mode works layer by layer and feeds the already tightened bounds of
//! layer `l - 1` into layer `l`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{encode_head, EncodeError};
use crate::lp::{LpError, LpStatus, Sense};
use crate::milp::{self, Limits, MilpError, MilpStatus};
use crate::model::{Domain, Interval, Layer, NeuralNetwork};
use crate::par;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("domain has {got} intervals, network has {expected} features")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Active,
    Inactive,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TightenMode {
    #[default]
    Interval,
    Lp,
    Milp,
}

impl std::str::FromStr for TightenMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "interval" => Ok(TightenMode::Interval),
            "lp" => Ok(TightenMode::Lp),
            "milp" => Ok(TightenMode::Milp),
            other => Err(format!("unknown tighten mode `{other}` (interval|lp|milp)")),
        }
    }
}

impl std::fmt::Display for TightenMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TightenMode::Interval => "interval",
            TightenMode::Lp => "lp",
            TightenMode::Milp => "milp",
        })
    }
}

/// `ub_x = max(0, pre_hi)`.
pub fn ub_x(pre: Interval) -> f64 {
    pre.hi.max(0.0)
}

/// `ub_s = |min(0, pre_lo)|`.
pub fn ub_s(pre: Interval) -> f64 {
    pre.lo.min(0.0).abs()
}

/// Zero on the boundary counts as stable: both ReLU branches agree there.
pub fn stability(pre: Interval) -> Stability {
    if pre.lo >= 0.0 {
        Stability::Active
    } else if pre.hi <= 0.0 {
        Stability::Inactive
    } else {
        Stability::Unstable
    }
}

/// Pre-activation intervals for every hidden neuron, indexed `[layer][neuron]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronBounds {
    layers: Vec<Vec<Interval>>,
    /// Neurons whose MILP tightening hit the node limit and kept their seed bound.
    flagged: Vec<(usize, usize)>,
}

impl NeuronBounds {
    pub fn new(layers: Vec<Vec<Interval>>) -> Self {
        NeuronBounds {
            layers,
            flagged: Vec::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[Interval] {
        &self.layers[l]
    }

    pub fn pre(&self, l: usize, j: usize) -> Interval {
        self.layers[l][j]
    }

    pub fn ub_x(&self, l: usize, j: usize) -> f64 {
        ub_x(self.pre(l, j))
    }

    pub fn ub_s(&self, l: usize, j: usize) -> f64 {
        ub_s(self.pre(l, j))
    }

    pub fn stability(&self, l: usize, j: usize) -> Stability {
        stability(self.pre(l, j))
    }

    pub fn flagged(&self) -> &[(usize, usize)] {
        &self.flagged
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Interval)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(j, iv)| ((l, j), *iv)))
    }

    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn unstable_count(&self) -> usize {
        self.iter().filter(|(_, iv)| stability(*iv) == Stability::Unstable).count()
    }

    /// True when every interval of `other` lies inside the matching interval here,
    /// allowing `slack` of outward error.
    pub fn contains(&self, other: &NeuronBounds, slack: f64) -> bool {
        self.layers.len() == other.layers.len()
            && self.iter().zip(other.iter()).all(|((_, a), (_, b))| {
                a.lo - slack <= b.lo && b.hi <= a.hi + slack
            })
    }
}

fn check_dims(net: &NeuralNetwork, domain: &Domain) -> Result<(), BoundsError> {
    if domain.len() != net.num_features() {
        return Err(BoundsError::DimensionMismatch {
            expected: net.num_features(),
            got: domain.len(),
        });
    }
    Ok(())
}

/// Interval image of `layer`'s affine part over the box `input`.
pub fn affine_interval(layer: &Layer, input: &[Interval]) -> Vec<Interval> {
    layer
        .weights
        .iter()
        .zip(&layer.bias)
        .map(|(row, b)| {
            let (mut lo, mut hi) = (0.0, 0.0);
            for (w, iv) in row.iter().zip(input) {
                if *w >= 0.0 {
                    lo += w * iv.lo;
                    hi += w * iv.hi;
                } else {
                    lo += w * iv.hi;
                    hi += w * iv.lo;
                }
            }
            Interval::new(lo + b, hi + b)
        })
        .collect()
}

fn relu_interval(iv: &Interval) -> Interval {
    Interval::new(iv.lo.max(0.0), iv.hi.max(0.0))
}

pub fn interval_propagate(net: &NeuralNetwork, domain: &Domain) -> Result<NeuronBounds, BoundsError> {
    check_dims(net, domain)?;
    let mut input = domain.intervals().to_vec();
    let mut layers = Vec::with_capacity(net.hidden_layers().len());
    for layer in net.hidden_layers() {
        let pre = affine_interval(layer, &input);
        input = pre.iter().map(relu_interval).collect();
        layers.push(pre);
    }
    Ok(NeuronBounds::new(layers))
}

fn pad(v: f64) -> f64 {
    10.0 * crate::lp::FEASIBILITY_TOL * (1.0 + v.abs())
}

fn intersect(a: Interval, b: Interval) -> Interval {
    let lo = a.lo.max(b.lo);
    let hi = a.hi.min(b.hi);
    if lo <= hi {
        Interval::new(lo, hi)
    } else {
        // Only reachable through round-off on a (near) point interval.
        let m = (lo + hi) / 2.0;
        Interval::new(m, m)
    }
}

#[derive(Clone, Copy)]
enum Strength<'a> {
    Lp,
    Milp(&'a Limits),
}

pub fn tighten_lp(net: &NeuralNetwork, domain: &Domain, seed: &NeuronBounds) -> Result<NeuronBounds, BoundsError> {
    tighten(net, domain, seed, Strength::Lp, 1)
}

pub fn tighten_milp(
    net: &NeuralNetwork,
    domain: &Domain,
    seed: &NeuronBounds,
    limits: &Limits,
) -> Result<NeuronBounds, BoundsError> {
    tighten(net, domain, seed, Strength::Milp(limits), 1)
}

/// Bounds at the requested strength, starting from interval propagation.
pub fn compute_bounds(
    net: &NeuralNetwork,
    domain: &Domain,
    mode: TightenMode,
    limits: &Limits,
    workers: usize,
) -> Result<NeuronBounds, BoundsError> {
    let seed = interval_propagate(net, domain)?;
    match mode {
        TightenMode::Interval => Ok(seed),
        TightenMode::Lp => tighten(net, domain, &seed, Strength::Lp, workers),
        TightenMode::Milp => tighten(net, domain, &seed, Strength::Milp(limits), workers),
    }
}

fn tighten(
    net: &NeuralNetwork,
    domain: &Domain,
    seed: &NeuronBounds,
    strength: Strength<'_>,
    workers: usize,
) -> Result<NeuronBounds, BoundsError> {
    check_dims(net, domain)?;
    let hidden = net.hidden_layers();
    // The first hidden layer is an affine image of the box: intervals are exact.
    let mut layers: Vec<Vec<Interval>> = vec![seed.layer(0).to_vec()];
    let mut flagged = Vec::new();
    for l in 1..hidden.len() {
        let prev_post: Vec<Interval> = layers[l - 1].iter().map(relu_interval).collect();
        let start: Vec<Interval> = affine_interval(&hidden[l], &prev_post)
            .into_iter()
            .zip(seed.layer(l))
            .map(|(a, b)| intersect(a, *b))
            .collect();
        let so_far = NeuronBounds::new(layers.clone());
        let cs = encode_head(&hidden[..l], &hidden[l], domain, &so_far)?;
        let view = cs.view();
        let results = par::map_indexed(start.len(), workers, |j| -> Result<(Interval, bool), BoundsError> {
            let out = cs.outputs()[j];
            let mut objective = vec![0.0; cs.num_vars()];
            objective[out] = 1.0;
            let mut iv = start[j];
            let mut hit_limit = false;
            for sense in [Sense::Maximize, Sense::Minimize] {
                let value = match strength {
                    Strength::Lp => {
                        let lp = milp::root_relaxation(&view, Some((&objective, sense)))?;
                        let out = lp.solve()?;
                        match out.status {
                            LpStatus::Optimal => out.objective_value,
                            LpStatus::Unbounded | LpStatus::Infeasible => None,
                        }
                    }
                    Strength::Milp(limits) => {
                        let out = milp::milp_optimize(&view, &objective, sense, limits)?;
                        match out.status {
                            MilpStatus::Optimal => out.objective,
                            _ => {
                                hit_limit = true;
                                None
                            }
                        }
                    }
                };
                if let Some(v) = value {
                    iv = match sense {
                        Sense::Maximize => intersect(iv, Interval::new(f64::NEG_INFINITY, v + pad(v))),
                        Sense::Minimize => intersect(iv, Interval::new(v - pad(v), f64::INFINITY)),
                    };
                }
            }
            if hit_limit {
                iv = start[j];
            }
            Ok((iv, hit_limit))
        });
        let mut row = Vec::with_capacity(results.len());
        for (j, r) in results.into_iter().enumerate() {
            let (iv, hit) = r?;
            if hit {
                flagged.push((l, j));
            }
            row.push(iv);
        }
        layers.push(row);
    }
    Ok(NeuronBounds { layers, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model;
    use crate::synth::{toy, random_net};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: Interval, lo: f64, hi: f64) -> bool {
        (a.lo - lo).abs() < 1e-9 && (a.hi - hi).abs() < 1e-9
    }

    #[test]
    fn toy_full_box() {
        let net = toy();
        let b = interval_propagate(&net, net.domain()).unwrap();
        assert!(close(b.pre(0, 0), -0.3, 0.8));
        assert!(close(b.pre(0, 1), -0.3, 0.5));
        assert!((b.ub_x(0, 0) - 0.8).abs() < 1e-12);
        assert!((b.ub_s(0, 0) - 0.3).abs() < 1e-12);
        assert_eq!(b.unstable_count(), 2);
    }

    #[test]
    fn toy_subdomains() {
        let net = toy();
        let d1 = net.domain().with_interval(1, Interval::new(0.2, 0.35));
        let b = interval_propagate(&net, &d1).unwrap();
        assert!(close(b.pre(0, 0), -0.3, 0.5));
        assert!(close(b.pre(0, 1), -0.15, 0.5));
        assert!((b.ub_s(0, 1) - 0.15).abs() < 1e-12);
        let d2 = net.domain().with_interval(1, Interval::new(0.35, 0.5));
        let b = interval_propagate(&net, &d2).unwrap();
        assert!(close(b.pre(0, 0), 0.0, 0.8));
        assert_eq!(b.stability(0, 0), Stability::Active);
        assert!(close(b.pre(0, 1), -0.3, 0.35));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = toy();
        let d = Domain::from_bounds(&[(0.0, 1.0)]).unwrap();
        assert!(matches!(
            interval_propagate(&net, &d),
            Err(BoundsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn depth_one_tightening_is_identity() {
        let net = toy();
        let seed = interval_propagate(&net, net.domain()).unwrap();
        assert_eq!(tighten_lp(&net, net.domain(), &seed).unwrap(), seed);
        assert_eq!(tighten_milp(&net, net.domain(), &seed, &Limits::default()).unwrap(), seed);
    }

    /// Two inputs in [-1, 1], three hidden neurons, one neuron in layer 2
    /// that cancels: h3 = relu(h1 - h2) with h1 = relu(x+y), h2 = relu(x+y).
    fn cancelling_net() -> NeuralNetwork {
        let json = r#"{"name":"cancel","features":[{"name":"x","lb":-1,"ub":1},{"name":"y","lb":-1,"ub":1}],
          "classes":["a","b"],
          "layers":[
            {"weights":[[1,1],[1,1]],"bias":[0,0],"activation":"relu"},
            {"weights":[[1,-1]],"bias":[0],"activation":"relu"},
            {"weights":[[1],[-1]],"bias":[0,0],"activation":"linear"}]}"#;
        load_model(json.as_bytes()).unwrap()
    }

    fn reachable_extrema(net: &NeuralNetwork, domain: &Domain, l: usize, j: usize, steps: usize) -> Interval {
        // Exhaustive grid over the box (two inputs).
        let (a, b) = (domain.get(0), domain.get(1));
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=steps {
            for k in 0..=steps {
                let x = a.lo + a.width() * i as f64 / steps as f64;
                let y = b.lo + b.width() * k as f64 / steps as f64;
                let pre = net.pre_activations(&[x, y]);
                lo = lo.min(pre[l][j]);
                hi = hi.max(pre[l][j]);
            }
        }
        Interval::new(lo, hi)
    }

    #[test]
    fn lp_tightening_refines_second_layer() {
        let net = cancelling_net();
        let seed = interval_propagate(&net, net.domain()).unwrap();
        // Interval arithmetic loses the correlation: h1 - h2 in [-2, 2].
        assert!(close(seed.pre(1, 0), -2.0, 2.0));
        let lp = tighten_lp(&net, net.domain(), &seed).unwrap();
        let truth = reachable_extrema(&net, net.domain(), 1, 0, 40);
        assert!(close(truth, 0.0, 0.0));
        assert!(seed.contains(&lp, 0.0));
        assert!(lp.pre(1, 0).lo <= truth.lo + 1e-9 && truth.hi <= lp.pre(1, 0).hi + 1e-9);
        assert!(lp.pre(1, 0).width() < seed.pre(1, 0).width());
    }

    #[test]
    fn milp_tightening_is_strictly_tighter_with_a_dead_neuron() {
        // Layer-1 neuron u = relu(x - 0.5) is dead on the lower half of x.
        // Layer-2 neuron v = relu(u + y) - with x in [-1, 0] it equals relu(y).
        let json = r#"{"name":"dead","features":[{"name":"x","lb":-1,"ub":0},{"name":"y","lb":-1,"ub":1}],
          "classes":["a","b"],
          "layers":[
            {"weights":[[1,0],[1,1],[-1,1]],"bias":[-0.5,0,0],"activation":"relu"},
            {"weights":[[1,1,-1]],"bias":[0],"activation":"relu"},
            {"weights":[[1],[-1]],"bias":[0,0],"activation":"linear"}]}"#;
        let net = load_model(json.as_bytes()).unwrap();
        let seed = interval_propagate(&net, net.domain()).unwrap();
        assert_eq!(seed.stability(0, 0), Stability::Inactive);
        let lp = tighten_lp(&net, net.domain(), &seed).unwrap();
        let milp = tighten_milp(&net, net.domain(), &seed, &Limits::default()).unwrap();
        let truth = crate::oracle::reachable_range(&net, net.domain(), 1, 0).unwrap();
        assert!(milp.pre(1, 0).lo <= truth.lo + 1e-9 && truth.hi <= milp.pre(1, 0).hi + 1e-9);
        assert!(close(truth, -2.0, 0.0));
        assert!(milp.pre(1, 0).width() <= truth.width() + 1e-5);
        assert!(lp.contains(&milp, 1e-6));
        assert!(seed.contains(&lp, 0.0));
        assert!(milp.pre(1, 0).width() < seed.pre(1, 0).width() - 1e-3);
    }

    #[test]
    fn point_box_gives_forward_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = random_net(&mut rng, 3, &[4, 3], 2);
        let point: Vec<f64> = net.domain().intervals().iter().map(|iv| iv.midpoint()).collect();
        let d = Domain::from_bounds(&point.iter().map(|v| (*v, *v)).collect::<Vec<_>>()).unwrap();
        let pre = net.pre_activations(&point);
        let seed = interval_propagate(&net, &d).unwrap();
        let lp = tighten_lp(&net, &d, &seed).unwrap();
        let milp = tighten_milp(&net, &d, &seed, &Limits::default()).unwrap();
        for b in [&seed, &lp, &milp] {
            for ((l, j), iv) in b.iter() {
                assert!((iv.lo - pre[l][j]).abs() < 1e-9 && (iv.hi - pre[l][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_modes_are_sound_and_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..6 {
            let net = random_net(&mut rng, 3, &[5, 4], 2);
            let seed = interval_propagate(&net, net.domain()).unwrap();
            let lp = tighten_lp(&net, net.domain(), &seed).unwrap();
            let milp = tighten_milp(&net, net.domain(), &seed, &Limits::default()).unwrap();
            assert!(seed.contains(&lp, 0.0));
            assert!(lp.contains(&milp, 1e-6));
            for _ in 0..10_000 {
                let x: Vec<f64> = net
                    .domain()
                    .intervals()
                    .iter()
                    .map(|iv| rng.gen_range(iv.lo..=iv.hi))
                    .collect();
                let pre = net.pre_activations(&x);
                for b in [&seed, &lp, &milp] {
                    for ((l, j), iv) in b.iter() {
                        assert!(iv.lo - 1e-9 <= pre[l][j] && pre[l][j] <= iv.hi + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn bound_helpers_follow_definitions() {
        for (lo, hi) in [(-0.3, 0.8), (0.0, 0.8), (-0.3, 0.0), (0.1, 0.2), (-2.0, -1.0)] {
            let iv = Interval::new(lo, hi);
            assert_eq!(ub_x(iv), f64::max(0.0, hi));
            assert_eq!(ub_s(iv), f64::min(0.0, lo).abs());
        }
        assert_eq!(stability(Interval::new(0.0, 0.8)), Stability::Active);
        assert_eq!(stability(Interval::new(-0.3, 0.0)), Stability::Inactive);
        assert_eq!(stability(Interval::new(-0.3, 0.1)), Stability::Unstable);
    }
}
