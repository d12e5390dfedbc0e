//! Small deterministic networks used by tests, the bench and fixture
//! generation.

use rand::Rng;

use crate::encode::{ConstraintSystem, VarRole};
use crate::lp::Relation;
use crate::model::{Activation, Domain, Layer, NeuralNetwork};

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn relu(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
    Layer {
        weights,
        bias,
        activation: Activation::Relu,
    }
}

fn linear(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
    Layer {
        weights,
        bias,
        activation: Activation::Linear,
    }
}

/// Two inputs, two hidden ReLUs, two linear outputs, over [0.2,0.7]x[0.2,0.5].
pub fn toy() -> NeuralNetwork {
    NeuralNetwork::new(
        "toy",
        names("x", 2),
        names("c", 2),
        vec![
            relu(vec![vec![-1.0, 2.0], vec![1.0, -1.0]], vec![0.0, 0.0]),
            linear(vec![vec![1.0, 1.0], vec![1.0, -1.0]], vec![0.0, 0.0]),
        ],
        Domain::from_bounds(&[(0.2, 0.7), (0.2, 0.5)]).unwrap(),
    )
    .unwrap()
}

fn random_layer<R: Rng>(rng: &mut R, inputs: usize, outputs: usize, activation: Activation) -> Layer {
    Layer {
        weights: (0..outputs)
            .map(|_| (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        bias: (0..outputs).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        activation,
    }
}

/// Uniform weights in [-1, 1], biases in [-0.5, 0.5] and random feature
/// boxes of width between 0.2 and 1.7.
pub fn random_net<R: Rng>(rng: &mut R, n_features: usize, hidden: &[usize], classes: usize) -> NeuralNetwork {
    let bounds: Vec<(f64, f64)> = (0..n_features)
        .map(|_| {
            let lo: f64 = rng.gen_range(-1.0..0.5);
            (lo, lo + rng.gen_range(0.2..1.7))
        })
        .collect();
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = n_features;
    for &h in hidden {
        layers.push(random_layer(rng, width, h, Activation::Relu));
        width = h;
    }
    layers.push(random_layer(rng, width, classes, Activation::Linear));
    NeuralNetwork::new(
        "random",
        names("x", n_features),
        names("c", classes),
        layers,
        Domain::from_bounds(&bounds).unwrap(),
    )
    .unwrap()
}

/// A network on `[0, 1]^n` whose first hidden layer contains, for each of
/// the first `anchors` features, `per_anchor` neurons `a * (x_f - 0.5)`.
/// Halving any anchor feature at its midpoint fixes the sign of those
/// neurons. The remaining first-layer neurons and all deeper layers are
/// random.
pub fn stabilizable_net<R: Rng>(
    rng: &mut R,
    n_features: usize,
    anchors: usize,
    per_anchor: usize,
    hidden: &[usize],
    classes: usize,
) -> NeuralNetwork {
    assert!(anchors <= n_features && anchors * per_anchor <= hidden[0]);
    let bounds = vec![(0.0, 1.0); n_features];
    let mid = 0.5;
    let mut first = random_layer(rng, n_features, hidden[0], Activation::Relu);
    for f in 0..anchors {
        for k in 0..per_anchor {
            let j = f * per_anchor + k;
            let a = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            first.weights[j] = vec![0.0; n_features];
            first.weights[j][f] = a;
            first.bias[j] = -a * mid;
        }
    }
    let mut layers = vec![first];
    let mut width = hidden[0];
    for &h in &hidden[1..] {
        layers.push(random_layer(rng, width, h, Activation::Relu));
        width = h;
    }
    layers.push(random_layer(rng, width, classes, Activation::Linear));
    NeuralNetwork::new(
        "stabilizable",
        names("x", n_features),
        names("c", classes),
        layers,
        Domain::from_bounds(&bounds).unwrap(),
    )
    .unwrap()
}

/// The single-ReLU mixed program
///
/// ```text
/// min y1  s.t.  1 <= x1 <= 3,  3 x1 + s1 - 2 = y1,
///               0 <= y1 <= 3 x1 - 2,  0 <= s1 <= 3 x1 - 2,
///               z1 = 1 -> y1 <= 0,  z1 = 0 -> s1 <= 0
/// ```
///
/// Returns the system and the indices of `(x1, y1, s1)`.
pub fn single_relu_program() -> (ConstraintSystem, [usize; 3]) {
    let mut cs = ConstraintSystem::new();
    let x1 = cs.add_var("x1", VarRole::Input(0), 1.0, 3.0);
    let y1 = cs.add_var("y1", VarRole::Other, 0.0, f64::INFINITY);
    let s1 = cs.add_var("s1", VarRole::Other, 0.0, f64::INFINITY);
    cs.add_row(vec![(x1, 3.0), (s1, 1.0), (y1, -1.0)], Relation::Eq, 2.0);
    cs.add_row(vec![(y1, 1.0), (x1, -3.0)], Relation::Le, -2.0);
    cs.add_row(vec![(s1, 1.0), (x1, -3.0)], Relation::Le, -2.0);
    let z1 = cs.add_binary("z1", None);
    cs.add_indicator(z1, true, y1);
    cs.add_indicator(z1, false, s1);
    (cs, [x1, y1, s1])
}
