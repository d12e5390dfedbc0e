//! Feed-forward ReLU classifiers, input domains and the model file format.
//!
//! A [`NeuralNetwork`] is a stack of dense layers: every hidden layer applies
//! ReLU, the output layer is linear and has one neuron per class. Weights are
//! stored row-major with `weights[j][i]` connecting input `i` to neuron `j`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to parse model: {0}")]
    Parse(String),
    #[error("layer {layer}: {detail}")]
    DimensionMismatch { layer: usize, detail: String },
    #[error("layer {layer}: non-finite {what} at {position}")]
    NonFinite {
        layer: usize,
        what: &'static str,
        position: String,
    },
    #[error("layer {layer}: hidden layers must use relu activation")]
    HiddenActivation { layer: usize },
    #[error("output layer {layer} must use linear activation")]
    OutputActivation { layer: usize },
    #[error("feature `{name}`: invalid bounds [{lb}, {ub}]")]
    InvalidBounds { name: String, lb: f64, ub: f64 },
    #[error("network needs at least one hidden layer and an output layer")]
    TooFewLayers,
    #[error("network needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("instance has {got} values, model expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("feature `{name}` = {value} lies outside [{lb}, {ub}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lb: f64,
        ub: f64,
    },
    #[error("instances: {0}")]
    Instances(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    /// Pre-activation values `W v + b`.
    pub fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        (self.lo + self.hi) / 2.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Axis-aligned input domain: one closed interval per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    intervals: Vec<Interval>,
}

impl Domain {
    pub fn new(intervals: Vec<Interval>) -> Result<Self, ModelError> {
        for (i, iv) in intervals.iter().enumerate() {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(ModelError::InvalidBounds {
                    name: format!("#{i}"),
                    lb: iv.lo,
                    ub: iv.hi,
                });
            }
        }
        Ok(Domain { intervals })
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self, ModelError> {
        Domain::new(bounds.iter().map(|&(l, u)| Interval::new(l, u)).collect())
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn get(&self, feature: usize) -> Interval {
        self.intervals[feature]
    }

    pub fn contains_point(&self, values: &[f64]) -> bool {
        values.len() == self.len() && self.intervals.iter().zip(values).all(|(iv, v)| iv.contains(*v))
    }

    pub fn contains_domain(&self, other: &Domain) -> bool {
        other.len() == self.len()
            && self
                .intervals
                .iter()
                .zip(&other.intervals)
                .all(|(a, b)| a.contains_interval(b))
    }

    /// Copy of this domain with one feature's interval replaced.
    pub fn with_interval(&self, feature: usize, iv: Interval) -> Domain {
        let mut intervals = self.intervals.clone();
        intervals[feature] = iv;
        Domain { intervals }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub values: Vec<f64>,
}

impl Instance {
    pub fn new(values: Vec<f64>) -> Self {
        Instance { values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_index: usize,
    pub outputs: Vec<f64>,
}

impl Prediction {
    /// Gap between the predicted output and the best competitor. Zero for ties.
    pub fn margin(&self) -> f64 {
        let top = self.outputs[self.class_index];
        self.outputs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.class_index)
            .map(|(_, o)| top - o)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNetwork {
    pub name: String,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub layers: Vec<Layer>,
    domain: Domain,
}

impl NeuralNetwork {
    /// Builds and validates a network. `domain` is the root input box.
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
        layers: Vec<Layer>,
        domain: Domain,
    ) -> Result<Self, ModelError> {
        let net = NeuralNetwork {
            name: name.into(),
            feature_names,
            class_names,
            layers,
            domain,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.layers.len() < 2 {
            return Err(ModelError::TooFewLayers);
        }
        if self.domain.len() != self.feature_names.len() {
            return Err(ModelError::DimensionMismatch {
                layer: 0,
                detail: format!(
                    "{} feature names but {} bounds",
                    self.feature_names.len(),
                    self.domain.len()
                ),
            });
        }
        let last = self.layers.len() - 1;
        let mut width = self.feature_names.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let lnum = l + 1;
            if layer.weights.len() != layer.bias.len() {
                return Err(ModelError::DimensionMismatch {
                    layer: lnum,
                    detail: format!("{} weight rows but {} biases", layer.weights.len(), layer.bias.len()),
                });
            }
            if layer.weights.is_empty() {
                return Err(ModelError::DimensionMismatch {
                    layer: lnum,
                    detail: "layer has no neurons".into(),
                });
            }
            for (j, row) in layer.weights.iter().enumerate() {
                if row.len() != width {
                    return Err(ModelError::DimensionMismatch {
                        layer: lnum,
                        detail: format!("neuron {j} has {} inputs, previous layer has {width} outputs", row.len()),
                    });
                }
                if let Some(i) = row.iter().position(|w| !w.is_finite()) {
                    return Err(ModelError::NonFinite {
                        layer: lnum,
                        what: "weight",
                        position: format!("[{j}][{i}]"),
                    });
                }
            }
            if let Some(j) = layer.bias.iter().position(|b| !b.is_finite()) {
                return Err(ModelError::NonFinite {
                    layer: lnum,
                    what: "bias",
                    position: format!("[{j}]"),
                });
            }
            match (l == last, layer.activation) {
                (false, Activation::Linear) => return Err(ModelError::HiddenActivation { layer: lnum }),
                (true, Activation::Relu) => return Err(ModelError::OutputActivation { layer: lnum }),
                _ => {}
            }
            width = layer.outputs();
        }
        if width < 2 {
            return Err(ModelError::TooFewClasses(width));
        }
        if self.class_names.len() != width {
            return Err(ModelError::DimensionMismatch {
                layer: self.layers.len(),
                detail: format!("{} outputs but {} class names", width, self.class_names.len()),
            });
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Hidden layers (all but the output layer).
    pub fn hidden_layers(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers.last().expect("validated network has layers")
    }

    pub fn hidden_neuron_count(&self) -> usize {
        self.hidden_layers().iter().map(Layer::outputs).sum()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Forward pass without bounds checks.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut act = input.to_vec();
        for layer in &self.layers {
            act = layer.affine(&act);
            if layer.activation == Activation::Relu {
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        act
    }

    /// Pre-activation values of every hidden layer, `[layer][neuron]`.
    pub fn pre_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut act = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len() - 1);
        for layer in self.hidden_layers() {
            let pre = layer.affine(&act);
            act = pre.iter().map(|v| v.max(0.0)).collect();
            out.push(pre);
        }
        out
    }

    /// Classifies an instance lying inside the model's domain.
    pub fn predict(&self, inst: &Instance) -> Result<Prediction, ModelError> {
        self.check_instance(inst)?;
        let outputs = self.forward(&inst.values);
        Ok(Prediction {
            class_index: argmax(&outputs),
            outputs,
        })
    }

    pub fn check_instance(&self, inst: &Instance) -> Result<(), ModelError> {
        if inst.values.len() != self.num_features() {
            return Err(ModelError::LengthMismatch {
                expected: self.num_features(),
                got: inst.values.len(),
            });
        }
        for (i, (v, iv)) in inst.values.iter().zip(self.domain.intervals()).enumerate() {
            if !iv.contains(*v) {
                return Err(ModelError::OutOfBounds {
                    name: self.feature_names[i].clone(),
                    value: *v,
                    lb: iv.lo,
                    ub: iv.hi,
                });
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            name: self.name.clone(),
            features: self
                .feature_names
                .iter()
                .zip(self.domain.intervals())
                .map(|(n, iv)| FeatureDef {
                    name: n.clone(),
                    lb: iv.lo,
                    ub: iv.hi,
                })
                .collect(),
            classes: self.class_names.clone(),
            layers: self.layers.clone(),
        }
    }

    /// Canonical JSON serialization of the model file.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDef {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
}

/// On-disk model schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    pub features: Vec<FeatureDef>,
    pub classes: Vec<String>,
    pub layers: Vec<Layer>,
}

impl TryFrom<ModelFile> for NeuralNetwork {
    type Error = ModelError;

    fn try_from(file: ModelFile) -> Result<Self, ModelError> {
        for f in &file.features {
            if !(f.lb.is_finite() && f.ub.is_finite() && f.lb <= f.ub) {
                return Err(ModelError::InvalidBounds {
                    name: f.name.clone(),
                    lb: f.lb,
                    ub: f.ub,
                });
            }
        }
        let domain = Domain::from_bounds(&file.features.iter().map(|f| (f.lb, f.ub)).collect::<Vec<_>>())?;
        NeuralNetwork::new(
            file.name,
            file.features.into_iter().map(|f| f.name).collect(),
            file.classes,
            file.layers,
            domain,
        )
    }
}

pub fn load_model(bytes: &[u8]) -> Result<NeuralNetwork, ModelError> {
    let file: ModelFile = serde_json::from_slice(bytes).map_err(|e| ModelError::Parse(e.to_string()))?;
    NeuralNetwork::try_from(file)
}

pub fn load_model_file(path: &Path) -> Result<NeuralNetwork, ModelError> {
    load_model(&std::fs::read(path)?)
}

/// Parses instances from CSV (header = feature names) or a JSON array of
/// objects keyed by feature name. Every instance is checked against the domain.
pub fn load_instances(net: &NeuralNetwork, bytes: &[u8]) -> Result<Vec<Instance>, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ModelError::Instances(e.to_string()))?;
    let instances = if text.trim_start().starts_with('[') {
        parse_json_instances(net, text)?
    } else {
        parse_csv_instances(net, text)?
    };
    for inst in &instances {
        net.check_instance(inst)?;
    }
    Ok(instances)
}

pub fn load_instances_file(net: &NeuralNetwork, path: &Path) -> Result<Vec<Instance>, ModelError> {
    load_instances(net, &std::fs::read(path)?)
}

fn parse_csv_instances(net: &NeuralNetwork, text: &str) -> Result<Vec<Instance>, ModelError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ModelError::Instances(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != net.feature_names {
        return Err(ModelError::Instances(format!(
            "header {:?} does not match feature names {:?}",
            header, net.feature_names
        )));
    }
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ModelError::Instances(e.to_string()))?;
        let values = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ModelError::Instances(format!("row {}: {e}", row + 1)))?;
        out.push(Instance::new(values));
    }
    Ok(out)
}

fn parse_json_instances(net: &NeuralNetwork, text: &str) -> Result<Vec<Instance>, ModelError> {
    let rows: Vec<serde_json::Map<String, serde_json::Value>> =
        serde_json::from_str(text).map_err(|e| ModelError::Instances(e.to_string()))?;
    rows.iter()
        .enumerate()
        .map(|(r, obj)| {
            if obj.len() != net.num_features() {
                return Err(ModelError::Instances(format!(
                    "object {r} has {} keys, expected {}",
                    obj.len(),
                    net.num_features()
                )));
            }
            net.feature_names
                .iter()
                .map(|name| {
                    obj.get(name)
                        .and_then(serde_json::Value::as_f64)
                        .ok_or_else(|| ModelError::Instances(format!("object {r}: missing numeric `{name}`")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Instance::new)
        })
        .collect()
}

/// Writes instances as CSV with a feature-name header.
pub fn instances_to_csv(net: &NeuralNetwork, instances: &[Instance]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&net.feature_names).expect("in-memory write");
    for inst in instances {
        w.write_record(inst.values.iter().map(|v| v.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
