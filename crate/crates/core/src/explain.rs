//! Greedy deletion-based abductive explanations.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::milp::Limits;
use crate::model::{Instance, ModelError, NeuralNetwork, Prediction};
use crate::par;
use crate::slice::{sliced_entails, SliceError, SlicingPlan, SubdomainCheck, Verdict};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("prediction is a tie (margin {margin:e}); no feature set entails it")]
    Tie { margin: f64 },
    #[error("check for feature {feature} hit the search limits")]
    Inconclusive { feature: usize },
    #[error("explanation failed its sufficiency re-check")]
    NotSufficient,
    #[error("order is not a permutation of the features")]
    BadOrder,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Slice(#[from] SliceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureOrder {
    #[default]
    Natural,
    Random(u64),
}

impl FeatureOrder {
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if let FeatureOrder::Random(seed) = self {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
        }
        order
    }
}

impl fmt::Display for FeatureOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureOrder::Natural => write!(f, "natural"),
            FeatureOrder::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for FeatureOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "natural" => Ok(FeatureOrder::Natural),
            Some(("random", seed)) => seed
                .parse()
                .map(FeatureOrder::Random)
                .map_err(|_| format!("bad seed in order `{s}`")),
            _ => Err(format!("unknown order `{s}` (expected natural or random:SEED)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckOutcome {
    /// Feature dropped.
    Entailed,
    /// Feature kept.
    Refuted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub feature: usize,
    pub name: String,
    pub value: f64,
    pub outcome: CheckOutcome,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub witness: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refuted_in: Option<usize>,
    pub subdomains: Vec<SubdomainCheck>,
    pub time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub instance: Instance,
    pub prediction: Prediction,
    /// Kept feature indices in check order.
    pub kept: Vec<usize>,
    pub checks: Vec<CheckRecord>,
    /// Time of the elimination loop.
    pub time_ms: f64,
    /// Time of the final sufficiency re-check.
    pub recheck_ms: f64,
}

impl Explanation {
    pub fn kept_pairs(&self) -> Vec<(usize, f64)> {
        self.kept.iter().map(|&f| (f, self.instance.values[f])).collect()
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Drops features one at a time, in `order`, while the remaining fixed
/// features still entail the prediction over every subdomain of `plan`.
pub fn explain(
    net: &NeuralNetwork,
    instance: &Instance,
    plan: &SlicingPlan,
    order: &[usize],
    limits: &Limits,
    workers: usize,
) -> Result<Explanation, ExplainError> {
    let prediction = net.predict(instance)?;
    let n = net.num_features();
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&f| f >= n || std::mem::replace(&mut seen[f], true)) {
        return Err(ExplainError::BadOrder);
    }
    let margin = prediction.margin();
    if margin <= limits.tolerances.feasibility {
        return Err(ExplainError::Tie { margin });
    }
    let target = prediction.class_index;
    let start = Instant::now();
    let mut kept: Vec<bool> = vec![true; n];
    let mut checks = Vec::with_capacity(n);
    // Premises of the latest entailed check; the final set usually equals them.
    let mut last_entailed: Option<Vec<bool>> = None;
    for &f in order {
        let t = Instant::now();
        kept[f] = false;
        let fixed: Vec<(usize, f64)> = (0..n).filter(|&g| kept[g]).map(|g| (g, instance.values[g])).collect();
        let check = sliced_entails(plan, &fixed, target, limits, workers)?;
        let mut record = CheckRecord {
            feature: f,
            name: net.feature_names[f].clone(),
            value: instance.values[f],
            outcome: CheckOutcome::Entailed,
            witness: None,
            refuted_in: None,
            subdomains: check.subdomains,
            time_ms: 0.0,
        };
        match check.verdict {
            Verdict::Entailed => last_entailed = Some(kept.clone()),
            Verdict::Refuted { subdomain, witness } => {
                kept[f] = true;
                record.outcome = CheckOutcome::Refuted;
                record.witness = Some(witness);
                record.refuted_in = Some(subdomain);
            }
            Verdict::Inconclusive => return Err(ExplainError::Inconclusive { feature: f }),
        }
        record.time_ms = ms_since(t);
        checks.push(record);
    }
    let time_ms = ms_since(start);
    let already_entailed = last_entailed.as_ref() == Some(&kept);
    let kept: Vec<usize> = order.iter().copied().filter(|&f| kept[f]).collect();
    let t = Instant::now();
    if !already_entailed {
        // Sufficiency of the final set, unless an earlier check had exactly
        // these premises.
        let fixed: Vec<(usize, f64)> = kept.iter().map(|&f| (f, instance.values[f])).collect();
        match sliced_entails(plan, &fixed, target, limits, workers)?.verdict {
            Verdict::Entailed => {}
            Verdict::Refuted { .. } => return Err(ExplainError::NotSufficient),
            Verdict::Inconclusive => {
                return Err(ExplainError::Inconclusive {
                    feature: kept.first().copied().unwrap_or(0),
                })
            }
        }
    }
    Ok(Explanation {
        instance: instance.clone(),
        prediction,
        kept,
        checks,
        time_ms,
        recheck_ms: ms_since(t),
    })
}

/// Explains every instance under one plan. Errors are kept per instance.
/// With `workers > 1` instances are processed concurrently.
pub fn explain_batch(
    net: &NeuralNetwork,
    instances: &[Instance],
    plan: &SlicingPlan,
    order: FeatureOrder,
    limits: &Limits,
    workers: usize,
) -> Vec<Result<Explanation, ExplainError>> {
    let perm = order.permutation(net.num_features());
    par::map_indexed(instances.len(), workers, |i| explain(net, &instances[i], plan, &perm, limits, 1))
}
