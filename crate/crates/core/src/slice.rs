//! Midpoint slicing of the input box and entailment over the resulting
//! subdomains.
//!
//! Slicing `s` features yields `2^s` closed subboxes that share their
//! midpoints. Each subbox gets its own bounds and encoding, built once per
//! plan. A prediction is entailed over the box iff it is entailed over every
//! subbox.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{compute_bounds, BoundsError, NeuronBounds, TightenMode};
use crate::encode::{binary_removed_pct, encode, with_assumptions, ConstraintSystem, EncodeError, PredictionFormula};
use crate::milp::{milp_feasible, Limits, MilpError, MilpStatus};
use crate::model::{Domain, Interval, NeuralNetwork};
use crate::par;

pub const MAX_SLICES: usize = 3;

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("at most {MAX_SLICES} features can be sliced, got {0}")]
    TooManySlices(usize),
    #[error("feature {0} has a degenerate interval and cannot be sliced")]
    DegenerateFeature(usize),
    #[error("feature {0} is listed twice")]
    DuplicateFeature(usize),
    #[error("feature index {0} is out of range")]
    UnknownFeature(usize),
    #[error("need {needed} sliceable features, only {available} available")]
    NotEnoughFeatures { needed: usize, available: usize },
    #[error("reuse list of {reuse} features is longer than the requested {count}")]
    ReuseTooLong { reuse: usize, count: usize },
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Milp(#[from] MilpError),
}

#[derive(Debug, Clone)]
pub struct Subdomain {
    pub domain: Domain,
    pub bounds: NeuronBounds,
    pub system: ConstraintSystem,
    pub removed_pct: f64,
}

#[derive(Debug, Clone)]
pub struct SlicingPlan {
    pub features: Vec<usize>,
    pub tighten: TightenMode,
    pub subdomains: Vec<Subdomain>,
    pub avg_removed_pct: f64,
    root: Domain,
}

impl SlicingPlan {
    pub fn slices(&self) -> usize {
        self.features.len()
    }

    pub fn root(&self) -> &Domain {
        &self.root
    }
}

/// The `2^s` midpoint subboxes in lexicographic order: the first feature is
/// the most significant position, low half before high half.
pub fn split_domain(domain: &Domain, features: &[usize]) -> Vec<Domain> {
    let s = features.len();
    (0..1usize << s)
        .map(|k| {
            features.iter().enumerate().fold(domain.clone(), |d, (t, &f)| {
                let iv = domain.get(f);
                let m = iv.midpoint();
                let high = (k >> (s - 1 - t)) & 1 == 1;
                let half = if high {
                    Interval::new(m, iv.hi)
                } else {
                    Interval::new(iv.lo, m)
                };
                d.with_interval(f, half)
            })
        })
        .collect()
}

fn check_features(domain: &Domain, features: &[usize]) -> Result<(), SliceError> {
    if features.len() > MAX_SLICES {
        return Err(SliceError::TooManySlices(features.len()));
    }
    for (i, &f) in features.iter().enumerate() {
        if f >= domain.len() {
            return Err(SliceError::UnknownFeature(f));
        }
        if features[..i].contains(&f) {
            return Err(SliceError::DuplicateFeature(f));
        }
        if domain.get(f).is_degenerate() {
            return Err(SliceError::DegenerateFeature(f));
        }
    }
    Ok(())
}

pub fn make_plan(
    net: &NeuralNetwork,
    domain: &Domain,
    features: &[usize],
    tighten: TightenMode,
    limits: &Limits,
    workers: usize,
) -> Result<SlicingPlan, SliceError> {
    check_features(domain, features)?;
    let boxes = split_domain(domain, features);
    let built = par::map_indexed(boxes.len(), workers, |k| -> Result<Subdomain, SliceError> {
        let d = &boxes[k];
        let bounds = compute_bounds(net, d, tighten, limits, 1)?;
        let system = encode(net, d, &bounds)?;
        let removed_pct = binary_removed_pct(&system);
        Ok(Subdomain {
            domain: d.clone(),
            bounds,
            system,
            removed_pct,
        })
    });
    let subdomains = built.into_iter().collect::<Result<Vec<_>, _>>()?;
    let avg_removed_pct = subdomains.iter().map(|s| s.removed_pct).sum::<f64>() / subdomains.len() as f64;
    Ok(SlicingPlan {
        features: features.to_vec(),
        tighten,
        subdomains,
        avg_removed_pct,
        root: domain.clone(),
    })
}

/// Extends `reuse` to `count` features with seeded uniform draws from the
/// remaining non-degenerate features.
pub fn pick_features(domain: &Domain, count: usize, seed: u64, reuse: &[usize]) -> Result<Vec<usize>, SliceError> {
    if count > MAX_SLICES {
        return Err(SliceError::TooManySlices(count));
    }
    if reuse.len() > count {
        return Err(SliceError::ReuseTooLong {
            reuse: reuse.len(),
            count,
        });
    }
    check_features(domain, reuse)?;
    let mut candidates: Vec<usize> = (0..domain.len())
        .filter(|f| !domain.get(*f).is_degenerate() && !reuse.contains(f))
        .collect();
    let needed = count - reuse.len();
    if candidates.len() < needed {
        return Err(SliceError::NotEnoughFeatures {
            needed: count,
            available: candidates.len() + reuse.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut out = reuse.to_vec();
    out.extend_from_slice(&candidates[..needed]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubdomainStatus {
    Entailed,
    Refuted,
    /// A fixed value lies outside the subbox.
    AssumptionInfeasible,
    Inconclusive,
    /// Not evaluated because an earlier subdomain refuted.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdomainCheck {
    pub index: usize,
    pub status: SubdomainStatus,
    pub nodes: u64,
    pub lp_calls: u64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Entailed,
    Refuted { subdomain: usize, witness: Vec<f64> },
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntailmentCheck {
    pub verdict: Verdict,
    pub subdomains: Vec<SubdomainCheck>,
}

struct SubResult {
    check: SubdomainCheck,
    witness: Option<Vec<f64>>,
}

fn check_subdomain(
    sub: &Subdomain,
    index: usize,
    fixed: &[(usize, f64)],
    target: usize,
    limits: &Limits,
) -> Result<SubResult, SliceError> {
    let start = Instant::now();
    let cs = &sub.system;
    let formula = PredictionFormula::new(cs, target);
    let mut check = SubdomainCheck {
        index,
        status: SubdomainStatus::Entailed,
        nodes: 0,
        lp_calls: 0,
        elapsed_ms: 0.0,
    };
    let mut witness = None;
    for (_, row) in &formula.disjuncts {
        let view = with_assumptions(cs, fixed, vec![row.clone()]);
        if view.assumption_infeasible {
            check.status = SubdomainStatus::AssumptionInfeasible;
            break;
        }
        let out = milp_feasible(&view, limits)?;
        check.nodes += out.stats.nodes;
        check.lp_calls += out.stats.lp_calls;
        match out.status {
            MilpStatus::Sat => {
                let w = out.witness.expect("sat carries a witness");
                witness = Some(cs.inputs().iter().map(|&v| w[v]).collect());
                check.status = SubdomainStatus::Refuted;
                break;
            }
            MilpStatus::NodeLimit => check.status = SubdomainStatus::Inconclusive,
            _ => {}
        }
    }
    check.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(SubResult { check, witness })
}

/// Decides whether fixing `fixed` entails class `target` over the plan's
/// root box.
pub fn sliced_entails(
    plan: &SlicingPlan,
    fixed: &[(usize, f64)],
    target: usize,
    limits: &Limits,
    workers: usize,
) -> Result<EntailmentCheck, SliceError> {
    let n = plan.subdomains.len();
    let results: Vec<SubResult> = if workers > 1 && n > 1 {
        par::map_indexed(n, workers, |k| check_subdomain(&plan.subdomains[k], k, fixed, target, limits))
            .into_iter()
            .collect::<Result<_, _>>()?
    } else {
        let mut out = Vec::with_capacity(n);
        for (k, sub) in plan.subdomains.iter().enumerate() {
            let r = check_subdomain(sub, k, fixed, target, limits)?;
            let refuted = r.check.status == SubdomainStatus::Refuted;
            out.push(r);
            if refuted {
                break;
            }
        }
        out
    };
    let mut verdict = Verdict::Entailed;
    let mut checks = Vec::with_capacity(n);
    for r in results {
        if matches!(verdict, Verdict::Refuted { .. }) {
            checks.push(SubdomainCheck {
                status: SubdomainStatus::Skipped,
                nodes: 0,
                lp_calls: 0,
                elapsed_ms: 0.0,
                ..r.check
            });
            continue;
        }
        match r.check.status {
            SubdomainStatus::Refuted => {
                verdict = Verdict::Refuted {
                    subdomain: r.check.index,
                    witness: r.witness.expect("refutation carries a witness"),
                }
            }
            SubdomainStatus::Inconclusive => verdict = Verdict::Inconclusive,
            _ => {}
        }
        checks.push(r.check);
    }
    for k in checks.len()..n {
        checks.push(SubdomainCheck {
            index: k,
            status: SubdomainStatus::Skipped,
            nodes: 0,
            lp_calls: 0,
            elapsed_ms: 0.0,
        });
    }
    Ok(EntailmentCheck { verdict, subdomains: checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::toy;

    fn toy_plan(features: &[usize]) -> SlicingPlan {
        let net = toy();
        make_plan(&net, net.domain(), features, TightenMode::Interval, &Limits::default(), 1).unwrap()
    }

    #[test]
    fn toy_single_slice_layout() {
        let plan = toy_plan(&[1]);
        assert_eq!(plan.subdomains.len(), 2);
        let d1 = &plan.subdomains[0].domain;
        let d2 = &plan.subdomains[1].domain;
        assert_eq!((d1.get(0).lo, d1.get(0).hi), (0.2, 0.7));
        assert_eq!((d1.get(1).lo, d1.get(1).hi), (0.2, 0.35));
        assert_eq!((d2.get(1).lo, d2.get(1).hi), (0.35, 0.5));
        assert_eq!(plan.subdomains[0].removed_pct, 0.0);
        assert_eq!(plan.subdomains[1].removed_pct, 50.0);
        assert_eq!(plan.avg_removed_pct, 25.0);
    }

    #[test]
    fn zero_slices_is_the_root_box() {
        let net = toy();
        let plan = toy_plan(&[]);
        assert_eq!(plan.subdomains.len(), 1);
        assert_eq!(&plan.subdomains[0].domain, net.domain());
        assert_eq!(plan.avg_removed_pct, 0.0);
    }

    #[test]
    fn two_features_give_four_boxes_in_order() {
        let d = Domain::from_bounds(&[(0.0, 1.0), (2.0, 4.0), (-1.0, 1.0)]).unwrap();
        let boxes = split_domain(&d, &[0, 1]);
        let got: Vec<_> = boxes.iter().map(|b| (b.get(0).lo, b.get(0).hi, b.get(1).lo, b.get(1).hi)).collect();
        assert_eq!(
            got,
            vec![
                (0.0, 0.5, 2.0, 3.0),
                (0.0, 0.5, 3.0, 4.0),
                (0.5, 1.0, 2.0, 3.0),
                (0.5, 1.0, 3.0, 4.0)
            ]
        );
        assert!(boxes.iter().all(|b| b.get(2) == d.get(2)));
    }

    #[test]
    fn plan_rejects_bad_feature_lists() {
        let net = toy();
        let l = Limits::default();
        let mk = |f: &[usize], d: &Domain| make_plan(&net, d, f, TightenMode::Interval, &l, 1).map(|_| ());
        assert!(matches!(mk(&[0, 1, 0, 1], net.domain()), Err(SliceError::TooManySlices(4))));
        assert!(matches!(mk(&[1, 1], net.domain()), Err(SliceError::DuplicateFeature(1))));
        let flat = net.domain().with_interval(0, Interval::point(0.3));
        assert!(matches!(mk(&[0], &flat), Err(SliceError::DegenerateFeature(0))));
    }

    #[test]
    fn pick_features_reuses_and_is_deterministic() {
        let d = Domain::from_bounds(&vec![(0.0, 1.0); 6]).unwrap();
        assert_eq!(pick_features(&d, 0, 7, &[]).unwrap(), Vec::<usize>::new());
        let a = pick_features(&d, 2, 7, &[3]).unwrap();
        assert_eq!(a[0], 3);
        assert_ne!(a[1], 3);
        assert_eq!(a, pick_features(&d, 2, 7, &[3]).unwrap());
        let flat = d.with_interval(0, Interval::point(0.5));
        for seed in 0..20 {
            assert!(!pick_features(&flat, 3, seed, &[]).unwrap().contains(&0));
        }
        let narrow = Domain::from_bounds(&[(0.0, 1.0), (0.5, 0.5)]).unwrap();
        assert!(matches!(
            pick_features(&narrow, 2, 1, &[]),
            Err(SliceError::NotEnoughFeatures { .. })
        ));
    }

    #[test]
    fn toy_entailment_over_slices() {
        let plan = toy_plan(&[1]);
        let l = Limits::default();
        let c = sliced_entails(&plan, &[(0, 0.7)], 0, &l, 1).unwrap();
        assert_eq!(c.verdict, Verdict::Entailed);
        let c = sliced_entails(&plan, &[(1, 0.2)], 0, &l, 1).unwrap();
        let Verdict::Refuted { subdomain, witness } = c.verdict else {
            panic!("expected refutation")
        };
        assert_eq!(subdomain, 0);
        assert!((witness[0] - 0.2).abs() < 1e-6 && (witness[1] - 0.2).abs() < 1e-9);
        assert_eq!(c.subdomains[1].status, SubdomainStatus::Skipped);
        let base = toy_plan(&[]);
        let c = sliced_entails(&base, &[(0, 0.7), (1, 0.2)], 0, &l, 1).unwrap();
        assert_eq!(c.verdict, Verdict::Entailed);
    }

    #[test]
    fn fixed_value_outside_subbox_is_vacuous() {
        let plan = toy_plan(&[1]);
        let c = sliced_entails(&plan, &[(0, 0.7), (1, 0.2)], 0, &Limits::default(), 1).unwrap();
        assert_eq!(c.verdict, Verdict::Entailed);
        assert_eq!(c.subdomains[1].status, SubdomainStatus::AssumptionInfeasible);
    }

    #[test]
    fn parallel_matches_sequential() {
        let plan = toy_plan(&[0, 1]);
        let l = Limits::default();
        for fixed in [vec![(0, 0.7)], vec![(1, 0.2)], vec![]] {
            let a = sliced_entails(&plan, &fixed, 0, &l, 1).unwrap();
            let b = par::with_pool(3, || sliced_entails(&plan, &fixed, 0, &l, 3).unwrap());
            assert_eq!(a.verdict, b.verdict);
        }
    }
}
