//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use axp::bounds::{compute_bounds, interval_propagate, TightenMode};
use axp::cli;
use axp::encode::{binary_removed_pct, encode};
use axp::explain::explain;
use axp::lp::Sense;
use axp::milp::{milp_optimize, Limits, MilpStatus};
use axp::model::{instances_to_csv, load_model_file, Domain, Instance, Interval, NeuralNetwork};
use axp::oracle::{Oracle, OracleVerdict, Verification};
use axp::report::{timing_free_json, Report};
use axp::slice::{make_plan, pick_features, sliced_entails, Verdict};
use axp::synth::{random_net, single_relu_program, stabilizable_net};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn golden() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("toy_expected.json")).unwrap()).unwrap()
}

fn toy() -> NeuralNetwork {
    load_model_file(&fixtures().join("toy.json")).unwrap()
}

fn pairs(v: &Value) -> Vec<(f64, f64)> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|p| (p[0].as_f64().unwrap(), p[1].as_f64().unwrap()))
        .collect()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn random_instance(rng: &mut ChaCha8Rng, domain: &Domain) -> Instance {
    Instance::new(
        domain
            .intervals()
            .iter()
            .map(|iv| rng.gen_range(iv.lo..=iv.hi))
            .collect(),
    )
}

fn natural(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn toy_bounds() -> String {
    let start = Instant::now();
    let net = toy();
    let g = golden();
    let tol = g["tolerance"].as_f64().unwrap();
    for b in g["boxes"].as_array().unwrap() {
        let name = b["name"].as_str().unwrap();
        let domain = Domain::from_bounds(&pairs(&b["x"])).unwrap();
        let nb = interval_propagate(&net, &domain).unwrap();
        for (j, (lo, hi)) in pairs(&b["pre"]).into_iter().enumerate() {
            let p = nb.pre(0, j);
            assert!((p.lo - lo).abs() <= tol && (p.hi - hi).abs() <= tol, "{name} y{}: {p}", j + 1);
        }
        for (j, v) in floats(&b["ub_x"]).into_iter().enumerate() {
            assert!((nb.ub_x(0, j) - v).abs() <= tol, "{name} ub_x{}", j + 1);
        }
        for (j, v) in floats(&b["ub_s"]).into_iter().enumerate() {
            assert!((nb.ub_s(0, j) - v).abs() <= tol, "{name} ub_s{}", j + 1);
        }
    }
    // The three values called out explicitly.
    let full = interval_propagate(&net, net.domain()).unwrap();
    let d1 = interval_propagate(&net, &net.domain().with_interval(1, Interval::new(0.2, 0.35))).unwrap();
    assert!((full.ub_x(0, 0) - 0.8).abs() <= tol);
    assert!((full.ub_s(0, 0) - 0.3).abs() <= tol);
    assert!((d1.ub_s(0, 1) - 0.15).abs() <= tol);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    format!("3 boxes match at 1e-9 in {:.1} ms", elapsed.as_secs_f64() * 1e3)
}

fn stable_elimination() -> String {
    let net = toy();
    let d2 = net.domain().with_interval(1, Interval::new(0.35, 0.5));
    let cs = encode(&net, &d2, &interval_propagate(&net, &d2).unwrap()).unwrap();
    assert_eq!(cs.binary_count(), 1);
    let binaries: Vec<&str> = cs.binaries().iter().map(|b| b.name.as_str()).collect();
    assert_eq!(binaries, ["z1_2"]);
    assert!(cs.var_index("s1_1").is_none() && cs.var_index("s1_2").is_some());
    let pct = binary_removed_pct(&cs);
    assert_eq!(pct, 50.0);
    let expected = golden()["boxes"][2]["removed_pct"].as_f64().unwrap();
    assert_eq!(pct, expected);
    format!("D2 has 1 binary, {pct:.2}% removed")
}

fn single_relu_optimum() -> String {
    let start = Instant::now();
    let (cs, [x1, y1, _]) = single_relu_program();
    let mut c = vec![0.0; cs.num_vars()];
    c[y1] = 1.0;
    let out = milp_optimize(&cs.view(), &c, Sense::Minimize, &Limits::default()).unwrap();
    assert_eq!(out.status, MilpStatus::Optimal);
    let v = out.objective.unwrap();
    assert!((v - 1.0).abs() <= 1e-6, "min y1 = {v}");
    // Grid cross-check: on 1 <= x1 <= 3 the pre-activation 3 x1 - 2 is
    // positive, so y1 = 3 x1 - 2 and the minimum sits at x1 = 1.
    let grid = (0..=2000)
        .map(|k| 1.0 + 2.0 * k as f64 / 2000.0)
        .map(|x: f64| (3.0 * x - 2.0).max(0.0))
        .fold(f64::INFINITY, f64::min);
    assert!((grid - v).abs() <= 1e-6);
    assert!((out.witness.as_ref().unwrap()[x1] - 1.0).abs() <= 1e-6);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1));
    format!("min y1 = {v:.9} in {:.1} ms", elapsed.as_secs_f64() * 1e3)
}

fn oracle_equivalence() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let oracle = Oracle::default();
    let limits = Limits::default();
    let mut queries = 0;
    let mut per_level = [0usize; 4];
    let mut refuted = 0;
    while queries < 320 {
        let nf = rng.gen_range(2..=4);
        let layers = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.gen_range(2..=12 / layers)).collect();
        let classes = rng.gen_range(2..=3);
        let net = random_net(&mut rng, nf, &hidden, classes);
        let levels: Vec<usize> = (0..=3.min(nf)).collect();
        let plans: Vec<_> = levels
            .iter()
            .map(|&s| {
                let feats = pick_features(net.domain(), s, rng.gen(), &[]).unwrap();
                make_plan(&net, net.domain(), &feats, TightenMode::Interval, &limits, 1).unwrap()
            })
            .collect();
        for _ in 0..6 {
            let inst = random_instance(&mut rng, net.domain());
            let fixed: Vec<(usize, f64)> = (0..nf).filter(|_| rng.gen_bool(0.5)).map(|f| (f, inst.values[f])).collect();
            let target = rng.gen_range(0..classes);
            let expected = oracle.entails(&net, net.domain(), &fixed, target).unwrap();
            if !expected.is_entailed() {
                refuted += 1;
            }
            for (plan, &s) in plans.iter().zip(&levels) {
                let got = sliced_entails(plan, &fixed, target, &limits, 1).unwrap().verdict;
                let agree = matches!(
                    (&expected, &got),
                    (OracleVerdict::Entailed, Verdict::Entailed) | (OracleVerdict::Refuted(_), Verdict::Refuted { .. })
                );
                assert!(agree, "s={s} fixed={fixed:?} target={target}: oracle {expected:?}, engine {got:?}");
                per_level[s] += 1;
            }
            queries += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600));
    format!(
        "{queries} queries ({refuted} refuted), checks per s=0..3 {per_level:?}, 0 disagreements, {:.1} s",
        elapsed.as_secs_f64()
    )
}

struct InvarianceStats {
    explanations: Vec<(NeuralNetwork, Instance, Vec<usize>)>,
    ties: usize,
}

fn explanations_suite() -> InvarianceStats {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let limits = Limits::default();
    let mut stats = InvarianceStats {
        explanations: Vec::new(),
        ties: 0,
    };
    for _ in 0..20 {
        let nf = rng.gen_range(3..=5);
        let layers = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.gen_range(3..=12 / layers)).collect();
        let classes = rng.gen_range(2..=3);
        let net = random_net(&mut rng, nf, &hidden, classes);
        let feats = pick_features(net.domain(), 3, rng.gen(), &[]).unwrap();
        let plans: Vec<_> = (0..=3)
            .map(|s| make_plan(&net, net.domain(), &feats[..s], TightenMode::Interval, &limits, 1).unwrap())
            .collect();
        for _ in 0..5 {
            let inst = random_instance(&mut rng, net.domain());
            let results: Vec<_> = plans
                .iter()
                .map(|p| explain(&net, &inst, p, &natural(nf), &limits, 1))
                .collect();
            if results.iter().all(|r| matches!(r, Err(axp::explain::ExplainError::Tie { .. }))) {
                stats.ties += 1;
                continue;
            }
            let sets: Vec<Vec<usize>> = results
                .into_iter()
                .map(|r| {
                    let mut k = r.unwrap().kept;
                    k.sort_unstable();
                    k
                })
                .collect();
            for (s, set) in sets.iter().enumerate() {
                assert_eq!(set, &sets[0], "slices={s} on {:?}", inst.values);
            }
            stats.explanations.push((net.clone(), inst, sets[0].clone()));
        }
    }
    stats
}

fn slicing_invariance(stats: &InvarianceStats) -> String {
    assert_eq!(stats.explanations.len() + stats.ties, 100);
    format!(
        "20 nets x 5 instances, {} explained at s=0..3 with identical sets ({} ties skipped)",
        stats.explanations.len(),
        stats.ties
    )
}

fn explanation_validity(stats: &InvarianceStats) -> String {
    let mut checked = 0;
    // The toy golden explanations join the random suite.
    let net = toy();
    let g = golden();
    let mut all: Vec<(NeuralNetwork, Instance, Vec<usize>)> = stats.explanations.clone();
    for e in g["explanations"].as_array().unwrap() {
        let inst = Instance::new(floats(&e["instance"]));
        let kept: Vec<usize> = e["kept"]
            .as_array()
            .unwrap()
            .iter()
            .map(|n| net.feature_index(n.as_str().unwrap()).unwrap())
            .collect();
        let plan = make_plan(&net, net.domain(), &[1], TightenMode::Interval, &Limits::default(), 1).unwrap();
        let got = explain(&net, &inst, &plan, &[0, 1], &Limits::default(), 1).unwrap();
        assert_eq!(got.kept, kept);
        assert_eq!(net.class_names[got.prediction.class_index], e["prediction"].as_str().unwrap());
        all.push((net.clone(), inst, kept));
    }
    for (net, inst, kept) in &all {
        let v = axp::oracle::verify_explanation(net, inst, kept).unwrap();
        assert_eq!(v, Verification::Ok, "{:?} X={kept:?}", inst.values);
        checked += 1;
    }
    format!("{checked} explanations sufficient and subset-minimal")
}

fn monotonicity() -> String {
    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut curves = Vec::new();
    for _ in 0..10 {
        let nf = rng.gen_range(3..=6);
        let per = rng.gen_range(1..=3);
        let width = 3 * per + rng.gen_range(0..=4);
        let net = stabilizable_net(&mut rng, nf, 3, per, &[width, 8], 2);
        let mut prev = -1.0;
        let mut curve = Vec::new();
        for s in 0..=3 {
            let plan = make_plan(&net, net.domain(), &natural(3)[..s], TightenMode::Interval, &limits, 1).unwrap();
            assert!(plan.avg_removed_pct >= prev, "s={s}: {} < {prev}", plan.avg_removed_pct);
            prev = plan.avg_removed_pct;
            curve.push(plan.avg_removed_pct);
        }
        curves.push(curve);
    }
    // Random box-shrink chains: each child box's bounds lie inside its parent's.
    let mut chains = 0;
    for _ in 0..100 {
        let nf = rng.gen_range(2..=5);
        let hidden = [rng.gen_range(2..=8), rng.gen_range(2..=8)];
        let net = random_net(&mut rng, nf, &hidden, 2);
        let mut domain = net.domain().clone();
        let mut parent = compute_bounds(&net, &domain, TightenMode::Interval, &limits, 1).unwrap();
        for _ in 0..6 {
            let f = rng.gen_range(0..nf);
            let iv = domain.get(f);
            let a = rng.gen_range(iv.lo..=iv.hi);
            let b = rng.gen_range(iv.lo..=iv.hi);
            domain = domain.with_interval(f, Interval::new(a.min(b), a.max(b)));
            let child = compute_bounds(&net, &domain, TightenMode::Interval, &limits, 1).unwrap();
            assert!(parent.contains(&child, 1e-12));
            parent = child;
        }
        chains += 1;
    }
    format!(
        "10 stabilizable nets non-decreasing (first {:?}), {chains} shrink chains contained",
        curves[0].iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>()
    )
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["axp"];
    full.extend_from_slice(args);
    let code = cli::run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn bench_shape_and_timing() -> String {
    let dir = tempfile::tempdir().unwrap();
    // Tables-shaped output on the exported 13-feature models.
    let l4 = fixtures().join("mlp13_l4.json");
    let l2 = fixtures().join("mlp13_l2.json");
    let (l4, l2) = (l4.to_str().unwrap(), l2.to_str().unwrap());
    let c4 = fixtures().join("mlp13_l4.csv");
    let c2 = fixtures().join("mlp13_l2.csv");
    let (c4, c2) = (c4.to_str().unwrap(), c2.to_str().unwrap());
    let table_report = dir.path().join("tables.json");
    let (code, table, err) = run_cli(&[
        "bench", "--model", l4, "--instances", c4, "--model", l2, "--instances", c2, "--max-instances", "1",
        "--slices-range", "0..3", "--slice-seed", "1", "--out", table_report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    for col in ["0 slices", "1 slice", "2 slices", "3 slices"] {
        assert!(lines[0].contains(col), "{}", lines[0]);
    }
    for pair in lines[1..].chunks(2) {
        assert!(pair[0].contains("Exp Time (s)") && pair[1].contains("% Bin Rem"));
        assert_eq!(pair[0].split_whitespace().count(), 1 + 3 + 4);
        assert_eq!(pair[1].split_whitespace().count(), 3 + 4);
    }
    let report = Report::from_json(&std::fs::read_to_string(&table_report).unwrap()).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert!(report.runs.iter().all(|r| r.levels.len() == 4 && r.levels[0].summary.failed == 0));
    let hidden = load_model_file(Path::new(l4)).unwrap().hidden_neuron_count();
    assert_eq!(hidden, 64);

    // Direction of effect on a constructed benchmark whose first three
    // features each stabilize six first-layer neurons when halved.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = stabilizable_net(&mut rng, 6, 3, 6, &[20, 20], 2);
    let instances: Vec<Instance> = (0..4).map(|_| random_instance(&mut rng, net.domain())).collect();
    let model = dir.path().join("stab.json");
    let inst = dir.path().join("stab.csv");
    std::fs::write(&model, net.to_json()).unwrap();
    std::fs::write(&inst, instances_to_csv(&net, &instances)).unwrap();
    let out = dir.path().join("stab_report.json");
    let (code, _, err) = run_cli(&[
        "bench", "--model", model.to_str().unwrap(), "--instances", inst.to_str().unwrap(), "--slices-range", "0..3",
        "--slice-features", "x1,x2,x3", "--repeat", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let report = Report::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let levels = &report.runs[0].levels;
    let rem3 = levels[3].avg_removed_pct;
    let (t0, t3) = (levels[0].summary.median_total_s, levels[3].summary.median_total_s);
    assert!(rem3 >= 15.0, "only {rem3:.2}% removed at 3 slices");
    assert!(t3 < t0, "3 slices {t3:.3} s not below 0 slices {t0:.3} s");
    let sets: Vec<_> = levels
        .iter()
        .map(|l| l.instances.iter().map(|r| r.kept()).collect::<Vec<_>>())
        .collect();
    assert!(sets.iter().all(|s| s == &sets[0]));
    format!(
        "13-feature models: 2 x 4 levels; constructed net {rem3:.2}% removed, median {t0:.3} s -> {t3:.3} s"
    )
}

fn determinism() -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = random_net(&mut rng, 5, &[8, 6], 3);
    let instances: Vec<Instance> = (0..6).map(|_| random_instance(&mut rng, net.domain())).collect();
    let model = dir.path().join("m.json");
    let inst = dir.path().join("i.csv");
    std::fs::write(&model, net.to_json()).unwrap();
    std::fs::write(&inst, instances_to_csv(&net, &instances)).unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}.json"));
        let (code, _, err) = run_cli(&[
            "bench", "--model", model.to_str().unwrap(), "--instances", inst.to_str().unwrap(), "--slices-range",
            "0..3", "--slice-seed", "11", "--order", "random:5", "--workers", "1", "--out", out.to_str().unwrap(),
        ]);
        assert!(code == 0 || code == cli::EXIT_PARTIAL, "{err}");
        let text = std::fs::read_to_string(&out).unwrap();
        let report = Report::from_json(&text).unwrap();
        assert_eq!(serde_json::to_string_pretty(&report).unwrap() + "\n", text);
        outputs.push(timing_free_json(&report));
    }
    assert_eq!(outputs[0], outputs[1]);
    format!("two runs byte-identical without timing ({} bytes)", outputs[0].len())
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut record = |name: &str, f: &mut dyn FnMut() -> String| {
        let t = Instant::now();
        match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1} s]", t.elapsed().as_secs_f64()),
            Err(e) => {
                failures += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {msg}");
            }
        }
    };
    record("toy network bounds", &mut toy_bounds);
    record("stable elimination", &mut stable_elimination);
    record("single-relu optimum", &mut single_relu_optimum);
    record("oracle equivalence", &mut oracle_equivalence);
    let mut suite = None;
    record("slicing invariance", &mut || {
        let s = explanations_suite();
        let line = slicing_invariance(&s);
        suite = Some(s);
        line
    });
    record("explanation validity", &mut || {
        explanation_validity(suite.as_ref().expect("slicing invariance suite did not complete"))
    });
    record("monotonicity", &mut monotonicity);
    record("bench shape and timing", &mut bench_shape_and_timing);
    record("determinism", &mut determinism);
    println!("{} criteria failed, {:.1} s total", failures, started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
