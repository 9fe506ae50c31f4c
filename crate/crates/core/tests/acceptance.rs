//! Acceptance criteria 1-10, one PASS/FAIL line each.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use escape_rate::cli::{run, Command, EngineDecl, ExperimentConfig, SimFlags};
use escape_rate::constants::{compute_ledger, KernelBounds, RecurrentComparability};
use escape_rate::geometry::{audit_doubling, audit_scale, DoublingExponents, GrowthExponents, ScaleFunction, VolumeProfile};
use escape_rate::hitting_bounds::{hitting_audit, EuclideanModel, HittingRegime};
use escape_rate::integral_tests::{classify_with_tail, transient_tail, Classification, ZeroOneVerdict};
use escape_rate::rate::{LowerRateCandidate, Mode, RateFunction};
use escape_rate::simulate::{estimate_q_multi, CrossingEstimate, EngineOptions, ProcessSpec, SimulationPlan};
use escape_rate::subordination::{
    envelope_ratio_audit, jump_intensity, log_grid, pi_laplace, subordinated_kernel, DiffusionKernel, StableSubordinator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn slope(est: &[CrossingEstimate]) -> f64 {
    let (a, b) = (&est[0], &est[est.len() - 1]);
    (b.q_hat / a.q_hat).ln() / (b.t_start / a.t_start).ln()
}

fn poisson_kernel() -> Check {
    let t0 = Instant::now();
    let sub = StableSubordinator::new(0.5).unwrap();
    let mut worst: f64 = 0.0;
    for d in [1usize, 3] {
        let dk = DiffusionKernel::GaussianEuclidean { d };
        for t in [0.5, 1.0, 2.0, 4.0, 8.0] {
            for k in [0.0, 0.5, 1.0, 4.0] {
                let r: f64 = k * t;
                let mut y = vec![0.0; d];
                y[0] = r;
                let q = subordinated_kernel(&sub, &dk, t, &vec![0.0; d], &y).unwrap();
                let exact = match d {
                    1 => t / (PI * (t * t + r * r)),
                    _ => t / (PI * PI * (t * t + r * r).powi(2)),
                };
                worst = worst.max(rel(q, exact));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 10.0, format!("max rel error {worst:.2e} over 40 points, {secs:.2}s"))
}

fn laplace_identity() -> Check {
    let t0 = Instant::now();
    let mut ok = true;
    let mut text = Vec::new();
    for (gamma, tol) in [(0.5, 1e-8), (0.3, 1e-4), (0.7, 1e-4)] {
        let sub = StableSubordinator::new(gamma).unwrap();
        let mut worst: f64 = 0.0;
        for lambda in [0.1f64, 0.5, 1.0, 2.0, 10.0] {
            for t in [0.5, 1.0, 2.0] {
                worst = worst.max((pi_laplace(&sub, t, lambda) - (-t * lambda.powf(gamma)).exp()).abs());
            }
        }
        ok &= worst < tol;
        text.push(format!("gamma={gamma}: {worst:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(ok && secs < 5.0, format!("max abs error {}, {secs:.2}s", text.join(", ")))
}

fn jump_kernel() -> Check {
    let sub = StableSubordinator::new(0.5).unwrap();
    let dk = DiffusionKernel::GaussianEuclidean { d: 1 };
    let j = |r: f64| jump_intensity(&sub, &dk, &[0.0], &[r]).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for r in [0.25, 0.5, 1.0, 2.0, 4.0] {
        worst = worst.max(rel(j(r), 1.0 / (PI * r * r)));
        worst_ratio = worst_ratio.max(rel(j(r) / j(2.0 * r), 4.0));
    }
    check(
        worst < 1e-6 && worst_ratio < 1e-10,
        format!("max rel error {worst:.2e}, scaling ratio error {worst_ratio:.2e}"),
    )
}

fn envelope_spread() -> Check {
    let sub = StableSubordinator::new(0.5).unwrap();
    let profile = VolumeProfile::power_global(1.0, 1.0).unwrap();
    let scale = ScaleFunction::single(1.0).unwrap();
    let grid = log_grid(20, (0.01, 100.0), (0.01, 100.0));
    let a = envelope_ratio_audit(&sub, &DiffusionKernel::GaussianEuclidean { d: 1 }, &profile, &scale, &grid).unwrap();
    check(
        a.spread < 50.0 && a.rows.len() == 400,
        format!("spread {:.6} (ratio in [{:.6}, {:.6}])", a.spread, a.min_ratio, a.max_ratio),
    )
}

fn decay_line(est: &[CrossingEstimate]) -> String {
    est.iter()
        .map(|e| format!("q({})={:.4} trunc={:.1e}", e.t_start, e.q_hat, e.truncation_bound))
        .collect::<Vec<_>>()
        .join(", ")
}

fn transient_estimates() -> (Vec<CrossingEstimate>, f64) {
    let t0 = Instant::now();
    let spec = ProcessSpec::new(2.0, 3).unwrap();
    let cand = LowerRateCandidate::new(RateFunction::power(0.25).unwrap(), ScaleFunction::single(2.0).unwrap());
    let plan = SimulationPlan::new(16.0, 100_000, 20).with_t_max(1e20);
    let est = estimate_q_multi(&spec, &cand, &plan, &[16.0, 64.0, 256.0], &EngineOptions::default()).unwrap();
    (est, t0.elapsed().as_secs_f64())
}

fn transient_decay(est: &[CrossingEstimate], secs: f64) -> Check {
    let s = slope(est);
    let trunc_ok = est.iter().all(|e| e.truncation_bound < 0.1 * e.q_hat);
    check(
        (s + 0.25).abs() <= 0.15 && trunc_ok && secs < 600.0,
        format!("slope {s:.4}; {}; {secs:.0}s", decay_line(est)),
    )
}

fn critical_decay() -> Check {
    let t0 = Instant::now();
    let spec = ProcessSpec::new(1.0, 1).unwrap();
    let cand = LowerRateCandidate::new(RateFunction::exp_power(0.5).unwrap(), ScaleFunction::single(1.0).unwrap());
    let plan = SimulationPlan::new(25.0, 100_000, 21).with_t_max(2e6);
    let est = estimate_q_multi(&spec, &cand, &plan, &[25.0, 100.0, 400.0], &EngineOptions::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let s = slope(&est);
    let trunc_ok = est.iter().all(|e| e.truncation_bound < 0.1 * e.q_hat);
    check(
        (s + 0.5).abs() <= 0.15 && trunc_ok && secs < 600.0,
        format!("slope {s:.4}; {}; {secs:.0}s", decay_line(&est)),
    )
}

fn bracket(est: &[CrossingEstimate]) -> Check {
    let model = EuclideanModel::new(ProcessSpec::new(2.0, 3).unwrap()).unwrap();
    let cand = LowerRateCandidate::new(RateFunction::power(0.25).unwrap(), model.scale);
    let (lo, hi) = model.ledger.transient_bracket().unwrap();
    let ratios: Vec<f64> = est
        .iter()
        .map(|e| e.q_hat / transient_tail(&model.profile, &model.scale, &cand, e.t_start, &[0.0]).unwrap().value)
        .collect();
    let inside = ratios.iter().all(|&r| r >= lo / 10.0 && r <= hi * 10.0);
    let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
    check(
        inside && max / min < 3.0,
        format!(
            "ratios {:?} in [{:.3e}, {:.3e}], variation {:.3}",
            ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
            lo / 10.0,
            hi * 10.0,
            max / min
        ),
    )
}

fn hitting_sandwich() -> Check {
    let mut ok = true;
    let mut text = Vec::new();
    for (regime, seed) in [(HittingRegime::Transient, 31), (HittingRegime::Critical, 32)] {
        let t0 = Instant::now();
        let a = hitting_audit(regime, 50, seed, 20_000, &EngineOptions::default()).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        ok &= a.total == 50 && a.passed >= 48 && secs < 300.0;
        text.push(format!("{regime:?} {}/{} in {secs:.0}s", a.passed, a.total));
    }
    check(ok, text.join(", "))
}

fn truth_table() -> Check {
    let t0 = Instant::now();
    let transient = (VolumeProfile::power_global(3.0, 1.0).unwrap(), ScaleFunction::single(2.0).unwrap());
    let critical = (VolumeProfile::power_global(1.0, 1.0).unwrap(), ScaleFunction::single(1.0).unwrap());
    let cases = [
        (Mode::Transient, RateFunction::power(0.25).unwrap(), Classification::Converges),
        (Mode::Transient, RateFunction::log_power(2.0).unwrap(), Classification::Converges),
        (Mode::Transient, RateFunction::exp_log_power(1.0).unwrap(), Classification::Converges),
        (Mode::Transient, RateFunction::log_power(0.25).unwrap(), Classification::Diverges),
        (Mode::Transient, RateFunction::log_power(0.5).unwrap(), Classification::Diverges),
        (Mode::Transient, RateFunction::log_power(1.0).unwrap(), Classification::Diverges),
        (Mode::Recurrent, RateFunction::exp_power(0.5).unwrap(), Classification::Converges),
        (Mode::Recurrent, RateFunction::exp_power(1.0).unwrap(), Classification::Converges),
        (Mode::Recurrent, RateFunction::exp_log_power(1.0).unwrap(), Classification::Converges),
        (Mode::Recurrent, RateFunction::power(0.25).unwrap(), Classification::Diverges),
        (Mode::Recurrent, RateFunction::power(1.0).unwrap(), Classification::Diverges),
        (Mode::Recurrent, RateFunction::log_power(2.0).unwrap(), Classification::Diverges),
    ];
    let mut correct = 0;
    let mut wrong = Vec::new();
    for (mode, rf, expect) in cases {
        let (p, s) = if mode == Mode::Transient { transient } else { critical };
        let name = format!("{mode:?}/{:?}", rf.family);
        let cand = LowerRateCandidate::new(rf, s);
        let verdict = match expect {
            Classification::Converges => ZeroOneVerdict::ProbabilityOne,
            _ => ZeroOneVerdict::ProbabilityZero,
        };
        match classify_with_tail(&p, &s, &cand, mode, &[0.0]) {
            Ok((tail, v)) if tail.classification == expect && v == verdict => correct += 1,
            other => wrong.push(format!("{name}: {other:?}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        correct == 12 && secs < 1.0,
        format!("{correct}/12 correct, {secs:.3}s{}", wrong.iter().map(|w| format!("; {w}")).collect::<String>()),
    )
}

fn geometry_audits() -> (bool, String) {
    let profiles = [
        VolumeProfile::power_global(3.0, 1.0).unwrap(),
        VolumeProfile::power_global(1.0, 2.0).unwrap(),
        VolumeProfile::two_regime(2.5, 4.0, 1.0).unwrap(),
        VolumeProfile::two_regime(3.0, 1.5, 0.5).unwrap(),
        VolumeProfile::weighted(2.0, 0.5).unwrap(),
        VolumeProfile::weighted(2.0, -0.5).unwrap(),
    ];
    let scales = [
        ScaleFunction::single(2.0).unwrap(),
        ScaleFunction::new(1.0, 2.0).unwrap(),
        ScaleFunction::new(2.0, 0.5).unwrap(),
    ];
    let mut failed = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        let r = audit_doubling(p, 1000, 100 + i as u64).unwrap();
        if !(r.passed && r.samples == 1000) {
            failed.push(format!("{:?}", p.kind));
        }
    }
    for (i, s) in scales.iter().enumerate() {
        let r = audit_scale(s, 1000, 200 + i as u64).unwrap();
        if !(r.passed && r.samples == 1000 && r.inverse.as_ref().is_none_or(|inv| inv.passed)) {
            failed.push(format!("scale {}/{}", s.beta1, s.beta2));
        }
    }
    let n = profiles.len() + scales.len();
    (failed.is_empty(), format!("geometry {}/{n}", n - failed.len()))
}

fn ledger_invariants() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = 0;
    for _ in 0..1000 {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let d4 = u(0.5, 4.0);
        let d3 = d4 * u(0.1, 1.0);
        let d1 = d4 + u(0.05, 2.0);
        let d2 = d1 + u(0.0, 3.0);
        let exp = DoublingExponents::new(u(0.1, 1.0), u(1.0, 5.0), d1, d2).unwrap();
        let growth = GrowthExponents { c3: u(0.1, 1.0), c4: u(1.0, 5.0), d3, d4 };
        let scale = ScaleFunction::new(d3, d4).unwrap().with_growth(growth).unwrap();
        let l1 = u(0.05, 2.0);
        let kb = KernelBounds::new(l1, l1 * u(1.0, 10.0)).unwrap();
        let cv1 = u(0.05, 2.0);
        let rc = RecurrentComparability::new(cv1, cv1 * u(1.0, 4.0)).unwrap();
        let s = u(0.01, 100.0);
        let l = compute_ledger(&exp, &scale, &kb, Some(&rc)).unwrap();
        let m = compute_ledger(&exp, &scale, &KernelBounds::new(kb.l1 * s, kb.l2 * s).unwrap(), Some(&rc)).unwrap();
        let invariant = l.entries().iter().zip(m.entries().iter()).all(|((_, a), (_, b))| (a - b).abs() <= 1e-12 * a.abs());
        let (ti, ts) = l.transient_bracket().unwrap();
        let (ci, cs) = l.critical_bracket().unwrap();
        if !(invariant && l.k2.unwrap() < l.k1 && ti <= ts && ci <= cs) {
            bad += 1;
        }
    }
    (bad == 0, format!("ledger {}/1000", 1000 - bad))
}

fn determinism() -> (bool, String) {
    let base = ExperimentConfig::from_toml(
        r#"
[process]
alpha = 1.0
dim = 1
[rate]
family = "exp_power"
params = { p = 0.5 }
[plan]
n_paths = 3000
seed = 4
t_max = 1e4
"#,
    )
    .unwrap();
    let cmd = Command::Sweep {
        sim: SimFlags::default(),
        t_list: vec![25.0, 100.0],
    };
    let mut artifacts = Vec::new();
    for workers in [1, 4, 16] {
        let mut cfg = base.clone();
        cfg.engine = Some(EngineDecl {
            workers: Some(workers),
            ..Default::default()
        });
        let out = run(&cmd, &mut cfg).unwrap();
        let csv = out.files.iter().find(|(n, _)| n.ends_with(".csv")).unwrap().1.clone();
        let json: serde_json::Value =
            serde_json::from_str(&out.files.iter().find(|(n, _)| n.ends_with(".json")).unwrap().1).unwrap();
        artifacts.push((csv, json["result"].to_string(), json["ledger"].to_string()));
    }
    let same = artifacts.windows(2).all(|w| w[0] == w[1]);
    (same, format!("artifacts identical across 1/4/16 workers: {same}"))
}

fn property_suites() -> Check {
    let parts = [geometry_audits(), ledger_invariants(), determinism()];
    check(parts.iter().all(|p| p.0), parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>().join("; "))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(c) => c,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, c: Check| {
        println!("criterion {n:>2} {:<4} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
        results.push(c.pass);
    };
    report(1, "Poisson kernel oracle", guarded(poisson_kernel));
    report(2, "subordinator Laplace identity", guarded(laplace_identity));
    report(3, "jump kernel and scaling", guarded(jump_kernel));
    report(4, "envelope spread", guarded(envelope_spread));
    let transient = catch_unwind(transient_estimates).ok();
    let missing = || check(false, "simulation panicked".into());
    match &transient {
        Some((est, secs)) => report(5, "transient decay exponent", guarded(|| transient_decay(est, *secs))),
        None => report(5, "transient decay exponent", missing()),
    }
    report(6, "critical decay exponent", guarded(critical_decay));
    match &transient {
        Some((est, _)) => report(7, "bracket consistency", guarded(|| bracket(est))),
        None => report(7, "bracket consistency", missing()),
    }
    report(8, "hitting sandwich audit", guarded(hitting_sandwich));
    report(9, "integral-test truth table", guarded(truth_table));
    report(10, "property suites", guarded(property_suites));
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
