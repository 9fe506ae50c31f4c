//! Explicit bounds on the probability of hitting a ball during a time window,
//! and their audit against Monte Carlo estimates.

use std::f64::consts::PI;

use libm::{atan, erf, erfc, lgamma, tgamma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::{compute_ledger, ConstantLedger, KernelBounds};
use crate::error::{ensure, Error, Result};
use crate::geometry::{ScaleFunction, VolumeKind, VolumeProfile};
use crate::integral_tests::comparability;
use crate::quad::{integrate, QuadOptions};
use crate::simulate::{estimate_hitting_with, EngineOptions, ProcessSpec};
use crate::subordination::{pi_density, subordinated_radial, StableSubordinator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowQuery {
    pub a: f64,
    pub b: f64,
    /// Auxiliary horizon of the upper bounds.
    pub c: f64,
    pub r: f64,
}

impl WindowQuery {
    pub fn new(a: f64, b: f64, c: f64, r: f64) -> Result<Self> {
        let q = Self { a, b, c, r };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.a > 0.0 && self.b > self.a && self.c > 0.0 && self.r > 0.0, || {
            Error::Validation(format!(
                "window needs 0 < a < b, c > 0, r > 0 (a={}, b={}, c={}, r={})",
                self.a, self.b, self.c, self.r
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LemmaTag {
    L41,
    L42,
    L43,
    LA1i,
    LA1ii,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichBounds {
    pub lower: f64,
    pub upper: f64,
    pub lemma_tag: LemmaTag,
    pub applicable: bool,
    pub violations: Vec<String>,
    /// The raw upper bound exceeded 1 and was clamped.
    pub clamped: bool,
}

impl SandwichBounds {
    fn build(lower: Option<f64>, upper: Option<f64>, tag: LemmaTag, violations: Vec<String>) -> Self {
        let raw_up = upper.unwrap_or(1.0);
        Self {
            lower: lower.unwrap_or(0.0).clamp(0.0, 1.0),
            upper: raw_up.min(1.0),
            lemma_tag: tag,
            applicable: violations.is_empty(),
            violations,
            clamped: upper.is_some_and(|u| u > 1.0),
        }
    }
}

/// Volume of the Euclidean unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    PI.powf(h) / tgamma(h + 1.0)
}

/// Regularized lower incomplete gamma `P(a, x)` for `a` a positive multiple of 1/2.
fn reg_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let pref = |b: f64| (b * x.ln() - x - lgamma(b + 1.0)).exp();
    if x < a + 1.0 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..10_000 {
            term *= x / (a + n as f64);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        return pref(a) * sum;
    }
    let (mut b, mut q) = if (a * 2.0).round() as i64 % 2 == 1 {
        (0.5, erfc(x.sqrt()))
    } else {
        (1.0, (-x).exp())
    };
    while b < a - 0.25 {
        q += pref(b);
        b += 1.0;
    }
    1.0 - q
}

/// `P(|B_s| <= r)` for Brownian motion with coordinate variance `2s`.
pub fn bm_ball_probability(d: usize, s: f64, r: f64) -> f64 {
    let z = r / (4.0 * s).sqrt();
    match d {
        1 => erf(z),
        2 => -(-z * z).exp_m1(),
        3 => erf(z) - 2.0 / PI.sqrt() * z * (-z * z).exp(),
        _ => reg_gamma_p(d as f64 / 2.0, z * z),
    }
}

/// `P_0(|X_t| <= r)`.
pub fn ball_probability(spec: &ProcessSpec, t: f64, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    if spec.alpha == 2.0 {
        return bm_ball_probability(spec.dim, t, r);
    }
    if spec.alpha == 1.0 && spec.dim == 1 {
        return 2.0 / PI * atan(r / t);
    }
    if spec.alpha == 1.0 && spec.dim == 3 {
        let z = r / t;
        return 2.0 / PI * (atan(z) - z / (1.0 + z * z));
    }
    subordinated_ball_probability(spec, t, r)
}

/// `P_0(|X_t| <= r)` by quadrature of the Brownian ball probability against the subordinator law.
fn subordinated_ball_probability(spec: &ProcessSpec, t: f64, r: f64) -> f64 {
    let sub = StableSubordinator { gamma: spec.alpha / 2.0 };
    let c = t.powf(1.0 / sub.gamma);
    let d = spec.dim;
    integrate(
        |l: f64| {
            let s = l.exp();
            let v = bm_ball_probability(d, s, r) * pi_density(&sub, t, s).unwrap_or(0.0) * s;
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        (c.min(r * r) * 1e-10).ln(),
        (c.max(r * r) * 1e30).ln(),
        &[c.ln(), (r * r).ln()],
        QuadOptions::rel(1e-10),
    )
    .value
}

fn occupation_ratio(spec: &ProcessSpec, z: f64) -> f64 {
    ball_probability(spec, 1.0, z) / z.powi(spec.dim as i32).min(1.0)
}

/// Envelope constants of `P_0(|X_t| <= r) ≍ min{1, V(r)/V(φ^{-1}(t))}`,
/// measured over `r / t^{1/α} ∈ [1e-3, 1e3]` together with both limits.
pub fn measure_kernel_bounds(spec: &ProcessSpec) -> Result<KernelBounds> {
    spec.validate()?;
    let d = spec.dim;
    let at_zero = unit_ball_volume(d)
        * if spec.alpha == 2.0 {
            (4.0 * PI).powf(-(d as f64) / 2.0)
        } else {
            subordinated_radial(&StableSubordinator { gamma: spec.alpha / 2.0 }, d, 1.0, 0.0)
        };
    let n = 601;
    let lz: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = lz.iter().map(|&l| occupation_ratio(spec, 10f64.powf(l))).collect();
    let refine = |i: usize, sign: f64| {
        let (mut lo, mut hi) = (lz[i.saturating_sub(1)], lz[(i + 1).min(n - 1)]);
        let f = |l: f64| sign * occupation_ratio(spec, 10f64.powf(l));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        sign * f(0.5 * (lo + hi))
    };
    let argmin = (0..n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let argmax = (0..n).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let l1 = vals[argmin].min(refine(argmin, 1.0)).min(at_zero).min(1.0);
    let l2 = vals[argmax].max(refine(argmax, -1.0)).max(at_zero).max(1.0);
    KernelBounds::new(l1, l2)
}

/// Euclidean instantiation: `V(r) = ω_d r^d`, `φ(r) = r^α`, measured envelope
/// constants, and the resulting ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuclideanModel {
    pub spec: ProcessSpec,
    pub profile: VolumeProfile,
    pub scale: ScaleFunction,
    pub kernel_bounds: KernelBounds,
    pub ledger: ConstantLedger,
}

impl EuclideanModel {
    pub fn new(spec: ProcessSpec) -> Result<Self> {
        let kb = measure_kernel_bounds(&spec)?;
        Self::with_bounds(spec, kb)
    }

    pub fn with_bounds(spec: ProcessSpec, kb: KernelBounds) -> Result<Self> {
        spec.validate()?;
        let profile = VolumeProfile::power_global(spec.dim as f64, unit_ball_volume(spec.dim))?;
        let scale = ScaleFunction::single(spec.alpha)?;
        let rc = comparability(&profile, &scale);
        let ledger = compute_ledger(&profile.exponents, &scale, &kb, rc.as_ref())?;
        Ok(Self {
            spec,
            profile,
            scale,
            kernel_bounds: kb,
            ledger,
        })
    }
}

/// `∫_a^b du / V(0, φ^{-1}(u))`.
pub fn volume_scale_integral(profile: &VolumeProfile, scale: &ScaleFunction, a: f64, b: f64) -> f64 {
    if let (VolumeKind::PowerGlobal { d, prefactor }, true) = (profile.kind, scale.is_single_power()) {
        let e = d / scale.beta1;
        return if (e - 1.0).abs() < 1e-14 {
            (b / a).ln() / prefactor
        } else {
            (a.powf(1.0 - e) - b.powf(1.0 - e)) / ((e - 1.0) * prefactor)
        };
    }
    integrate(
        |l: f64| {
            let u = l.exp();
            u / profile.value(0.0, scale.phi_inv(u))
        },
        a.ln(),
        b.ln(),
        &[0.0],
        QuadOptions::rel(1e-12),
    )
    .value
}

/// `∫_a^b min{1, V(r)/V(φ^{-1}(u))} du`.
pub fn envelope_occupation(profile: &VolumeProfile, scale: &ScaleFunction, a: f64, b: f64, r: f64) -> f64 {
    let knee = scale.phi(r);
    let flat = (b.min(knee) - a).max(0.0);
    let lo = a.max(knee);
    if lo >= b {
        return flat;
    }
    flat + profile.value(0.0, r) * volume_scale_integral(profile, scale, lo, b)
}

/// `∫_a^b P_0(|X_u| <= r) du`.
pub fn exact_occupation(spec: &ProcessSpec, a: f64, b: f64, r: f64) -> f64 {
    let knee = r.powf(spec.alpha);
    let bps: Vec<f64> = [knee].into_iter().filter(|&k| k > a && k < b).collect();
    integrate(|u| ball_probability(spec, u, r), a, b, &bps, QuadOptions::rel(1e-9)).value
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occupation {
    pub envelope_lower: f64,
    pub envelope_upper: f64,
    pub exact: Option<f64>,
}

/// Two-sided envelope values of `∫_a^b P_0(|X_u| <= r) du`, plus the exact value.
pub fn ball_occupation(model: &EuclideanModel, a: f64, b: f64, r: f64) -> Result<Occupation> {
    ensure(a >= 0.0 && b > a && r > 0.0, || {
        Error::Validation(format!("occupation needs 0 <= a < b and r > 0 (a={a}, b={b}, r={r})"))
    })?;
    let e = envelope_occupation(&model.profile, &model.scale, a, b, r);
    Ok(Occupation {
        envelope_lower: model.kernel_bounds.l1 * e,
        envelope_upper: model.kernel_bounds.l2 * e,
        exact: Some(exact_occupation(&model.spec, a, b, r)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupationSource {
    Exact,
    Envelope,
}

/// Ratio bounds built from ball occupation times.
pub fn lemma41_bounds(q: &WindowQuery, model: &EuclideanModel, source: OccupationSource) -> Result<SandwichBounds> {
    q.validate()?;
    let WindowQuery { a, b, c, r } = *q;
    let (num_lo, den_lo, num_up, den_up) = match source {
        OccupationSource::Exact => {
            let s = &model.spec;
            (
                exact_occupation(s, a, b, r),
                2.0 * exact_occupation(s, 0.0, b - a, 2.0 * r),
                exact_occupation(s, a, b + c, 2.0 * r),
                exact_occupation(s, 0.0, c, r),
            )
        }
        OccupationSource::Envelope => {
            let (p, sc, kb) = (&model.profile, &model.scale, &model.kernel_bounds);
            (
                kb.l1 * envelope_occupation(p, sc, a, b, r),
                2.0 * kb.l2 * envelope_occupation(p, sc, 0.0, b - a, 2.0 * r),
                kb.l2 * envelope_occupation(p, sc, a, b + c, 2.0 * r),
                kb.l1 * envelope_occupation(p, sc, 0.0, c, r),
            )
        }
    };
    ensure(den_lo > 0.0 && den_up > 0.0, || Error::Degenerate("zero occupation denominator".into()))?;
    Ok(SandwichBounds::build(Some(num_lo / den_lo), Some(num_up / den_up), LemmaTag::L41, vec![]))
}

/// Unclamped upper bound `K1 V(r)/φ(r) ∫_a^{b+c} du/V(φ^{-1}(u))`; requires `φ(r) <= a ∧ c`.
pub fn lemma42_raw(q: &WindowQuery, ledger: &ConstantLedger, profile: &VolumeProfile, scale: &ScaleFunction) -> Result<f64> {
    q.validate()?;
    let phi_r = scale.phi(q.r);
    ensure(phi_r <= q.a.min(q.c), || {
        Error::Parameter(format!("phi(r) <= min(a, c) violated: phi(r)={phi_r}"))
    })?;
    Ok(ledger.k1 * profile.value(0.0, q.r) / phi_r * volume_scale_integral(profile, scale, q.a, q.b + q.c))
}

pub fn lemma42_upper(q: &WindowQuery, ledger: &ConstantLedger, profile: &VolumeProfile, scale: &ScaleFunction) -> Result<SandwichBounds> {
    q.validate()?;
    Ok(match lemma42_raw(q, ledger, profile, scale) {
        Ok(v) => SandwichBounds::build(None, Some(v), LemmaTag::L42, vec![]),
        Err(Error::Parameter(m)) => SandwichBounds::build(None, None, LemmaTag::L42, vec![m]),
        Err(e) => return Err(e),
    })
}

/// Unclamped lower bound `K2 V(r)/φ(r) ∫_a^b du/V(φ^{-1}(u))`; requires
/// `φ(r) <= a` and `φ(2r) <= b - a`.
pub fn lemma43_raw(a: f64, b: f64, r: f64, ledger: &ConstantLedger, profile: &VolumeProfile, scale: &ScaleFunction) -> Result<f64> {
    let k2 = ledger.k2()?;
    let mut v = Vec::new();
    lemma43_guards(a, b, r, scale, &mut v);
    ensure(v.is_empty(), || Error::Parameter(v.join("; ")))?;
    Ok(k2 * profile.value(0.0, r) / scale.phi(r) * volume_scale_integral(profile, scale, a, b))
}

fn lemma43_guards(a: f64, b: f64, r: f64, scale: &ScaleFunction, out: &mut Vec<String>) {
    if scale.phi(r) > a {
        out.push(format!("phi(r) <= a violated: phi(r)={}", scale.phi(r)));
    }
    if scale.phi(2.0 * r) > b - a {
        out.push(format!("phi(2r) <= b - a violated: phi(2r)={}", scale.phi(2.0 * r)));
    }
}

pub fn lemma43_lower(a: f64, b: f64, r: f64, ledger: &ConstantLedger, profile: &VolumeProfile, scale: &ScaleFunction) -> Result<SandwichBounds> {
    WindowQuery::new(a, b, 1.0, r)?;
    Ok(match lemma43_raw(a, b, r, ledger, profile, scale) {
        Ok(v) => SandwichBounds::build(Some(v), None, LemmaTag::L43, vec![]),
        Err(Error::Parameter(m)) => SandwichBounds::build(None, None, LemmaTag::L43, vec![m]),
        Err(e) => return Err(e),
    })
}

/// `K3 log((b+c)/a) / (1 + log(c/φ(r)))` with `log φ(r)` given directly.
pub fn lemma_a1_upper_raw(q: &WindowQuery, k3: f64, ln_phi_r: f64) -> Result<f64> {
    ensure(ln_phi_r <= q.a.min(q.c).ln(), || {
        Error::Parameter("phi(r) <= min(a, c) violated".into())
    })?;
    Ok(k3 * ((q.b + q.c) / q.a).ln() / (1.0 + q.c.ln() - ln_phi_r))
}

/// `K4 log(b/a) / (1 + log((b-a)/φ(2r)))` with `log φ(r)`, `log φ(2r)` given directly.
pub fn lemma_a1_lower_raw(a: f64, b: f64, k4: f64, ln_phi_r: f64, ln_phi_2r: f64) -> Result<f64> {
    ensure(ln_phi_r <= a.ln() && ln_phi_2r <= (b - a).ln(), || {
        Error::Parameter("phi(r) <= a and phi(2r) <= b - a required".into())
    })?;
    Ok(k4 * (b / a).ln() / (1.0 + (b - a).ln() - ln_phi_2r))
}

/// Both logarithmic bounds of the critical regime; the lower bound is tagged.
pub fn lemma_a1_bounds(q: &WindowQuery, ledger: &ConstantLedger, scale: &ScaleFunction) -> Result<SandwichBounds> {
    q.validate()?;
    let (k3, k4) = (ledger.k3()?, ledger.k4()?);
    let (lp, lp2) = (scale.phi(q.r).ln(), scale.phi(2.0 * q.r).ln());
    let mut violations = Vec::new();
    let upper = match lemma_a1_upper_raw(q, k3, lp) {
        Ok(v) => Some(v),
        Err(Error::Parameter(m)) => {
            violations.push(format!("(i) {m}"));
            None
        }
        Err(e) => return Err(e),
    };
    let lower = match lemma_a1_lower_raw(q.a, q.b, k4, lp, lp2) {
        Ok(v) => Some(v),
        Err(Error::Parameter(m)) => {
            violations.push(format!("(ii) {m}"));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(SandwichBounds::build(lower, upper, LemmaTag::LA1ii, violations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HittingRegime {
    /// Subordinated Brownian motion with `α = 1` in `R^3`.
    Transient,
    /// Cauchy process in `R^1`.
    Critical,
}

impl std::str::FromStr for HittingRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transient" => Ok(Self::Transient),
            "critical" | "recurrent" => Ok(Self::Critical),
            other => Err(Error::Parameter(format!("unknown regime {other:?}"))),
        }
    }
}

impl HittingRegime {
    pub fn spec(self) -> ProcessSpec {
        match self {
            Self::Transient => ProcessSpec { alpha: 1.0, dim: 3 },
            Self::Critical => ProcessSpec { alpha: 1.0, dim: 1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub query: WindowQuery,
    pub lower: f64,
    pub mc: f64,
    pub sigma: f64,
    pub upper: f64,
    pub upper_clamped: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingAudit {
    pub regime: HittingRegime,
    pub ledger: ConstantLedger,
    pub rows: Vec<AuditRow>,
    pub passed: usize,
    pub total: usize,
}

/// Random window with all preconditions of both bounds satisfied (`φ(r) = r`).
fn random_query(rng: &mut ChaCha8Rng) -> WindowQuery {
    let mut lu = |lo: f64, hi: f64| (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp();
    let r = lu(0.1, 1.0);
    let a = r * lu(1.0, 10.0);
    let b = a + 2.0 * r * lu(1.0, 10.0);
    let c = r * lu(1.0, 10.0);
    WindowQuery { a, b, c, r }
}

/// Bounds of one window in the given regime.
pub fn regime_bounds(regime: HittingRegime, model: &EuclideanModel, q: &WindowQuery) -> Result<(SandwichBounds, SandwichBounds)> {
    match regime {
        HittingRegime::Transient => Ok((
            lemma43_lower(q.a, q.b, q.r, &model.ledger, &model.profile, &model.scale)?,
            lemma42_upper(q, &model.ledger, &model.profile, &model.scale)?,
        )),
        HittingRegime::Critical => {
            let s = lemma_a1_bounds(q, &model.ledger, &model.scale)?;
            Ok((s.clone(), s))
        }
    }
}

/// Monte Carlo estimates of random applicable windows against the lemma bounds,
/// with `3σ` slack on both sides.
pub fn hitting_audit(regime: HittingRegime, n_queries: usize, seed: u64, n_paths: usize, opts: &EngineOptions) -> Result<HittingAudit> {
    let model = EuclideanModel::new(regime.spec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let q = random_query(&mut rng);
        let (lo, up) = regime_bounds(regime, &model, &q)?;
        ensure(lo.applicable && up.applicable, || {
            Error::Validation(format!("generated window {q:?} is not applicable"))
        })?;
        let est = estimate_hitting_with(&model.spec, q.a, q.b, q.r, n_paths, seed.wrapping_add(1 + i as u64), opts)?;
        let slack = 3.0 * est.sigma;
        let pass = est.p_hat >= lo.lower - slack && est.p_hat <= up.upper + slack;
        rows.push(AuditRow {
            query: q,
            lower: lo.lower,
            mc: est.p_hat,
            sigma: est.sigma,
            upper: up.upper,
            upper_clamped: up.clamped,
            pass,
        });
    }
    let passed = rows.iter().filter(|r| r.pass).count();
    Ok(HittingAudit {
        regime,
        ledger: model.ledger,
        rows,
        passed,
        total: n_queries,
    })
}
