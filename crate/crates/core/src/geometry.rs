//! Volume profiles `V(x, r)` and scale functions `φ(r)`, with audits of the
//! doubling and growth inequalities they are declared to satisfy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Two-sided power control of `V(x,R)/V(x,r)`:
/// `c1 (R/r)^d1 <= V(x,R)/V(x,r) <= c2 (R/r)^d2` for `0 < r < R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoublingExponents {
    pub c1: f64,
    pub c2: f64,
    pub d1: f64,
    pub d2: f64,
}

impl DoublingExponents {
    pub fn new(c1: f64, c2: f64, d1: f64, d2: f64) -> Result<Self> {
        let e = Self { c1, c2, d1, d2 };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.c1 > 0.0 && self.c1 <= 1.0, || {
            Error::Validation(format!("c1 must lie in (0,1], got {}", self.c1))
        })?;
        ensure(self.c2 >= 1.0 && self.c2.is_finite(), || {
            Error::Validation(format!("c2 must lie in [1,inf), got {}", self.c2))
        })?;
        ensure(self.d1 > 0.0, || {
            Error::Validation(format!("d1 must be positive, got {}", self.d1))
        })?;
        ensure(self.d2 >= self.d1 && self.d2.is_finite(), || {
            Error::Validation(format!("d2 >= d1 required, got d1={} d2={}", self.d1, self.d2))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VolumeKind {
    /// `V(x,r) = prefactor · r^d`.
    PowerGlobal { d: f64, prefactor: f64 },
    /// `prefactor · r^alpha1` below radius 1 and `prefactor · r^alpha2` above.
    TwoRegime {
        alpha1: f64,
        alpha2: f64,
        prefactor: f64,
    },
    /// `r^d (1 + r + |x|)^{2 alpha}`.
    Weighted { d: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeProfile {
    pub kind: VolumeKind,
    pub exponents: DoublingExponents,
}

impl VolumeProfile {
    pub fn power_global(d: f64, prefactor: f64) -> Result<Self> {
        ensure(d > 0.0 && prefactor > 0.0, || {
            Error::Validation(format!("PowerGlobal needs d>0 and prefactor>0 (d={d}, prefactor={prefactor})"))
        })?;
        Ok(Self {
            kind: VolumeKind::PowerGlobal { d, prefactor },
            exponents: DoublingExponents::new(1.0, 1.0, d, d)?,
        })
    }

    pub fn two_regime(alpha1: f64, alpha2: f64, prefactor: f64) -> Result<Self> {
        ensure(alpha1 > 0.0 && alpha2 > 0.0 && prefactor > 0.0, || {
            Error::Validation("TwoRegime needs positive exponents and prefactor".into())
        })?;
        Ok(Self {
            kind: VolumeKind::TwoRegime {
                alpha1,
                alpha2,
                prefactor,
            },
            exponents: DoublingExponents::new(1.0, 1.0, alpha1.min(alpha2), alpha1.max(alpha2))?,
        })
    }

    pub fn weighted(d: f64, alpha: f64) -> Result<Self> {
        ensure(d > 0.0, || Error::Validation(format!("Weighted needs d>0, got {d}")))?;
        ensure(alpha > -d / 2.0, || {
            Error::Validation(format!("Weighted needs alpha > -d/2 (d={d}, alpha={alpha})"))
        })?;
        // The bracket ((1+R+|x|)/(1+r+|x|))^{2 alpha} lies between 1 and (R/r)^{2 alpha}.
        let (d1, d2) = if alpha >= 0.0 {
            (d, d + 2.0 * alpha)
        } else {
            (d + 2.0 * alpha, d)
        };
        Ok(Self {
            kind: VolumeKind::Weighted { d, alpha },
            exponents: DoublingExponents::new(1.0, 1.0, d1, d2)?,
        })
    }

    /// Replace the auto-derived constants with declared ones (audits then check them).
    pub fn with_exponents(mut self, exponents: DoublingExponents) -> Result<Self> {
        exponents.validate()?;
        self.exponents = exponents;
        Ok(self)
    }

    /// Value at a center of Euclidean norm `x_norm`; no argument checks.
    pub fn value(&self, x_norm: f64, r: f64) -> f64 {
        match self.kind {
            VolumeKind::PowerGlobal { d, prefactor } => prefactor * r.powf(d),
            VolumeKind::TwoRegime {
                alpha1,
                alpha2,
                prefactor,
            } => {
                if r < 1.0 {
                    prefactor * r.powf(alpha1)
                } else {
                    prefactor * r.powf(alpha2)
                }
            }
            VolumeKind::Weighted { d, alpha } => {
                r.powf(d) * (1.0 + r + x_norm).powf(2.0 * alpha)
            }
        }
    }

    /// Growth exponent of `r ↦ V(x,r)` as `r → ∞`.
    pub fn large_radius_exponent(&self) -> f64 {
        match self.kind {
            VolumeKind::PowerGlobal { d, .. } => d,
            VolumeKind::TwoRegime { alpha2, .. } => alpha2,
            VolumeKind::Weighted { d, alpha } => d + 2.0 * alpha,
        }
    }

    /// Growth exponent of `r ↦ V(x,r)` as `r → 0`.
    pub fn small_radius_exponent(&self) -> f64 {
        match self.kind {
            VolumeKind::PowerGlobal { d, .. } => d,
            VolumeKind::TwoRegime { alpha1, .. } => alpha1,
            VolumeKind::Weighted { d, .. } => d,
        }
    }

    /// Whether `V(x,r)` depends on the center.
    pub fn is_center_free(&self) -> bool {
        !matches!(self.kind, VolumeKind::Weighted { .. })
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn eval_volume(profile: &VolumeProfile, x: &[f64], r: f64) -> Result<f64> {
    ensure(r > 0.0 && r.is_finite(), || {
        Error::Domain(format!("volume radius must be positive and finite, got {r}"))
    })?;
    Ok(profile.value(norm(x), r))
}

/// Growth constants of the scale function:
/// `c3 (R/r)^d3 <= φ(R)/φ(r) <= c4 (R/r)^d4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthExponents {
    pub c3: f64,
    pub c4: f64,
    pub d3: f64,
    pub d4: f64,
}

impl GrowthExponents {
    pub fn validate(&self) -> Result<()> {
        ensure(self.c3 > 0.0 && self.c3 <= 1.0, || {
            Error::Validation(format!("c3 must lie in (0,1], got {}", self.c3))
        })?;
        ensure(self.c4 >= 1.0 && self.c4.is_finite(), || {
            Error::Validation(format!("c4 must lie in [1,inf), got {}", self.c4))
        })?;
        ensure(self.d3 > 0.0 && self.d4 >= self.d3 && self.d4.is_finite(), || {
            Error::Validation(format!("need 0 < d3 <= d4, got d3={} d4={}", self.d3, self.d4))
        })
    }
}

/// `φ(r) = r^beta1` for `r < 1` and `r^beta2` for `r >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFunction {
    pub beta1: f64,
    pub beta2: f64,
    pub growth: GrowthExponents,
}

impl ScaleFunction {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        ensure(beta1 > 0.0 && beta2 > 0.0 && beta1.is_finite() && beta2.is_finite(), || {
            Error::Validation(format!("scale exponents must be positive, got {beta1}, {beta2}"))
        })?;
        Ok(Self {
            beta1,
            beta2,
            growth: GrowthExponents {
                c3: 1.0,
                c4: 1.0,
                d3: beta1.min(beta2),
                d4: beta1.max(beta2),
            },
        })
    }

    pub fn single(beta: f64) -> Result<Self> {
        Self::new(beta, beta)
    }

    pub fn with_growth(mut self, growth: GrowthExponents) -> Result<Self> {
        growth.validate()?;
        self.growth = growth;
        Ok(self)
    }

    /// `φ(r)` without argument checks.
    pub fn phi(&self, r: f64) -> f64 {
        if r <= 0.0 {
            0.0
        } else if r < 1.0 {
            r.powf(self.beta1)
        } else {
            r.powf(self.beta2)
        }
    }

    /// `φ^{-1}(t)` without argument checks.
    pub fn phi_inv(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t < 1.0 {
            t.powf(1.0 / self.beta1)
        } else {
            t.powf(1.0 / self.beta2)
        }
    }

    pub fn is_single_power(&self) -> bool {
        self.beta1 == self.beta2
    }
}

pub fn eval_phi(scale: &ScaleFunction, r: f64) -> Result<f64> {
    ensure(r >= 0.0 && r.is_finite(), || {
        Error::Domain(format!("phi argument must be nonnegative, got {r}"))
    })?;
    Ok(scale.phi(r))
}

pub fn eval_phi_inv(scale: &ScaleFunction, t: f64) -> Result<f64> {
    ensure(t >= 0.0 && t.is_finite(), || {
        Error::Domain(format!("phi inverse argument must be nonnegative, got {t}"))
    })?;
    Ok(scale.phi_inv(t))
}

/// Sampling box for the audits; radii are drawn log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRange {
    pub r_min: f64,
    pub r_max: f64,
    /// Largest center norm drawn for center-dependent profiles.
    pub x_max: f64,
}

impl Default for AuditRange {
    fn default() -> Self {
        Self {
            r_min: 1e-6,
            r_max: 1e6,
            x_max: 1e3,
        }
    }
}

/// Outcome of a sampled inequality audit.
///
/// `min_lower_margin` is the smallest observed `ratio / lower_bound` and
/// `max_upper_margin` the largest observed `ratio / upper_bound`; the audit
/// passes when the former is `>= 1` and the latter `<= 1` (up to rounding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub samples: usize,
    pub min_lower_margin: f64,
    pub max_upper_margin: f64,
    pub violations: usize,
    /// The (r, R) pair realising the worst margin, if any violation occurred.
    pub worst_pair: Option<(f64, f64)>,
    pub inverse: Option<Box<AuditReport>>,
}

const AUDIT_SLACK: f64 = 1e-9;

struct Tally {
    min_lower: f64,
    max_upper: f64,
    violations: usize,
    worst: Option<(f64, f64)>,
    worst_excess: f64,
    samples: usize,
}

impl Tally {
    fn new() -> Self {
        Self {
            min_lower: f64::INFINITY,
            max_upper: 0.0,
            violations: 0,
            worst: None,
            worst_excess: 0.0,
            samples: 0,
        }
    }

    fn record(&mut self, lower_margin: f64, upper_margin: f64, pair: (f64, f64)) {
        self.samples += 1;
        self.min_lower = self.min_lower.min(lower_margin);
        self.max_upper = self.max_upper.max(upper_margin);
        let excess = (1.0 - lower_margin).max(upper_margin - 1.0);
        if excess > AUDIT_SLACK {
            self.violations += 1;
            if excess > self.worst_excess {
                self.worst_excess = excess;
                self.worst = Some(pair);
            }
        }
    }

    fn report(self) -> AuditReport {
        AuditReport {
            passed: self.violations == 0,
            samples: self.samples,
            min_lower_margin: self.min_lower,
            max_upper_margin: self.max_upper,
            violations: self.violations,
            worst_pair: self.worst,
            inverse: None,
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    (a + (b - a) * rng.random::<f64>()).exp()
}

fn ordered_pair(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (f64, f64) {
    loop {
        let u = log_uniform(rng, lo, hi);
        let v = log_uniform(rng, lo, hi);
        if u < v {
            return (u, v);
        } else if v < u {
            return (v, u);
        }
    }
}

fn check_count(sample_count: usize) -> Result<()> {
    ensure(sample_count >= 1, || {
        Error::Validation("audit needs at least one sample".into())
    })
}

pub fn audit_doubling(profile: &VolumeProfile, sample_count: usize, seed: u64) -> Result<AuditReport> {
    audit_doubling_in(profile, sample_count, seed, &AuditRange::default())
}

pub fn audit_doubling_in(
    profile: &VolumeProfile,
    sample_count: usize,
    seed: u64,
    range: &AuditRange,
) -> Result<AuditReport> {
    check_count(sample_count)?;
    let e = profile.exponents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    for _ in 0..sample_count {
        let x = if profile.is_center_free() {
            0.0
        } else {
            rng.random::<f64>() * range.x_max
        };
        let (r, big_r) = ordered_pair(&mut rng, range.r_min, range.r_max);
        let ratio = profile.value(x, big_r) / profile.value(x, r);
        let q = big_r / r;
        tally.record(
            ratio / (e.c1 * q.powf(e.d1)),
            ratio / (e.c2 * q.powf(e.d2)),
            (r, big_r),
        );
    }
    Ok(tally.report())
}

pub fn audit_scale(scale: &ScaleFunction, sample_count: usize, seed: u64) -> Result<AuditReport> {
    audit_scale_in(scale, sample_count, seed, &AuditRange::default())
}

/// Checks the growth bounds of `φ` on sampled radius pairs and the implied
/// bounds for `φ^{-1}` on sampled time pairs.
pub fn audit_scale_in(
    scale: &ScaleFunction,
    sample_count: usize,
    seed: u64,
    range: &AuditRange,
) -> Result<AuditReport> {
    check_count(sample_count)?;
    let g = scale.growth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward = Tally::new();
    let mut inverse = Tally::new();
    let (t_lo, t_hi) = (scale.phi(range.r_min), scale.phi(range.r_max));
    for _ in 0..sample_count {
        let (r, big_r) = ordered_pair(&mut rng, range.r_min, range.r_max);
        let ratio = scale.phi(big_r) / scale.phi(r);
        let q = big_r / r;
        forward.record(
            ratio / (g.c3 * q.powf(g.d3)),
            ratio / (g.c4 * q.powf(g.d4)),
            (r, big_r),
        );

        let (t, big_t) = ordered_pair(&mut rng, t_lo, t_hi);
        let inv_ratio = scale.phi_inv(big_t) / scale.phi_inv(t);
        let qt = big_t / t;
        let lower = g.c4.powf(-1.0 / g.d4) * qt.powf(1.0 / g.d4);
        let upper = g.c3.powf(-1.0 / g.d3) * qt.powf(1.0 / g.d3);
        inverse.record(inv_ratio / lower, inv_ratio / upper, (t, big_t));
    }
    let inv = inverse.report();
    let mut report = forward.report();
    report.passed = report.passed && inv.passed;
    report.inverse = Some(Box::new(inv));
    Ok(report)
}
