//! Stable subordination: the one-sided γ-stable density, subordinated heat
//! kernels, jump intensities, and the comparability audit against the
//! two-sided envelope `min{1/V(φ^{-1}(t)), t/(V(r)φ(r))}`.

use std::f64::consts::PI;

use libm::{lgamma, tgamma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{ScaleFunction, VolumeProfile};
use crate::quad::{integrate, QuadOptions};

/// One-sided stable subordinator with Laplace exponent `λ^γ` and no drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableSubordinator {
    pub gamma: f64,
}

impl StableSubordinator {
    pub fn new(gamma: f64) -> Result<Self> {
        ensure(gamma > 0.0 && gamma < 1.0, || {
            Error::Domain(format!("stable index must lie in (0,1), got {gamma}"))
        })?;
        Ok(Self { gamma })
    }

    pub fn laplace_exponent(&self, lambda: f64) -> f64 {
        lambda.powf(self.gamma)
    }

    /// Lévy density `γ / Γ(1-γ) · s^{-1-γ}`.
    pub fn levy_density(&self, s: f64) -> f64 {
        self.gamma / tgamma(1.0 - self.gamma) * s.powf(-1.0 - self.gamma)
    }

    fn is_half(&self) -> bool {
        self.gamma == 0.5
    }
}

/// Two-regime sub-Gaussian heat kernel envelope on a space with volume
/// profile `profile`; the small-time regime applies for `t <= 1 ∨ d(x,y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubGaussianEnvelope {
    pub beta1: f64,
    pub beta2: f64,
    /// Prefactors of the (lower, upper) envelopes in the small-time regime.
    pub prefactor_small: (f64, f64),
    pub prefactor_large: (f64, f64),
    /// Exponential rates of the (lower, upper) envelopes; the lower envelope
    /// carries the larger rate.
    pub rate_small: (f64, f64),
    pub rate_large: (f64, f64),
    pub profile: VolumeProfile,
}

impl SubGaussianEnvelope {
    pub fn validate(&self) -> Result<()> {
        ensure(self.beta1 >= 2.0 && self.beta2 >= 2.0, || {
            Error::Validation("sub-Gaussian walk dimensions must be >= 2".into())
        })?;
        for (lo, hi) in [self.prefactor_small, self.prefactor_large] {
            ensure(lo > 0.0 && hi >= lo, || {
                Error::Validation("envelope prefactors need 0 < lower <= upper".into())
            })?;
        }
        for (lo, hi) in [self.rate_small, self.rate_large] {
            ensure(hi > 0.0 && lo >= hi, || {
                Error::Validation("envelope rates need lower-rate >= upper-rate > 0".into())
            })?;
        }
        Ok(())
    }

    /// `(lower, upper)` envelope values of `p(s, x, y)` at `|x| = x_norm`, `d(x,y) = r`.
    pub fn envelope(&self, s: f64, r: f64, x_norm: f64) -> (f64, f64) {
        let small = s <= 1f64.max(r);
        let (beta, (clo, chi), (klo, khi)) = if small {
            (self.beta1, self.prefactor_small, self.rate_small)
        } else {
            (self.beta2, self.prefactor_large, self.rate_large)
        };
        let v = self.profile.value(x_norm, s.powf(1.0 / beta));
        let z = (r.powf(beta) / s).powf(1.0 / (beta - 1.0));
        (clo / v * (-klo * z).exp(), chi / v * (-khi * z).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DiffusionKernel {
    /// `(4πt)^{-d/2} exp(-|x-y|^2 / (4t))`.
    GaussianEuclidean { d: usize },
    SubGaussianEnvelope(Box<SubGaussianEnvelope>),
}

/// `(4πs)^{-d/2} exp(-r^2/(4s))`.
pub fn gaussian_kernel(d: usize, s: f64, r: f64) -> f64 {
    (4.0 * PI * s).powf(-(d as f64) / 2.0) * (-r * r / (4.0 * s)).exp()
}

fn ln_sin(x: f64) -> f64 {
    x.sin().ln()
}

/// Log of the Zolotarev function `a(u) = sin(γu)^{γ/(1-γ)} sin((1-γ)u) / sin(u)^{1/(1-γ)}`.
fn ln_zolotarev(g: f64, u: f64) -> f64 {
    g / (1.0 - g) * ln_sin(g * u) + ln_sin((1.0 - g) * u) - ln_sin(u) / (1.0 - g)
}

/// Large-argument series `π_1(x) = (1/π) Σ (-1)^{k+1} Γ(kγ+1)/k! sin(kπγ) x^{-kγ-1}`.
pub fn pi1_series(g: f64, x: f64) -> f64 {
    let lx = x.ln();
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let mag = (lgamma(kf * g + 1.0) - lgamma(kf + 1.0) - (kf * g + 1.0) * lx).exp();
        let term = mag * (kf * PI * g).sin() * if k % 2 == 1 { 1.0 } else { -1.0 };
        sum += term;
        if mag < 1e-18 * sum.abs() {
            break;
        }
    }
    sum / PI
}

/// Tail mass `∫_S^∞ π_1` from the termwise-integrated series.
pub fn pi1_tail_series(g: f64, s: f64) -> f64 {
    let ls = s.ln();
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let mag = (lgamma(kf * g) - lgamma(kf + 1.0) - kf * g * ls).exp();
        sum += mag * (kf * PI * g).sin() * if k % 2 == 1 { 1.0 } else { -1.0 };
        if mag < 1e-18 * sum.abs() {
            break;
        }
    }
    sum / PI
}

/// Kanter's single-integral representation of `π_1(x)`.
pub fn pi1_integral(g: f64, x: f64) -> f64 {
    let ly = -g / (1.0 - g) * x.ln();
    let target = -ly;
    // a(u) increases from a(0+) to infinity; locate where a(u) y = 1.
    let (mut lo, mut hi) = (1e-12, PI - 1e-12);
    let u_star = if ln_zolotarev(g, lo) >= target {
        0.0
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ln_zolotarev(g, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut bps = vec![u_star];
    for k in 1..=12 {
        let w = (PI - u_star) * 10f64.powi(-k);
        bps.push(PI - w);
        bps.push(u_star + w);
        if u_star > 0.0 {
            bps.push(u_star - u_star.min(w));
        }
    }
    let y = ly.exp();
    let h = |u: f64| {
        if u <= 0.0 || u >= PI {
            return 0.0;
        }
        let la = ln_zolotarev(g, u);
        let v = (la - la.exp() * y).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let r = integrate(h, 0.0, PI, &bps, QuadOptions::rel(1e-12));
    (g / (1.0 - g)) / PI * (-(x.ln()) / (1.0 - g)).exp() * r.value
}

fn pi1(g: f64, x: f64) -> f64 {
    if g == 0.5 {
        return 1.0 / (2.0 * PI.sqrt()) * x.powf(-1.5) * (-0.25 / x).exp();
    }
    if x.powf(-g) <= 0.1 {
        pi1_series(g, x)
    } else {
        pi1_integral(g, x)
    }
}

/// Density `π_t(s)` of the subordinator at time `t`.
pub fn pi_density(sub: &StableSubordinator, t: f64, s: f64) -> Result<f64> {
    StableSubordinator::new(sub.gamma)?;
    ensure(t > 0.0 && s > 0.0 && t.is_finite() && s.is_finite(), || {
        Error::Domain(format!("pi_density needs t > 0 and s > 0, got t={t}, s={s}"))
    })?;
    Ok(pi_unchecked(sub, t, s))
}

fn pi_unchecked(sub: &StableSubordinator, t: f64, s: f64) -> f64 {
    if sub.is_half() {
        return t / (2.0 * PI.sqrt()) * s.powf(-1.5) * (-t * t / (4.0 * s)).exp();
    }
    let scale = t.powf(1.0 / sub.gamma);
    pi1(sub.gamma, s / scale) / scale
}

/// `∫_0^∞ e^{-λ s} π_t(s) ds` by quadrature in `log s`.
pub fn pi_laplace(sub: &StableSubordinator, t: f64, lambda: f64) -> f64 {
    let c = t.powf(1.0 / sub.gamma);
    let lo = (c * 1e-10).ln();
    let hi = (c.max(1.0 / lambda) * 1e3 / lambda.min(1.0)).ln().max(c.ln() + 5.0);
    integrate(
        |l: f64| {
            let s = l.exp();
            (-lambda * s).exp() * pi_unchecked(sub, t, s) * s
        },
        lo,
        hi + 60f64.ln(),
        &[c.ln(), (1.0 / lambda).ln()],
        QuadOptions::rel(1e-13),
    )
    .value
}

/// `∫_0^∞ π_t(s) ds`, with the tail beyond `1e12 t^{1/γ}` from the series.
pub fn pi_mass(sub: &StableSubordinator, t: f64) -> f64 {
    let c = t.powf(1.0 / sub.gamma);
    let big = 1e12;
    let body = integrate(
        |l: f64| {
            let s = l.exp();
            pi_unchecked(sub, t, s) * s
        },
        (c * 1e-10).ln(),
        (c * big).ln(),
        &[c.ln()],
        QuadOptions::rel(1e-13),
    )
    .value;
    let tail = if sub.is_half() {
        libm::erf(0.5 / big.sqrt())
    } else {
        pi1_tail_series(sub.gamma, big)
    };
    body + tail
}

fn require_gaussian(dk: &DiffusionKernel) -> Result<usize> {
    match dk {
        DiffusionKernel::GaussianEuclidean { d } => {
            ensure(*d >= 1, || Error::Validation("dimension must be >= 1".into()))?;
            Ok(*d)
        }
        DiffusionKernel::SubGaussianEnvelope(_) => Err(Error::Unsupported(
            "the sub-Gaussian envelope kind only supports envelope-integral bounds".into(),
        )),
    }
}

fn distance(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure(x.len() == y.len(), || {
        Error::Domain(format!("points of different dimension ({} vs {})", x.len(), y.len()))
    })?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `q(t, r) = ∫_0^∞ p(s, r) π_t(s) ds` for the Gaussian kernel in dimension `d`.
pub fn subordinated_radial(sub: &StableSubordinator, d: usize, t: f64, r: f64) -> f64 {
    let c = t.powf(1.0 / sub.gamma);
    let r2 = r * r;
    let lo = (c * 1e-8).ln();
    let hi = (c.max(r2) * 1e40).ln();
    let mut bps = vec![c.ln()];
    if r2 > 0.0 {
        bps.push(r2.ln());
    }
    integrate(
        |l: f64| {
            let s = l.exp();
            let v = gaussian_kernel(d, s, r) * pi_unchecked(sub, t, s) * s;
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        lo,
        hi,
        &bps,
        QuadOptions::rel(1e-12),
    )
    .value
}

/// Subordinated heat kernel `q(t, x, y)`.
pub fn subordinated_kernel(
    sub: &StableSubordinator,
    dk: &DiffusionKernel,
    t: f64,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    StableSubordinator::new(sub.gamma)?;
    let d = require_gaussian(dk)?;
    ensure(t > 0.0 && t.is_finite(), || Error::Domain(format!("t must be positive, got {t}")))?;
    let r = distance(x, y)?;
    Ok(subordinated_radial(sub, d, t, r))
}

/// Rotationally invariant `2γ`-stable kernel in closed form (Poisson kernel for `γ = 1/2`).
pub fn poisson_kernel(d: usize, t: f64, r: f64) -> f64 {
    let h = (d as f64 + 1.0) / 2.0;
    tgamma(h) / PI.powf(h) * t / (t * t + r * r).powf(h)
}

/// Closed-form jump kernel `γ 4^γ Γ(d/2+γ) / (Γ(1-γ) π^{d/2}) r^{-d-2γ}`.
pub fn stable_jump_density(gamma: f64, d: usize, r: f64) -> f64 {
    let dh = d as f64 / 2.0;
    gamma * 4f64.powf(gamma) * tgamma(dh + gamma) / (tgamma(1.0 - gamma) * PI.powf(dh)) * r.powf(-(d as f64) - 2.0 * gamma)
}

/// `∫_0^∞ p(s, x, y) ν(ds)`.
pub fn jump_intensity(sub: &StableSubordinator, dk: &DiffusionKernel, x: &[f64], y: &[f64]) -> Result<f64> {
    StableSubordinator::new(sub.gamma)?;
    let d = require_gaussian(dk)?;
    let r = distance(x, y)?;
    ensure(r > 0.0, || Error::Degenerate("jump intensity is singular at x = y".into()))?;
    let g = sub.gamma;
    let df = d as f64;
    let nu = g / tgamma(1.0 - g);
    // In u = s / r^2 the integrand does not depend on r.
    let big_u: f64 = 1e40;
    let body = integrate(
        |l: f64| {
            let u = l.exp();
            gaussian_kernel(d, u, 1.0) * nu * u.powf(-1.0 - g) * u
        },
        (1e-4f64).ln(),
        big_u.ln(),
        &[(0.25f64).ln()],
        QuadOptions::rel(1e-13),
    )
    .value;
    let e = df / 2.0 + g;
    let tail = (4.0 * PI).powf(-df / 2.0) * nu * big_u.powf(-e) / e;
    Ok((body + tail) * r.powf(-df - 2.0 * g))
}

/// Envelope-integral bounds `(∫ p_lower π_t, ∫ p_upper π_t)` for the sub-Gaussian kind.
pub fn envelope_integral_bounds(
    sub: &StableSubordinator,
    env: &SubGaussianEnvelope,
    t: f64,
    r: f64,
    x_norm: f64,
) -> Result<(f64, f64)> {
    StableSubordinator::new(sub.gamma)?;
    env.validate()?;
    ensure(t > 0.0 && r >= 0.0, || Error::Domain("need t > 0 and r >= 0".into()))?;
    let c = t.powf(1.0 / sub.gamma);
    let mut bps = vec![c.ln(), 1f64.max(r).ln()];
    if r > 0.0 {
        bps.push(env.beta1 * r.ln());
        bps.push(env.beta2 * r.ln());
    }
    let span = c.max(r.powf(env.beta1.max(env.beta2))).max(1.0);
    let (lo, hi) = ((c.min(1.0) * 1e-10).ln(), (span * 1e40).ln());
    let opts = QuadOptions::rel(1e-10);
    let side = |upper: bool| {
        integrate(
            |l: f64| {
                let s = l.exp();
                let (a, b) = env.envelope(s, r, x_norm);
                let v = if upper { b } else { a } * pi_unchecked(sub, t, s) * s;
                if v.is_finite() {
                    v
                } else {
                    0.0
                }
            },
            lo,
            hi,
            &bps,
            opts,
        )
        .value
    };
    Ok((side(false), side(true)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub t: f64,
    pub r: f64,
    pub q: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeAudit {
    pub rows: Vec<EnvelopeRow>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub spread: f64,
}

/// `min{1/V(φ^{-1}(t)), t/(V(r)φ(r))}` at a center of norm `x_norm`.
pub fn heat_envelope(profile: &VolumeProfile, scale: &ScaleFunction, t: f64, r: f64, x_norm: f64) -> f64 {
    let on = 1.0 / profile.value(x_norm, scale.phi_inv(t));
    if r <= 0.0 {
        return on;
    }
    on.min(t / (profile.value(x_norm, r) * scale.phi(r)))
}

/// Ratios `q(t,r) / envelope(t,r)` over a grid of `(t, r)` pairs.
pub fn envelope_ratio_audit(
    sub: &StableSubordinator,
    dk: &DiffusionKernel,
    profile: &VolumeProfile,
    scale: &ScaleFunction,
    grid: &[(f64, f64)],
) -> Result<EnvelopeAudit> {
    StableSubordinator::new(sub.gamma)?;
    let d = require_gaussian(dk)?;
    ensure(!grid.is_empty(), || Error::Validation("envelope audit grid is empty".into()))?;
    let two_g = 2.0 * sub.gamma;
    ensure(
        (scale.beta1 - two_g).abs() < 1e-12 && (scale.beta2 - two_g).abs() < 1e-12,
        || Error::Validation(format!("scale must be the single power r^{two_g}")),
    )?;
    let mut rows = Vec::with_capacity(grid.len());
    for &(t, r) in grid {
        ensure(t > 0.0 && r >= 0.0, || Error::Domain(format!("grid point ({t}, {r}) invalid")))?;
        let q = subordinated_radial(sub, d, t, r);
        let envelope = heat_envelope(profile, scale, t, r, 0.0);
        rows.push(EnvelopeRow {
            t,
            r,
            q,
            envelope,
            ratio: q / envelope,
        });
    }
    let min_ratio = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(EnvelopeAudit {
        rows,
        min_ratio,
        max_ratio,
        spread: max_ratio / min_ratio,
    })
}

/// Log-spaced `n × n` grid over `[t_lo, t_hi] × [r_lo, r_hi]`.
pub fn log_grid(n: usize, t: (f64, f64), r: (f64, f64)) -> Vec<(f64, f64)> {
    let pts = |(lo, hi): (f64, f64)| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                (lo.ln() + f * (hi.ln() - lo.ln())).exp()
            })
            .collect()
    };
    let (ts, rs) = (pts(t), pts(r));
    ts.iter().flat_map(|&t| rs.iter().map(move |&r| (t, r))).collect()
}
