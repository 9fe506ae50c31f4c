//! Monte Carlo estimation of bottom-crossing and window-hitting probabilities
//! for isotropic stable processes started at the origin.
//!
//! Brownian paths in dimensions 1 and 3 are checked between grid points with
//! the exact bridge crossing probability of the ball. Jump paths take
//! substeps proportional to the distance to the ball raised to `α`, with the
//! position stored as a log-radius and a unit direction so that arbitrarily
//! small radii stay representable. Cauchy substeps are further refined by
//! exact bridge midpoints; other jump processes add a landing compensator.

use std::f64::consts::PI;

use libm::tgamma;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::hitting_bounds::{lemma42_raw, unit_ball_volume, EuclideanModel, WindowQuery};
use crate::rate::LowerRateCandidate;
use crate::report::ext_f64;
use crate::stats::{binomial_sigma, wilson_interval, Z95};

/// Isotropic `α`-stable process on `R^d`; `α = 2` is Brownian motion with
/// coordinate variance `2t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub alpha: f64,
    pub dim: usize,
}

impl ProcessSpec {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        let s = Self { alpha, dim };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.alpha > 0.0 && self.alpha <= 2.0, || {
            Error::Validation(format!("stability index must lie in (0,2], got {}", self.alpha))
        })?;
        ensure(self.dim >= 1, || Error::Validation("dimension must be >= 1".into()))
    }

    pub fn is_transient(&self) -> bool {
        self.dim as f64 > self.alpha
    }

    pub fn is_critical(&self) -> bool {
        self.dim as f64 == self.alpha
    }

    fn bridged(&self) -> bool {
        self.alpha == 2.0 && (self.dim == 1 || self.dim == 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationPlan {
    pub t_start: f64,
    pub t_max: f64,
    pub grid_ratio: f64,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl SimulationPlan {
    /// Defaults: `t_max = 100 t_start`, ratio 1.02, no antithetics.
    pub fn new(t_start: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            t_start,
            t_max: 100.0 * t_start,
            grid_ratio: 1.02,
            n_paths,
            seed,
            antithetic: false,
        }
    }

    pub fn with_t_max(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn with_grid_ratio(mut self, ratio: f64) -> Self {
        self.grid_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.t_start > 0.0 && self.t_start.is_finite(), || {
            Error::Validation(format!("t_start must be positive, got {}", self.t_start))
        })?;
        ensure(self.t_max > self.t_start && self.t_max.is_finite(), || {
            Error::Validation(format!("t_max must exceed t_start, got {} <= {}", self.t_max, self.t_start))
        })?;
        ensure(self.grid_ratio > 1.0 && self.grid_ratio.is_finite(), || {
            Error::Validation(format!("grid_ratio must exceed 1, got {}", self.grid_ratio))
        })?;
        ensure(self.n_paths >= 1, || Error::Validation("n_paths must be >= 1".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detection {
    /// Bridge tests for Brownian motion in dimensions 1 and 3, adaptive
    /// substeps for jump processes, grid points otherwise.
    Auto,
    /// Only the geometric grid points are checked.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub detection: Detection,
    /// Substep `h = substep · |x|^α` for jump processes.
    pub substep: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            detection: Detection::Auto,
            substep: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub t_start: f64,
    /// Last simulated time; the grid is extended to the first point at or past `t_max`.
    pub t_horizon: f64,
    pub q_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(with = "ext_f64")]
    pub truncation_bound: f64,
    pub truncation_unbounded: bool,
    pub n_paths: u64,
    pub n_hits: u64,
}

impl CrossingEstimate {
    fn from_counts(t_start: f64, t_horizon: f64, hits: u64, n: u64, trunc: Truncation) -> Self {
        let (ci_low, ci_high) = wilson_interval(hits, n, Z95);
        let (truncation_bound, truncation_unbounded) = match trunc {
            Truncation::Bounded(v) => (v, false),
            Truncation::Unbounded => (f64::INFINITY, true),
        };
        Self {
            t_start,
            t_horizon,
            q_hat: hits as f64 / n as f64,
            ci_low,
            ci_high,
            truncation_bound,
            truncation_unbounded,
            n_paths: n,
            n_hits: hits,
        }
    }

    pub fn sigma(&self) -> f64 {
        binomial_sigma(self.q_hat, self.n_paths)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Truncation {
    Bounded(f64),
    Unbounded,
}

/// One-sided `γ`-stable variate with Laplace transform `exp(-dt λ^γ)` (Kanter's method).
pub fn sample_subordinator_increment<R: Rng + ?Sized>(gamma: f64, dt: f64, rng: &mut R) -> f64 {
    let u = PI * rng.sample::<f64, _>(Open01);
    let w: f64 = rng.sample(Exp1);
    let s = (gamma * u).sin() / u.sin().powf(1.0 / gamma) * ((1.0 - gamma) * u).sin().powf((1.0 - gamma) / gamma)
        / w.powf((1.0 - gamma) / gamma);
    s * dt.powf(1.0 / gamma)
}

/// Unit-time increment `Y`; the increment over `h` is `h^{1/α} Y`.
fn unit_increment<R: Rng + ?Sized>(spec: &ProcessSpec, sign: f64, rng: &mut R, out: &mut [f64]) {
    let scale = if spec.alpha == 2.0 {
        2f64.sqrt()
    } else if spec.alpha == 1.0 {
        let z: f64 = rng.sample(StandardNormal);
        1.0 / z.abs()
    } else {
        (2.0 * sample_subordinator_increment(spec.alpha / 2.0, 1.0, rng)).sqrt()
    };
    for v in out.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = sign * scale * n;
    }
}

/// Displacement over `dt`.
pub fn sample_increment<R: Rng + ?Sized>(spec: &ProcessSpec, dt: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; spec.dim];
    unit_increment(spec, 1.0, rng, &mut out);
    let s = dt.powf(1.0 / spec.alpha);
    out.iter_mut().for_each(|v| *v *= s);
    out
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Piecewise geometric grid through the sorted `starts`, extended past `t_max`
/// with ratio `ratio`. Returns the grid and the index of each start.
pub fn build_grid(starts: &[f64], t_max: f64, ratio: f64) -> (Vec<f64>, Vec<usize>) {
    let lr = ratio.ln();
    let mut grid = vec![starts[0]];
    let mut idx = vec![0];
    for w in starts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = (((b / a).ln() / lr) - 1e-9).ceil().max(1.0) as usize;
        for i in 1..n {
            grid.push(a * (b / a).powf(i as f64 / n as f64));
        }
        grid.push(b);
        idx.push(grid.len() - 1);
    }
    let last = *starts.last().unwrap();
    if t_max > last {
        let n = (((t_max / last).ln() / lr) - 1e-9).ceil().max(1.0) as usize;
        for j in 1..=n {
            grid.push(last * ratio.powi(j as i32));
        }
    }
    (grid, idx)
}

/// Per-interval radii, precomputed once for all paths.
struct Boundary<'a> {
    ln_radius: &'a (dyn Fn(f64) -> f64 + Sync),
    ln_at: Vec<f64>,
    mid: Vec<f64>,
}

impl<'a> Boundary<'a> {
    fn new(grid: &[f64], ln_radius: &'a (dyn Fn(f64) -> f64 + Sync)) -> Self {
        let ln_at = grid.iter().map(|&u| ln_radius(u)).collect();
        let mut mid = vec![0.0];
        mid.extend(grid.windows(2).map(|w| ln_radius((w[0] * w[1]).sqrt()).exp()));
        Self { ln_radius, ln_at, mid }
    }
}

struct PathConfig<'a> {
    spec: ProcessSpec,
    grid: &'a [f64],
    boundary: Boundary<'a>,
    detection: Detection,
    substep: f64,
    stop_at_first: bool,
}

/// Largest grid index `k` such that a hit is certified at a time `>= grid[k]`
/// (strictly after `grid[k]` for hits found inside an interval).
fn simulate_path(cfg: &PathConfig, rng: &mut ChaCha8Rng, sign: f64) -> Option<usize> {
    if cfg.spec.alpha == 2.0 {
        simulate_brownian(cfg, rng, sign)
    } else {
        simulate_jump(cfg, rng, sign)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn simulate_brownian(cfg: &PathConfig, rng: &mut ChaCha8Rng, sign: f64) -> Option<usize> {
    let d = cfg.spec.dim;
    let grid = cfg.grid;
    let bridged = cfg.detection == Detection::Auto && cfg.spec.bridged();
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    unit_increment(&cfg.spec, sign, rng, &mut x);
    let s0 = grid[0].sqrt();
    x.iter_mut().for_each(|v| *v *= s0);
    let mut last = None;
    let mut a = norm(&x);
    if a.ln() <= cfg.boundary.ln_at[0] {
        last = Some(0);
        if cfg.stop_at_first {
            return last;
        }
    }
    for j in 1..grid.len() {
        let dt = grid[j] - grid[j - 1];
        let x0 = x[0];
        unit_increment(&cfg.spec, sign, rng, &mut y);
        let s = dt.sqrt();
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += s * yi;
        }
        let b = norm(&x);
        let u: f64 = if bridged { rng.random() } else { 1.0 };
        if b.ln() <= cfg.boundary.ln_at[j] {
            last = Some(j);
        } else if bridged {
            let rho = cfg.boundary.mid[j];
            let hit = if d == 1 {
                let crossed = (x[0] >= 0.0) != (x0 >= 0.0);
                crossed || u < (-(a - rho).max(0.0) * (b - rho) / dt).exp()
            } else {
                let p = if a <= rho {
                    1.0
                } else {
                    let e1 = (-(a - rho) * (b - rho) / dt).exp();
                    let e0 = (-a * b / dt).exp();
                    (e1 - e0) / (1.0 - e0)
                };
                u < p
            };
            if hit {
                last = Some(j - 1);
            }
        }
        if last.is_some() && cfg.stop_at_first {
            return last;
        }
        a = b;
    }
    last
}

/// Position as `exp(l) · w` with `|w| = 1`.
#[derive(Clone)]
struct Polar {
    l: f64,
    w: Vec<f64>,
    y: Vec<f64>,
}

impl Polar {
    /// Advance by `h = exp(ln_h)`.
    fn step(&mut self, spec: &ProcessSpec, ln_h: f64, sign: f64, rng: &mut ChaCha8Rng) {
        unit_increment(spec, sign, rng, &mut self.y);
        let f = (ln_h / spec.alpha - self.l).exp();
        if f.is_infinite() {
            let n = norm(&self.y);
            self.l = ln_h / spec.alpha + n.ln();
            self.w.iter_mut().zip(&self.y).for_each(|(w, y)| *w = y / n);
            return;
        }
        for (w, y) in self.w.iter_mut().zip(&self.y) {
            *w += f * y;
        }
        let n = norm(&self.w);
        self.l += n.ln();
        self.w.iter_mut().for_each(|w| *w /= n);
    }
}

/// Landing compensator for jump paths: a long jump can enter the ball and
/// leave again within one substep, which the endpoint check never sees.
struct Landing {
    ln_jump: f64,
    ln_omega: f64,
    ln_exit: f64,
}

impl Landing {
    fn new(spec: &ProcessSpec) -> Self {
        let (a, d) = (spec.alpha, spec.dim as f64);
        let g = a / 2.0;
        let ln_jump = (g * 4f64.powf(g) * tgamma(d / 2.0 + g) / (tgamma(1.0 - g) * PI.powf(d / 2.0))).ln();
        Self {
            ln_jump,
            ln_omega: unit_ball_volume(spec.dim).ln(),
            // Mean exit time of the unit ball from its center.
            ln_exit: (tgamma(d / 2.0) / (2f64.powf(a) * tgamma(1.0 + g) * tgamma((d + a) / 2.0))).ln(),
        }
    }

    /// Probability that a jump lands in `B(0, ρ)` during a step of length `h`
    /// from `|x| = e^l` and leaves before the step ends.
    fn probability(&self, spec: &ProcessSpec, l: f64, ln_rho: f64, ln_h: f64) -> f64 {
        if l < ln_rho + std::f64::consts::LN_2 {
            return 0.0;
        }
        let a = spec.alpha;
        let eps = (ln_rho - l).exp();
        // Jump rate into the ball, times |x|^α.
        let ln_rate = if spec.dim == 1 {
            let up = -a * (-eps).ln_1p();
            let down = -a * eps.ln_1p();
            self.ln_jump - a.ln() + down + (up - down).exp_m1().ln()
        } else {
            self.ln_jump + self.ln_omega + spec.dim as f64 * eps.ln()
        };
        let mass = (ln_h - a * l + ln_rate).exp();
        let x = (ln_h - self.ln_exit - a * ln_rho).exp();
        let missed = if x < 1e-8 { 0.5 * x } else { 1.0 + (-x).exp_m1() / x };
        (mass * missed).min(1.0)
    }

    fn place<R: Rng + ?Sized>(p: &mut Polar, ln_rho: f64, rng: &mut R) {
        let u: f64 = rng.sample(Open01);
        p.l = ln_rho + u.ln() / p.w.len() as f64;
        if p.w.len() == 1 {
            p.w[0] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            return;
        }
        for v in p.w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = norm(&p.w);
        p.w.iter_mut().for_each(|v| *v /= n);
    }
}

/// Exact midpoint sampler for Cauchy bridges, used to look for ball visits
/// between the endpoints of a substep.
struct CauchyBridge {
    d: usize,
    ln_k: f64,
}

impl CauchyBridge {
    const MAX_DEPTH: u32 = 64;

    /// Unnormalized Cauchy density with scale `h` at squared distance `z2`.
    fn density(&self, h: f64, z2: f64) -> f64 {
        h / (h * h + z2).powf((self.d as f64 + 1.0) / 2.0)
    }

    /// Midpoint of the bridge from `x0` to `x1` over time `e^{ln_h}`, by
    /// rejection from the equal mixture of the two one-sided transition laws.
    fn midpoint(&self, x0: &Polar, x1: &Polar, ln_h: f64, rng: &mut ChaCha8Rng) -> Polar {
        let ln_s = x0.l.max(x1.l).max(ln_h);
        let a: Vec<f64> = x0.w.iter().map(|w| w * (x0.l - ln_s).exp()).collect();
        let b: Vec<f64> = x1.w.iter().map(|w| w * (x1.l - ln_s).exp()).collect();
        let h = 0.5 * (ln_h - ln_s).exp();
        let dist2 = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let bound = 2.0 * self.density(h, 0.25 * dist2(&a, &b));
        let mut m = vec![0.0; self.d];
        loop {
            let center = if rng.random::<bool>() { &a } else { &b };
            let z: f64 = rng.sample(StandardNormal);
            let f = h / z.abs();
            for (v, c) in m.iter_mut().zip(center) {
                *v = c + f * rng.sample::<f64, _>(StandardNormal);
            }
            let p0 = self.density(h, dist2(&m, &a));
            let p1 = self.density(h, dist2(&m, &b));
            if rng.random::<f64>() * bound * (p0 + p1) <= 2.0 * p0 * p1 {
                break;
            }
        }
        let n = norm(&m);
        m.iter_mut().for_each(|v| *v /= n);
        Polar {
            l: ln_s + n.ln(),
            w: m,
            y: Vec::new(),
        }
    }

    /// Whether the bridge from `x0` at time `t0` to `x1` over `e^{ln_h}`
    /// enters the ball at a sampled interior time.
    #[allow(clippy::too_many_arguments)]
    fn visits(&self, cfg: &PathConfig, t0: f64, ln_h: f64, x0: &Polar, x1: &Polar, rng: &mut ChaCha8Rng, depth: u32) -> bool {
        let ln_rho = (cfg.boundary.ln_radius)(t0);
        if depth >= Self::MAX_DEPTH || ln_h <= self.ln_k + ln_gap(x0.l.min(x1.l), ln_rho) {
            return false;
        }
        let m = self.midpoint(x0, x1, ln_h, rng);
        let tm = t0 + 0.5 * ln_h.exp();
        if m.l <= (cfg.boundary.ln_radius)(tm) {
            return true;
        }
        let half = ln_h - std::f64::consts::LN_2;
        self.visits(cfg, t0, half, x0, &m, rng, depth + 1) || self.visits(cfg, tm, half, &m, x1, rng, depth + 1)
    }
}

/// Log-distance from `|x| = e^l` to the sphere of log-radius `ln_rho`.
fn ln_gap(l: f64, ln_rho: f64) -> f64 {
    l + (-(ln_rho - l).exp()).ln_1p()
}

fn simulate_jump(cfg: &PathConfig, rng: &mut ChaCha8Rng, sign: f64) -> Option<usize> {
    let spec = &cfg.spec;
    let d = spec.dim;
    let grid = cfg.grid;
    let adaptive = cfg.detection == Detection::Auto;
    let ln_k = cfg.substep.ln();
    let bridge = (adaptive && spec.alpha == 1.0).then_some(CauchyBridge { d, ln_k });
    let landing = (adaptive && bridge.is_none()).then(|| Landing::new(spec));
    let mut p = Polar {
        l: 0.0,
        w: vec![0.0; d],
        y: vec![0.0; d],
    };
    unit_increment(spec, sign, rng, &mut p.y);
    let n = norm(&p.y);
    p.l = grid[0].ln() / spec.alpha + n.ln();
    p.w.iter_mut().zip(&p.y).for_each(|(w, y)| *w = y / n);
    let mut before = p.clone();
    let mut last = None;
    if p.l <= cfg.boundary.ln_at[0] {
        last = Some(0);
        if cfg.stop_at_first {
            return last;
        }
    }
    for j in 1..grid.len() {
        let (start, span) = (grid[j - 1], grid[j] - grid[j - 1]);
        // Time inside the interval is tracked as an offset so tiny substeps still count.
        let mut off = 0.0;
        let mut inside = false;
        loop {
            let rest = (span - off).ln();
            let t0 = start + off;
            let ln_h = if adaptive {
                (ln_k + spec.alpha * ln_gap(p.l, (cfg.boundary.ln_radius)(t0))).min(rest)
            } else {
                rest
            };
            let at_end = ln_h >= rest;
            off += ln_h.exp();
            let ln_rho = if at_end { cfg.boundary.ln_at[j] } else { (cfg.boundary.ln_radius)(start + off) };
            before.clone_from(&p);
            p.step(spec, ln_h, sign, rng);
            if p.l <= ln_rho {
                if at_end {
                    last = Some(j);
                } else {
                    inside = true;
                }
            } else if !inside {
                let crossed = match (&bridge, &landing) {
                    (Some(b), _) => b.visits(cfg, t0, ln_h, &before, &p, rng, 0),
                    (None, Some(land)) => {
                        let hit = rng.random::<f64>() < land.probability(spec, before.l, ln_rho, ln_h);
                        if hit {
                            Landing::place(&mut p, ln_rho, rng);
                            if at_end {
                                last = Some(j);
                            }
                        }
                        hit && !at_end
                    }
                    _ => false,
                };
                inside |= crossed;
            }
            if inside && last != Some(j) {
                last = Some(j - 1);
            }
            if cfg.stop_at_first && last.is_some() {
                return last;
            }
            if at_end {
                break;
            }
            if inside {
                let rest = (span - off).ln();
                p.step(spec, rest, sign, rng);
                if p.l <= cfg.boundary.ln_at[j] {
                    last = Some(j);
                }
                break;
            }
        }
    }
    last
}

fn run_paths(cfg: &PathConfig, n_paths: usize, seed: u64, antithetic: bool, workers: usize) -> Result<Vec<Option<usize>>> {
    let one = |k: usize| {
        let (stream, sign) = if antithetic {
            ((k / 2) as u64, if k.is_multiple_of(2) { 1.0 } else { -1.0 })
        } else {
            (k as u64, 1.0)
        };
        let mut rng = path_rng(seed, stream);
        simulate_path(cfg, &mut rng, sign)
    };
    if workers == 0 {
        return Ok((0..n_paths).into_par_iter().map(one).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
    Ok(pool.install(|| (0..n_paths).into_par_iter().map(one).collect()))
}

/// Rigorous bound on the crossing probability after `horizon`, summing the
/// single-window hitting bounds over geometric blocks `(a_k, a_{k+1}]`.
pub fn truncation_bound(model: &EuclideanModel, cand: &LowerRateCandidate, horizon: f64) -> Truncation {
    let spec = model.spec;
    let sup_ln_radius = |a: f64, b: f64| {
        (0..=32)
            .map(|i| cand.ln_varphi(a * (b / a).powf(i as f64 / 32.0)))
            .fold(f64::NEG_INFINITY, f64::max)
            + 1e-12
    };
    let block = |a: f64, b: f64| -> Option<f64> {
        let ln_r = sup_ln_radius(a, b);
        let ln_phi = spec.alpha * ln_r;
        if ln_phi > a.ln() {
            return None;
        }
        if spec.is_transient() {
            let r = ln_r.exp();
            let q = WindowQuery { a, b, c: model.scale.phi(r), r };
            lemma42_raw(&q, &model.ledger, &model.profile, &model.scale).ok()
        } else {
            let k3 = model.ledger.k3?;
            // Minimize over c >= φ(r) in log variable.
            let f = |lc: f64| k3 * ((b + lc.exp()) / a).ln() / (1.0 + lc - ln_phi);
            let (mut lo, mut hi) = (ln_phi, a.ln().max(ln_phi) + 50.0);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..100 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if f(m1) < f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            Some(f(0.5 * (lo + hi)))
        }
    };
    if !(spec.is_transient() || (spec.is_critical() && model.ledger.k3.is_some())) {
        return Truncation::Unbounded;
    }
    let mut best = f64::INFINITY;
    for lambda in [1.02f64, 1.1, 1.5, 2.0, 4.0, 16.0] {
        let mut sum = 0.0;
        let mut a = horizon;
        let mut terms = Vec::new();
        let mut ok = true;
        while a < 1e300 / lambda {
            match block(a, a * lambda) {
                Some(v) => {
                    sum += v;
                    terms.push(v);
                }
                None => {
                    ok = false;
                    break;
                }
            }
            if sum >= best {
                ok = false;
                break;
            }
            a *= lambda;
        }
        if !ok || terms.len() < 2 {
            continue;
        }
        // Remainder past the last block, extrapolated from the final per-block decay.
        let m = (terms.len() / 10).max(1);
        let (t1, t0) = (terms[terms.len() - 1], terms[terms.len() - 1 - m]);
        if t1 > 0.0 {
            let decay = (t1 / t0).powf(1.0 / m as f64);
            if decay >= 1.0 {
                continue;
            }
            sum += t1 * decay / (1.0 - decay);
        }
        best = best.min(sum);
    }
    if best.is_finite() {
        Truncation::Bounded(best.min(1.0))
    } else {
        Truncation::Unbounded
    }
}

/// Estimates for several start times from one set of paths; each start
/// yields the fraction of paths with a crossing after it.
pub fn estimate_q_multi(
    spec: &ProcessSpec,
    cand: &LowerRateCandidate,
    plan: &SimulationPlan,
    starts: &[f64],
    opts: &EngineOptions,
) -> Result<Vec<CrossingEstimate>> {
    spec.validate()?;
    plan.validate()?;
    ensure(!starts.is_empty(), || Error::Validation("no start times".into()))?;
    let mut starts = starts.to_vec();
    starts.sort_by(|a, b| a.total_cmp(b));
    starts.dedup();
    ensure(starts[0] > 0.0 && *starts.last().unwrap() < plan.t_max, || {
        Error::Validation("start times must lie in (0, t_max)".into())
    })?;
    ensure(opts.substep > 0.0 && opts.substep <= 1.0, || {
        Error::Validation(format!("substep must lie in (0,1], got {}", opts.substep))
    })?;
    let (grid, idx) = build_grid(&starts, plan.t_max, plan.grid_ratio);
    let ln_radius = |u: f64| cand.ln_varphi(u);
    let cfg = PathConfig {
        spec: *spec,
        grid: &grid,
        boundary: Boundary::new(&grid, &ln_radius),
        detection: opts.detection,
        substep: opts.substep,
        stop_at_first: false,
    };
    let lasts = run_paths(&cfg, plan.n_paths, plan.seed, plan.antithetic, opts.workers)?;
    let horizon = *grid.last().unwrap();
    let trunc = EuclideanModel::new(*spec)
        .map(|m| truncation_bound(&m, cand, horizon))
        .unwrap_or(Truncation::Unbounded);
    let n = plan.n_paths as u64;
    Ok(starts
        .iter()
        .zip(&idx)
        .map(|(&t, &i)| {
            let hits = lasts.iter().filter(|l| matches!(l, Some(k) if *k >= i)).count() as u64;
            CrossingEstimate::from_counts(t, horizon, hits, n, trunc)
        })
        .collect())
}

pub fn estimate_q_with(
    spec: &ProcessSpec,
    cand: &LowerRateCandidate,
    plan: &SimulationPlan,
    opts: &EngineOptions,
) -> Result<CrossingEstimate> {
    Ok(estimate_q_multi(spec, cand, plan, &[plan.t_start], opts)?.remove(0))
}

/// `P_0(|X_u| <= φ(u)` for some `u in (t_start, t_max])`, with the truncation bound for later times.
pub fn estimate_q(spec: &ProcessSpec, cand: &LowerRateCandidate, plan: &SimulationPlan) -> Result<CrossingEstimate> {
    estimate_q_with(spec, cand, plan, &EngineOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sigma: f64,
    pub n_paths: u64,
    pub n_hits: u64,
}

/// Grid ratio of the window grid used by [`estimate_hitting`].
pub const WINDOW_RATIO: f64 = 1.01;

/// `P_0(|X_s| <= r` for some `s in (a, b])`.
pub fn estimate_hitting(spec: &ProcessSpec, a: f64, b: f64, r: f64, n_paths: usize, seed: u64) -> Result<HittingEstimate> {
    estimate_hitting_with(spec, a, b, r, n_paths, seed, &EngineOptions::default())
}

pub fn estimate_hitting_with(
    spec: &ProcessSpec,
    a: f64,
    b: f64,
    r: f64,
    n_paths: usize,
    seed: u64,
    opts: &EngineOptions,
) -> Result<HittingEstimate> {
    spec.validate()?;
    ensure(a > 0.0 && b > a && r > 0.0, || {
        Error::Validation(format!("need 0 < a < b and r > 0, got a={a} b={b} r={r}"))
    })?;
    ensure(n_paths >= 1, || Error::Validation("n_paths must be >= 1".into()))?;
    let mut grid = vec![a];
    while *grid.last().unwrap() * WINDOW_RATIO < b * (1.0 - 1e-12) {
        let next = *grid.last().unwrap() * WINDOW_RATIO;
        grid.push(next);
    }
    grid.push(b);
    let lr = r.ln();
    let ln_radius = move |_: f64| lr;
    let cfg = PathConfig {
        spec: *spec,
        grid: &grid,
        boundary: Boundary::new(&grid, &ln_radius),
        detection: opts.detection,
        substep: opts.substep,
        stop_at_first: true,
    };
    let lasts = run_paths(&cfg, n_paths, seed, false, opts.workers)?;
    // A hit certified only at time a itself lies outside (a, b] only on a null set.
    let hits = lasts.iter().filter(|l| l.is_some()).count() as u64;
    let n = n_paths as u64;
    let p = hits as f64 / n as f64;
    let (ci_low, ci_high) = wilson_interval(hits, n, Z95);
    Ok(HittingEstimate {
        p_hat: p,
        ci_low,
        ci_high,
        sigma: binomial_sigma(p, n),
        n_paths: n,
        n_hits: hits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub grid_ratio: f64,
    pub q_coarse: f64,
    pub q_fine: f64,
    /// `q_fine - q_coarse`.
    pub delta: f64,
}

/// Grid-only estimates at ratios `ρ` and `sqrt(ρ)`. For Brownian motion the
/// fine grid refines the same paths by bridge sampling, so every coarse hit
/// is also a fine hit; jump paths are rerun on the finer grid with the same seed.
pub fn refinement_study(
    spec: &ProcessSpec,
    cand: &LowerRateCandidate,
    plan: &SimulationPlan,
    workers: usize,
) -> Result<RefinementStudy> {
    spec.validate()?;
    plan.validate()?;
    let (coarse, _) = build_grid(&[plan.t_start], plan.t_max, plan.grid_ratio);
    let n = plan.n_paths;
    let (hc, hf) = if spec.alpha == 2.0 {
        let pairs = refine_brownian(spec, cand, &coarse, plan, workers)?;
        (
            pairs.iter().filter(|p| p.0).count(),
            pairs.iter().filter(|p| p.1).count(),
        )
    } else {
        let opts = EngineOptions {
            workers,
            detection: Detection::Grid,
            substep: 0.1,
        };
        let c = estimate_q_with(spec, cand, plan, &opts)?;
        let f = estimate_q_with(spec, cand, &plan.with_grid_ratio(plan.grid_ratio.sqrt()), &opts)?;
        (c.n_hits as usize, f.n_hits as usize)
    };
    let (qc, qf) = (hc as f64 / n as f64, hf as f64 / n as f64);
    Ok(RefinementStudy {
        grid_ratio: plan.grid_ratio,
        q_coarse: qc,
        q_fine: qf,
        delta: qf - qc,
    })
}

/// Coarse and refined hit indicators on shared Brownian paths.
pub fn refine_brownian(
    spec: &ProcessSpec,
    cand: &LowerRateCandidate,
    coarse: &[f64],
    plan: &SimulationPlan,
    workers: usize,
) -> Result<Vec<(bool, bool)>> {
    ensure(spec.alpha == 2.0, || Error::Unsupported("bridge refinement needs alpha = 2".into()))?;
    let d = spec.dim;
    let one = |k: usize| {
        let mut rng = path_rng(plan.seed, k as u64);
        let mut mid_rng = path_rng(plan.seed ^ 0x9e37_79b9_7f4a_7c15, k as u64);
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        unit_increment(spec, 1.0, &mut rng, &mut x);
        let s0 = coarse[0].sqrt();
        x.iter_mut().for_each(|v| *v *= s0);
        let inside = |x: &[f64], u: f64| norm(x).ln() <= cand.ln_varphi(u);
        let mut hit_c = false;
        let mut hit_f = false;
        for j in 1..coarse.len() {
            let (u0, u1) = (coarse[j - 1], coarse[j]);
            let prev = x.clone();
            unit_increment(spec, 1.0, &mut rng, &mut y);
            let s = (u1 - u0).sqrt();
            x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi += s * yi);
            let c = inside(&x, u1);
            hit_c |= c;
            let m = (u0 * u1).sqrt();
            let w = (m - u0) / (u1 - u0);
            let sd = (2.0 * (m - u0) * (u1 - m) / (u1 - u0)).sqrt();
            let mid: Vec<f64> = prev
                .iter()
                .zip(&x)
                .map(|(p, q)| {
                    let n: f64 = mid_rng.sample(StandardNormal);
                    p + w * (q - p) + sd * n
                })
                .collect();
            hit_f |= c || inside(&mid, m);
        }
        (hit_c, hit_f)
    };
    let run = || (0..plan.n_paths).into_par_iter().map(one).collect::<Vec<_>>();
    if workers == 0 {
        return Ok(run());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
    Ok(pool.install(run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScaleFunction;
    use crate::rate::RateFunction;
    use proptest::prelude::*;

    fn bm3() -> (ProcessSpec, LowerRateCandidate) {
        let spec = ProcessSpec::new(2.0, 3).unwrap();
        let cand = LowerRateCandidate::new(RateFunction::power(0.25).unwrap(), ScaleFunction::single(2.0).unwrap());
        (spec, cand)
    }

    fn cauchy1() -> (ProcessSpec, LowerRateCandidate) {
        let spec = ProcessSpec::new(1.0, 1).unwrap();
        let cand = LowerRateCandidate::new(RateFunction::exp_power(0.5).unwrap(), ScaleFunction::single(1.0).unwrap());
        (spec, cand)
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    }

    #[test]
    fn subordinator_laplace_transform() {
        let mut rng = path_rng(1, 0);
        for gamma in [0.3, 0.5, 0.7] {
            let n = 40_000;
            let lambda = 1.3;
            let m = (0..n)
                .map(|_| (-lambda * sample_subordinator_increment(gamma, 0.8, &mut rng)).exp())
                .sum::<f64>()
                / n as f64;
            let exact = (-0.8 * lambda.powf(gamma)).exp();
            assert!((m - exact).abs() < 4.0 * 0.5 / (n as f64).sqrt(), "gamma={gamma}: {m} vs {exact}");
        }
    }

    #[test]
    fn half_stable_median() {
        let mut rng = path_rng(2, 0);
        let v: Vec<f64> = (0..40_000).map(|_| sample_subordinator_increment(0.5, 1.0, &mut rng)).collect();
        let m = median(v);
        assert!((m / 1.0991 - 1.0).abs() < 0.03, "median {m}");
    }

    #[test]
    fn brownian_coordinate_variance() {
        let spec = ProcessSpec::new(2.0, 2).unwrap();
        let mut rng = path_rng(3, 0);
        let n = 40_000;
        let var = (0..n).map(|_| sample_increment(&spec, 3.0, &mut rng)[1].powi(2)).sum::<f64>() / n as f64;
        assert!((var / 6.0 - 1.0).abs() < 0.03, "variance {var}");
    }

    #[test]
    fn cauchy_distribution_function() {
        let spec = ProcessSpec::new(1.0, 1).unwrap();
        let mut rng = path_rng(4, 0);
        let n = 40_000;
        for (t, x) in [(2.0, 2.0), (0.5, 2.0)] {
            let f = (0..n).filter(|_| sample_increment(&spec, t, &mut rng)[0].abs() <= x).count() as f64 / n as f64;
            let exact = 2.0 / PI * (x / t).atan();
            assert!((f - exact).abs() < 4.0 * binomial_sigma(exact, n as u64), "{f} vs {exact}");
        }
    }

    #[test]
    fn stable_self_similarity() {
        let spec = ProcessSpec::new(1.5, 1).unwrap();
        let mut rng = path_rng(5, 0);
        let mut at = |t: f64| median((0..20_000).map(|_| sample_increment(&spec, t, &mut rng)[0].abs()).collect());
        let (m1, m8) = (at(1.0), at(8.0));
        assert!((m8 / m1 / 4.0 - 1.0).abs() < 0.05, "{m1} {m8}");
    }

    #[test]
    fn cauchy_bridge_midpoint_law() {
        let b = CauchyBridge { d: 1, ln_k: 0.1f64.ln() };
        let zero = Polar {
            l: f64::NEG_INFINITY,
            w: vec![1.0],
            y: Vec::new(),
        };
        let mut rng = path_rng(6, 0);
        let n = 40_000;
        let h = 2.0f64;
        let inside = (0..n).filter(|_| b.midpoint(&zero, &zero, h.ln(), &mut rng).l <= 0.0).count() as f64 / n as f64;
        let exact = 0.5 + 1.0 / PI;
        assert!((inside - exact).abs() < 4.0 * binomial_sigma(exact, n as u64), "{inside} vs {exact}");
    }

    #[test]
    fn grid_contains_starts_and_covers_horizon() {
        let (g, idx) = build_grid(&[16.0, 64.0, 256.0], 1e4, 1.02);
        assert_eq!(idx.len(), 3);
        for (i, t) in idx.iter().zip([16.0, 64.0, 256.0]) {
            assert_eq!(g[*i], t);
        }
        assert!(*g.last().unwrap() >= 1e4 && *g.last().unwrap() < 1.02e4 * 1.0000001);
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let (spec, cand) = cauchy1();
        let plan = SimulationPlan::new(4.0, 400, 99).with_t_max(400.0);
        let run = |w: usize| {
            let opts = EngineOptions { workers: w, ..Default::default() };
            estimate_q_multi(&spec, &cand, &plan, &[4.0, 16.0], &opts).unwrap()
        };
        let one = run(1);
        assert_eq!(one, run(4));
        assert_eq!(one, run(16));
    }

    #[test]
    fn monotone_in_start_and_horizon() {
        let (spec, cand) = bm3();
        let plan = SimulationPlan::new(4.0, 2000, 5).with_t_max(1e4);
        let opts = EngineOptions::default();
        let e = estimate_q_multi(&spec, &cand, &plan, &[4.0, 16.0, 64.0], &opts).unwrap();
        assert!(e[0].n_hits >= e[1].n_hits && e[1].n_hits >= e[2].n_hits);
        let longer = estimate_q_multi(&spec, &cand, &plan.with_t_max(1e6), &[4.0, 16.0, 64.0], &opts).unwrap();
        for (s, l) in e.iter().zip(&longer) {
            assert!(l.n_hits >= s.n_hits);
        }
    }

    #[test]
    fn monotone_in_radius() {
        let spec = ProcessSpec::new(2.0, 3).unwrap();
        let plan = SimulationPlan::new(4.0, 2000, 8).with_t_max(1e4);
        let hits: Vec<u64> = [0.1, 0.25, 0.5]
            .iter()
            .map(|&q| {
                let cand = LowerRateCandidate::new(RateFunction::power(q).unwrap(), ScaleFunction::single(2.0).unwrap());
                estimate_q(&spec, &cand, &plan).unwrap().n_hits
            })
            .collect();
        assert!(hits[0] >= hits[1] && hits[1] >= hits[2], "{hits:?}");
    }

    #[test]
    fn negligible_radius_is_never_hit() {
        let (spec, _) = bm3();
        let cand = LowerRateCandidate::new(RateFunction::power(40.0).unwrap(), ScaleFunction::single(2.0).unwrap());
        let e = estimate_q(&spec, &cand, &SimulationPlan::new(4.0, 500, 1)).unwrap();
        assert_eq!(e.n_hits, 0);
        assert_eq!(e.ci_low, 0.0);
    }

    #[test]
    fn huge_window_radius_is_always_hit() {
        for spec in [ProcessSpec::new(2.0, 3).unwrap(), ProcessSpec::new(1.0, 1).unwrap(), ProcessSpec::new(1.5, 2).unwrap()] {
            let e = estimate_hitting(&spec, 1.0, 2.0, 1e9, 300, 3).unwrap();
            assert_eq!(e.p_hat, 1.0);
        }
    }

    #[test]
    fn narrow_window_matches_marginal() {
        let spec = ProcessSpec::new(2.0, 1).unwrap();
        let n = 40_000;
        let e = estimate_hitting(&spec, 1.0, 1.0 + 1e-9, 0.5, n, 12).unwrap();
        let exact = crate::hitting_bounds::ball_probability(&spec, 1.0, 0.5);
        assert!((e.p_hat - exact).abs() < 4.0 * binomial_sigma(exact, n as u64), "{} vs {exact}", e.p_hat);
    }

    #[test]
    fn nested_windows_are_monotone() {
        let spec = ProcessSpec::new(2.0, 3).unwrap();
        let end = |k: usize| (0..k).fold(1.0, |u, _| u * WINDOW_RATIO);
        let p = |b: f64, r: f64| estimate_hitting(&spec, 1.0, b, r, 3000, 21).unwrap().n_hits;
        let (b1, b2) = (end(40), end(90));
        assert!(p(b1, 0.3) <= p(b2, 0.3));
        assert!(p(b1, 0.3) <= p(b1, 0.6));
        assert!(p(b2, 0.3) <= p(b2, 0.6));
    }

    #[test]
    fn refinement_never_loses_hits() {
        let (spec, cand) = bm3();
        let plan = SimulationPlan::new(4.0, 1000, 2).with_grid_ratio(1.2);
        let (coarse, _) = build_grid(&[plan.t_start], plan.t_max, plan.grid_ratio);
        let pairs = refine_brownian(&spec, &cand, &coarse, &plan, 0).unwrap();
        assert!(pairs.iter().all(|&(c, f)| !c || f));
        let study = refinement_study(&spec, &cand, &plan, 0).unwrap();
        assert!(study.delta >= 0.0);
    }

    #[test]
    fn cauchy_window_is_stable_under_substep_refinement() {
        let spec = ProcessSpec::new(1.0, 1).unwrap();
        let est = |k: f64| {
            let opts = EngineOptions { substep: k, ..Default::default() };
            estimate_hitting_with(&spec, 1.0, 2.0, 1e-3, 20_000, 17, &opts).unwrap()
        };
        let (coarse, fine) = (est(0.1), est(0.025));
        let s = (coarse.sigma.powi(2) + fine.sigma.powi(2)).sqrt();
        assert!((coarse.p_hat - fine.p_hat).abs() < 4.0 * s, "{} vs {}", coarse.p_hat, fine.p_hat);
    }

    #[test]
    fn truncation_bound_behaviour() {
        let (spec, cand) = bm3();
        let m = EuclideanModel::new(spec).unwrap();
        let b = |h: f64| match truncation_bound(&m, &cand, h) {
            Truncation::Bounded(v) => v,
            Truncation::Unbounded => panic!("unbounded at {h}"),
        };
        assert!(b(1e20) < b(1e12) && b(1e12) <= 1.0);
        let (spec, cand) = cauchy1();
        let m = EuclideanModel::new(spec).unwrap();
        assert!(matches!(truncation_bound(&m, &cand, 1e6), Truncation::Bounded(v) if v < 0.01));
        let m = EuclideanModel::new(ProcessSpec::new(2.0, 1).unwrap()).unwrap();
        assert_eq!(truncation_bound(&m, &cand, 1e6), Truncation::Unbounded);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (spec, cand) = bm3();
        assert!(ProcessSpec::new(2.5, 1).is_err());
        assert!(ProcessSpec::new(1.0, 0).is_err());
        assert!(estimate_q(&spec, &cand, &SimulationPlan::new(4.0, 0, 1)).is_err());
        assert!(estimate_q(&spec, &cand, &SimulationPlan::new(4.0, 10, 1).with_t_max(2.0)).is_err());
        assert!(estimate_q(&spec, &cand, &SimulationPlan::new(4.0, 10, 1).with_grid_ratio(1.0)).is_err());
        assert!(estimate_hitting(&spec, 2.0, 1.0, 1.0, 10, 1).is_err());
        let opts = EngineOptions { substep: 0.0, ..Default::default() };
        assert!(estimate_q_with(&spec, &cand, &SimulationPlan::new(4.0, 10, 1), &opts).is_err());
    }

    proptest! {
        #[test]
        fn grid_is_increasing_with_bounded_ratio(
            a in 0.01f64..100.0,
            steps in proptest::collection::vec(1.01f64..50.0, 0..4),
            span in 1.01f64..1e4,
            ratio in 1.001f64..2.0,
        ) {
            let mut starts = vec![a];
            for s in steps {
                let next = starts.last().unwrap() * s;
                starts.push(next);
            }
            let t_max = starts.last().unwrap() * span;
            let (g, idx) = build_grid(&starts, t_max, ratio);
            prop_assert!(g.windows(2).all(|w| w[1] > w[0] && w[1] / w[0] <= ratio * (1.0 + 1e-9)));
            prop_assert!(*g.last().unwrap() >= t_max * (1.0 - 1e-12));
            for (i, s) in idx.iter().zip(&starts) {
                prop_assert_eq!(g[*i], *s);
            }
        }
    }
}
