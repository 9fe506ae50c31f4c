//! Decreasing rate functions `g`, the boundary `φ(t) = φ^{-1}(t) g(t)`, and
//! the oscillation functionals used as regularity hypotheses.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::ScaleFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RateFamily {
    /// `g(t) = t^{-q}`.
    Power { q: f64 },
    /// `g(t) = (log t)^{-q}`.
    LogPower { q: f64 },
    /// `g(t) = exp(-t^p)`.
    ExpPower { p: f64 },
    /// `g(t) = exp(-(log t)^{1+eps})`.
    ExpLogPower { eps: f64 },
    /// Piecewise log-log linear through `(t, g)` knots, extrapolated with the
    /// last slope.
    Tabulated { points: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFunction {
    pub family: RateFamily,
    pub t_min: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    ensure(v > 0.0 && v.is_finite(), || {
        Error::Domain(format!(
            "{name} must be positive (g must decrease to 0), got {v}"
        ))
    })
}

impl RateFunction {
    pub fn power(q: f64) -> Result<Self> {
        positive("q", q)?;
        Ok(Self {
            family: RateFamily::Power { q },
            t_min: 1.0001,
        })
    }

    pub fn log_power(q: f64) -> Result<Self> {
        positive("q", q)?;
        Ok(Self {
            family: RateFamily::LogPower { q },
            t_min: 1.0001_f64.exp(),
        })
    }

    /// Domain starts where `t^p = 1e-4`, so `g < 1` strictly.
    pub fn exp_power(p: f64) -> Result<Self> {
        positive("p", p)?;
        Ok(Self {
            family: RateFamily::ExpPower { p },
            t_min: 1e-4_f64.powf(1.0 / p),
        })
    }

    pub fn exp_log_power(eps: f64) -> Result<Self> {
        positive("eps", eps)?;
        Ok(Self {
            family: RateFamily::ExpLogPower { eps },
            t_min: std::f64::consts::E,
        })
    }

    pub fn tabulated(mut points: Vec<(f64, f64)>) -> Result<Self> {
        ensure(points.len() >= 2, || {
            Error::Validation("tabulated g needs at least two knots".into())
        })?;
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            ensure(w[1].0 > w[0].0 && w[1].1 < w[0].1, || {
                Error::Validation(
                    "tabulated g must be strictly decreasing in strictly increasing t".into(),
                )
            })?;
        }
        for &(t, g) in &points {
            ensure(t > 0.0 && g > 0.0 && g < 1.0, || {
                Error::Validation(format!("tabulated knot ({t}, {g}) outside t>0, 0<g<1"))
            })?;
        }
        let t_min = points[0].0;
        Ok(Self {
            family: RateFamily::Tabulated { points },
            t_min,
        })
    }

    /// Override the domain start; `g` must stay strictly inside (0,1) from there.
    pub fn with_t_min(mut self, t_min: f64) -> Result<Self> {
        ensure(t_min > 0.0 && t_min.is_finite(), || {
            Error::Domain(format!("t_min must be positive, got {t_min}"))
        })?;
        let admissible = match self.family {
            RateFamily::Power { .. } => t_min > 1.0,
            RateFamily::LogPower { .. } => t_min > std::f64::consts::E,
            RateFamily::ExpPower { .. } => true,
            RateFamily::ExpLogPower { .. } => t_min > 1.0,
            RateFamily::Tabulated { ref points } => t_min >= points[0].0,
        };
        ensure(admissible, || {
            Error::Domain(format!("t_min={t_min} leaves g outside (0,1) for {}", self.name()))
        })?;
        self.t_min = t_min;
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            RateFamily::Power { .. } => "power",
            RateFamily::LogPower { .. } => "log_power",
            RateFamily::ExpPower { .. } => "exp_power",
            RateFamily::ExpLogPower { .. } => "exp_log_power",
            RateFamily::Tabulated { .. } => "tabulated",
        }
    }

    /// `|log g(t)|`, evaluated without forming `g` so it stays accurate when `g` underflows.
    pub fn neg_log_g(&self, t: f64) -> f64 {
        match &self.family {
            RateFamily::Power { q } => q * t.ln(),
            RateFamily::LogPower { q } => q * t.ln().ln(),
            RateFamily::ExpPower { p } => t.powf(*p),
            RateFamily::ExpLogPower { eps } => t.ln().powf(1.0 + eps),
            RateFamily::Tabulated { points } => -tabulated_ln_g(points, t),
        }
    }

    /// `g(t)` without domain checks.
    pub fn g(&self, t: f64) -> f64 {
        match &self.family {
            RateFamily::Power { q } => t.powf(-q),
            RateFamily::LogPower { q } => t.ln().powf(-q),
            _ => (-self.neg_log_g(t)).exp(),
        }
    }

    fn check_t(&self, t: f64) -> Result<()> {
        ensure(t >= self.t_min && t.is_finite(), || {
            Error::Domain(format!("t={t} is below t_min={} for {}", self.t_min, self.name()))
        })
    }
}

fn tabulated_ln_g(points: &[(f64, f64)], t: f64) -> f64 {
    let lt = t.ln();
    let n = points.len();
    let seg = match points.iter().position(|&(tk, _)| tk >= t) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => n - 2,
    };
    let (t0, g0) = points[seg];
    let (t1, g1) = points[seg + 1];
    let slope = (g1.ln() - g0.ln()) / (t1.ln() - t0.ln());
    g0.ln() + slope * (lt - t0.ln())
}

pub fn eval_g(rf: &RateFunction, t: f64) -> Result<f64> {
    rf.check_t(t)?;
    Ok(rf.g(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerRateCandidate {
    pub g: RateFunction,
    pub scale: ScaleFunction,
}

impl LowerRateCandidate {
    pub fn new(g: RateFunction, scale: ScaleFunction) -> Self {
        Self { g, scale }
    }

    /// `φ(t)` without domain checks.
    pub fn varphi(&self, t: f64) -> f64 {
        self.scale.phi_inv(t) * self.g.g(t)
    }

    /// `log φ(t)`, finite even where `φ(t)` underflows.
    pub fn ln_varphi(&self, t: f64) -> f64 {
        self.scale.phi_inv(t).ln() - self.g.neg_log_g(t)
    }

    pub fn t_min(&self) -> f64 {
        self.g.t_min
    }
}

pub fn eval_varphi(cand: &LowerRateCandidate, t: f64) -> Result<f64> {
    cand.g.check_t(t)?;
    Ok(cand.varphi(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Transient,
    Recurrent,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transient" => Ok(Mode::Transient),
            "recurrent" | "critical" => Ok(Mode::Recurrent),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Result of the bounded grid search for the oscillation functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridExtremum {
    pub value: f64,
    pub u: f64,
    pub v: f64,
    /// The extremum sat on the largest `v` of the grid, so the true
    /// extremum over unbounded `v` may lie beyond it.
    pub v_boundary_hit: bool,
}

const GRID_V: usize = 256;
const GRID_U: usize = 64;
const GRID_SPAN: f64 = 100.0;

/// Extremum of `ratio(u, v)` over `v` log-spaced in `[t, 100 t]` and `u`
/// log-spaced in `[v, c v]`; `minimize` selects inf versus sup.
pub fn grid_search<F: Fn(f64, f64) -> f64>(ratio: F, c: f64, t: f64, minimize: bool) -> GridExtremum {
    let mut best = GridExtremum {
        value: if minimize { f64::INFINITY } else { f64::NEG_INFINITY },
        u: t,
        v: t,
        v_boundary_hit: false,
    };
    let (lt, lspan, lc) = (t.ln(), GRID_SPAN.ln(), c.ln());
    for i in 0..GRID_V {
        let v = (lt + lspan * i as f64 / (GRID_V - 1) as f64).exp();
        for j in 0..GRID_U {
            let u = if j == GRID_U - 1 {
                c * v
            } else {
                v * (lc * j as f64 / (GRID_U - 1) as f64).exp()
            };
            let r = ratio(u, v);
            let better = if minimize { r < best.value } else { r > best.value };
            if better {
                best = GridExtremum {
                    value: r,
                    u,
                    v,
                    v_boundary_hit: i == GRID_V - 1,
                };
            }
        }
    }
    best
}

fn check_c(c: f64) -> Result<()> {
    ensure(c > 1.0 && c.is_finite(), || {
        Error::Domain(format!("oscillation ratio needs c > 1, got {c}"))
    })
}

/// `inf { g(u)/g(v) : 1 <= u/v <= c, v >= t }`.
pub fn oscillation_ratio_transient(rf: &RateFunction, c: f64, t: f64) -> Result<f64> {
    check_c(c)?;
    rf.check_t(t)?;
    Ok(match rf.family {
        RateFamily::Power { q } => c.powf(-q),
        RateFamily::LogPower { q } => (t.ln() / (c * t).ln()).powf(q),
        // g(cv)/g(v) tends to 0 as v grows.
        RateFamily::ExpPower { .. } | RateFamily::ExpLogPower { .. } => 0.0,
        RateFamily::Tabulated { .. } => transient_grid(rf, c, t).value,
    })
}

pub fn transient_grid(rf: &RateFunction, c: f64, t: f64) -> GridExtremum {
    grid_search(|u, v| (rf.neg_log_g(v) - rf.neg_log_g(u)).exp(), c, t, true)
}

/// `sup { |log g(u)| / |log g(v)| : 1 <= u/v <= c, v >= t }`.
pub fn oscillation_ratio_recurrent(rf: &RateFunction, c: f64, t: f64) -> Result<f64> {
    check_c(c)?;
    rf.check_t(t)?;
    ensure(rf.neg_log_g(t) > 0.0, || {
        Error::Domain(format!("g({t}) is not strictly below 1"))
    })?;
    Ok(match rf.family {
        RateFamily::Power { .. } => (c * t).ln() / t.ln(),
        RateFamily::LogPower { .. } => (c * t).ln().ln() / t.ln().ln(),
        RateFamily::ExpPower { p } => c.powf(p),
        RateFamily::ExpLogPower { eps } => ((t.ln() + c.ln()) / t.ln()).powf(1.0 + eps),
        RateFamily::Tabulated { .. } => recurrent_grid(rf, c, t).value,
    })
}

pub fn recurrent_grid(rf: &RateFunction, c: f64, t: f64) -> GridExtremum {
    grid_search(|u, v| rf.neg_log_g(u) / rf.neg_log_g(v), c, t, false)
}

/// `min {1, g(t)^{d3} / c3}` with the growth constants of the candidate's scale.
pub fn kappa(cand: &LowerRateCandidate, t: f64) -> Result<f64> {
    cand.g.check_t(t)?;
    let gr = cand.scale.growth;
    Ok((cand.g.g(t).powf(gr.d3) / gr.c3).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    /// No closed form for the double limit; the table is reported only.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub family: String,
    pub mode: Mode,
    pub c_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// `table[i][j] = R_{c_i, t_j}`.
    pub table: Vec<Vec<f64>>,
    /// Closed-form value of the double limit, when known.
    pub double_limit: Option<f64>,
    /// Table entry at the smallest `c` and largest `t`.
    pub corner_value: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

fn double_limit(rf: &RateFunction, mode: Mode) -> Option<f64> {
    match (&rf.family, mode) {
        (RateFamily::Tabulated { .. }, _) => None,
        (RateFamily::ExpPower { .. } | RateFamily::ExpLogPower { .. }, Mode::Transient) => Some(0.0),
        _ => Some(1.0),
    }
}

pub fn regularity_check(
    rf: &RateFunction,
    mode: Mode,
    c_grid: &[f64],
    t_grid: &[f64],
    tolerance: f64,
) -> Result<RegularityReport> {
    ensure(!c_grid.is_empty() && !t_grid.is_empty(), || {
        Error::Validation("regularity grids must be nonempty".into())
    })?;
    let mut table = Vec::with_capacity(c_grid.len());
    for &c in c_grid {
        let mut row = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            row.push(match mode {
                Mode::Transient => oscillation_ratio_transient(rf, c, t)?,
                Mode::Recurrent => oscillation_ratio_recurrent(rf, c, t)?,
            });
        }
        table.push(row);
    }
    let ci = (0..c_grid.len())
        .min_by(|&a, &b| c_grid[a].total_cmp(&c_grid[b]))
        .unwrap_or(0);
    let tj = (0..t_grid.len())
        .max_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]))
        .unwrap_or(0);
    let corner_value = table[ci][tj];
    let limit = double_limit(rf, mode);
    let verdict = match limit {
        Some(l) if (l - 1.0).abs() <= tolerance => Verdict::Pass,
        Some(_) => Verdict::Fail,
        None => Verdict::Reported,
    };
    Ok(RegularityReport {
        family: rf.name().to_string(),
        mode,
        c_grid: c_grid.to_vec(),
        t_grid: t_grid.to_vec(),
        table,
        double_limit: limit,
        corner_value,
        tolerance,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn eval_g_examples() {
        assert!(close(eval_g(&RateFunction::power(0.5).unwrap(), 4.0).unwrap(), 0.5, 1e-15));
        let e = RateFunction::exp_power(1.0).unwrap();
        assert!(close(eval_g(&e, 1.0).unwrap(), (-1.0f64).exp(), 1e-15));
        let l = RateFunction::log_power(1.0).unwrap();
        assert!(close(eval_g(&l, 2.0f64.exp()).unwrap(), 0.5, 1e-15));
        assert!(eval_g(&l, 2.0).is_err());
    }

    #[test]
    fn degenerate_families_rejected() {
        assert!(matches!(RateFunction::power(0.0), Err(Error::Domain(_))));
        assert!(RateFunction::exp_power(-1.0).is_err());
    }

    #[test]
    fn varphi_examples() {
        let c = LowerRateCandidate::new(RateFunction::power(0.25).unwrap(), ScaleFunction::single(2.0).unwrap());
        assert!(close(eval_varphi(&c, 16.0).unwrap(), 2.0, 1e-15));
        let c = LowerRateCandidate::new(RateFunction::exp_power(1.0).unwrap(), ScaleFunction::single(1.0).unwrap());
        assert!(close(eval_varphi(&c, 2.0).unwrap(), 2.0 * (-2.0f64).exp(), 1e-15));
        let c = LowerRateCandidate::new(RateFunction::power(1.0).unwrap(), ScaleFunction::new(1.0, 2.0).unwrap());
        assert!(close(eval_varphi(&c, 9.0).unwrap(), 1.0 / 3.0, 1e-15));
        assert!(close(c.ln_varphi(9.0), (1.0f64 / 3.0).ln(), 1e-14));
    }

    #[test]
    fn transient_ratio_examples() {
        let p = RateFunction::power(0.5).unwrap();
        assert!(close(oscillation_ratio_transient(&p, 1.21, 5.0).unwrap(), 1.0 / 1.1, 1e-14));
        let l = RateFunction::log_power(1.0).unwrap();
        let t = 10.0f64.exp();
        let r = oscillation_ratio_transient(&l, 1.1, t).unwrap();
        assert!((r - 0.99056).abs() < 5e-6, "{r}");
        assert!(close(r, 10.0 / (10.0 + 1.1f64.ln()), 1e-14));
        assert!(oscillation_ratio_transient(&p, 1.0 + 1e-12, 5.0).unwrap() > 1.0 - 1e-11);
        assert!(matches!(oscillation_ratio_transient(&p, 1.0, 5.0), Err(Error::Domain(_))));
    }

    #[test]
    fn recurrent_ratio_examples() {
        let e = RateFunction::exp_power(1.5).unwrap();
        assert!(close(oscillation_ratio_recurrent(&e, 2.0, 3.0).unwrap(), 2.0f64.powf(1.5), 1e-14));
        let el = RateFunction::exp_log_power(1.0).unwrap();
        let r = oscillation_ratio_recurrent(&el, 1.05, 20.0f64.exp()).unwrap();
        assert!((r - 1.00489).abs() < 1e-5, "{r}");
        assert!(close(r, (1.0 + 1.05f64.ln() / 20.0).powi(2), 1e-14));
        assert!(oscillation_ratio_recurrent(&e, 1.0 + 1e-12, 3.0).unwrap() < 1.0 + 1e-11);
    }

    #[test]
    fn kappa_examples() {
        let c = LowerRateCandidate::new(RateFunction::power(1.0).unwrap(), ScaleFunction::single(1.0).unwrap());
        assert!(close(kappa(&c, 10.0).unwrap(), 0.1, 1e-15));
        // t_min placed where g = 0.99
        let t0 = 0.99f64.powf(-1.0);
        let c = LowerRateCandidate::new(
            RateFunction::power(1.0).unwrap().with_t_min(t0).unwrap(),
            ScaleFunction::single(2.0).unwrap(),
        );
        assert!(close(kappa(&c, t0).unwrap(), 0.9801, 1e-13));
        let scale = ScaleFunction::single(1.0)
            .unwrap()
            .with_growth(crate::geometry::GrowthExponents { c3: 0.5, c4: 1.0, d3: 1.0, d4: 1.0 })
            .unwrap();
        let c = LowerRateCandidate::new(RateFunction::power(1.0).unwrap(), scale);
        assert_eq!(kappa(&c, 1.25).unwrap(), 1.0);
    }

    #[test]
    fn regularity_verdicts() {
        let cs = [1.5, 1.1, 1.01, 1.001];
        let ts = [10.0, 100.0, 1e4];
        let rep = regularity_check(&RateFunction::power(0.5).unwrap(), Mode::Transient, &cs, &ts, 1e-6).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(close(rep.table[3][0], 1.001f64.powf(-0.5), 1e-14));
        let e = RateFunction::exp_power(1.0).unwrap();
        let rep = regularity_check(&e, Mode::Recurrent, &cs, &ts, 1e-6).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(close(rep.table[0][2], 1.5, 1e-14));
        let rep = regularity_check(&e, Mode::Transient, &cs, &ts, 1e-6).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail);
        let tab = RateFunction::tabulated(vec![(2.0, 0.5), (4.0, 0.25), (8.0, 0.125)]).unwrap();
        let rep = regularity_check(&tab, Mode::Transient, &cs, &[2.0, 4.0], 1e-6).unwrap();
        assert_eq!(rep.verdict, Verdict::Reported);
        assert!(close(rep.table[0][0], 1.0 / 1.5, 1e-9));
    }

    #[test]
    fn exp_power_grid_flags_boundary() {
        let e = RateFunction::exp_power(1.0).unwrap();
        let g = transient_grid(&e, 1.1, 2.0);
        assert!(g.v_boundary_hit);
        assert!(g.value >= oscillation_ratio_transient(&e, 1.1, 2.0).unwrap());
    }

    fn family() -> impl Strategy<Value = RateFunction> {
        prop_oneof![
            (0.05f64..3.0).prop_map(|q| RateFunction::power(q).unwrap()),
            (0.05f64..3.0).prop_map(|q| RateFunction::log_power(q).unwrap()),
            (0.05f64..2.0).prop_map(|p| RateFunction::exp_power(p).unwrap()),
            (0.05f64..2.0).prop_map(|e| RateFunction::exp_log_power(e).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn closed_forms_match_grid(rf in family(), c in 1.001f64..3.0, lt in 1.2f64..8.0) {
            let t = lt.exp();
            let tr = transient_grid(&rf, c, t);
            let closed = oscillation_ratio_transient(&rf, c, t).unwrap();
            if tr.v_boundary_hit {
                prop_assert!(tr.value >= closed - 1e-12);
            } else {
                prop_assert!((tr.value - closed).abs() <= 1e-6 * closed.max(1e-300), "{} vs {}", tr.value, closed);
            }
            let rc = recurrent_grid(&rf, c, t);
            let closed = oscillation_ratio_recurrent(&rf, c, t).unwrap();
            prop_assert!(!rc.v_boundary_hit || rc.value <= closed + 1e-12);
            prop_assert!((rc.value - closed).abs() <= 1e-6 * closed);
        }

        #[test]
        fn transient_ratio_monotone(rf in family(), c in 1.001f64..3.0, dc in 0.0f64..1.0, lt in 1.2f64..8.0, dlt in 0.0f64..3.0) {
            let t = lt.exp();
            let base = oscillation_ratio_transient(&rf, c, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!(oscillation_ratio_transient(&rf, c + dc, t).unwrap() <= base + 1e-15);
            prop_assert!(oscillation_ratio_transient(&rf, c, (lt + dlt).exp()).unwrap() >= base - 1e-15);
        }

        #[test]
        fn recurrent_ratio_at_least_one(rf in family(), c in 1.0001f64..3.0, lt in 1.2f64..8.0) {
            prop_assert!(oscillation_ratio_recurrent(&rf, c, lt.exp()).unwrap() >= 1.0);
        }

        #[test]
        fn varphi_eventual_monotonicity(beta in 0.5f64..3.0, frac in 0.05f64..0.9) {
            let scale = ScaleFunction::single(beta).unwrap();
            let up = LowerRateCandidate::new(RateFunction::power(frac / beta).unwrap(), scale);
            let down = LowerRateCandidate::new(RateFunction::power((1.0 + frac) / beta).unwrap(), scale);
            let ts: Vec<f64> = (0..40).map(|i| 10f64.powf(1.0 + 0.2 * i as f64)).collect();
            for w in ts.windows(2) {
                prop_assert!(up.varphi(w[1]) > up.varphi(w[0]));
                prop_assert!(down.varphi(w[1]) < down.varphi(w[0]));
                prop_assert!(up.varphi(w[0]) > 0.0);
            }
        }
    }
}
