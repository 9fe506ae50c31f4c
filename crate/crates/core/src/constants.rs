//! Explicit constants of the hitting lemmas and the limit theorems, computed
//! from the structure exponents and the heat kernel envelope constants.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{DoublingExponents, GrowthExponents, ScaleFunction};

/// Two-sided heat kernel envelope constants `0 < L1 <= L2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBounds {
    pub l1: f64,
    pub l2: f64,
}

impl KernelBounds {
    pub fn new(l1: f64, l2: f64) -> Result<Self> {
        ensure(l1 > 0.0 && l2 >= l1 && l2.is_finite(), || {
            Error::Validation(format!("kernel bounds need 0 < L1 <= L2, got L1={l1} L2={l2}"))
        })?;
        Ok(Self { l1, l2 })
    }

    pub fn ratio(&self) -> f64 {
        self.l2 / self.l1
    }
}

/// Comparability `cv1 φ(r) <= V(x,r) <= cv2 φ(r)` of the critical regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentComparability {
    pub cv1: f64,
    pub cv2: f64,
}

impl RecurrentComparability {
    pub fn new(cv1: f64, cv2: f64) -> Result<Self> {
        ensure(cv1 > 0.0 && cv2 >= cv1 && cv2.is_finite(), || {
            Error::Validation(format!("need 0 < cv1 <= cv2, got cv1={cv1} cv2={cv2}"))
        })?;
        Ok(Self { cv1, cv2 })
    }
}

/// All constants, plus the inputs they were computed from.
///
/// Transient-only entries are `None` when `d1 <= d4`; critical-only entries
/// are `None` when no comparability constants were supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantLedger {
    pub exponents: DoublingExponents,
    pub growth: GrowthExponents,
    pub kernel_bounds: KernelBounds,
    pub comparability: Option<RecurrentComparability>,
    pub k1: f64,
    pub h1: f64,
    pub h2: f64,
    pub k_star: Option<f64>,
    pub k2: Option<f64>,
    pub k3: Option<f64>,
    pub k4: Option<f64>,
    pub sup_bound_transient: Option<f64>,
    pub inf_bound_transient: Option<f64>,
    pub sup_bound_critical: Option<f64>,
    pub inf_bound_critical: Option<f64>,
}

fn regime_transient() -> Error {
    Error::Regime("d1 > d4 required by the transient theorem".into())
}

fn regime_critical() -> Error {
    Error::Regime("comparability constants cv1, cv2 required by the critical theorem".into())
}

impl ConstantLedger {
    pub fn is_transient(&self) -> bool {
        self.exponents.d1 > self.growth.d4
    }

    pub fn k2(&self) -> Result<f64> {
        self.k2.ok_or_else(regime_transient)
    }

    pub fn k_star(&self) -> Result<f64> {
        self.k_star.ok_or_else(regime_transient)
    }

    pub fn k3(&self) -> Result<f64> {
        self.k3.ok_or_else(regime_critical)
    }

    pub fn k4(&self) -> Result<f64> {
        self.k4.ok_or_else(regime_critical)
    }

    /// `(inf, sup)` bracket for the transient limit ratio.
    pub fn transient_bracket(&self) -> Result<(f64, f64)> {
        match (self.inf_bound_transient, self.sup_bound_transient) {
            (Some(i), Some(s)) => Ok((i, s)),
            _ => Err(regime_transient()),
        }
    }

    /// `(inf, sup)` bracket for the critical limit ratio.
    pub fn critical_bracket(&self) -> Result<(f64, f64)> {
        match (self.inf_bound_critical, self.sup_bound_critical) {
            (Some(i), Some(s)) => Ok((i, s)),
            _ => Err(regime_critical()),
        }
    }

    /// Named entries in display order; absent entries are skipped.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let all = [
            ("K1", Some(self.k1)),
            ("K_star", self.k_star),
            ("K2", self.k2),
            ("K3", self.k3),
            ("K4", self.k4),
            ("H1", Some(self.h1)),
            ("H2", Some(self.h2)),
            ("sup_bound_transient", self.sup_bound_transient),
            ("inf_bound_transient", self.inf_bound_transient),
            ("sup_bound_critical", self.sup_bound_critical),
            ("inf_bound_critical", self.inf_bound_critical),
        ];
        all.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(n, v)| format!("{n:<22}{v:>24.16e}\n"))
            .collect()
    }
}

pub fn compute_ledger(
    exp: &DoublingExponents,
    scale: &ScaleFunction,
    kb: &KernelBounds,
    rc: Option<&RecurrentComparability>,
) -> Result<ConstantLedger> {
    exp.validate()?;
    scale.growth.validate()?;
    KernelBounds::new(kb.l1, kb.l2)?;
    if let Some(rc) = rc {
        RecurrentComparability::new(rc.cv1, rc.cv2)?;
    }
    let DoublingExponents { c1, c2, d1, d2 } = *exp;
    let GrowthExponents { c3, c4, d3, d4 } = scale.growth;
    let lr = kb.ratio();

    let k1 = 2f64.powf(d2) * c2 * lr;
    let h1 = c2 * c4 * 2f64.powf(d2 + d4) * lr;
    let h2 = 3.0 * k1 * c2 / c3.powf(d2 / d3);

    let transient = d1 > d4;
    let k_star = transient.then(|| c4.powf(d1 / d4) / c1 * d4 / (d1 - d4));
    let k2 = k_star.map(|ks| 1.0 / lr / (c4 * 2f64.powf(d4 + 1.0) * (1.0 + c2 * c2 * 3f64.powf(d2) * ks)));
    let sup_bound_transient = transient.then(|| lr * 2f64.powf(d2) * c2 * c2 / c3.powf(d2 / d3));
    let inf_bound_transient = transient.then(|| {
        (1.0 / lr) * c1 * c1 * c3.powf(3.0 * d2 / d3 - 1.0) / (2f64.powf(d4 + 1.0) * (c2 * c4).powi(2))
            * (d1 - d4)
            / ((d1 - d4) * c1 + 3f64.powf(d2) * d4 * c2 * c2 * c4.powf(d1 / d4))
    });

    let (k3, k4, sup_c, inf_c) = match rc {
        Some(rc) => {
            let q = (rc.cv2 / rc.cv1).powi(2);
            (
                Some(k1 * q),
                Some((1.0 / lr) / (2f64.powf(d4 + 1.0) * c4 * q)),
                Some(lr * 2f64.powf(d2) * c2 * q / d3),
                Some((1.0 / lr) / (2f64.powf(d4 + 1.0) * d4 * c4 * q)),
            )
        }
        None => (None, None, None, None),
    };

    Ok(ConstantLedger {
        exponents: *exp,
        growth: scale.growth,
        kernel_bounds: *kb,
        comparability: rc.copied(),
        k1,
        h1,
        h2,
        k_star,
        k2,
        k3,
        k4,
        sup_bound_transient,
        inf_bound_transient,
        sup_bound_critical: sup_c,
        inf_bound_critical: inf_c,
    })
}

fn window(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    ensure(cond, || Error::Parameter(msg()))
}

fn check_a_window(k: f64, l: f64) -> Result<()> {
    window(k > 1.0, || format!("k > 1 required, got k={k}"))?;
    window(k < 1.5, || format!("k < 3/2 required, got k={k}"))?;
    window(l > 1.0, || format!("l > 1 required, got l={l}"))?;
    window(l < 2.0 - 1.0 / k, || {
        format!("l < 2 - 1/k = {} required, got l={l}", 2.0 - 1.0 / k)
    })
}

fn check_b_window(k: f64, l: f64) -> Result<()> {
    window(l > 1.0, || format!("l > 1 required, got l={l}"))?;
    window(l < k, || format!("l < k required, got l={l} k={k}"))?;
    window(k < 2.0, || format!("k < 2 required, got k={k}"))
}

/// `A(k,l)` on `1 < k < 3/2`, `1 < l < 2 - 1/k`.
#[allow(non_snake_case)]
pub fn A_of(ledger: &ConstantLedger, k: f64, l: f64) -> Result<f64> {
    check_a_window(k, l)?;
    let DoublingExponents { c1, c2, d2, .. } = ledger.exponents;
    let GrowthExponents { c3, c4, d3, .. } = ledger.growth;
    Ok(ledger.h1 * ledger.h2 * (c2 * c4) / (c1 * c3)
        * (k * l / (l - 1.0)).powf(d2 / d3)
        * l.powf((d2 - d3) / d3))
}

/// `B(k,l)` on `1 < l < k < 2`.
#[allow(non_snake_case)]
pub fn B_of(ledger: &ConstantLedger, k: f64, l: f64) -> Result<f64> {
    check_b_window(k, l)?;
    let k2 = ledger.k2()?;
    let DoublingExponents { c1, c2, d2, .. } = ledger.exponents;
    let GrowthExponents { c3, c4, d3, .. } = ledger.growth;
    Ok(k2 * c1 * c3.powf(2.0 * d2 / d3) / (c2 * c2 * c4) * (k - 1.0) / (k * l - 1.0)
        / k.powf(2.0 * d2 / d3 - 1.0))
}

/// `A'(k,l)` on the window of `A`.
#[allow(non_snake_case)]
pub fn A_prime_of(ledger: &ConstantLedger, k: f64, l: f64) -> Result<f64> {
    check_a_window(k, l)?;
    let k3 = ledger.k3()?;
    let d3 = ledger.growth.d3;
    let kl = k * l;
    Ok(2.0 * ledger.h1 * k3 / d3 * kl / (kl - 1.0) * (1.5 * kl / (l - 1.0)).ln())
}

/// `B'_eps(k,l)` on `1 < l < k < 2`, `eps > 0`.
#[allow(non_snake_case)]
pub fn B_prime_of(ledger: &ConstantLedger, eps: f64, k: f64, l: f64) -> Result<f64> {
    window(eps > 0.0, || format!("eps > 0 required, got eps={eps}"))?;
    check_b_window(k, l)?;
    let k4 = ledger.k4()?;
    Ok(k4 / (ledger.growth.d4 + eps) * k.ln() / (k * l - 1.0))
}
