//! Explicit constants of the stability estimates and the weak-coupling
//! certificate.
//!
//! Several constants overflow `f64` for unremarkable inputs (`C1` contains
//! `4^(p T / delta0)`), so each large quantity is carried both as a value
//! (possibly `inf`) and as a natural logarithm. Comparisons against 1 are
//! done on the logarithm.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::model::{CoefficientSet, GSetting};

/// BDG constant `C(p)`, either the default `(10 p)^(p/2)` or a user
/// expression in `p`.
#[derive(Clone, Default)]
pub enum BdgFormula {
    #[default]
    Default,
    Custom(Expr),
}

impl BdgFormula {
    pub const DEFAULT_TEXT: &'static str = "(10*p)^(p/2)";

    pub fn parse(text: &str) -> std::result::Result<Self, crate::expr::ExprError> {
        Ok(BdgFormula::Custom(Expr::parse(text, &["p"])?))
    }

    pub fn text(&self) -> &str {
        match self {
            BdgFormula::Default => Self::DEFAULT_TEXT,
            BdgFormula::Custom(e) => e.source(),
        }
    }
}

impl fmt::Debug for BdgFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BdgFormula({})", self.text())
    }
}

impl Serialize for BdgFormula {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.text())
    }
}

pub fn bdg_constant(p: f64, formula: &BdgFormula) -> Result<f64> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Domain(format!("BDG constant needs p > 1, got {p}")));
    }
    let c = match formula {
        BdgFormula::Default => (10.0 * p).powf(p / 2.0),
        BdgFormula::Custom(e) => e.eval(&[p]),
    };
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!(
            "BDG formula `{}` gives {c} at p = {p}; need a positive finite value",
            formula.text()
        )));
    }
    Ok(c)
}

/// Everything the constants depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstantInputs {
    pub p: f64,
    pub horizon: f64,
    pub n: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub sigma_high: f64,
    pub sigma_low: f64,
}

impl ConstantInputs {
    pub fn from_problem(setting: &GSetting, coeffs: &CoefficientSet) -> Self {
        let l = coeffs.lipschitz;
        ConstantInputs {
            p: setting.p,
            horizon: setting.horizon,
            n: setting.dim(),
            l1: l.l1,
            l2: l.l2,
            l3: l.l3,
            sigma_high: setting.sigma_high,
            sigma_low: setting.sigma_low,
        }
    }

    pub fn with_p(self, p: f64) -> Self {
        ConstantInputs { p, ..self }
    }

    pub fn with_horizon(self, horizon: f64) -> Self {
        ConstantInputs { horizon, ..self }
    }

    pub fn with_coupling(self, l2: f64, l3: f64) -> Self {
        ConstantInputs { l2, l3, ..self }
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }
}

/// `lambda_1(delta) = 8^(p-1) [ (1 + sh^(2p)) (n L1 delta)^p + 2 C(p) (L1 n^2 sh)^p delta^(p/2) ]`.
pub fn lambda1(delta: f64, p: f64, n: usize, l1: f64, sigma_high: f64, cp: f64) -> f64 {
    let n = n as f64;
    8f64.powf(p - 1.0)
        * ((1.0 + sigma_high.powf(2.0 * p)) * (n * l1 * delta).powf(p)
            + 2.0 * cp * (l1 * n * n * sigma_high).powf(p) * delta.powf(p / 2.0))
}

pub fn lambda2(p: f64, n: usize, sigma_high: f64, cp: f64) -> f64 {
    8f64.powf(p - 1.0) * (1.0 + sigma_high.powf(2.0 * p) + 2.0 * cp * (n as f64 * sigma_high).powf(p))
}

pub fn lambda3(inp: &ConstantInputs, cp: f64) -> f64 {
    let (p, t, n) = (inp.p, inp.horizon, inp.nf());
    6f64.powf(p - 1.0)
        * ((1.0 + inp.sigma_high.powf(2.0 * p)) * (n * inp.l1).powf(p) * t.powf(p - 1.0)
            + 2.0 * cp * (inp.l1 * n * n * inp.sigma_high).powf(p) * t.powf((p - 2.0) / 2.0))
}

pub fn lambda4(p: f64, n: usize, sigma_high: f64, cp: f64) -> f64 {
    6f64.powf(p - 1.0) * (1.0 + sigma_high.powf(2.0 * p) + 2.0 * cp * (n as f64 * sigma_high).powf(p))
}

pub fn lambda5(p: f64, l1: f64, sigma_high: f64, sigma_low: f64) -> f64 {
    let sh2 = sigma_high * sigma_high;
    let tail = (1.0 / (p - 1.0)).max(1.0);
    p * l1 * (1.0 + sh2) + 0.5 * p * l1 * l1 * sh2 * (1.0 + sigma_low.powi(-2)).powi(2) * tail
}

/// Small-time patch length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delta0 {
    Finite(f64),
    /// `L1 = 0`: `lambda_1` vanishes identically.
    Unbounded,
}

impl Delta0 {
    /// The patch length used by `C1`: `T` when unbounded.
    pub fn or_horizon(self, horizon: f64) -> f64 {
        match self {
            Delta0::Finite(d) => d,
            Delta0::Unbounded => horizon,
        }
    }
}

impl Serialize for Delta0 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Delta0::Finite(d) => s.serialize_f64(*d),
            Delta0::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

/// Root of `lambda_1(delta) = 0.75` by bracketing and bisection to the
/// last representable bit.
pub fn solve_delta0(p: f64, n: usize, l1: f64, sigma_high: f64, cp: f64) -> Delta0 {
    if l1 == 0.0 {
        return Delta0::Unbounded;
    }
    let f = |d: f64| lambda1(d, p, n, l1, sigma_high, cp);
    let mut hi = 1.0;
    while f(hi) < 0.75 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.75 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Pick the endpoint with the smaller residual.
    if (f(lo) - 0.75).abs() <= (f(hi) - 0.75).abs() {
        Delta0::Finite(lo)
    } else {
        Delta0::Finite(hi)
    }
}

/// A positive quantity together with its natural log; `value` may be
/// `inf` while `ln` stays finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Big {
    pub value: f64,
    pub ln: f64,
}

impl Big {
    /// Use `direct` when it is finite, else rebuild from `ln`.
    pub fn new(direct: f64, ln: f64) -> Self {
        if direct.is_finite() {
            Big { value: direct, ln }
        } else {
            Big::from_ln(ln)
        }
    }

    pub fn from_ln(ln: f64) -> Self {
        Big { value: ln.exp(), ln }
    }

    pub fn from_value(value: f64) -> Self {
        Big { value, ln: value.ln() }
    }

    pub fn zero() -> Self {
        Big {
            value: 0.0,
            ln: f64::NEG_INFINITY,
        }
    }

    pub fn log10(&self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }

    pub fn mul(self, other: Big) -> Big {
        let ln = self.ln + other.ln;
        let value = self.value * other.value;
        if value.is_finite() && value > 0.0 {
            Big { value, ln }
        } else if self.value == 0.0 || other.value == 0.0 {
            Big::zero()
        } else {
            Big::from_ln(ln)
        }
    }

    pub fn min(self, other: Big) -> Big {
        if other.ln < self.ln {
            other
        } else {
            self
        }
    }
}

impl Serialize for Big {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Big", 2)?;
        // JSON has no infinity; overflowed values are reported as null.
        st.serialize_field("value", &if self.value.is_finite() { Some(self.value) } else { None })?;
        st.serialize_field("log10", &if self.ln.is_finite() { Some(self.log10()) } else { None })?;
        st.end()
    }
}

/// `ln(1 + e^x)` without overflow.
fn ln1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `C1` from the small-time patching argument.
pub fn c1_patch(inp: &ConstantInputs, cp: f64) -> Big {
    let p = inp.p;
    let d0 = solve_delta0(p, inp.n, inp.l1, inp.sigma_high, cp).or_horizon(inp.horizon);
    c1_patch_at(inp, cp, d0)
}

pub(crate) fn c1_patch_at(inp: &ConstantInputs, cp: f64, d0: f64) -> Big {
    let p = inp.p;
    let t = inp.horizon;
    let l2 = lambda2(p, inp.n, inp.sigma_high, cp);
    let four_p = 4f64.powf(p);
    let pre = 4.0 * l2 / (four_p - 1.0);
    let a = p * (t + 2.0 * d0) / d0;
    let ln4 = 4f64.ln();
    if a * ln4 < 700.0 {
        let bracket = (4f64.powf(a) - four_p) / (four_p - 1.0) - t / d0;
        Big::from_value(pre * bracket)
    } else {
        // bracket = 4^a / (4^p - 1) * (1 - r)
        let r = (-(a - p) * ln4).exp() + (t / d0) * (four_p - 1.0) * (-a * ln4).exp();
        let ln = pre.ln() + a * ln4 - (four_p - 1.0).ln() + (-r).ln_1p();
        Big::from_ln(ln)
    }
}

/// `C1 = e^(lambda_3 T) lambda_4`, derived for `p >= 2` only.
pub fn c1_gronwall(inp: &ConstantInputs, cp: f64) -> Result<Big> {
    if inp.p < 2.0 {
        return Err(Error::Domain(format!(
            "the Gronwall form of C1 needs p >= 2, got {}",
            inp.p
        )));
    }
    let l3 = lambda3(inp, cp);
    let l4 = lambda4(inp.p, inp.n, inp.sigma_high, cp);
    Ok(Big::new((l3 * inp.horizon).exp() * l4, l3 * inp.horizon + l4.ln()))
}

/// `C2 = 2^(p-1) [1 + (1 + sh^2)^p e^(p L1 (1 + sh^2) T)] e^(lambda_5 T)`.
pub fn c2(inp: &ConstantInputs) -> Result<Big> {
    if !(inp.sigma_low > 0.0) {
        return Err(Error::Domain("C2 needs sigma_low > 0".into()));
    }
    if !(inp.p > 1.0) {
        return Err(Error::Domain(format!("C2 needs p > 1, got {}", inp.p)));
    }
    let p = inp.p;
    let t = inp.horizon;
    let sh2 = inp.sigma_high * inp.sigma_high;
    let l5 = lambda5(p, inp.l1, inp.sigma_high, inp.sigma_low);
    let inner = p * (1.0 + sh2).ln() + p * inp.l1 * (1.0 + sh2) * t;
    let ln = (p - 1.0) * 2f64.ln() + ln1p_exp(inner) + l5 * t;
    let direct = 2f64.powf(p - 1.0)
        * (1.0 + (1.0 + sh2).powf(p) * (p * inp.l1 * (1.0 + sh2) * t).exp())
        * (l5 * t).exp();
    Ok(Big::new(direct, ln))
}

/// Which contraction certificate a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// `p >= 2`, factor `T^p + T^(p/2)`.
    PGe2,
    /// `p in (1, 2)`, sigma independent of y, factor `T^p`.
    PLt2,
}

fn time_factor_ln(p: f64, t: f64, regime: Regime) -> f64 {
    let base = match regime {
        Regime::PGe2 => t.powf(p) + t.powf(p / 2.0),
        Regime::PLt2 => t.powf(p),
    };
    base.ln() + p * (1.0 + t).ln()
}

/// The `C1` used downstream: the smaller valid variant.
pub fn c1(inp: &ConstantInputs, cp: f64) -> Big {
    let patch = c1_patch(inp, cp);
    match c1_gronwall(inp, cp) {
        Ok(g) => patch.min(g),
        Err(_) => patch,
    }
}

/// `C1 C2 (n L2 L3)^p` times the regime's time factor.
pub fn lambda_with(inp: &ConstantInputs, cp: f64, regime: Regime) -> Result<Big> {
    let c = c1(inp, cp).mul(c2(inp)?);
    let coupling = inp.nf() * inp.l2 * inp.l3;
    if coupling == 0.0 {
        return Ok(Big::zero());
    }
    let ln_rest = inp.p * coupling.ln() + time_factor_ln(inp.p, inp.horizon, regime);
    let rest_direct = coupling.powf(inp.p)
        * match regime {
            Regime::PGe2 => inp.horizon.powf(inp.p) + inp.horizon.powf(inp.p / 2.0),
            Regime::PLt2 => inp.horizon.powf(inp.p),
        }
        * (1.0 + inp.horizon).powf(inp.p);
    let rest = Big::new(rest_direct, ln_rest);
    Ok(c.mul(rest))
}

pub fn lambda_p(inp: &ConstantInputs, cp: f64) -> Result<Big> {
    lambda_with(inp, cp, Regime::PGe2)
}

pub fn lambda_tilde_p(inp: &ConstantInputs, cp: f64) -> Result<Big> {
    lambda_with(inp, cp, Regime::PLt2)
}

/// The value of `L2 L3` at which the regime's Lambda equals 1.
pub fn coupling_threshold_with(inp: &ConstantInputs, cp: f64, regime: Regime) -> Result<f64> {
    let c = c1(inp, cp).mul(c2(inp)?);
    let ln = c.ln + time_factor_ln(inp.p, inp.horizon, regime);
    Ok((-ln / inp.p).exp() / inp.nf())
}

pub fn coupling_threshold(inp: &ConstantInputs, cp: f64) -> Result<f64> {
    coupling_threshold_with(inp, cp, Regime::PGe2)
}

/// Largest of `grid` equally spaced exponents strictly inside
/// `(p, upper)` whose Lambda is below one, with that Lambda.
pub fn find_p_prime(
    inp: &ConstantInputs,
    upper: f64,
    formula: &BdgFormula,
    regime: Regime,
    grid: usize,
) -> Result<Option<(f64, Big)>> {
    let at_p = lambda_with(inp, bdg_constant(inp.p, formula)?, regime)?;
    if !(at_p.ln < 0.0) {
        return Err(Error::Precondition(format!(
            "p' search needs Lambda_p < 1, got log10 Lambda_p = {:.6}",
            at_p.log10()
        )));
    }
    let mut best = None;
    for k in 1..=grid {
        let q = inp.p + (upper - inp.p) * k as f64 / (grid + 1) as f64;
        let lq = lambda_with(&inp.with_p(q), bdg_constant(q, formula)?, regime)?;
        if lq.ln < 0.0 {
            best = Some((q, lq));
        }
    }
    Ok(best)
}

/// All constants for one set of inputs.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantsReport {
    pub inputs: ConstantInputs,
    pub bdg_formula: String,
    pub bdg_c: f64,
    pub lambda2: f64,
    pub lambda3: Option<f64>,
    pub lambda4: f64,
    pub lambda5: f64,
    pub delta0: Delta0,
    pub c1_patch: Big,
    pub c1_gronwall: Option<Big>,
    pub c1: Big,
    pub c2: Big,
    pub lambda_p: Big,
    pub lambda_tilde_p: Big,
    pub delta_threshold: f64,
    pub delta_threshold_tilde: f64,
    pub p_prime: Option<f64>,
    pub lambda_p_prime: Option<Big>,
}

impl ConstantsReport {
    /// `lambda_1` at `delta` for these inputs.
    pub fn lambda1_at(&self, delta: f64) -> f64 {
        let i = &self.inputs;
        lambda1(delta, i.p, i.n, i.l1, i.sigma_high, self.bdg_c)
    }
}

/// Compute every constant; `beta` bounds the p' search.
pub fn constants_report(inp: &ConstantInputs, beta: f64, formula: &BdgFormula) -> Result<ConstantsReport> {
    if !(inp.p > 1.0) {
        return Err(Error::Domain(format!("p must exceed 1, got {}", inp.p)));
    }
    if !(inp.horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be positive, got {}", inp.horizon)));
    }
    let cp = bdg_constant(inp.p, formula)?;
    let c1_patch = c1_patch(inp, cp);
    let c1_gronwall = c1_gronwall(inp, cp).ok();
    let lambda_p = lambda_p(inp, cp)?;
    let lambda_tilde_p = lambda_tilde_p(inp, cp)?;
    let (regime, upper) = if inp.p >= 2.0 {
        (Regime::PGe2, beta)
    } else {
        (Regime::PLt2, beta.min(2.0))
    };
    let governing = if regime == Regime::PGe2 { lambda_p } else { lambda_tilde_p };
    let (p_prime, lambda_p_prime) = if governing.ln < 0.0 && upper > inp.p {
        match find_p_prime(inp, upper, formula, regime, 64)? {
            Some((q, l)) => (Some(q), Some(l)),
            None => (None, None),
        }
    } else {
        (None, None)
    };
    Ok(ConstantsReport {
        inputs: *inp,
        bdg_formula: formula.text().to_string(),
        bdg_c: cp,
        lambda2: lambda2(inp.p, inp.n, inp.sigma_high, cp),
        lambda3: (inp.p >= 2.0).then(|| lambda3(inp, cp)),
        lambda4: lambda4(inp.p, inp.n, inp.sigma_high, cp),
        lambda5: lambda5(inp.p, inp.l1, inp.sigma_high, inp.sigma_low),
        delta0: solve_delta0(inp.p, inp.n, inp.l1, inp.sigma_high, cp),
        c1_gronwall,
        c1: c1_patch.min(c1_gronwall.unwrap_or(c1_patch)),
        c1_patch,
        c2: c2(inp)?,
        lambda_p,
        lambda_tilde_p,
        delta_threshold: coupling_threshold_with(inp, cp, Regime::PGe2)?,
        delta_threshold_tilde: coupling_threshold_with(inp, cp, Regime::PLt2)?,
        p_prime,
        lambda_p_prime,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "EXISTS_UNIQUE_P_GE2")]
    ExistsUniquePGe2,
    #[serde(rename = "EXISTS_UNIQUE_P_LT2")]
    ExistsUniquePLt2,
    #[serde(rename = "NOT_CERTIFIED")]
    NotCertified,
}

impl Verdict {
    pub fn certified(self) -> bool {
        self != Verdict::NotCertified
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ExistsUniquePGe2 => "EXISTS_UNIQUE_P_GE2",
            Verdict::ExistsUniquePLt2 => "EXISTS_UNIQUE_P_LT2",
            Verdict::NotCertified => "NOT_CERTIFIED",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub verdict: Verdict,
    /// Why the verdict was reached, one line per condition checked.
    pub reasons: Vec<String>,
    pub beta: f64,
    pub sigma_depends_on_y: bool,
    pub constants: ConstantsReport,
}

/// Existence/uniqueness certificate from the explicit constants.
/// `NOT_CERTIFIED` asserts nothing about existence.
pub fn certify(setting: &GSetting, coeffs: &CoefficientSet, formula: &BdgFormula) -> Result<CertificateReport> {
    let inp = ConstantInputs::from_problem(setting, coeffs);
    let constants = constants_report(&inp, setting.beta, formula)?;
    let p = setting.p;
    let beta = setting.beta;
    let mut reasons = Vec::new();
    let verdict = if p >= 2.0 {
        let ok_beta = beta > 2.0;
        let ok_lambda = constants.lambda_p.ln < 0.0;
        reasons.push(format!("p = {p} >= 2"));
        reasons.push(format!("beta = {beta} {} 2", if ok_beta { ">" } else { "<=" }));
        reasons.push(format!(
            "log10 Lambda_p = {:.6} ({})",
            constants.lambda_p.log10(),
            if ok_lambda { "< 0" } else { ">= 0" }
        ));
        if ok_beta && ok_lambda {
            Verdict::ExistsUniquePGe2
        } else {
            Verdict::NotCertified
        }
    } else {
        let ok_range = p > 1.0 && p < beta.min(2.0);
        let ok_sigma = !coeffs.sigma_depends_on_y;
        let ok_lambda = constants.lambda_tilde_p.ln < 0.0;
        reasons.push(format!(
            "p = {p} {} (1, min(2, beta))",
            if ok_range { "in" } else { "not in" }
        ));
        reasons.push(if ok_sigma {
            "sigma does not depend on y".to_string()
        } else {
            "sigma depends on y; the p < 2 certificate needs sigma independent of y".to_string()
        });
        reasons.push(format!(
            "log10 Lambda~_p = {:.6} ({})",
            constants.lambda_tilde_p.log10(),
            if ok_lambda { "< 0" } else { ">= 0" }
        ));
        if ok_range && ok_sigma && ok_lambda {
            Verdict::ExistsUniquePLt2
        } else {
            Verdict::NotCertified
        }
    };
    Ok(CertificateReport {
        verdict,
        reasons,
        beta,
        sigma_depends_on_y: coeffs.sigma_depends_on_y,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> ConstantInputs {
        ConstantInputs {
            p: 2.0,
            horizon: 1.0,
            n: 1,
            l1: 0.5,
            l2: 0.1,
            l3: 1.0,
            sigma_high: 1.2,
            sigma_low: 0.8,
        }
    }

    #[test]
    fn default_bdg_at_two_is_twenty() {
        assert_eq!(bdg_constant(2.0, &BdgFormula::Default).unwrap(), 20.0);
        assert!(bdg_constant(0.5, &BdgFormula::Default).is_err());
        let one = BdgFormula::parse("1").unwrap();
        assert_eq!(bdg_constant(3.0, &one).unwrap(), 1.0);
    }

    #[test]
    fn lambda1_vanishes_at_zero_and_increases() {
        assert_eq!(lambda1(0.0, 2.0, 1, 0.5, 1.2, 20.0), 0.0);
        let a = lambda1(0.01, 2.0, 1, 0.5, 1.2, 20.0);
        assert!(lambda1(0.02, 2.0, 1, 0.5, 1.2, 20.0) > a);
    }

    #[test]
    fn delta0_hits_three_quarters() {
        let Delta0::Finite(d) = solve_delta0(2.5, 2, 0.7, 1.1, 30.0) else {
            panic!()
        };
        assert!((lambda1(d, 2.5, 2, 0.7, 1.1, 30.0) - 0.75).abs() <= 1e-12);
        assert_eq!(solve_delta0(2.0, 1, 0.0, 1.0, 20.0), Delta0::Unbounded);
        let Delta0::Finite(d2) = solve_delta0(2.5, 2, 0.7, 1.1, 60.0) else {
            panic!()
        };
        assert!(d2 < d);
    }

    #[test]
    fn gronwall_needs_p_two() {
        assert!(c1_gronwall(&inputs().with_p(1.5), 10.0).is_err());
        let i = inputs().with_horizon(1e-300);
        let g = c1_gronwall(&i, 20.0).unwrap();
        assert!((g.value / lambda4(2.0, 1, 1.2, 20.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn c2_at_zero_horizon() {
        let i = inputs().with_horizon(0.0);
        let v = c2(&i).unwrap().value;
        let want = 2.0 * (1.0 + (1.0 + 1.44f64).powi(2));
        assert!((v / want - 1.0).abs() < 1e-14);
        assert!(c2(&ConstantInputs { sigma_low: 0.0, ..inputs() }).is_err());
        assert_eq!(lambda5(1.5, 1.0, 1.0, 1.0), 1.5 * 2.0 + 0.5 * 1.5 * 4.0 * 2.0);
        assert_eq!(lambda5(3.0, 1.0, 1.0, 1.0), 3.0 * 2.0 + 0.5 * 3.0 * 4.0);
    }

    #[test]
    fn lambda_p_vanishes_without_coupling() {
        let i = inputs().with_coupling(0.0, 1.0);
        assert_eq!(lambda_p(&i, 20.0).unwrap().value, 0.0);
    }

    #[test]
    fn threshold_solves_lambda_equals_one() {
        let i = inputs();
        let cp = 20.0;
        let d = coupling_threshold(&i, cp).unwrap();
        let below = lambda_p(&i.with_coupling(0.999 * d, 1.0), cp).unwrap();
        let above = lambda_p(&i.with_coupling(1.001 * d, 1.0), cp).unwrap();
        assert!(below.ln < 0.0 && above.ln > 0.0);
    }

    #[test]
    fn huge_c1_is_carried_in_log_space() {
        let i = ConstantInputs {
            p: 4.0,
            n: 3,
            l1: 1.0,
            ..inputs()
        };
        let cp = bdg_constant(4.0, &BdgFormula::Default).unwrap();
        let patch = c1_patch(&i, cp);
        assert!(patch.ln.is_finite() && patch.ln > 700.0);
        assert!(coupling_threshold(&i, cp).unwrap() >= 0.0);
        assert!(lambda_p(&i, cp).unwrap().ln.is_finite());
    }

    #[test]
    fn p_prime_for_decoupled_is_near_beta() {
        let i = inputs().with_coupling(0.0, 1.0);
        let (q, _) = find_p_prime(&i, 3.0, &BdgFormula::Default, Regime::PGe2, 64)
            .unwrap()
            .unwrap();
        assert!((q - (2.0 + 64.0 / 65.0)).abs() < 1e-12);
        let strong = inputs().with_coupling(10.0, 10.0);
        assert!(find_p_prime(&strong, 3.0, &BdgFormula::Default, Regime::PGe2, 64).is_err());
    }
}
