//! Built-in test problems.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::constants::{bdg_constant, coupling_threshold_with, BdgFormula, ConstantInputs, Regime};
use crate::model::{CoefficientSet, GSetting, Lipschitz, Terminal};

/// Closed-form value attached to a catalog problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticReference {
    pub y0: f64,
    pub formula: String,
}

/// Second problem of a comparison experiment.
#[derive(Clone)]
pub enum PairSpec {
    /// Same coefficients, terminal function `phi1 >= phi2`.
    Terminal { phi1: Terminal, l3: f64, description: String },
    /// One-dimensional, same coefficients, initial states `x1 >= x2`.
    Initial { x1: f64, x2: f64 },
}

impl fmt::Debug for PairSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairSpec::Terminal { l3, description, .. } => {
                f.debug_struct("Terminal").field("l3", l3).field("description", description).finish()
            }
            PairSpec::Initial { x1, x2 } => f.debug_struct("Initial").field("x1", x1).field("x2", x2).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemCatalogEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub setting: GSetting,
    pub coefficients: CoefficientSet,
    pub analytic_reference: Option<AnalyticReference>,
    pub pair: Option<PairSpec>,
}

/// Coupling threshold with the default BDG constant.
fn threshold(setting: &GSetting, l1: f64, regime: Regime) -> f64 {
    let inp = ConstantInputs {
        p: setting.p,
        horizon: setting.horizon,
        n: setting.dim(),
        l1,
        l2: 0.0,
        l3: 1.0,
        sigma_high: setting.sigma_high,
        sigma_low: setting.sigma_low,
    };
    let cp = bdg_constant(setting.p, &BdgFormula::Default).expect("p > 1");
    coupling_threshold_with(&inp, cp, regime).expect("valid inputs")
}

/// `phi2 + c0 + c1 (1 + tanh(x - xc)) / 2`, never below `phi2`.
pub fn raised_terminal(phi2: Terminal, c0: f64, c1: f64, xc: f64) -> Terminal {
    Arc::new(move |x: &[f64]| phi2(x) + c0 + 0.5 * c1 * (1.0 + (x[0] - xc).tanh()))
}

fn decoupled() -> ProblemCatalogEntry {
    ProblemCatalogEntry {
        name: "decoupled",
        description: "nonlinear problem whose forward part ignores Y",
        setting: GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.2]),
        coefficients: CoefficientSet::scalar(
            |_, x, _| 0.1 * x.cos(),
            |_, x, _| 0.05 * x.sin(),
            |_, _, _| 1.0,
            |_, x, y, _| 0.1 * x.sin() - 0.05 * y,
            |_, _, _, z| 0.05 * z.tanh(),
            |x| x.tanh(),
            Lipschitz::new(0.15, 0.0, 1.0),
            false,
        ),
        analytic_reference: None,
        pair: None,
    }
}

/// Classical linear problem `dX = (a1 X + a2 Y) dt + s dB`,
/// `dY = k Y dt + Z dB`, `Y_T = m X_T`. With `Y = A(t) X` the slope solves
/// `A' = kappa A - a2 A^2`, `kappa = k - a1`, `A(T) = m`.
pub fn classical_linear_y0(a1: f64, a2: f64, k: f64, m: f64, t: f64, x0: f64) -> f64 {
    let kappa = k - a1;
    let inv = a2 / kappa + (1.0 / m - a2 / kappa) * (kappa * t).exp();
    x0 / inv
}

fn classical_linear() -> ProblemCatalogEntry {
    let (a1, a2, k, m) = (-0.1, 0.015, 0.05, 1.0);
    let setting = GSetting::classical(0.5, 2.0, 3.0, 0.5, vec![1.0]);
    let y0 = classical_linear_y0(a1, a2, k, m, setting.horizon, setting.x0[0]);
    ProblemCatalogEntry {
        name: "classical-linear",
        description: "degenerate band, affine coefficients, closed-form Y0",
        setting,
        coefficients: CoefficientSet::scalar(
            move |_, x, y| a1 * x + a2 * y,
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            move |_, _, y, _| k * y,
            |_, _, _, _| 0.0,
            move |x| m * x,
            Lipschitz::new(0.1, a2, m),
            false,
        ),
        analytic_reference: Some(AnalyticReference {
            y0,
            formula: "Y0 = x0 / (a2/kappa + (1/m - a2/kappa) exp(kappa T)), kappa = k - a1".into(),
        }),
        pair: None,
    }
}

fn weak_setting(p: f64) -> GSetting {
    GSetting::new(0.4, 0.6, p, 3.0, 0.5, vec![0.0])
}

/// Coefficients of the weakly coupled family; `cb` and `cs` are the
/// y-slopes of `b` and `sigma`.
fn weak_coefficients(cb: f64, cs: f64) -> CoefficientSet {
    CoefficientSet::scalar(
        move |_, x, y| 0.05 * x.sin() + cb * y.tanh(),
        |_, x, _| 0.02 * x.cos(),
        move |_, x, y| 1.0 + 0.03 * x.sin() + cs * y.sin(),
        |_, x, y, z| 0.3 * x.sin() - 0.05 * y.tanh() + 0.05 * z.tanh(),
        |_, x, y, z| 0.2 * x.cos() - 0.05 * y.tanh() + 0.05 * z.tanh(),
        |x| (1.0 + x * x).sqrt(),
        Lipschitz::new(0.1, cb + cs, 1.0),
        cs != 0.0,
    )
}

fn weakly_coupled() -> ProblemCatalogEntry {
    let setting = weak_setting(2.0);
    let l2 = 0.5 * threshold(&setting, 0.1, Regime::PGe2);
    ProblemCatalogEntry {
        name: "weakly-coupled",
        description: "nonlinear coupled problem at half the certified coupling bound",
        setting,
        coefficients: weak_coefficients(0.5 * l2, 0.5 * l2),
        analytic_reference: None,
        pair: None,
    }
}

fn weakly_coupled_p15() -> ProblemCatalogEntry {
    let setting = weak_setting(1.5);
    let l2 = 0.5 * threshold(&setting, 0.1, Regime::PLt2);
    ProblemCatalogEntry {
        name: "weakly-coupled-p15",
        description: "coupled problem with y-free sigma, certified at p = 1.5",
        setting,
        coefficients: weak_coefficients(l2, 0.0),
        analytic_reference: None,
        pair: None,
    }
}

fn comparison_pair() -> ProblemCatalogEntry {
    let base = weakly_coupled();
    let phi1 = raised_terminal(base.coefficients.phi.clone(), 0.1, 0.4, 0.0);
    ProblemCatalogEntry {
        name: "comparison-pair",
        description: "two coupled problems differing only in a raised terminal function",
        pair: Some(PairSpec::Terminal {
            phi1,
            l3: 1.2,
            description: "phi1 = phi2 + 0.1 + 0.2 (1 + tanh x)".into(),
        }),
        ..base
    }
}

fn monotone_pair() -> ProblemCatalogEntry {
    let setting = GSetting::new(0.4, 0.6, 2.0, 3.0, 0.5, vec![0.5]);
    let l2 = 0.5 * threshold(&setting, 0.1, Regime::PGe2);
    ProblemCatalogEntry {
        name: "monotone-pair",
        description: "non-decreasing terminal, non-increasing drivers, ordered initial states",
        coefficients: CoefficientSet::scalar(
            move |_, x, y| 0.05 * x.sin() + l2 * y.tanh(),
            |_, x, _| 0.02 * x.cos(),
            |_, x, _| 1.0 + 0.03 * x.sin(),
            |_, x, y, z| -0.3 * x.tanh() - 0.05 * y.tanh() + 0.05 * z.tanh(),
            |_, x, y, z| -0.2 * x.atan() - 0.05 * y.tanh() + 0.05 * z.tanh(),
            |x| 0.5 * x + 0.5 * x.tanh(),
            Lipschitz::new(0.1, l2, 1.0),
            false,
        ),
        setting,
        analytic_reference: None,
        pair: Some(PairSpec::Initial { x1: 1.0, x2: 0.0 }),
    }
}

/// `X = B`, `f = g = 0`, `phi = s x^2` on a box of half-width `6 sh sqrt(T)`.
fn quadratic_terminal(name: &'static str, sign: f64) -> ProblemCatalogEntry {
    let setting = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
    let half = 6.0 * setting.sigma_high * setting.horizon.sqrt();
    let y0 = if sign > 0.0 {
        setting.gamma_high() * setting.horizon
    } else {
        -setting.gamma_low() * setting.horizon
    };
    ProblemCatalogEntry {
        name,
        description: if sign > 0.0 {
            "Brownian forward, Y_T = X_T^2, zero drivers"
        } else {
            "Brownian forward, Y_T = -X_T^2, zero drivers"
        },
        coefficients: CoefficientSet::scalar(
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
            move |x| sign * x * x,
            Lipschitz::new(0.0, 0.0, 2.0 * half),
            false,
        ),
        analytic_reference: Some(AnalyticReference {
            y0,
            formula: if sign > 0.0 { "Y0 = sigma_high^2 T" } else { "Y0 = -sigma_low^2 T" }.into(),
        }),
        setting,
        pair: None,
    }
}

pub fn catalog() -> Vec<ProblemCatalogEntry> {
    vec![
        decoupled(),
        classical_linear(),
        weakly_coupled(),
        weakly_coupled_p15(),
        comparison_pair(),
        monotone_pair(),
        quadratic_terminal("convex-terminal", 1.0),
        quadratic_terminal("concave-terminal", -1.0),
    ]
}

pub fn catalog_entry(name: &str) -> Option<ProblemCatalogEntry> {
    catalog().into_iter().find(|e| e.name == name)
}

pub fn catalog_names() -> Vec<&'static str> {
    catalog().iter().map(|e| e.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{certify, Verdict};
    use crate::model::{validate_problem, AuditConfig};

    #[test]
    fn every_entry_passes_validation() {
        for e in catalog() {
            let r = validate_problem(&e.setting, &e.coefficients, &AuditConfig::default().with_samples(4000)).unwrap();
            assert!(r.passed(), "{}: {:?}", e.name, r.failures());
        }
    }

    #[test]
    fn decoupled_has_no_coupling() {
        assert_eq!(catalog_entry("decoupled").unwrap().coefficients.lipschitz.l2, 0.0);
    }

    #[test]
    fn coupled_entries_are_certified() {
        for (name, v) in [
            ("weakly-coupled", Verdict::ExistsUniquePGe2),
            ("weakly-coupled-p15", Verdict::ExistsUniquePLt2),
            ("monotone-pair", Verdict::ExistsUniquePGe2),
            ("classical-linear", Verdict::ExistsUniquePGe2),
            ("decoupled", Verdict::ExistsUniquePGe2),
        ] {
            let e = catalog_entry(name).unwrap();
            let c = certify(&e.setting, &e.coefficients, &BdgFormula::Default).unwrap();
            assert_eq!(c.verdict, v, "{name}: {:?}", c.reasons);
        }
    }

    #[test]
    fn monotone_pair_shapes() {
        let e = catalog_entry("monotone-pair").unwrap();
        let c = &e.coefficients;
        for k in 0..200 {
            let x = -4.0 + 0.04 * k as f64;
            let d = 0.04;
            assert!((c.phi)(&[x + d]) >= (c.phi)(&[x]));
            for (y, z) in [(0.0, 0.0), (1.0, -2.0), (-3.0, 0.5)] {
                assert!((c.f)(0.1, &[x + d], y, z) <= (c.f)(0.1, &[x], y, z));
                assert!((c.g)(0.1, &[x + d], y, z) <= (c.g)(0.1, &[x], y, z));
            }
        }
    }

    #[test]
    fn riccati_value_solves_its_ode() {
        // Backward RK4 on A' = kappa A - a2 A^2 as an independent check.
        let (a1, a2, k, m, t) = (-0.1, 0.015, 0.05, 1.0, 0.5);
        let kappa = k - a1;
        let rhs = |a: f64| kappa * a - a2 * a * a;
        let steps = 1000;
        let h = t / steps as f64;
        let mut a = m;
        for _ in 0..steps {
            let k1 = rhs(a);
            let k2 = rhs(a - 0.5 * h * k1);
            let k3 = rhs(a - 0.5 * h * k2);
            let k4 = rhs(a - h * k3);
            a -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((classical_linear_y0(a1, a2, k, m, t, 1.0) - a).abs() < 1e-12);
    }
}
