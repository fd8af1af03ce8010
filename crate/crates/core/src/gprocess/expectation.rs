use rayon::prelude::*;
use serde::Serialize;

use crate::constants::{bdg_constant, BdgFormula};
use crate::error::Result;
use crate::gprocess::{draw_xi, path_rng, sup_over_family, ControlFamily, IncrementModel, PathEnsemble};
use crate::model::{DiscretizationGrid, GSetting};
use crate::stats::Estimate;

/// Finite-family Monte Carlo estimate of a sublinear expectation. It is a
/// lower bound for the full expectation up to sampling error.
#[derive(Debug, Clone, Serialize)]
pub struct McExpectation {
    pub value: f64,
    pub std_err: f64,
    pub argmax: usize,
    pub per_control: Vec<Estimate>,
    pub labels: Vec<String>,
}

impl McExpectation {
    pub fn from_estimates(per_control: Vec<Estimate>, labels: Vec<String>) -> Result<Self> {
        let means: Vec<f64> = per_control.iter().map(|e| e.mean).collect();
        let (value, argmax) = sup_over_family(&means)?;
        Ok(McExpectation {
            value,
            std_err: per_control[argmax].std_err,
            argmax,
            per_control,
            labels,
        })
    }
}

/// Apply `stat` to every path of `f(path) -> sample`, keeping path order.
pub fn per_path<F>(n_paths: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..n_paths).into_par_iter().map(f).collect()
}

/// `max` over the family of the sample mean of `payoff(B_T)`; `B_T` is
/// accumulated path by path without storing the ensemble.
pub fn gexpect_mc(
    payoff: &(dyn Fn(f64) -> f64 + Sync),
    setting: &GSetting,
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    n_paths: usize,
    seed: u64,
    model: IncrementModel,
) -> Result<McExpectation> {
    let dt = grid.dt();
    let mut estimates = Vec::with_capacity(family.len());
    for c in &family.controls {
        c.check_band(setting)?;
        let scale: Vec<f64> = c.gamma.iter().map(|g| (g * dt).sqrt()).collect();
        let samples = per_path(n_paths, |p| {
            let mut rng = path_rng(seed, p);
            let bt: f64 = scale.iter().map(|s| s * draw_xi(&mut rng, model)).sum();
            payoff(bt)
        });
        estimates.push(Estimate::from_samples(&samples));
    }
    McExpectation::from_estimates(estimates, family.controls.iter().map(|c| c.label.clone()).collect())
}

/// Check of the quadratic-variation sandwich on one ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct QvSandwich {
    /// Every per-step `<B>` increment lies in `[sl^2 dt, sh^2 dt]`.
    pub steps_in_band: bool,
    /// Largest violation of `sl^2 (t-s) <= <B>_t - <B>_s <= sh^2 (t-s)`
    /// over all grid pairs, relative to `sh^2 T` (rounding only).
    pub worst_pair_excess: f64,
    /// For two-point increments: largest gap between realized
    /// `sum dB^2` and `<B>` over all paths and times, relative to `sh^2 T`.
    pub worst_realized_gap: Option<f64>,
}

pub fn qv_sandwich(setting: &GSetting, ensemble: &PathEnsemble) -> QvSandwich {
    let (lo, hi) = (setting.gamma_low(), setting.gamma_high());
    let dt = ensemble.dt;
    let n = ensemble.n_steps;
    let slack = 1e-12 * hi * dt;
    let steps_in_band = (0..n).all(|i| {
        let d = ensemble.qv_increment(i);
        d >= lo * dt - slack && d <= hi * dt + slack
    });
    let qv = ensemble.qv();
    let scale = hi * dt * n as f64;
    let mut worst = 0.0f64;
    for s in 0..=n {
        for t in s + 1..=n {
            let d = qv[t] - qv[s];
            let span = (t - s) as f64 * dt;
            worst = worst.max((lo * span - d) / scale).max((d - hi * span) / scale);
        }
    }
    let worst_realized_gap = (ensemble.model == IncrementModel::Rademacher).then(|| {
        per_path(ensemble.n_paths, |p| {
            let mut acc = 0.0;
            let mut gap = 0.0f64;
            for (i, d) in ensemble.increments(p).iter().enumerate() {
                acc += d * d;
                gap = gap.max((acc - qv[i + 1]).abs());
            }
            gap / scale
        })
        .into_iter()
        .fold(0.0, f64::max)
    });
    QvSandwich {
        steps_in_band,
        worst_pair_excess: worst,
        worst_realized_gap,
    }
}

/// Moment bound `sup_P E[sup_t |B_t|^p] <= sh^p C(p) T^(p/2)`.
#[derive(Debug, Clone, Serialize)]
pub struct BdgCheck {
    pub lhs: McExpectation,
    pub bound: f64,
    pub passed: bool,
}

pub fn bdg_check(
    setting: &GSetting,
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    p: f64,
    n_paths: usize,
    seed: u64,
    formula: &BdgFormula,
) -> Result<BdgCheck> {
    let dt = grid.dt();
    let mut estimates = Vec::with_capacity(family.len());
    for c in &family.controls {
        c.check_band(setting)?;
        let scale: Vec<f64> = c.gamma.iter().map(|g| (g * dt).sqrt()).collect();
        let samples = per_path(n_paths, |path| {
            let mut rng = path_rng(seed, path);
            let mut b = 0.0f64;
            let mut m = 0.0f64;
            for s in &scale {
                b += s * draw_xi(&mut rng, IncrementModel::Gaussian);
                m = m.max(b.abs());
            }
            m.powf(p)
        });
        estimates.push(Estimate::from_samples(&samples));
    }
    let lhs = McExpectation::from_estimates(estimates, family.controls.iter().map(|c| c.label.clone()).collect())?;
    let bound = setting.sigma_high.powf(p) * bdg_constant(p, formula)? * setting.horizon.powf(p / 2.0);
    Ok(BdgCheck {
        passed: lhs.value <= bound,
        lhs,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gprocess::{sample_paths, VolatilityControl};

    fn setting() -> GSetting {
        GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0])
    }

    #[test]
    fn square_payoff_is_attained_at_top_volatility() {
        let s = setting();
        let g = DiscretizationGrid::standard(&s, 20).unwrap();
        let fam = ControlFamily::extremes(&s, 20);
        let r = gexpect_mc(&|x| x * x, &s, &g, &fam, 40_000, 11, IncrementModel::Gaussian).unwrap();
        assert_eq!(r.argmax, 1);
        assert!((r.value - 1.44).abs() < 5.0 * r.std_err);
    }

    #[test]
    fn singleton_low_family_is_classical() {
        let s = setting();
        let g = DiscretizationGrid::standard(&s, 20).unwrap();
        let fam = ControlFamily::new(vec![VolatilityControl::constant(0.64, 20)], &s).unwrap();
        let r = gexpect_mc(&|x| x * x, &s, &g, &fam, 40_000, 12, IncrementModel::Gaussian).unwrap();
        assert!((r.value - 0.64).abs() < 5.0 * r.std_err);
    }

    #[test]
    fn sandwich_and_realized_variation_for_two_point_paths() {
        let s = setting();
        let g = DiscretizationGrid::standard(&s, 30).unwrap();
        let c = VolatilityControl::switch(s.gamma_low(), s.gamma_high(), 10, 30);
        let e = sample_paths(&s, &g, &c, 200, 5, IncrementModel::Rademacher).unwrap();
        let r = qv_sandwich(&s, &e);
        assert!(r.steps_in_band);
        assert!(r.worst_pair_excess <= 1e-14);
        assert!(r.worst_realized_gap.unwrap() < 1e-14);
    }

    #[test]
    fn bdg_bound_holds_at_two() {
        let s = setting();
        let g = DiscretizationGrid::standard(&s, 50).unwrap();
        let fam = ControlFamily::standard(&s, 50);
        let r = bdg_check(&s, &g, &fam, 2.0, 5000, 4, &BdgFormula::Default).unwrap();
        assert!(r.passed);
        assert_eq!(fam.controls[r.lhs.argmax].label, fam.controls[1].label);
    }
}
