//! Forward Euler scheme for the G-SDE and the stability estimate check.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gprocess::{sample_paths, ControlFamily, IncrementModel, LatticeFunction, McExpectation, PathEnsemble};
use crate::model::{CoefficientSet, DiscretizationGrid, GSetting};
use crate::stats::{euclid, euclid_diff, Estimate};

/// `(i, t, x) -> y`: a Markov feedback.
pub type PolicyFn = Arc<dyn Fn(usize, f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, B_t, <B>_t) -> y`: an exogenous functional of the driving path.
pub type BrownianFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Path-major values `values[path * n_times + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathValues {
    pub n_paths: usize,
    pub n_times: usize,
    pub values: Vec<f64>,
}

impl PathValues {
    pub fn new(n_paths: usize, n_times: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_paths * n_times);
        PathValues {
            n_paths,
            n_times,
            values,
        }
    }

    #[inline]
    pub fn path(&self, p: usize) -> &[f64] {
        &self.values[p * self.n_times..(p + 1) * self.n_times]
    }
}

/// Where the forward equation reads `Y` from.
#[derive(Clone)]
pub enum YInput {
    Zero,
    Constant(f64),
    Lattice(Arc<LatticeFunction>),
    Policy(PolicyFn),
    Brownian(BrownianFn),
    /// Frozen values along the paths of one specific ensemble.
    Paths(Arc<PathValues>),
}

impl fmt::Debug for YInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl YInput {
    pub fn tag(&self) -> String {
        match self {
            YInput::Zero => "zero".into(),
            YInput::Constant(c) => format!("constant({c})"),
            YInput::Lattice(_) => "lattice".into(),
            YInput::Policy(_) => "policy".into(),
            YInput::Brownian(_) => "brownian-functional".into(),
            YInput::Paths(_) => "paths".into(),
        }
    }

    /// Value as a Markov feedback, if the input is one.
    #[inline]
    pub fn markov(&self, i: usize, t: f64, x: &[f64]) -> Option<f64> {
        match self {
            YInput::Zero => Some(0.0),
            YInput::Constant(c) => Some(*c),
            YInput::Lattice(u) => Some(u.eval(i, x)),
            YInput::Policy(f) => Some(f(i, t, x)),
            YInput::Brownian(_) | YInput::Paths(_) => None,
        }
    }

    pub fn is_markov(&self) -> bool {
        !matches!(self, YInput::Brownian(_) | YInput::Paths(_))
    }
}

/// Euler paths of `X` together with the `Y` values they consumed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardSolution {
    pub control: String,
    pub y_source: String,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim: usize,
    /// `states[(path * (n_steps + 1) + i) * dim + j]`.
    #[serde(skip)]
    pub states: Vec<f64>,
    /// `y_values[path * (n_steps + 1) + i]`.
    #[serde(skip)]
    pub y_values: Vec<f64>,
}

impl ForwardSolution {
    #[inline]
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let k = (path * (self.n_steps + 1) + i) * self.dim;
        &self.states[k..k + self.dim]
    }

    #[inline]
    pub fn y(&self, path: usize, i: usize) -> f64 {
        self.y_values[path * (self.n_steps + 1) + i]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.n_steps)
    }

    /// First coordinate along one path.
    pub fn coordinate(&self, path: usize, j: usize) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.state(path, i)[j]).collect()
    }
}

/// `X_{i+1} = X_i + b dt + h gamma_i dt + sigma dB_i`, with `Y_i` read from
/// `y` at `(t_i, X_i)`.
pub fn euler_forward(
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    x0: &[f64],
    y: &YInput,
    ensemble: &PathEnsemble,
) -> Result<ForwardSolution> {
    let n = grid.n_steps;
    let dim = coeffs.dim();
    if ensemble.n_steps != n {
        return Err(Error::InvalidGrid(format!(
            "ensemble has {} steps, grid has {n}",
            ensemble.n_steps
        )));
    }
    if x0.len() != dim {
        return Err(Error::InvalidSetting(format!("x0 has {} coordinates, expected {dim}", x0.len())));
    }
    if let YInput::Paths(v) = y {
        if v.n_paths != ensemble.n_paths || v.n_times != n + 1 {
            return Err(Error::InvalidGrid("frozen Y paths do not match the ensemble".into()));
        }
    }
    let dt = grid.dt();
    let stride = (n + 1) * dim;
    let mut states = vec![0.0; ensemble.n_paths * stride];
    let mut y_values = vec![0.0; ensemble.n_paths * (n + 1)];
    states
        .par_chunks_mut(stride)
        .zip(y_values.par_chunks_mut(n + 1))
        .enumerate()
        .try_for_each(|(path, (xs, ys))| -> Result<()> {
            let db = ensemble.increments(path);
            let qv = ensemble.qv();
            let mut b = vec![0.0; dim];
            let mut h = vec![0.0; dim];
            let mut s = vec![0.0; dim];
            let mut bm = 0.0;
            xs[..dim].copy_from_slice(x0);
            for i in 0..=n {
                let t = grid.time(i);
                let (done, rest) = xs.split_at_mut((i + 1) * dim);
                let x = &done[i * dim..];
                let yi = match y {
                    YInput::Brownian(f) => f(t, bm, qv[i]),
                    YInput::Paths(v) => v.path(path)[i],
                    other => other.markov(i, t, x).expect("markov input"),
                };
                if !yi.is_finite() {
                    return Err(Error::non_finite("Y input", format!("step {i}, path {path}")));
                }
                ys[i] = yi;
                if i == n {
                    break;
                }
                coeffs.forward(t, x, yi, &mut b, &mut h, &mut s);
                let g = ensemble.qv_increment(i);
                for j in 0..dim {
                    let v = x[j] + b[j] * dt + h[j] * g + s[j] * db[i];
                    if !v.is_finite() {
                        return Err(Error::non_finite("forward state", format!("step {}, path {path}", i + 1)));
                    }
                    rest[j] = v;
                }
                bm += db[i];
            }
            Ok(())
        })?;
    Ok(ForwardSolution {
        control: ensemble.control.label.clone(),
        y_source: y.tag(),
        n_paths: ensemble.n_paths,
        n_steps: n,
        dim,
        states,
        y_values,
    })
}

/// Monte Carlo settings shared by the empirical checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub model: IncrementModel,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        McConfig {
            n_paths,
            seed,
            model: IncrementModel::Gaussian,
        }
    }
}

/// Outcome of an inequality `lhs <= constant * rhs` checked by Monte Carlo.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityVerdict {
    pub lhs: McExpectation,
    pub rhs: McExpectation,
    pub constant: f64,
    /// `5 (SE(lhs) + constant SE(rhs))`.
    pub allowance: f64,
    /// `constant rhs + allowance - lhs`.
    pub margin: f64,
    /// `lhs / rhs`, zero when both vanish.
    pub ratio: f64,
    pub passed: bool,
}

impl StabilityVerdict {
    pub fn new(lhs: McExpectation, rhs: McExpectation, constant: f64) -> Self {
        let allowance = 5.0 * (lhs.std_err + constant * rhs.std_err);
        let margin = constant * rhs.value + allowance - lhs.value;
        let ratio = if lhs.value == 0.0 { 0.0 } else { lhs.value / rhs.value };
        StabilityVerdict {
            passed: lhs.value <= constant * rhs.value + allowance,
            lhs,
            rhs,
            constant,
            allowance,
            margin,
            ratio,
        }
    }
}

/// Sup over the family of the per-control means of `sample(path)`.
pub(crate) fn family_sup(labels: &[String], per_control: Vec<Vec<f64>>) -> Result<McExpectation> {
    let est = per_control.iter().map(|v| Estimate::from_samples(v)).collect();
    McExpectation::from_estimates(est, labels.to_vec())
}

pub(crate) fn labels(family: &ControlFamily) -> Vec<String> {
    family.controls.iter().map(|c| c.label.clone()).collect()
}

/// Checks the forward stability estimate for two `Y` inputs driving the
/// same coefficients from the same `x0`: `E^[sup |X1 - X2|^p]` against
/// `C1 E^[(int |b^| + |h^| dt)^p + (int |sigma^|^2 dt)^(p/2)]`, the hatted
/// differences taken along `X2`.
#[allow(clippy::too_many_arguments)]
pub fn sde_stability_check(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    y1: &YInput,
    y2: &YInput,
    p: f64,
    c1: f64,
    mc: McConfig,
) -> Result<StabilityVerdict> {
    let dim = coeffs.dim();
    let dt = grid.dt();
    let n = grid.n_steps;
    let mut lhs = Vec::with_capacity(family.len());
    let mut rhs = Vec::with_capacity(family.len());
    for control in &family.controls {
        let ens = sample_paths(setting, grid, control, mc.n_paths, mc.seed, mc.model)?;
        let x1 = euler_forward(coeffs, grid, &setting.x0, y1, &ens)?;
        let x2 = euler_forward(coeffs, grid, &setting.x0, y2, &ens)?;
        let (l, r): (Vec<f64>, Vec<f64>) = (0..mc.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut sup = 0.0f64;
                for i in 0..=n {
                    sup = sup.max(euclid_diff(x1.state(path, i), x2.state(path, i)));
                }
                let mut buf = vec![0.0; 6 * dim];
                let (b1, rest) = buf.split_at_mut(dim);
                let (h1, rest) = rest.split_at_mut(dim);
                let (s1, rest) = rest.split_at_mut(dim);
                let (b2, rest) = rest.split_at_mut(dim);
                let (h2, s2) = rest.split_at_mut(dim);
                let mut drift = 0.0;
                let mut vol = 0.0;
                for i in 0..n {
                    let t = grid.time(i);
                    let x = x2.state(path, i);
                    coeffs.forward(t, x, x1.y(path, i), b1, h1, s1);
                    coeffs.forward(t, x, x2.y(path, i), b2, h2, s2);
                    drift += (euclid_diff(b1, b2) + euclid_diff(h1, h2)) * dt;
                    let ds = euclid_diff(s1, s2);
                    vol += ds * ds * dt;
                }
                (sup.powf(p), drift.powf(p) + vol.powf(p / 2.0))
            })
            .unzip();
        lhs.push(l);
        rhs.push(r);
    }
    let names = labels(family);
    Ok(StabilityVerdict::new(family_sup(&names, lhs)?, family_sup(&names, rhs)?, c1))
}

/// Per-time mean and quantiles of each coordinate of `X`.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardSummary {
    pub control: String,
    pub times: Vec<f64>,
    /// `[coordinate][time]`.
    pub mean: Vec<Vec<f64>>,
    pub q05: Vec<Vec<f64>>,
    pub q50: Vec<Vec<f64>>,
    pub q95: Vec<Vec<f64>>,
}

pub fn summarize(sol: &ForwardSolution, grid: &DiscretizationGrid) -> ForwardSummary {
    let n = sol.n_steps;
    let mut out = ForwardSummary {
        control: sol.control.clone(),
        times: (0..=n).map(|i| grid.time(i)).collect(),
        mean: vec![Vec::with_capacity(n + 1); sol.dim],
        q05: vec![Vec::with_capacity(n + 1); sol.dim],
        q50: vec![Vec::with_capacity(n + 1); sol.dim],
        q95: vec![Vec::with_capacity(n + 1); sol.dim],
    };
    for j in 0..sol.dim {
        for i in 0..=n {
            let mut v: Vec<f64> = (0..sol.n_paths).map(|p| sol.state(p, i)[j]).collect();
            out.mean[j].push(crate::stats::mean(&v));
            v.sort_by(f64::total_cmp);
            out.q05[j].push(crate::stats::quantile(&v, 0.05));
            out.q50[j].push(crate::stats::quantile(&v, 0.5));
            out.q95[j].push(crate::stats::quantile(&v, 0.95));
        }
    }
    out
}

/// `E^[sup_t |X_t|^p]` over a family, used as a scale.
pub fn sup_norm(sols: &[ForwardSolution], p: f64, names: &[String]) -> Result<McExpectation> {
    let samples = sols
        .iter()
        .map(|s| {
            (0..s.n_paths)
                .map(|path| (0..=s.n_steps).map(|i| euclid(s.state(path, i))).fold(0.0, f64::max).powf(p))
                .collect()
        })
        .collect();
    family_sup(names, samples)
}
