//! Coupled solver: Picard iteration between the forward and backward
//! stages, the contraction trace, and the perturbation experiment.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{dp_backward, BackwardOptions, BackwardSolution};
use crate::constants::{
    bdg_constant, certify, lambda_with, BdgFormula, CertificateReport, ConstantInputs, ConstantsReport, Regime, Verdict,
};
use crate::error::{Error, Result};
use crate::gprocess::{sample_paths, vol_levels, ControlFamily, McExpectation, PathEnsemble, VolatilityControl};
use crate::model::{CoefficientSet, DiscretizationGrid, GSetting};
use crate::regression;
use crate::sde::{euler_forward, family_sup, labels, ForwardSolution, McConfig, PathValues, YInput};
use crate::stats::euclid_diff;

/// Disclosure attached to every value-function run.
pub const VALUE_BACKEND_NOTE: &str = "value-function Picard: stage m solves the backward step against the forward flow \
driven by the feedback u(m-1)(t, x) rather than the frozen paths X(m-1); the fixed point is the same";

pub const PATH_BACKEND_NOTE: &str = "path-level Picard: stage m regresses along the frozen paths X(m-1) of a mid-band \
reference control (cubic polynomial basis)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Lattice,
    Paths,
}

impl Backend {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lattice" => Some(Backend::Lattice),
            "paths" => Some(Backend::Paths),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backend::Lattice => "lattice",
            Backend::Paths => "paths",
        }
    }
}

/// Starting guess `u(0)` for the `Y` feedback.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitialPolicy {
    Zero,
    Affine { intercept: f64, slope: Vec<f64> },
}

impl InitialPolicy {
    /// Affine policy with intercept and slopes drawn uniformly from `[-1, 1]`.
    pub fn random_affine(dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        InitialPolicy::Affine {
            intercept: rng.random_range(-1.0..=1.0),
            slope: (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }

    pub fn at(&self, x: &[f64]) -> f64 {
        match self {
            InitialPolicy::Zero => 0.0,
            InitialPolicy::Affine { intercept, slope } => intercept + slope.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
        }
    }

    fn input(&self) -> YInput {
        match self {
            InitialPolicy::Zero => YInput::Zero,
            InitialPolicy::Affine { .. } => {
                let me = self.clone();
                YInput::Policy(Arc::new(move |_, _, x| me.at(x)))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardConfig {
    pub backend: Backend,
    /// Stop once `max(d_x, d_y)^(1/p')` falls to this level.
    pub tol: f64,
    pub max_iter: usize,
    /// Distance exponent; `None` uses `p'` when the constants provide one, else `p`.
    pub exponent: Option<f64>,
    /// Solve even when the certificate fails.
    pub force: bool,
    pub mc: McConfig,
    pub bdg: BdgFormula,
    pub initial: InitialPolicy,
    pub backward: BackwardOptions,
    /// Polynomial degree for the path backend.
    pub degree: u8,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            backend: Backend::Lattice,
            tol: 1e-4,
            max_iter: 50,
            exponent: None,
            force: false,
            mc: McConfig::new(2000, crate::DEFAULT_SEED),
            bdg: BdgFormula::Default,
            initial: InitialPolicy::Zero,
            backward: BackwardOptions::default(),
            degree: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub m: usize,
    /// `E^[sup_t |X(m) - X(m-1)|^q]`.
    pub d_x: f64,
    pub d_x_se: f64,
    /// Same for `Y`.
    pub d_y: f64,
    pub d_y_se: f64,
    /// `max(d_x, d_y)^(1/q)`, compared with the tolerance.
    pub distance: f64,
    /// `d_x(m) / d_x(m-1)`; absent when the previous distance vanished.
    pub ratio: Option<f64>,
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionTrace {
    pub exponent: f64,
    /// `"p'"` or `"p"`.
    pub exponent_source: String,
    /// Lambda at `exponent`; below one when certified.
    pub lambda: f64,
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub tol: f64,
}

impl ContractionTrace {
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone)]
pub struct FBSDESolution {
    pub backend: Backend,
    /// Final forward iterate, one entry per control of the family.
    pub x_solution: Vec<ForwardSolution>,
    /// Final value functions (lattice backend only).
    pub backward: Option<BackwardSolution>,
    pub y0: f64,
    pub trace: ContractionTrace,
    pub certified: Verdict,
    pub certificate: CertificateReport,
    pub forced: bool,
    pub family: ControlFamily,
    pub grid: DiscretizationGrid,
    /// Sampling used for every ensemble of the run.
    pub mc: McConfig,
    pub note: &'static str,
}

impl FBSDESolution {
    /// Ensemble of control `k` of the family, as used by the solver.
    pub fn ensemble(&self, setting: &GSetting, k: usize) -> Result<PathEnsemble> {
        sample_paths(setting, &self.grid, &self.family.controls[k], self.mc.n_paths, self.mc.seed, self.mc.model)
    }

    /// Feedback that generated the final forward iterate.
    pub fn policy(&self) -> Option<YInput> {
        self.backward.as_ref().map(|b| YInput::Lattice(Arc::new(b.y_fn.clone())))
    }
}

fn regime_of(p: f64) -> Regime {
    if p >= 2.0 {
        Regime::PGe2
    } else {
        Regime::PLt2
    }
}

fn gate(setting: &GSetting, coeffs: &CoefficientSet, cfg: &PicardConfig) -> Result<(CertificateReport, bool)> {
    let cert = certify(setting, coeffs, &cfg.bdg)?;
    if cert.verdict.certified() {
        return Ok((cert, false));
    }
    if !cfg.force {
        return Err(Error::NotCertified(cert.reasons.join("; ")));
    }
    log::warn!("solving an uncertified problem because force was set: {}", cert.reasons.join("; "));
    Ok((cert, true))
}

fn exponent_and_lambda(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    cfg: &PicardConfig,
    constants: &ConstantsReport,
) -> Result<(f64, String, f64)> {
    let (q, source) = match (cfg.exponent, constants.p_prime) {
        (Some(q), _) => (q, "user"),
        (None, Some(q)) => (q, "p'"),
        (None, None) => (setting.p, "p"),
    };
    let inp = ConstantInputs::from_problem(setting, coeffs).with_p(q);
    let lambda = lambda_with(&inp, bdg_constant(q, &cfg.bdg)?, regime_of(setting.p))?;
    Ok((q, source.to_string(), lambda.value))
}

/// `X(0) = x0` with `Y(0) = u(0)(x0)` on every path.
fn constant_solution(ens: &PathEnsemble, x0: &[f64], y0: f64) -> ForwardSolution {
    let n = ens.n_steps;
    ForwardSolution {
        control: ens.control.label.clone(),
        y_source: "initial".into(),
        n_paths: ens.n_paths,
        n_steps: n,
        dim: x0.len(),
        states: x0.iter().copied().cycle().take(ens.n_paths * (n + 1) * x0.len()).collect(),
        y_values: vec![y0; ens.n_paths * (n + 1)],
    }
}

/// Per-path `sup_t |X1 - X2|^q` and `sup_t |Y1 - Y2|^q`.
fn path_gaps(a: &ForwardSolution, b: &ForwardSolution, q: f64) -> (Vec<f64>, Vec<f64>) {
    (0..a.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut sx = 0.0f64;
            let mut sy = 0.0f64;
            for i in 0..=a.n_steps {
                sx = sx.max(euclid_diff(a.state(p, i), b.state(p, i)));
                sy = sy.max((a.y(p, i) - b.y(p, i)).abs());
            }
            (sx.powf(q), sy.powf(q))
        })
        .unzip()
}

struct StageDistance {
    d_x: McExpectation,
    d_y: McExpectation,
}

fn stage_distance(prev: &[ForwardSolution], cur: &[ForwardSolution], q: f64, names: &[String]) -> Result<StageDistance> {
    let (gx, gy): (Vec<_>, Vec<_>) = prev.iter().zip(cur).map(|(a, b)| path_gaps(a, b, q)).unzip();
    Ok(StageDistance {
        d_x: family_sup(names, gx)?,
        d_y: family_sup(names, gy)?,
    })
}

/// Solve the coupled problem by Picard iteration. Refuses uncertified
/// problems unless `cfg.force` is set.
pub fn picard_solve(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    cfg: &PicardConfig,
) -> Result<FBSDESolution> {
    setting.validate()?;
    grid.validate(setting)?;
    if !(cfg.tol >= 0.0) || cfg.max_iter == 0 {
        return Err(Error::Domain("need tol >= 0 and max_iter >= 1".into()));
    }
    let (certificate, forced) = gate(setting, coeffs, cfg)?;
    let (q, source, lambda) = exponent_and_lambda(setting, coeffs, cfg, &certificate.constants)?;
    let names = labels(family);
    let ensembles: Vec<PathEnsemble> = family
        .controls
        .iter()
        .map(|c| sample_paths(setting, grid, c, cfg.mc.n_paths, cfg.mc.seed, cfg.mc.model))
        .collect::<Result<_>>()?;
    let y_init = cfg.initial.at(&setting.x0);
    let mut trace = ContractionTrace {
        exponent: q,
        exponent_source: source,
        lambda,
        rows: Vec::new(),
        converged: false,
        tol: cfg.tol,
    };
    let (x_solution, backward, y0) = match cfg.backend {
        Backend::Lattice => lattice_loop(setting, coeffs, grid, &ensembles, cfg, &names, y_init, &mut trace)?,
        Backend::Paths => paths_loop(setting, coeffs, grid, &ensembles, cfg, &names, y_init, &mut trace)?,
    };
    if !trace.converged {
        let last = trace.rows.last().map(|r| r.distance).unwrap_or(f64::NAN);
        log::warn!(
            "Picard did not converge in {} iterations: distance {last:e} > tol {:e}",
            cfg.max_iter,
            cfg.tol
        );
    }
    Ok(FBSDESolution {
        backend: cfg.backend,
        x_solution,
        backward,
        y0,
        trace,
        certified: certificate.verdict,
        certificate,
        forced,
        family: family.clone(),
        grid: grid.clone(),
        mc: cfg.mc,
        note: match cfg.backend {
            Backend::Lattice => VALUE_BACKEND_NOTE,
            Backend::Paths => PATH_BACKEND_NOTE,
        },
    })
}

/// The `p in (1, 2)` entry point: requires `sigma` free of `y`.
pub fn picard_solve_p_lt2(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    cfg: &PicardConfig,
) -> Result<FBSDESolution> {
    if !(setting.p > 1.0 && setting.p < 2.0) {
        return Err(Error::Domain(format!("p must lie in (1, 2), got {}", setting.p)));
    }
    if coeffs.sigma_depends_on_y {
        return Err(Error::Precondition(
            "sigma depends on y; for p in (1, 2) the contraction needs sigma independent of y".into(),
        ));
    }
    picard_solve(setting, coeffs, grid, family, cfg)
}

fn push_row(trace: &mut ContractionTrace, m: usize, d: StageDistance, y0: f64) -> bool {
    let q = trace.exponent;
    let ratio = trace
        .rows
        .last()
        .and_then(|r| (r.d_x > 0.0).then(|| d.d_x.value / r.d_x));
    let distance = d.d_x.value.max(d.d_y.value).powf(1.0 / q);
    trace.rows.push(TraceRow {
        m,
        d_x: d.d_x.value,
        d_x_se: d.d_x.std_err,
        d_y: d.d_y.value,
        d_y_se: d.d_y.std_err,
        distance,
        ratio,
        y0,
    });
    if !distance.is_finite() {
        return false;
    }
    distance <= trace.tol || distance == 0.0
}

type LoopOutput = (Vec<ForwardSolution>, Option<BackwardSolution>, f64);

#[allow(clippy::too_many_arguments)]
fn lattice_loop(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    ensembles: &[PathEnsemble],
    cfg: &PicardConfig,
    names: &[String],
    y_init: f64,
    trace: &mut ContractionTrace,
) -> Result<LoopOutput> {
    let mut policy = cfg.initial.input();
    let mut prev: Vec<ForwardSolution> = ensembles.iter().map(|e| constant_solution(e, &setting.x0, y_init)).collect();
    let mut last = None;
    for m in 1..=cfg.max_iter {
        let u = dp_backward(setting, coeffs, grid, &policy, cfg.backward)?;
        let next = YInput::Lattice(Arc::new(u.y_fn.clone()));
        let cur: Vec<ForwardSolution> = ensembles
            .iter()
            .map(|e| euler_forward(coeffs, grid, &setting.x0, &next, e))
            .collect::<Result<_>>()?;
        let y0 = u.y0(&setting.x0);
        let d = stage_distance(&prev, &cur, trace.exponent, names)?;
        let done = push_row(trace, m, d, y0);
        policy = next;
        prev = cur;
        last = Some(u);
        if done {
            trace.converged = true;
            break;
        }
    }
    let u = last.expect("at least one stage");
    let y0 = u.y0(&setting.x0);
    Ok((prev, Some(u), y0))
}

/// Mid-band constant control used for the regressions.
fn reference_control(setting: &GSetting, n_steps: usize) -> VolatilityControl {
    let mut c = VolatilityControl::constant(0.5 * (setting.gamma_low() + setting.gamma_high()), n_steps);
    c.label = "reference".into();
    c
}

#[allow(clippy::too_many_arguments)]
fn paths_loop(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    ensembles: &[PathEnsemble],
    cfg: &PicardConfig,
    names: &[String],
    y_init: f64,
    trace: &mut ContractionTrace,
) -> Result<LoopOutput> {
    let mut all: Vec<PathEnsemble> = ensembles.to_vec();
    all.push(sample_paths(
        setting,
        grid,
        &reference_control(setting, grid.n_steps),
        cfg.mc.n_paths,
        cfg.mc.seed,
        cfg.mc.model,
    )?);
    let k = ensembles.len();
    let mut prev: Vec<ForwardSolution> = all.iter().map(|e| constant_solution(e, &setting.x0, y_init)).collect();
    let mut y0 = y_init;
    for m in 1..=cfg.max_iter {
        let ys = regression_stage(setting, coeffs, grid, &prev, &all, cfg.degree)?;
        y0 = ys[k].path(0)[0];
        let cur: Vec<ForwardSolution> = all
            .iter()
            .zip(ys)
            .map(|(e, y)| euler_forward(coeffs, grid, &setting.x0, &YInput::Paths(Arc::new(y)), e))
            .collect::<Result<_>>()?;
        let d = stage_distance(&prev[..k], &cur[..k], trace.exponent, names)?;
        let done = push_row(trace, m, d, y0);
        prev = cur;
        if done {
            trace.converged = true;
            break;
        }
    }
    prev.truncate(k);
    Ok((prev, None, y0))
}

/// One backward stage along frozen forward paths. The last ensemble is the
/// reference: per step it supplies the regressions
/// `E[Y'], E[Y' (xi^2 - 1)], E[Y' xi]` on `X_i`, which give
/// `E_s = E0 + (s^2 - g) / (2 g) G` and `Z = E[Y' xi] / sqrt(g dt)`.
fn regression_stage(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    prev: &[ForwardSolution],
    ens: &[PathEnsemble],
    degree: u8,
) -> Result<Vec<PathValues>> {
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim = coeffs.dim();
    let np = prev[0].n_paths;
    let r = prev.len() - 1;
    let levels = vol_levels(setting);
    let mut ys: Vec<Vec<f64>> = prev
        .iter()
        .map(|s| {
            let mut v = vec![0.0; np * (n + 1)];
            for p in 0..np {
                v[p * (n + 1) + n] = (coeffs.phi)(s.state(p, n));
            }
            v
        })
        .collect();
    for i in (0..n).rev() {
        let t = grid.time(i);
        let gref = ens[r].gamma(i);
        let sq = (gref * dt).sqrt();
        let mut pts = Vec::with_capacity(np * dim);
        let mut t0 = Vec::with_capacity(np);
        for p in 0..np {
            pts.extend_from_slice(prev[r].state(p, i));
            t0.push(ys[r][p * (n + 1) + i + 1]);
        }
        let level = regression::fit(&pts, dim, degree, &[&t0])?;
        // The level is subtracted before the xi-weighted targets; since xi
        // is centred given X_i this leaves them unbiased with far less noise.
        let mut t1 = Vec::with_capacity(np);
        let mut t2 = Vec::with_capacity(np);
        for p in 0..np {
            let res = t0[p] - level.eval(0, prev[r].state(p, i));
            let xi = ens[r].increments(p)[i] / sq;
            t1.push(res * (xi * xi - 1.0));
            t2.push(res * xi);
        }
        let fit = regression::fit(&pts, dim, degree, &[&t0, &t1, &t2])?;
        for (s, y) in prev.iter().zip(ys.iter_mut()) {
            let col: Vec<f64> = (0..np)
                .into_par_iter()
                .map(|p| {
                    let x = s.state(p, i);
                    let mut c = [0.0; 3];
                    fit.eval_all(x, &mut c);
                    let z = c[2] / sq;
                    let mut best = f64::NEG_INFINITY;
                    for &sv in &levels {
                        let gamma = sv * sv;
                        let e = c[0] + (gamma - gref) / (2.0 * gref) * c[1];
                        let v = e - (coeffs.f)(t, x, e, z) * dt - (coeffs.g)(t, x, e, z) * gamma * dt;
                        if v >= best || !v.is_finite() {
                            best = v;
                        }
                    }
                    best
                })
                .collect();
            for (p, v) in col.into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::non_finite("regression backward value", format!("step {i}, path {p}")));
                }
                y[p * (n + 1) + i] = v;
            }
        }
    }
    Ok(ys.into_iter().map(|v| PathValues::new(np, n + 1, v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionRow {
    pub m: usize,
    pub d: f64,
    pub se: f64,
    /// `Lambda^(m-1) d_1`.
    pub envelope: f64,
    /// Allowed excess over the envelope.
    pub budget: f64,
    pub ratio: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub exponent: f64,
    pub lambda: f64,
    pub rows: Vec<ContractionRow>,
    pub flagged: Vec<usize>,
}

/// Trace against the geometric envelope `Lambda_{p'}^(m-1) d_1`. The budget
/// is `5 (SE_m + Lambda^(m-1) SE_1)` plus a relative floor of `sqrt(eps) d_1`
/// for rounding in the iterates.
pub fn contraction_report(trace: &ContractionTrace, constants: &ConstantsReport) -> ContractionReport {
    let lambda = match (constants.p_prime, constants.lambda_p_prime) {
        (Some(q), Some(l)) if (q - trace.exponent).abs() <= 1e-12 * q => l.value,
        _ => trace.lambda,
    };
    let (d1, se1) = trace.rows.first().map(|r| (r.d_x, r.d_x_se)).unwrap_or((0.0, 0.0));
    let floor = f64::EPSILON.sqrt() * d1;
    let rows: Vec<ContractionRow> = trace
        .rows
        .iter()
        .map(|r| {
            let w = lambda.powi(r.m as i32 - 1);
            let envelope = w * d1;
            let budget = 5.0 * (r.d_x_se + w * se1) + floor;
            ContractionRow {
                m: r.m,
                d: r.d_x,
                se: r.d_x_se,
                envelope,
                budget,
                ratio: r.ratio,
                flagged: r.d_x > envelope + budget,
            }
        })
        .collect();
    ContractionReport {
        exponent: trace.exponent,
        lambda,
        flagged: rows.iter().filter(|r| r.flagged).map(|r| r.m).collect(),
        rows,
    }
}

/// One problem of a perturbation pair.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub setting: &'a GSetting,
    pub coeffs: &'a CoefficientSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationLevel {
    pub n_steps: usize,
    pub lhs: McExpectation,
    pub rhs: McExpectation,
    /// Fitted constant `lhs / rhs`; zero when `lhs` vanishes.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    /// `"p>=2"` or `"p<2"`.
    pub branch: String,
    pub coarse: PerturbationLevel,
    pub refined: PerturbationLevel,
    /// `refined.ratio / coarse.ratio`.
    pub growth: f64,
    pub passed: bool,
}

/// Solves both problems on `grid` and on `grid.refined(2)`, then compares
/// `E^[sup |X1 - X2|^p]` with the data bracket
/// `E^[(|x^| + |phi^| + int (|b^| + |h^| + |f^| + |g^|) dt)^p + (int |sigma^|^2 dt)^(p/2)]`,
/// the hatted differences taken along the second solution.
pub fn perturbation_experiment(
    problems: [Problem<'_>; 2],
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    cfg: &PicardConfig,
) -> Result<PerturbationReport> {
    let p = problems[1].setting.p;
    if (problems[0].setting.p - p).abs() > 0.0 {
        return Err(Error::InvalidSetting("both problems must use the same p".into()));
    }
    if p < 2.0 && problems.iter().any(|pr| pr.coeffs.sigma_depends_on_y) {
        return Err(Error::Precondition(
            "sigma depends on y; the p in (1, 2) perturbation estimate needs sigma independent of y".into(),
        ));
    }
    let coarse = perturbation_level(problems, grid, family, cfg)?;
    let refined = perturbation_level(problems, &grid.refined(2), &family.refine(2), cfg)?;
    let growth = if coarse.ratio == 0.0 {
        if refined.ratio == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        refined.ratio / coarse.ratio
    };
    Ok(PerturbationReport {
        branch: if p >= 2.0 { "p>=2" } else { "p<2" }.into(),
        passed: coarse.ratio.is_finite() && refined.ratio.is_finite() && growth <= 2.0,
        growth,
        coarse,
        refined,
    })
}

fn perturbation_level(
    problems: [Problem<'_>; 2],
    grid: &DiscretizationGrid,
    family: &ControlFamily,
    cfg: &PicardConfig,
) -> Result<PerturbationLevel> {
    let cfg = PicardConfig {
        backend: Backend::Lattice,
        ..cfg.clone()
    };
    let s1 = picard_solve(problems[0].setting, problems[0].coeffs, grid, family, &cfg)?;
    let s2 = picard_solve(problems[1].setting, problems[1].coeffs, grid, family, &cfg)?;
    let (c1, c2) = (problems[0].coeffs, problems[1].coeffs);
    let p = problems[1].setting.p;
    let xhat = euclid_diff(&problems[0].setting.x0, &problems[1].setting.x0);
    let z2 = &s2.backward.as_ref().expect("lattice backend").z_fn;
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim = c2.dim();
    let mut lhs = Vec::with_capacity(family.len());
    let mut rhs = Vec::with_capacity(family.len());
    for (a, b) in s1.x_solution.iter().zip(&s2.x_solution) {
        let (l, r): (Vec<f64>, Vec<f64>) = (0..b.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut sup = 0.0f64;
                for i in 0..=n {
                    sup = sup.max(euclid_diff(a.state(path, i), b.state(path, i)));
                }
                let mut buf = vec![0.0; 6 * dim];
                let (b1, rest) = buf.split_at_mut(dim);
                let (h1, rest) = rest.split_at_mut(dim);
                let (v1, rest) = rest.split_at_mut(dim);
                let (b2, rest) = rest.split_at_mut(dim);
                let (h2, v2) = rest.split_at_mut(dim);
                let xt = b.terminal(path);
                let mut data = xhat + ((c1.phi)(xt) - (c2.phi)(xt)).abs();
                let mut vol = 0.0;
                for i in 0..n {
                    let t = grid.time(i);
                    let x = b.state(path, i);
                    let y = b.y(path, i);
                    let z = z2.eval(i, x);
                    c1.forward(t, x, y, b1, h1, v1);
                    c2.forward(t, x, y, b2, h2, v2);
                    let df = ((c1.f)(t, x, y, z) - (c2.f)(t, x, y, z)).abs();
                    let dg = ((c1.g)(t, x, y, z) - (c2.g)(t, x, y, z)).abs();
                    data += (euclid_diff(b1, b2) + euclid_diff(h1, h2) + df + dg) * dt;
                    let ds = euclid_diff(v1, v2);
                    vol += ds * ds * dt;
                }
                (sup.powf(p), data.powf(p) + vol.powf(p / 2.0))
            })
            .unzip();
        lhs.push(l);
        rhs.push(r);
    }
    let names = labels(family);
    let lhs = family_sup(&names, lhs)?;
    let rhs = family_sup(&names, rhs)?;
    let ratio = if lhs.value == 0.0 { 0.0 } else { lhs.value / rhs.value };
    Ok(PerturbationLevel {
        n_steps: n,
        lhs,
        rhs,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog_entry, classical_linear_y0, problem_grid, Quadrature};

    fn setup(name: &str, n_steps: usize) -> (GSetting, CoefficientSet, DiscretizationGrid, ControlFamily) {
        let e = catalog_entry(name).unwrap();
        let grid = problem_grid(&e.setting, &e.coefficients, n_steps, Some(401), Quadrature::TwoPoint).unwrap();
        let family = ControlFamily::standard(&e.setting, n_steps);
        (e.setting, e.coefficients, grid, family)
    }

    fn cfg(n_paths: usize) -> PicardConfig {
        PicardConfig {
            mc: McConfig::new(n_paths, 7),
            tol: 1e-8,
            ..PicardConfig::default()
        }
    }

    #[test]
    fn decoupled_converges_at_second_stage() {
        let (s, c, g, f) = setup("decoupled", 20);
        let sol = picard_solve(&s, &c, &g, &f, &cfg(200)).unwrap();
        assert!(sol.trace.converged);
        assert_eq!(sol.trace.iterations(), 2);
        assert!(sol.trace.rows[0].d_x > 0.0);
        assert_eq!(sol.trace.rows[1].d_x, 0.0);
        assert_eq!(sol.trace.rows[1].d_y, 0.0);
        let rep = contraction_report(&sol.trace, &sol.certificate.constants);
        assert!(rep.flagged.is_empty());
    }

    #[test]
    fn classical_linear_matches_closed_form() {
        let (s, c, g, f) = setup("classical-linear", 50);
        let sol = picard_solve(&s, &c, &g, &f, &cfg(200)).unwrap();
        assert!(sol.trace.converged);
        let exact = classical_linear_y0(-0.1, 0.015, 0.05, 1.0, 0.5, 1.0);
        assert!((sol.y0 - exact).abs() <= 1e-3 * exact.abs(), "{} vs {exact}", sol.y0);
    }

    #[test]
    fn envelope_is_geometric() {
        let (s, c, g, f) = setup("decoupled", 10);
        let sol = picard_solve(&s, &c, &g, &f, &cfg(50)).unwrap();
        let mut trace = sol.trace.clone();
        trace.lambda = 0.5;
        trace.exponent = 99.0;
        trace.rows = (1..=4)
            .map(|m| TraceRow {
                m,
                d_x: 0.0,
                d_x_se: 0.0,
                d_y: 0.0,
                d_y_se: 0.0,
                distance: 0.0,
                ratio: None,
                y0: 0.0,
            })
            .collect();
        trace.rows[0].d_x = 1.0;
        let rep = contraction_report(&trace, &sol.certificate.constants);
        let env: Vec<f64> = rep.rows.iter().map(|r| r.envelope).collect();
        assert_eq!(env, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn weakly_coupled_contracts_and_initial_policy_does_not_matter() {
        let (s, c, g, f) = setup("weakly-coupled", 20);
        let base = cfg(400);
        let a = picard_solve(&s, &c, &g, &f, &base).unwrap();
        assert!(a.trace.converged, "{:?}", a.trace.rows);
        let rep = contraction_report(&a.trace, &a.certificate.constants);
        assert!(rep.flagged.is_empty(), "{rep:?}");
        let b = picard_solve(
            &s,
            &c,
            &g,
            &f,
            &PicardConfig {
                initial: InitialPolicy::random_affine(1, 3),
                ..base.clone()
            },
        )
        .unwrap();
        assert!((a.y0 - b.y0).abs() <= 2.0 * base.tol.max(1e-12) + 1e-10, "{} vs {}", a.y0, b.y0);
        // One more stage barely moves Y0.
        let u = dp_backward(&s, &c, &g, &a.policy().unwrap(), base.backward).unwrap();
        assert!((u.y0(&s.x0) - a.y0).abs() <= 1e-6);
    }

    #[test]
    fn uncertified_needs_force() {
        let (s, c, g, f) = setup("weakly-coupled", 10);
        let strong = c.with_lipschitz(crate::model::Lipschitz::new(c.lipschitz.l1, 50.0, 50.0));
        assert!(matches!(
            picard_solve(&s, &strong, &g, &f, &cfg(20)),
            Err(Error::NotCertified(_))
        ));
        let forced = picard_solve(
            &s,
            &strong,
            &g,
            &f,
            &PicardConfig {
                force: true,
                max_iter: 3,
                ..cfg(20)
            },
        )
        .unwrap();
        assert!(forced.forced);
    }

    #[test]
    fn p_lt2_rejects_y_dependent_sigma() {
        let (s, c, g, f) = setup("weakly-coupled", 10);
        let s15 = s.with_p(1.5);
        assert!(matches!(
            picard_solve_p_lt2(&s15, &c, &g, &f, &cfg(20)),
            Err(Error::Precondition(_))
        ));
        let (s, c, g, f) = setup("weakly-coupled-p15", 10);
        let sol = picard_solve_p_lt2(&s, &c, &g, &f, &cfg(200)).unwrap();
        assert!(sol.trace.converged);
        assert_eq!(sol.certified, Verdict::ExistsUniquePLt2);
    }

    #[test]
    fn backends_agree_on_y0() {
        let (s, c, g, f) = setup("weakly-coupled", 20);
        let lat = picard_solve(&s, &c, &g, &f, &cfg(4000)).unwrap();
        let paths = picard_solve(
            &s,
            &c,
            &g,
            &f,
            &PicardConfig {
                backend: Backend::Paths,
                tol: 1e-6,
                ..cfg(4000)
            },
        )
        .unwrap();
        assert!(paths.trace.converged);
        assert!((lat.y0 - paths.y0).abs() < 5e-3, "{} vs {}", lat.y0, paths.y0);
    }

    #[test]
    fn identical_problems_give_zero_ratio() {
        let (s, c, g, f) = setup("weakly-coupled", 10);
        let pr = Problem {
            setting: &s,
            coeffs: &c,
        };
        let rep = perturbation_experiment([pr, pr], &g, &f, &cfg(100)).unwrap();
        assert_eq!(rep.coarse.lhs.value, 0.0);
        assert_eq!(rep.coarse.ratio, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn shifted_start_gives_a_stable_ratio() {
        let (s, c, g, f) = setup("weakly-coupled", 10);
        let s2 = s.with_x0(vec![0.3]);
        let rep = perturbation_experiment(
            [
                Problem {
                    setting: &s,
                    coeffs: &c,
                },
                Problem {
                    setting: &s2,
                    coeffs: &c,
                },
            ],
            &g,
            &f,
            &cfg(200),
        )
        .unwrap();
        assert!(rep.coarse.rhs.value >= 0.3f64.powi(2));
        assert!(rep.passed, "{rep:?}");
    }
}
