//! Backward G-BSDE stage: dynamic programming on the lattice, extraction of
//! `K` along paths, and the two backward estimates.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gprocess::{interpolate, sample_paths, vol_levels, ControlFamily, LatticeFunction, McExpectation, PathEnsemble};
use crate::model::{CoefficientSet, DiscretizationGrid, GSetting};
use crate::sde::{euler_forward, family_sup, labels, ForwardSolution, McConfig, PathValues, StabilityVerdict, YInput};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackwardOptions {
    /// Solve `Y = E - f(Y) dt - g(Y) gamma dt` per node instead of using
    /// the predictor `Y = E` inside `f, g`.
    pub implicit: bool,
    pub implicit_iters: usize,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            implicit: false,
            implicit_iters: 8,
        }
    }
}

/// Value functions of the backward stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackwardSolution {
    pub y_fn: LatticeFunction,
    pub z_fn: LatticeFunction,
    /// Share of (time, node) pairs where the top volatility won.
    pub top_share: f64,
}

impl BackwardSolution {
    pub fn y0(&self, x0: &[f64]) -> f64 {
        self.y_fn.eval(0, x0)
    }
}

/// Backward recursion on the lattice. At each node the state is pushed
/// one Euler step with `y` read from `policy`, and for each band end `s`
///
/// `E_s = sum w u(x'),  Z_s = sum w xi u(x') / (s sqrt dt)`,
/// `Y_s = E_s - f(t, x, E_s, Z_s) dt - g(t, x, E_s, Z_s) s^2 dt`;
///
/// `Y` is the larger candidate and `Z` comes from the winner (the top
/// volatility on ties).
pub fn dp_backward(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    policy: &YInput,
    opts: BackwardOptions,
) -> Result<BackwardSolution> {
    if !policy.is_markov() {
        return Err(Error::Precondition(format!(
            "backward stage needs a Markov forward flow, got a {} input",
            policy.tag()
        )));
    }
    if grid.dim() != coeffs.dim() {
        return Err(Error::InvalidGrid(format!(
            "grid has {} axes, coefficients have dimension {}",
            grid.dim(),
            coeffs.dim()
        )));
    }
    let dim = grid.dim();
    let n = grid.n_steps;
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let rule = grid.quadrature.rule();
    let levels = vol_levels(setting);

    let mut y_fn = LatticeFunction::zeros(grid);
    let mut z_fn = LatticeFunction::zeros(grid);
    let mut x = vec![0.0; dim];
    for k in 0..nn {
        grid.node_point(k, &mut x);
        let v = (coeffs.phi)(&x);
        if !v.is_finite() {
            return Err(Error::non_finite("phi", format!("node {x:?}")));
        }
        y_fn.values[n][k] = v;
    }
    let mut top = 0usize;
    for i in (0..n).rev() {
        let t = grid.time(i);
        let next = &y_fn.values[i + 1];
        let rows: Vec<(f64, f64, bool)> = (0..nn)
            .into_par_iter()
            .map(|k| {
                let mut x = vec![0.0; dim];
                grid.node_point(k, &mut x);
                let y_in = policy.markov(i, t, &x).expect("markov input");
                let mut b = vec![0.0; dim];
                let mut h = vec![0.0; dim];
                let mut s = vec![0.0; dim];
                coeffs.forward(t, &x, y_in, &mut b, &mut h, &mut s);
                let mut xp = vec![0.0; dim];
                let mut best = (f64::NEG_INFINITY, 0.0, false);
                for (li, &sv) in levels.iter().enumerate() {
                    let gamma = sv * sv;
                    let mut e = 0.0;
                    let mut zs = 0.0;
                    for &(xi, w) in &rule {
                        for j in 0..dim {
                            xp[j] = x[j] + b[j] * dt + h[j] * gamma * dt + s[j] * sv * sq * xi;
                        }
                        let u = interpolate(&grid.axes, next, &xp);
                        e += w * u;
                        zs += w * xi * u;
                    }
                    let z = zs / (sv * sq);
                    let step = |y: f64| e - (coeffs.f)(t, &x, y, z) * dt - (coeffs.g)(t, &x, y, z) * gamma * dt;
                    let mut y = step(e);
                    if opts.implicit {
                        for _ in 0..opts.implicit_iters {
                            let y2 = step(y);
                            let done = (y2 - y).abs() <= 1e-15 * (1.0 + y.abs());
                            y = y2;
                            if done {
                                break;
                            }
                        }
                    }
                    if y >= best.0 || !y.is_finite() {
                        best = (y, z, li + 1 == levels.len());
                    }
                }
                best
            })
            .collect();
        for (k, &(y, z, hi)) in rows.iter().enumerate() {
            if !(y.is_finite() && z.is_finite()) {
                let mut x = vec![0.0; dim];
                grid.node_point(k, &mut x);
                return Err(Error::non_finite("backward value", format!("step {i}, node {x:?}")));
            }
            y_fn.values[i][k] = y;
            z_fn.values[i][k] = z;
            top += hi as usize;
        }
    }
    z_fn.values[n] = z_fn.values[n.saturating_sub(1)].clone();
    Ok(BackwardSolution {
        y_fn,
        z_fn,
        top_share: top as f64 / (n * nn) as f64,
    })
}

/// Same coefficients with `f, g, phi` reading `x + offset`.
pub fn shift_backward(coeffs: &CoefficientSet, offset: &[f64]) -> CoefficientSet {
    if offset.iter().all(|&o| o == 0.0) {
        return coeffs.clone();
    }
    let off: Arc<[f64]> = offset.into();
    let shifted = |o: &Arc<[f64]>, x: &[f64]| -> smallvec::SmallVec<[f64; 8]> { x.iter().zip(o.iter()).map(|(a, b)| a + b).collect() };
    let (f, g, phi) = (coeffs.f.clone(), coeffs.g.clone(), coeffs.phi.clone());
    let (o1, o2, o3) = (off.clone(), off.clone(), off);
    let mut out = coeffs.clone();
    out.f = Arc::new(move |t, x, y, z| f(t, &shifted(&o1, x), y, z));
    out.g = Arc::new(move |t, x, y, z| g(t, &shifted(&o2, x), y, z));
    out.phi = Arc::new(move |x| phi(&shifted(&o3, x)));
    out
}

/// `K` along the paths of one ensemble, from the discrete identity
/// `K_{i+1} = K_i + Y_{i+1} - Y_i - f dt - g gamma_i dt - Z_i dB_i`.
#[derive(Debug, Clone, Serialize)]
pub struct KPaths {
    pub control: String,
    #[serde(skip)]
    pub k: PathValues,
    #[serde(skip)]
    pub y: PathValues,
    #[serde(skip)]
    pub z: PathValues,
    /// Largest single-step increase of `K` over all paths.
    pub max_increment: f64,
    pub k_terminal: Estimate,
    /// `max |Y_T - phi(X_T)|` over paths.
    pub terminal_gap: f64,
}

pub fn k_extract(
    sol: &BackwardSolution,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    fwd: &ForwardSolution,
    ens: &PathEnsemble,
) -> Result<KPaths> {
    let n = grid.n_steps;
    let dt = grid.dt();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> = (0..fwd.n_paths)
        .into_par_iter()
        .map(|path| {
            let db = ens.increments(path);
            let y: Vec<f64> = (0..=n).map(|i| sol.y_fn.eval(i, fwd.state(path, i))).collect();
            let z: Vec<f64> = (0..=n).map(|i| sol.z_fn.eval(i, fwd.state(path, i))).collect();
            let mut k = Vec::with_capacity(n + 1);
            k.push(0.0);
            let mut acc = 0.0;
            let mut worst = f64::NEG_INFINITY;
            for i in 0..n {
                let t = grid.time(i);
                let x = fwd.state(path, i);
                let inc = y[i + 1]
                    - y[i]
                    - (coeffs.f)(t, x, y[i], z[i]) * dt
                    - (coeffs.g)(t, x, y[i], z[i]) * ens.qv_increment(i)
                    - z[i] * db[i];
                worst = worst.max(inc);
                acc += inc;
                k.push(acc);
            }
            let gap = (y[n] - (coeffs.phi)(fwd.terminal(path))).abs();
            (k, y, z, worst, gap)
        })
        .collect();
    let m = fwd.n_paths;
    let mut kv = Vec::with_capacity(m * (n + 1));
    let mut yv = Vec::with_capacity(m * (n + 1));
    let mut zv = Vec::with_capacity(m * (n + 1));
    let mut worst = f64::NEG_INFINITY;
    let mut gap = 0.0f64;
    let mut terminal = Vec::with_capacity(m);
    for (k, y, z, w, g) in rows {
        if !(k[n].is_finite() && w.is_finite()) {
            return Err(Error::non_finite("K", format!("path ending {}", k[n])));
        }
        terminal.push(k[n]);
        kv.extend(k);
        yv.extend(y);
        zv.extend(z);
        worst = worst.max(w);
        gap = gap.max(g);
    }
    Ok(KPaths {
        control: fwd.control.clone(),
        k: PathValues::new(m, n + 1, kv),
        y: PathValues::new(m, n + 1, yv),
        z: PathValues::new(m, n + 1, zv),
        max_increment: worst.max(0.0),
        k_terminal: Estimate::from_samples(&terminal),
        terminal_gap: gap,
    })
}

/// `K` diagnostics over a control family.
#[derive(Debug, Clone, Serialize)]
pub struct KDiagnostics {
    pub per_control: Vec<KPaths>,
    /// `E^[K_T]` over the family; zero for an exact non-increasing
    /// G-martingale.
    pub k_terminal: McExpectation,
    pub max_increment: f64,
    /// `3 sqrt(dt)` times the path scale `max(1, E^[sup_t |Y_t|])`.
    pub tol_k: f64,
    pub scale: f64,
    pub monotone_ok: bool,
    pub martingale_ok: bool,
    pub terminal_gap: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn k_diagnostics(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    sol: &BackwardSolution,
    policy: &YInput,
    family: &ControlFamily,
    mc: McConfig,
) -> Result<KDiagnostics> {
    let mut per = Vec::with_capacity(family.len());
    let mut sup_y = Vec::with_capacity(family.len());
    for c in &family.controls {
        let ens = sample_paths(setting, grid, c, mc.n_paths, mc.seed, mc.model)?;
        let fwd = euler_forward(coeffs, grid, &setting.x0, policy, &ens)?;
        let kp = k_extract(sol, coeffs, grid, &fwd, &ens)?;
        sup_y.push(
            (0..kp.y.n_paths)
                .map(|p| kp.y.path(p).iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .collect::<Vec<f64>>(),
        );
        per.push(kp);
    }
    let names = labels(family);
    let scale = family_sup(&names, sup_y)?.value.max(1.0);
    let k_terminal =
        McExpectation::from_estimates(per.iter().map(|k| k.k_terminal).collect(), names)?;
    let max_increment = per.iter().map(|k| k.max_increment).fold(0.0, f64::max);
    let tol_k = 3.0 * grid.dt().sqrt() * scale;
    Ok(KDiagnostics {
        monotone_ok: max_increment <= tol_k,
        martingale_ok: k_terminal.value.abs() <= 5.0 * k_terminal.std_err.max(f64::EPSILON),
        terminal_gap: per.iter().map(|k| k.terminal_gap).fold(0.0, f64::max),
        per_control: per,
        k_terminal,
        max_increment,
        tol_k,
        scale,
    })
}

/// One frozen forward input `x_t = xi_t + offset`, where `xi` is the
/// Euler flow started at `x0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XInput {
    pub x0: Vec<f64>,
    pub offset: Vec<f64>,
}

impl XInput {
    pub fn start(x0: Vec<f64>) -> Self {
        let offset = vec![0.0; x0.len()];
        XInput { x0, offset }
    }

    pub fn shifted(x0: Vec<f64>, offset: Vec<f64>) -> Self {
        XInput { x0, offset }
    }
}

/// Statistics of a pair of backward solutions driven by two forward
/// inputs, estimated over a family.
#[derive(Debug, Clone, Serialize)]
pub struct PairStatistics {
    pub y0: [f64; 2],
    /// `E^[(|phi^_T| + int |f^| + |g^| ds)^p]` with `f^, g^` at `(Y2, Z2)`.
    pub data: McExpectation,
    /// `E^[(int |Z1 - Z2|^2 dt)^(p/2)]`.
    pub z_gap: McExpectation,
    /// `E^[sup_t |Y1 - Y2|^p]`.
    pub y_gap: McExpectation,
    /// `E^[sup |Y^i|^p] + E^[(int |f(x^i,0,0)| + |g(x^i,0,0)| ds)^p]`.
    pub lambda: [f64; 2],
}

#[allow(clippy::too_many_arguments)]
pub fn pair_statistics(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    policy: &YInput,
    inputs: [&XInput; 2],
    p: f64,
    family: &ControlFamily,
    mc: McConfig,
    opts: BackwardOptions,
) -> Result<PairStatistics> {
    let shifted = [shift_backward(coeffs, &inputs[0].offset), shift_backward(coeffs, &inputs[1].offset)];
    let sols = [
        dp_backward(setting, &shifted[0], grid, policy, opts)?,
        dp_backward(setting, &shifted[1], grid, policy, opts)?,
    ];
    let y0 = [sols[0].y0(&inputs[0].x0), sols[1].y0(&inputs[1].x0)];
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim = coeffs.dim();
    let names = labels(family);
    let mut data = Vec::new();
    let mut z_gap = Vec::new();
    let mut y_gap = Vec::new();
    let mut sup_y = [Vec::new(), Vec::new()];
    let mut drv = [Vec::new(), Vec::new()];
    for c in &family.controls {
        let ens = sample_paths(setting, grid, c, mc.n_paths, mc.seed, mc.model)?;
        let xi = [
            euler_forward(coeffs, grid, &inputs[0].x0, policy, &ens)?,
            euler_forward(coeffs, grid, &inputs[1].x0, policy, &ens)?,
        ];
        let rows: Vec<[f64; 7]> = (0..mc.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut x1 = vec![0.0; dim];
                let mut x2 = vec![0.0; dim];
                let mut acc = 0.0;
                let mut zz = 0.0;
                let mut yy = 0.0f64;
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                let mut d1 = 0.0;
                let mut d2 = 0.0;
                for i in 0..=n {
                    let (a, b) = (xi[0].state(path, i), xi[1].state(path, i));
                    let y1 = sols[0].y_fn.eval(i, a);
                    let y2 = sols[1].y_fn.eval(i, b);
                    yy = yy.max((y1 - y2).abs());
                    s1 = s1.max(y1.abs());
                    s2 = s2.max(y2.abs());
                    if i == n {
                        break;
                    }
                    let t = grid.time(i);
                    let z1 = sols[0].z_fn.eval(i, a);
                    let z2 = sols[1].z_fn.eval(i, b);
                    zz += (z1 - z2) * (z1 - z2) * dt;
                    for j in 0..dim {
                        x1[j] = a[j] + inputs[0].offset[j];
                        x2[j] = b[j] + inputs[1].offset[j];
                    }
                    let fh = (coeffs.f)(t, &x1, y2, z2) - (coeffs.f)(t, &x2, y2, z2);
                    let gh = (coeffs.g)(t, &x1, y2, z2) - (coeffs.g)(t, &x2, y2, z2);
                    acc += (fh.abs() + gh.abs()) * dt;
                    d1 += ((coeffs.f)(t, &x1, 0.0, 0.0).abs() + (coeffs.g)(t, &x1, 0.0, 0.0).abs()) * dt;
                    d2 += ((coeffs.f)(t, &x2, 0.0, 0.0).abs() + (coeffs.g)(t, &x2, 0.0, 0.0).abs()) * dt;
                }
                for j in 0..dim {
                    x1[j] = xi[0].terminal(path)[j] + inputs[0].offset[j];
                    x2[j] = xi[1].terminal(path)[j] + inputs[1].offset[j];
                }
                let ph = ((coeffs.phi)(&x1) - (coeffs.phi)(&x2)).abs();
                [
                    (ph + acc).powf(p),
                    zz.powf(p / 2.0),
                    yy.powf(p),
                    s1.powf(p),
                    s2.powf(p),
                    d1.powf(p),
                    d2.powf(p),
                ]
            })
            .collect();
        let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
        data.push(col(0));
        z_gap.push(col(1));
        y_gap.push(col(2));
        sup_y[0].push(col(3));
        sup_y[1].push(col(4));
        drv[0].push(col(5));
        drv[1].push(col(6));
    }
    let [sy1, sy2] = sup_y;
    let [dr1, dr2] = drv;
    let lambda = [
        family_sup(&names, sy1)?.value + family_sup(&names, dr1)?.value,
        family_sup(&names, sy2)?.value + family_sup(&names, dr2)?.value,
    ];
    Ok(PairStatistics {
        y0,
        data: family_sup(&names, data)?,
        z_gap: family_sup(&names, z_gap)?,
        y_gap: family_sup(&names, y_gap)?,
        lambda,
    })
}

/// Checks `|Y1_0 - Y2_0|^p <= C2 E^[(|phi^_T| + int |f^| + |g^| ds)^p]`.
#[allow(clippy::too_many_arguments)]
pub fn bsde_apriori_check(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    policy: &YInput,
    inputs: [&XInput; 2],
    p: f64,
    c2: f64,
    family: &ControlFamily,
    mc: McConfig,
) -> Result<StabilityVerdict> {
    let st = pair_statistics(setting, coeffs, grid, policy, inputs, p, family, mc, BackwardOptions::default())?;
    let d = (st.y0[0] - st.y0[1]).abs().powf(p);
    let lhs = McExpectation::from_estimates(vec![Estimate::exact(d)], vec!["t=0".into()])?;
    Ok(StabilityVerdict::new(lhs, st.data, c2))
}

/// Fitted constant of the `Z` estimate.
#[derive(Debug, Clone, Serialize)]
pub struct ZNormReport {
    pub lhs: f64,
    pub y_gap: f64,
    pub lambda: [f64; 2],
    /// `y_gap + sqrt(lambda_1 + lambda_2) sqrt(y_gap)`.
    pub bracket: f64,
    /// `lhs / bracket`, zero when `lhs` vanishes.
    pub ratio: f64,
}

impl ZNormReport {
    pub fn from_parts(lhs: f64, y_gap: f64, lambda: [f64; 2]) -> Self {
        let bracket = y_gap + (lambda[0] + lambda[1]).sqrt() * y_gap.sqrt();
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / bracket };
        ZNormReport {
            lhs,
            y_gap,
            lambda,
            bracket,
            ratio,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn z_norm_check(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    grid: &DiscretizationGrid,
    policy: &YInput,
    inputs: [&XInput; 2],
    p: f64,
    family: &ControlFamily,
    mc: McConfig,
) -> Result<ZNormReport> {
    let st = pair_statistics(setting, coeffs, grid, policy, inputs, p, family, mc, BackwardOptions::default())?;
    Ok(ZNormReport::from_parts(st.z_gap.value, st.y_gap.value, st.lambda))
}
