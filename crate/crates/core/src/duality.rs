//! Comparison experiments: reference measure, linearized difference system,
//! the dual linear FBSDE and the duality identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{k_extract, KPaths};
use crate::error::{Error, Result};
use crate::gprocess::{sup_over_family, PathEnsemble, VolatilityControl};
use crate::model::{
    catalog_entry, problem_grid, raised_terminal, CoefficientSet, DiscretizationGrid, GSetting, Lipschitz, Quadrature,
};
use crate::picard::{picard_solve, Backend, FBSDESolution, PicardConfig};
use crate::regression;
use crate::sde::{ForwardSolution, PathValues};
use crate::stats::{mean, Estimate};
use crate::gprocess::ControlFamily;

/// Family member standing in for the measure under which `K(2)` vanishes.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceMeasure {
    pub index: usize,
    pub control: VolatilityControl,
    /// Mean of `K(2)_T` under each control.
    pub per_control: Vec<Estimate>,
    /// `E[K(2)_T]` under the chosen control; zero for an exact choice.
    pub residual: Estimate,
    #[serde(skip)]
    pub k_paths: KPaths,
}

/// Control with the largest mean `K(2)_T` (the closest to zero). Means
/// within rounding of the best count as ties and go to the lowest index.
pub fn find_reference_measure(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    sol: &FBSDESolution,
) -> Result<ReferenceMeasure> {
    if sol.family.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let back = sol
        .backward
        .as_ref()
        .ok_or_else(|| Error::Precondition("reference measure needs the lattice backend".into()))?;
    let mut paths = Vec::with_capacity(sol.family.len());
    for (k, fwd) in sol.x_solution.iter().enumerate() {
        let ens = sol.ensemble(setting, k)?;
        paths.push(k_extract(back, coeffs, &sol.grid, fwd, &ens)?);
    }
    let means: Vec<f64> = paths.iter().map(|k| k.k_terminal.mean).collect();
    let (best, _) = sup_over_family(&means)?;
    let scale = means.iter().fold(1.0f64, |a, m| a.max(m.abs()));
    let index = means.iter().position(|&m| m >= best - 1e-12 * scale).unwrap_or(0);
    let k_paths = paths[index].clone();
    Ok(ReferenceMeasure {
        index,
        control: sol.family.controls[index].clone(),
        per_control: paths.iter().map(|k| k.k_terminal).collect(),
        residual: k_paths.k_terminal,
        k_paths,
    })
}

/// Worst ratio of a coefficient to its bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub max_abs: f64,
    pub bound: f64,
}

/// Difference quotients of two solutions along one ensemble, plus the path
/// data the duality identity needs. Layouts are path-major:
/// `a1[((path * n_steps + i) * n + j) * n + k]`, vectors
/// `[(path * n_steps + i) * n + j]`, scalars `[path * n_steps + i]`.
#[derive(Debug, Clone, Serialize)]
pub struct LinearizedCoefficients {
    pub dim: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// `gamma_i` of the reference control.
    pub gamma: Vec<f64>,
    pub band: (f64, f64),
    #[serde(skip)]
    pub a1: Vec<f64>,
    #[serde(skip)]
    pub a2: Vec<f64>,
    #[serde(skip)]
    pub a3: Vec<f64>,
    #[serde(skip)]
    pub a4: Vec<f64>,
    #[serde(skip)]
    pub a5: Vec<f64>,
    #[serde(skip)]
    pub a6: Vec<f64>,
    #[serde(skip)]
    pub a7: Vec<f64>,
    /// `[path * n + j]`.
    #[serde(skip)]
    pub a8: Vec<f64>,
    /// Regression state `(X1, X2)` at `[(path * (n_steps + 1) + i) * 2n]`.
    #[serde(skip)]
    pub state: Vec<f64>,
    /// `phi1(X2_T) - phi2(X2_T)` per path.
    #[serde(skip)]
    pub phi_gap: Vec<f64>,
    #[serde(skip)]
    pub y_hat: PathValues,
    #[serde(skip)]
    pub z_hat: PathValues,
    /// Increments of the reference ensemble, `[path * n_steps + i]`.
    #[serde(skip)]
    pub db: Vec<f64>,
    #[serde(skip)]
    pub k1: PathValues,
    #[serde(skip)]
    pub k2: PathValues,
    pub x_hat0: Vec<f64>,
    pub y_hat0: f64,
    pub bounds: Vec<BoundCheck>,
    /// Largest defect of the forward and backward difference equations.
    pub residual_x: f64,
    pub residual_y: f64,
}

impl LinearizedCoefficients {
    /// All coefficients zero; `gamma` constant.
    pub fn zeros(dim: usize, n_paths: usize, n_steps: usize, horizon: f64, gamma: f64) -> Self {
        let m = n_paths * n_steps;
        LinearizedCoefficients {
            dim,
            n_paths,
            n_steps,
            dt: horizon / n_steps as f64,
            gamma: vec![gamma; n_steps],
            band: (gamma, gamma),
            a1: vec![0.0; m * dim * dim],
            a2: vec![0.0; m * dim],
            a3: vec![0.0; m * dim * dim],
            a4: vec![0.0; m * dim],
            a5: vec![0.0; m * dim],
            a6: vec![0.0; m],
            a7: vec![0.0; m],
            a8: vec![0.0; n_paths * dim],
            state: vec![0.0; n_paths * (n_steps + 1) * 2 * dim],
            phi_gap: vec![0.0; n_paths],
            y_hat: PathValues::new(n_paths, n_steps + 1, vec![0.0; n_paths * (n_steps + 1)]),
            z_hat: PathValues::new(n_paths, n_steps + 1, vec![0.0; n_paths * (n_steps + 1)]),
            db: vec![0.0; m],
            k1: PathValues::new(n_paths, n_steps + 1, vec![0.0; n_paths * (n_steps + 1)]),
            k2: PathValues::new(n_paths, n_steps + 1, vec![0.0; n_paths * (n_steps + 1)]),
            x_hat0: vec![0.0; dim],
            y_hat0: 0.0,
            bounds: Vec::new(),
            residual_x: 0.0,
            residual_y: 0.0,
        }
    }

    #[inline]
    fn at(&self, path: usize, i: usize) -> usize {
        path * self.n_steps + i
    }

    pub fn a5_max(&self) -> f64 {
        self.a5.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn a8_min(&self) -> f64 {
        self.a8.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `(v1 - v2) / d`, zero when `d` vanishes at rounding level.
#[inline]
fn quotient(v1: f64, v2: f64, d: f64, scale: f64) -> f64 {
    if d.abs() <= 1e-13 * (1.0 + scale) {
        0.0
    } else {
        (v1 - v2) / d
    }
}

struct Row {
    a1: Vec<f64>,
    a2: Vec<f64>,
    a3: Vec<f64>,
    a4: Vec<f64>,
    a5: Vec<f64>,
    a6: Vec<f64>,
    a7: Vec<f64>,
    a8: Vec<f64>,
    state: Vec<f64>,
    phi_gap: f64,
    y_hat: Vec<f64>,
    z_hat: Vec<f64>,
    rx: f64,
    ry: f64,
}

/// Builds the coefficients of the difference system along the reference
/// ensemble by replacing one coordinate at a time (`X1 -> X2`, then
/// `Y1 -> Y2`, then `Z1 -> Z2`). The drift and driver quotients carry
/// `gamma`. Fails when a quotient breaks its Lipschitz bound.
#[allow(clippy::too_many_arguments)]
pub fn linearize(
    setting: &GSetting,
    coeffs1: &CoefficientSet,
    coeffs2: &CoefficientSet,
    sol1: &FBSDESolution,
    sol2: &FBSDESolution,
    reference: &ReferenceMeasure,
) -> Result<LinearizedCoefficients> {
    if sol1.mc != sol2.mc || sol1.grid != sol2.grid || sol1.family != sol2.family {
        return Err(Error::Precondition("both solutions must share grid, family and sampling".into()));
    }
    let b1 = sol1
        .backward
        .as_ref()
        .ok_or_else(|| Error::Precondition("linearization needs the lattice backend".into()))?;
    let grid = &sol1.grid;
    let idx = reference.index;
    let ens = sol1.ensemble(setting, idx)?;
    let x1 = &sol1.x_solution[idx];
    let x2 = &sol2.x_solution[idx];
    let k1 = k_extract(b1, coeffs1, grid, x1, &ens)?;
    let k2 = &reference.k_paths;
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim = coeffs1.dim();
    let np = x1.n_paths;
    let c = coeffs1;
    let rows: Vec<Row> = (0..np)
        .into_par_iter()
        .map(|path| linearize_path(c, coeffs2, grid, &ens, x1, x2, &k1, k2, path, dim, n, dt))
        .collect();
    let mut lin = LinearizedCoefficients::zeros(dim, np, n, grid.horizon, 1.0);
    lin.gamma = ens.control.gamma.clone();
    lin.band = (setting.gamma_low(), setting.gamma_high());
    lin.x_hat0 = x1.state(0, 0).iter().zip(x2.state(0, 0)).map(|(a, b)| a - b).collect();
    lin.y_hat0 = k1.y.path(0)[0] - k2.y.path(0)[0];
    let mut yh = Vec::with_capacity(np * (n + 1));
    let mut zh = Vec::with_capacity(np * (n + 1));
    lin.db.clear();
    lin.a1.clear();
    lin.a2.clear();
    lin.a3.clear();
    lin.a4.clear();
    lin.a5.clear();
    lin.a6.clear();
    lin.a7.clear();
    lin.a8.clear();
    lin.state.clear();
    lin.phi_gap.clear();
    for r in rows {
        lin.a1.extend(r.a1);
        lin.a2.extend(r.a2);
        lin.a3.extend(r.a3);
        lin.a4.extend(r.a4);
        lin.a5.extend(r.a5);
        lin.a6.extend(r.a6);
        lin.a7.extend(r.a7);
        lin.a8.extend(r.a8);
        lin.state.extend(r.state);
        lin.phi_gap.push(r.phi_gap);
        yh.extend(r.y_hat);
        zh.extend(r.z_hat);
        lin.residual_x = lin.residual_x.max(r.rx);
        lin.residual_y = lin.residual_y.max(r.ry);
    }
    lin.y_hat = PathValues::new(np, n + 1, yh);
    lin.z_hat = PathValues::new(np, n + 1, zh);
    for path in 0..np {
        lin.db.extend_from_slice(ens.increments(path));
    }
    lin.k1 = k1.k;
    lin.k2 = k2.k.clone();
    let l = max_lipschitz(coeffs1.lipschitz, coeffs2.lipschitz);
    let s2 = 1.0 + setting.gamma_high();
    let amax = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    lin.bounds = vec![
        BoundCheck {
            name: "a1",
            max_abs: amax(&lin.a1),
            bound: l.l1 * s2,
        },
        BoundCheck {
            name: "a2",
            max_abs: amax(&lin.a2),
            bound: l.l2 * s2,
        },
        BoundCheck {
            name: "a3",
            max_abs: amax(&lin.a3),
            bound: l.l1,
        },
        BoundCheck {
            name: "a4",
            max_abs: amax(&lin.a4),
            bound: l.l2,
        },
        BoundCheck {
            name: "a5",
            max_abs: amax(&lin.a5),
            bound: l.l3 * s2,
        },
        BoundCheck {
            name: "a6",
            max_abs: amax(&lin.a6),
            bound: l.l1 * s2,
        },
        BoundCheck {
            name: "a7",
            max_abs: amax(&lin.a7),
            bound: l.l1 * s2,
        },
        BoundCheck {
            name: "a8",
            max_abs: amax(&lin.a8),
            bound: l.l3,
        },
    ];
    let broken: Vec<String> = lin
        .bounds
        .iter()
        .filter(|b| b.max_abs > b.bound * (1.0 + 1e-9) + 1e-9)
        .map(|b| format!("|{}| reaches {} > {}", b.name, b.max_abs, b.bound))
        .collect();
    if !broken.is_empty() {
        return Err(Error::BoundViolation(broken.join("; ")));
    }
    Ok(lin)
}

fn max_lipschitz(a: Lipschitz, b: Lipschitz) -> Lipschitz {
    Lipschitz::new(a.l1.max(b.l1), a.l2.max(b.l2), a.l3.max(b.l3))
}

#[allow(clippy::too_many_arguments)]
fn linearize_path(
    c: &CoefficientSet,
    c2: &CoefficientSet,
    grid: &DiscretizationGrid,
    ens: &PathEnsemble,
    x1: &ForwardSolution,
    x2: &ForwardSolution,
    k1: &KPaths,
    k2: &KPaths,
    path: usize,
    dim: usize,
    n: usize,
    dt: f64,
) -> Row {
    let mut row = Row {
        a1: Vec::with_capacity(n * dim * dim),
        a2: Vec::with_capacity(n * dim),
        a3: Vec::with_capacity(n * dim * dim),
        a4: Vec::with_capacity(n * dim),
        a5: Vec::with_capacity(n * dim),
        a6: Vec::with_capacity(n),
        a7: Vec::with_capacity(n),
        a8: Vec::with_capacity(dim),
        state: Vec::with_capacity((n + 1) * 2 * dim),
        phi_gap: 0.0,
        y_hat: Vec::with_capacity(n + 1),
        z_hat: Vec::with_capacity(n + 1),
        rx: 0.0,
        ry: 0.0,
    };
    let (y1, y2) = (k1.y.path(path), k2.y.path(path));
    let (z1, z2) = (k1.z.path(path), k2.z.path(path));
    let (kk1, kk2) = (k1.k.path(path), k2.k.path(path));
    let db = ens.increments(path);
    let mut b = vec![0.0; dim];
    let mut h = vec![0.0; dim];
    let mut s = vec![0.0; dim];
    let mut prev_drift = vec![0.0; dim];
    let mut prev_vol = vec![0.0; dim];
    let mut mix = vec![0.0; dim];
    for i in 0..=n {
        let xa = x1.state(path, i);
        let xb = x2.state(path, i);
        row.state.extend_from_slice(xa);
        row.state.extend_from_slice(xb);
        row.y_hat.push(y1[i] - y2[i]);
        row.z_hat.push(z1[i] - z2[i]);
        if i == n {
            break;
        }
        let t = grid.time(i);
        let g = ens.gamma(i);
        let dy = y1[i] - y2[i];
        let dz = z1[i] - z2[i];
        let xscale = xa.iter().chain(xb).fold(0.0f64, |m, v| m.max(v.abs()));
        let mut drift_vol = |x: &[f64], y: f64, dr: &mut [f64], vo: &mut [f64]| {
            c.forward(t, x, y, &mut b, &mut h, &mut s);
            for j in 0..dim {
                dr[j] = b[j] + g * h[j];
                vo[j] = s[j];
            }
        };
        // a1, a3: coordinates of X1 replaced by X2 one at a time, Y1 fixed.
        let mut a1 = vec![0.0; dim * dim];
        let mut a3 = vec![0.0; dim * dim];
        mix.copy_from_slice(xa);
        drift_vol(&mix, y1[i], &mut prev_drift, &mut prev_vol);
        let (mut d_cur, mut v_cur) = (vec![0.0; dim], vec![0.0; dim]);
        for k in 0..dim {
            mix[k] = xb[k];
            drift_vol(&mix, y1[i], &mut d_cur, &mut v_cur);
            let dk = xa[k] - xb[k];
            for j in 0..dim {
                a1[j * dim + k] = quotient(prev_drift[j], d_cur[j], dk, xscale);
                a3[j * dim + k] = quotient(prev_vol[j], v_cur[j], dk, xscale);
            }
            prev_drift.copy_from_slice(&d_cur);
            prev_vol.copy_from_slice(&v_cur);
        }
        // a2, a4: Y1 -> Y2 at X2.
        drift_vol(xb, y2[i], &mut d_cur, &mut v_cur);
        let yscale = y1[i].abs().max(y2[i].abs());
        let a2: Vec<f64> = (0..dim).map(|j| quotient(prev_drift[j], d_cur[j], dy, yscale)).collect();
        let a4: Vec<f64> = (0..dim).map(|j| quotient(prev_vol[j], v_cur[j], dy, yscale)).collect();
        // Driver quotients on f + gamma g.
        let drv = |x: &[f64], y: f64, z: f64| (c.f)(t, x, y, z) + g * (c.g)(t, x, y, z);
        let mut a5 = vec![0.0; dim];
        mix.copy_from_slice(xa);
        let mut prev = drv(&mix, y1[i], z1[i]);
        for k in 0..dim {
            mix[k] = xb[k];
            let cur = drv(&mix, y1[i], z1[i]);
            a5[k] = quotient(prev, cur, xa[k] - xb[k], xscale);
            prev = cur;
        }
        let at_y2 = drv(xb, y2[i], z1[i]);
        let a6 = quotient(prev, at_y2, dy, yscale);
        let at_z2 = drv(xb, y2[i], z2[i]);
        let a7 = quotient(at_y2, at_z2, dz, z1[i].abs().max(z2[i].abs()));
        // Defects of the difference equations.
        let xa1 = x1.state(path, i + 1);
        let xb1 = x2.state(path, i + 1);
        for j in 0..dim {
            let mut lin_drift = a2[j] * dy;
            let mut lin_vol = a4[j] * dy;
            for k in 0..dim {
                lin_drift += a1[j * dim + k] * (xa[k] - xb[k]);
                lin_vol += a3[j * dim + k] * (xa[k] - xb[k]);
            }
            let lhs = (xa1[j] - xb1[j]) - (xa[j] - xb[j]);
            row.rx = row.rx.max((lhs - lin_drift * dt - lin_vol * db[i]).abs());
        }
        let dx_dot: f64 = (0..dim).map(|k| a5[k] * (xa[k] - xb[k])).sum();
        let dyn_y = (dx_dot + a6 * dy + a7 * dz) * dt + dz * db[i] + (kk1[i + 1] - kk1[i]) - (kk2[i + 1] - kk2[i]);
        let lhs_y = (y1[i + 1] - y2[i + 1]) - dy;
        row.ry = row.ry.max((lhs_y - dyn_y).abs());
        row.a1.extend(a1);
        row.a2.extend(a2);
        row.a3.extend(a3);
        row.a4.extend(a4);
        row.a5.extend(a5);
        row.a6.push(a6);
        row.a7.push(a7);
    }
    let xa = x1.terminal(path);
    let xb = x2.terminal(path);
    mix.copy_from_slice(xa);
    let xscale = xa.iter().chain(xb).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut prev = (c.phi)(&mix);
    for k in 0..dim {
        mix[k] = xb[k];
        let cur = (c.phi)(&mix);
        row.a8.push(quotient(prev, cur, xa[k] - xb[k], xscale));
        prev = cur;
    }
    row.phi_gap = (c.phi)(xb) - (c2.phi)(xb);
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualConfig {
    pub degree: u8,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            degree: 2,
            tol: 1e-7,
            max_iter: 30,
        }
    }
}

/// Solution `(l, p, q)` of the dual linear system under one measure.
#[derive(Debug, Clone, Serialize)]
pub struct DualSolution {
    #[serde(skip)]
    pub l: PathValues,
    /// `[(path * (n_steps + 1) + i) * n + j]`.
    #[serde(skip)]
    pub p: Vec<f64>,
    #[serde(skip)]
    pub q: Vec<f64>,
    pub p0: Vec<f64>,
    pub l_min: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `max |p_T - l_T a8|`.
    pub terminal_gap: f64,
}

/// Picard iteration for
/// `dl = [-a6 l + <a2, p> + gamma <a4, q>] dt - a7 l / gamma dB`, `l_0 = 1`,
/// `dp = [l a5 - a1' p - gamma a3' q] dt + q dB`, `p_T = l_T a8`,
/// with `(p, q)` regressed on `(X1, X2, l)` along the ensemble.
pub fn solve_dual(lin: &LinearizedCoefficients, ens: &PathEnsemble, cfg: DualConfig) -> Result<DualSolution> {
    let n = lin.n_steps;
    let dim = lin.dim;
    let np = lin.n_paths;
    if ens.n_paths != np || ens.n_steps != n {
        return Err(Error::InvalidGrid("ensemble does not match the linearization".into()));
    }
    let slack = 1e-12 * lin.band.1;
    for (i, &g) in lin.gamma.iter().enumerate() {
        if !(g > 0.0 && g >= lin.band.0 - slack && g <= lin.band.1 + slack) {
            return Err(Error::ControlOutOfBand {
                gamma: g,
                step: i,
                low: lin.band.0,
                high: lin.band.1,
            });
        }
    }
    let dt = lin.dt;
    let stride = (n + 1) * dim;
    let mut l = vec![1.0; np * (n + 1)];
    let mut p = vec![0.0; np * stride];
    let mut q = vec![0.0; np * stride];
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let l_new = dual_forward(lin, ens, &p, &q);
        let (p_new, q_new) = dual_backward(lin, ens, &l_new, cfg.degree)?;
        let dl = l_new.iter().zip(&l).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dp = p_new.iter().zip(&p).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        l = l_new;
        p = p_new;
        q = q_new;
        if !(dl.is_finite() && dp.is_finite()) {
            return Err(Error::non_finite("dual iterate", format!("iteration {it}")));
        }
        log::trace!("dual iteration {it}: dl {dl:e} dp {dp:e}");
        let scale = l.iter().chain(&p).fold(1.0f64, |m, v| m.max(v.abs()));
        if dl.max(dp) <= cfg.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("dual Picard did not reach relative tol {:e} in {} iterations", cfg.tol, cfg.max_iter);
    }
    let p0 = (0..dim)
        .map(|j| mean(&(0..np).map(|path| p[path * stride + j]).collect::<Vec<_>>()))
        .collect();
    let terminal_gap = (0..np)
        .flat_map(|path| {
            let lt = l[path * (n + 1) + n];
            let (pp, a8) = (&p, &lin.a8);
            (0..dim).map(move |j| (pp[path * stride + n * dim + j] - lt * a8[path * dim + j]).abs())
        })
        .fold(0.0f64, f64::max);
    let _ = dt;
    Ok(DualSolution {
        l_min: l.iter().copied().fold(f64::INFINITY, f64::min),
        l: PathValues::new(np, n + 1, l),
        p,
        q,
        p0,
        iterations,
        converged,
        terminal_gap,
    })
}

fn dual_forward(lin: &LinearizedCoefficients, ens: &PathEnsemble, p: &[f64], q: &[f64]) -> Vec<f64> {
    let n = lin.n_steps;
    let dim = lin.dim;
    let dt = lin.dt;
    let stride = (n + 1) * dim;
    let mut out = vec![0.0; lin.n_paths * (n + 1)];
    out.par_chunks_mut(n + 1).enumerate().for_each(|(path, l)| {
        let db = ens.increments(path);
        l[0] = 1.0;
        for i in 0..n {
            let g = lin.gamma[i];
            let a = lin.at(path, i);
            let mut drift = -lin.a6[a] * l[i];
            for j in 0..dim {
                let k = path * stride + i * dim + j;
                drift += lin.a2[a * dim + j] * p[k] + g * lin.a4[a * dim + j] * q[k];
            }
            l[i + 1] = l[i] + drift * dt - lin.a7[a] / g * l[i] * db[i];
        }
    });
    out
}

fn dual_backward(
    lin: &LinearizedCoefficients,
    ens: &PathEnsemble,
    l: &[f64],
    degree: u8,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = lin.n_steps;
    let dim = lin.dim;
    let np = lin.n_paths;
    let dt = lin.dt;
    let stride = (n + 1) * dim;
    let sd = 2 * dim + 1;
    let mut p = vec![0.0; np * stride];
    let mut q = vec![0.0; np * stride];
    for path in 0..np {
        let lt = l[path * (n + 1) + n];
        for j in 0..dim {
            p[path * stride + n * dim + j] = lt * lin.a8[path * dim + j];
        }
    }
    let mut pts = vec![0.0; np * sd];
    for i in (0..n).rev() {
        let g = lin.gamma[i];
        for path in 0..np {
            let s = &lin.state[(path * (n + 1) + i) * 2 * dim..(path * (n + 1) + i + 1) * 2 * dim];
            pts[path * sd..path * sd + 2 * dim].copy_from_slice(s);
            pts[path * sd + 2 * dim] = l[path * (n + 1) + i];
        }
        let mut e = vec![0.0; np * dim];
        let mut qi = vec![0.0; np * dim];
        for j in 0..dim {
            let target: Vec<f64> = (0..np).map(|path| p[path * stride + (i + 1) * dim + j]).collect();
            let level = fitted(&pts, sd, degree, &target)?;
            let res: Vec<f64> = (0..np)
                .map(|path| {
                    e[path * dim + j] = level[path];
                    (target[path] - level[path]) * ens.increments(path)[i] / (g * dt)
                })
                .collect();
            let z = fitted(&pts, sd, degree, &res)?;
            for path in 0..np {
                qi[path * dim + j] = z[path];
            }
        }
        for path in 0..np {
            let a = lin.at(path, i);
            let lv = l[path * (n + 1) + i];
            for j in 0..dim {
                let mut gen = lv * lin.a5[a * dim + j];
                for k in 0..dim {
                    gen -= lin.a1[(a * dim + k) * dim + j] * e[path * dim + k];
                    gen -= g * lin.a3[(a * dim + k) * dim + j] * qi[path * dim + k];
                }
                p[path * stride + i * dim + j] = e[path * dim + j] - gen * dt;
                q[path * stride + i * dim + j] = qi[path * dim + j];
            }
        }
    }
    for path in 0..np {
        for j in 0..dim {
            q[path * stride + n * dim + j] = q[path * stride + (n - 1) * dim + j];
        }
    }
    Ok((p, q))
}

/// Least-squares fit of `target` on the points, evaluated at each point.
fn fitted(pts: &[f64], sd: usize, degree: u8, target: &[f64]) -> Result<Vec<f64>> {
    let fit = regression::fit(pts, sd, degree, &[target])?;
    Ok(pts.chunks(sd).map(|x| fit.eval(0, x)).collect())
}

/// `Y^_0` against `<p_0, X^_0> + E[l_T phi^ - int l dK(1)]` under the
/// reference measure. The sample mean subtracts the discrete `dB` part of
/// `l Y^ - <p, X^>`, which has mean zero and removes most of the noise.
#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub residual: f64,
    /// `E[int l dK(2)]`, zero for an exact reference measure.
    pub k2_term: f64,
    /// `|Y^_0 - rhs - k2_term|`: the identity with the reference-measure
    /// error put back, left with discretization and regression error.
    pub defect: f64,
    pub defect_se: f64,
    /// `sqrt(dt)` times the path scale `E[sup |Y^| sup |l|] + |p_0| |X^_0|`.
    pub euler_term: f64,
    /// `5 SE + |k2_term| + euler_term`.
    pub budget: f64,
    pub passed: bool,
}

pub fn duality_check(lin: &LinearizedCoefficients, dual: &DualSolution) -> DualityReport {
    let n = lin.n_steps;
    let dim = lin.dim;
    let stride = (n + 1) * dim;
    let (s, (k2, sc)): (Vec<f64>, (Vec<f64>, Vec<f64>)) = (0..lin.n_paths)
        .into_par_iter()
        .map(|path| {
            let l = dual.l.path(path);
            let k1 = lin.k1.path(path);
            let k2 = lin.k2.path(path);
            let yh = lin.y_hat.path(path);
            let zh = lin.z_hat.path(path);
            let mut v = l[n] * lin.phi_gap[path];
            let mut w = 0.0;
            for i in 0..n {
                v -= l[i] * (k1[i + 1] - k1[i]);
                w += l[i] * (k2[i + 1] - k2[i]);
                let a = lin.at(path, i);
                let st = &lin.state[(path * (n + 1) + i) * 2 * dim..(path * (n + 1) + i + 1) * 2 * dim];
                let mut c = l[i] * zh[i] - lin.a7[a] / lin.gamma[i] * l[i] * yh[i];
                for j in 0..dim {
                    let k = path * stride + i * dim + j;
                    let mut vol = lin.a4[a * dim + j] * yh[i];
                    for m in 0..dim {
                        vol += lin.a3[(a * dim + j) * dim + m] * (st[m] - st[dim + m]);
                    }
                    c -= dual.p[k] * vol + dual.q[k] * (st[j] - st[dim + j]);
                }
                v -= c * lin.db[a];
            }
            let sy = lin.y_hat.path(path).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let sl = l.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            (v, (w, sy * sl))
        })
        .unzip();
    let est = Estimate::from_samples(&s);
    let px: f64 = dual.p0.iter().zip(&lin.x_hat0).map(|(a, b)| a * b).sum();
    let pnorm = dual.p0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xnorm = lin.x_hat0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rhs = px + est.mean;
    let k2_term = mean(&k2);
    let both: Vec<f64> = s.iter().zip(&k2).map(|(a, b)| a + b).collect();
    let joint = Estimate::from_samples(&both);
    let euler_term = lin.dt.sqrt() * (mean(&sc) + pnorm * xnorm);
    let budget = 5.0 * est.std_err + k2_term.abs() + euler_term;
    let residual = (lin.y_hat0 - rhs).abs();
    DualityReport {
        lhs: lin.y_hat0,
        rhs,
        rhs_se: est.std_err,
        residual,
        k2_term,
        defect: (lin.y_hat0 - px - joint.mean).abs(),
        defect_se: joint.std_err,
        euler_term,
        budget,
        passed: residual <= budget,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem {
    #[serde(rename = "41")]
    Terminal,
    #[serde(rename = "42")]
    Initial,
}

impl Theorem {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "41" | "4.1" => Some(Theorem::Terminal),
            "42" | "4.2" => Some(Theorem::Initial),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Theorem::Terminal => "41",
            Theorem::Initial => "42",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

/// Lower bound from the dual: `Y^_0 >= p_0 (x1 - x2)` and `p_0 >= 0`.
#[derive(Debug, Clone, Serialize)]
pub struct InitialBound {
    pub y_hat0: f64,
    pub p0_x_hat: f64,
    pub p0: f64,
    pub budget: f64,
    pub bound_ok: bool,
    pub p0_ok: bool,
    /// `min a8 >= 0` and `max a5 <= 0` along the paths.
    pub a8_min: f64,
    pub a5_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonOutcome {
    pub theorem: Theorem,
    pub status: Status,
    pub reason: Option<String>,
    pub seed: u64,
    pub n_steps: usize,
    pub y0: [f64; 2],
    /// `Y^_0 + eps_num`; negative means the ordering failed.
    pub margin: f64,
    /// `5 (tol + |Y^_0(N) - Y^_0(N/2)|)`.
    pub eps_num: f64,
    /// Smallest `phi1 - phi2` at `X(2)_T` and `X(1)_T` over all sampled paths.
    pub hypothesis_min: Option<[f64; 2]>,
    pub reference: Option<String>,
    pub reference_residual: f64,
    pub l_min: f64,
    pub tol_pos: f64,
    pub duality: Option<DualityReport>,
    pub initial_bound: Option<InitialBound>,
}

impl ComparisonOutcome {
    fn skipped(theorem: Theorem, seed: u64, n_steps: usize, reason: String) -> Self {
        ComparisonOutcome {
            theorem,
            status: Status::Skipped,
            reason: Some(reason),
            seed,
            n_steps,
            y0: [f64::NAN; 2],
            margin: f64::NAN,
            eps_num: f64::NAN,
            hypothesis_min: None,
            reference: None,
            reference_residual: f64::NAN,
            l_min: f64::NAN,
            tol_pos: f64::NAN,
            duality: None,
            initial_bound: None,
        }
    }
}

/// Settings shared by the comparison experiments.
#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub picard: PicardConfig,
    pub dual: DualConfig,
    /// Spatial nodes per coordinate; `None` keeps the default.
    pub n_space: Option<usize>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            picard: PicardConfig {
                tol: 1e-8,
                ..PicardConfig::default()
            },
            dual: DualConfig::default(),
            n_space: None,
        }
    }
}

fn solve_pair(
    settings: [&GSetting; 2],
    coeffs: [&CoefficientSet; 2],
    grid: &DiscretizationGrid,
    cfg: &ComparisonConfig,
) -> Result<[FBSDESolution; 2]> {
    let family = ControlFamily::standard(settings[0], grid.n_steps);
    let pc = PicardConfig {
        backend: Backend::Lattice,
        ..cfg.picard.clone()
    };
    Ok([
        picard_solve(settings[0], coeffs[0], grid, &family, &pc)?,
        picard_solve(settings[1], coeffs[1], grid, &family, &pc)?,
    ])
}

fn pair_grid(settings: [&GSetting; 2], coeffs: &CoefficientSet, n_steps: usize, cfg: &ComparisonConfig) -> Result<DiscretizationGrid> {
    let mid: Vec<f64> = settings[0].x0.iter().zip(&settings[1].x0).map(|(a, b)| 0.5 * (a + b)).collect();
    problem_grid(&settings[0].with_x0(mid), coeffs, n_steps, cfg.n_space, Quadrature::TwoPoint)
}

/// `Y^_0` from the half-step grid, for the discretization part of `eps_num`.
fn coarse_gap(
    settings: [&GSetting; 2],
    coeffs: [&CoefficientSet; 2],
    grid: &DiscretizationGrid,
    cfg: &ComparisonConfig,
) -> Result<f64> {
    let coarse = grid.with_steps((grid.n_steps / 2).max(1));
    let [a, b] = solve_pair(settings, coeffs, &coarse, cfg)?;
    Ok(a.y0 - b.y0)
}

fn finish(
    theorem: Theorem,
    seed: u64,
    settings: [&GSetting; 2],
    coeffs: [&CoefficientSet; 2],
    sols: &[FBSDESolution; 2],
    cfg: &ComparisonConfig,
    eps_num: f64,
    hypothesis_min: Option<[f64; 2]>,
) -> Result<ComparisonOutcome> {
    let reference = find_reference_measure(settings[1], coeffs[1], &sols[1])?;
    let lin = linearize(settings[1], coeffs[0], coeffs[1], &sols[0], &sols[1], &reference)?;
    let ens = sols[1].ensemble(settings[1], reference.index)?;
    let dual = solve_dual(&lin, &ens, cfg.dual)?;
    let duality = duality_check(&lin, &dual);
    let y_hat0 = sols[0].y0 - sols[1].y0;
    let margin = y_hat0 + eps_num;
    let tol_pos = 1e-6 * dual.l.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let initial_bound = (theorem == Theorem::Initial).then(|| {
        let p0_x_hat = dual.p0[0] * lin.x_hat0[0];
        InitialBound {
            y_hat0,
            p0_x_hat,
            p0: dual.p0[0],
            budget: duality.budget,
            bound_ok: y_hat0 >= p0_x_hat - duality.budget - eps_num,
            p0_ok: dual.p0[0] >= -duality.budget,
            a8_min: lin.a8_min(),
            a5_max: lin.a5_max(),
        }
    });
    let mut reasons = Vec::new();
    if margin < 0.0 {
        reasons.push(format!("ordering fails: Y1 - Y2 = {y_hat0:e} below -{eps_num:e}"));
    }
    if dual.l_min < -tol_pos {
        reasons.push(format!("l reaches {:e}", dual.l_min));
    }
    if !duality.passed {
        reasons.push(format!(
            "duality residual {:e} exceeds budget {:e}",
            duality.residual, duality.budget
        ));
    }
    if let Some(b) = &initial_bound {
        if !b.bound_ok {
            reasons.push("Y^_0 >= p_0 (x1 - x2) fails".into());
        }
        if !b.p0_ok {
            reasons.push(format!("p_0 = {:e} is negative beyond budget", b.p0));
        }
    }
    Ok(ComparisonOutcome {
        theorem,
        status: if reasons.is_empty() { Status::Pass } else { Status::Fail },
        reason: (!reasons.is_empty()).then(|| reasons.join("; ")),
        seed,
        n_steps: sols[0].grid.n_steps,
        y0: [sols[0].y0, sols[1].y0],
        margin,
        eps_num,
        hypothesis_min,
        reference: Some(reference.control.label.clone()),
        reference_residual: reference.residual.mean,
        l_min: dual.l_min,
        tol_pos,
        duality: Some(duality),
        initial_bound,
    })
}

/// Ordering for two problems that differ only in the terminal function.
pub fn compare_thm41(
    setting: &GSetting,
    coeffs1: &CoefficientSet,
    coeffs2: &CoefficientSet,
    n_steps: usize,
    cfg: &ComparisonConfig,
) -> Result<ComparisonOutcome> {
    terminal_comparison(setting, coeffs1, coeffs2, n_steps, cfg, None)
}

fn terminal_comparison(
    setting: &GSetting,
    coeffs1: &CoefficientSet,
    coeffs2: &CoefficientSet,
    n_steps: usize,
    cfg: &ComparisonConfig,
    coarse: Option<f64>,
) -> Result<ComparisonOutcome> {
    let seed = cfg.picard.mc.seed;
    let settings = [setting, setting];
    let grid = pair_grid(settings, coeffs2, n_steps, cfg)?;
    let sols = match solve_pair(settings, [coeffs1, coeffs2], &grid, cfg) {
        Ok(s) => s,
        Err(Error::NotCertified(r)) => {
            return Ok(ComparisonOutcome::skipped(Theorem::Terminal, seed, n_steps, format!("not certified: {r}")))
        }
        Err(e) => return Err(e),
    };
    let mut worst = [f64::INFINITY; 2];
    for (a, b) in sols[0].x_solution.iter().zip(&sols[1].x_solution) {
        for path in 0..a.n_paths {
            let x2 = b.terminal(path);
            let x1 = a.terminal(path);
            worst[0] = worst[0].min((coeffs1.phi)(x2) - (coeffs2.phi)(x2));
            worst[1] = worst[1].min((coeffs1.phi)(x1) - (coeffs2.phi)(x1));
        }
    }
    if worst[0] < 0.0 && worst[1] < 0.0 {
        let mut out = ComparisonOutcome::skipped(
            Theorem::Terminal,
            seed,
            n_steps,
            format!("phi1 >= phi2 fails along both solutions (min {:e}, {:e})", worst[0], worst[1]),
        );
        out.hypothesis_min = Some(worst);
        return Ok(out);
    }
    let gap = match coarse {
        Some(v) => v,
        None => coarse_gap(settings, [coeffs1, coeffs2], &grid, cfg)?,
    };
    let y_hat = sols[0].y0 - sols[1].y0;
    let eps_num = 5.0 * (cfg.picard.tol + (y_hat - gap).abs());
    finish(Theorem::Terminal, seed, settings, [coeffs1, coeffs2], &sols, cfg, eps_num, Some(worst))
}

/// Sampled monotonicity: `phi` non-decreasing, `f, g` non-increasing in `x`.
pub fn check_monotone(coeffs: &CoefficientSet, grid: &DiscretizationGrid, samples: usize, seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = &grid.axes[0];
    for _ in 0..samples {
        let x = rng.random_range(a.min..a.max);
        let h = rng.random_range(1e-3..0.5);
        let t = rng.random_range(0.0..grid.horizon);
        let y = rng.random_range(-5.0..5.0);
        let z = rng.random_range(-5.0..5.0);
        if (coeffs.phi)(&[x + h]) < (coeffs.phi)(&[x]) - 1e-12 {
            return Some(format!("phi decreases between {x} and {}", x + h));
        }
        if (coeffs.f)(t, &[x + h], y, z) > (coeffs.f)(t, &[x], y, z) + 1e-12 {
            return Some(format!("f increases in x near x = {x}"));
        }
        if (coeffs.g)(t, &[x + h], y, z) > (coeffs.g)(t, &[x], y, z) + 1e-12 {
            return Some(format!("g increases in x near x = {x}"));
        }
    }
    None
}

/// Ordering for two one-dimensional problems that differ only in `x0`.
pub fn compare_thm42(
    setting1: &GSetting,
    setting2: &GSetting,
    coeffs: &CoefficientSet,
    n_steps: usize,
    cfg: &ComparisonConfig,
) -> Result<ComparisonOutcome> {
    initial_comparison(setting1, setting2, coeffs, n_steps, cfg, None)
}

fn initial_comparison(
    setting1: &GSetting,
    setting2: &GSetting,
    coeffs: &CoefficientSet,
    n_steps: usize,
    cfg: &ComparisonConfig,
    coarse: Option<f64>,
) -> Result<ComparisonOutcome> {
    let seed = cfg.picard.mc.seed;
    if coeffs.dim() != 1 {
        return Err(Error::InvalidSetting("the initial-state comparison needs n = 1".into()));
    }
    let settings = [setting1, setting2];
    let (x1, x2) = (setting1.x0[0], setting2.x0[0]);
    if x1 < x2 {
        return Ok(ComparisonOutcome::skipped(
            Theorem::Initial,
            seed,
            n_steps,
            format!("x1 = {x1} < x2 = {x2}"),
        ));
    }
    let grid = pair_grid(settings, coeffs, n_steps, cfg)?;
    if let Some(why) = check_monotone(coeffs, &grid, 10_000, seed) {
        return Ok(ComparisonOutcome::skipped(Theorem::Initial, seed, n_steps, why));
    }
    let sols = match solve_pair(settings, [coeffs, coeffs], &grid, cfg) {
        Ok(s) => s,
        Err(Error::NotCertified(r)) => {
            return Ok(ComparisonOutcome::skipped(Theorem::Initial, seed, n_steps, format!("not certified: {r}")))
        }
        Err(e) => return Err(e),
    };
    let gap = match coarse {
        Some(v) => v,
        None => coarse_gap(settings, [coeffs, coeffs], &grid, cfg)?,
    };
    let y_hat = sols[0].y0 - sols[1].y0;
    let eps_num = 5.0 * (cfg.picard.tol + (y_hat - gap).abs());
    finish(Theorem::Initial, seed, settings, [coeffs, coeffs], &sols, cfg, eps_num, None)
}

/// Problem pair for one battery seed: the comparison pair with a random
/// raise of the terminal function, or the monotone pair with random
/// ordered starts.
pub fn battery_pair(theorem: Theorem, seed: u64) -> Result<(GSetting, GSetting, CoefficientSet, CoefficientSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    match theorem {
        Theorem::Terminal => {
            let e = catalog_entry("weakly-coupled").expect("catalog entry");
            let c0 = rng.random_range(0.0..0.2);
            let c1 = rng.random_range(0.0..0.4);
            let xc = rng.random_range(-1.0..1.0);
            let mut c1set = e.coefficients.with_phi(raised_terminal(e.coefficients.phi.clone(), c0, c1, xc));
            c1set.lipschitz.l3 = e.coefficients.lipschitz.l3 + 0.5 * c1;
            Ok((e.setting.clone(), e.setting, c1set, e.coefficients))
        }
        Theorem::Initial => {
            let e = catalog_entry("monotone-pair").expect("catalog entry");
            let x2 = rng.random_range(0.0..0.5);
            let x1 = x2 + rng.random_range(0.0..0.5);
            Ok((e.setting.with_x0(vec![x1]), e.setting.with_x0(vec![x2]), e.coefficients.clone(), e.coefficients))
        }
    }
}

pub fn run_comparison(theorem: Theorem, seed: u64, n_steps: usize, cfg: &ComparisonConfig) -> Result<ComparisonOutcome> {
    run_with(theorem, seed, n_steps, cfg, None)
}

fn run_with(
    theorem: Theorem,
    seed: u64,
    n_steps: usize,
    cfg: &ComparisonConfig,
    coarse: Option<f64>,
) -> Result<ComparisonOutcome> {
    let (s1, s2, c1, c2) = battery_pair(theorem, seed)?;
    let mut cfg = cfg.clone();
    cfg.picard.mc.seed = seed;
    match theorem {
        Theorem::Terminal => terminal_comparison(&s1, &c1, &c2, n_steps, &cfg, coarse),
        Theorem::Initial => initial_comparison(&s1, &s2, &c1, n_steps, &cfg, coarse),
    }
}

/// One seed over ascending grids; a grid of half the steps already in the
/// list supplies the coarse value for the next.
fn run_seed(theorem: Theorem, seed: u64, grids: &[usize], cfg: &ComparisonConfig) -> Result<Vec<ComparisonOutcome>> {
    let mut sorted = grids.to_vec();
    sorted.sort_unstable();
    let mut done: Vec<(usize, f64)> = Vec::new();
    let mut out = Vec::with_capacity(grids.len());
    for n in sorted {
        let coarse = done.iter().find(|(m, _)| 2 * m == n).map(|&(_, v)| v);
        let o = run_with(theorem, seed, n, cfg, coarse)?;
        if o.status != Status::Skipped {
            done.push((n, o.y0[0] - o.y0[1]));
        }
        out.push(o);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryReport {
    pub theorem: Theorem,
    pub rows: Vec<ComparisonOutcome>,
    pub violations: usize,
    pub skipped: usize,
    pub grids: Vec<GridSummary>,
    /// Least-squares slope of log mean residual against log dt.
    pub residual_slope: f64,
    pub defect_slope: f64,
    /// Mean defect on the finest grid is no larger than on the coarsest,
    /// up to three pooled standard errors.
    pub defect_non_increasing: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridSummary {
    pub n_steps: usize,
    pub mean_residual: f64,
    pub mean_budget: f64,
    pub mean_defect: f64,
    /// Standard error of `mean_defect` from the per-run errors.
    pub defect_se: f64,
}

fn log_slope(pts: &[(usize, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(_, r)| *r > 0.0)
        .map(|&(n, r)| ((1.0 / n as f64).ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Every seed on every grid; seeds run in parallel, rows ordered by grid then seed.
pub fn comparison_battery(
    theorem: Theorem,
    seeds: &[u64],
    grids: &[usize],
    cfg: &ComparisonConfig,
) -> Result<BatteryReport> {
    let per_seed: Vec<Vec<ComparisonOutcome>> = seeds
        .par_iter()
        .map(|&s| run_seed(theorem, s, grids, cfg))
        .collect::<Result<_>>()?;
    let mut rows: Vec<ComparisonOutcome> = per_seed.into_iter().flatten().collect();
    rows.sort_by_key(|o| (o.n_steps, seeds.iter().position(|&s| s == o.seed)));
    let mut sorted = grids.to_vec();
    sorted.sort_unstable();
    let summaries: Vec<GridSummary> = sorted
        .iter()
        .map(|&n| {
            let d: Vec<&DualityReport> = rows
                .iter()
                .filter(|o| o.n_steps == n)
                .filter_map(|o| o.duality.as_ref())
                .collect();
            let k = d.len().max(1) as f64;
            GridSummary {
                n_steps: n,
                mean_residual: d.iter().map(|r| r.residual).sum::<f64>() / k,
                mean_budget: d.iter().map(|r| r.budget).sum::<f64>() / k,
                mean_defect: d.iter().map(|r| r.defect).sum::<f64>() / k,
                defect_se: d.iter().map(|r| r.defect_se * r.defect_se).sum::<f64>().sqrt() / k,
            }
        })
        .collect();
    let residual_slope = log_slope(&summaries.iter().map(|g| (g.n_steps, g.mean_residual)).collect::<Vec<_>>());
    let defect_slope = log_slope(&summaries.iter().map(|g| (g.n_steps, g.mean_defect)).collect::<Vec<_>>());
    let defect_non_increasing = match (summaries.first(), summaries.last()) {
        (Some(c), Some(f)) => f.mean_defect <= c.mean_defect + 3.0 * (c.defect_se.powi(2) + f.defect_se.powi(2)).sqrt(),
        _ => true,
    };
    Ok(BatteryReport {
        theorem,
        violations: rows.iter().filter(|o| o.status == Status::Fail).count(),
        skipped: rows.iter().filter(|o| o.status == Status::Skipped).count(),
        rows,
        grids: summaries,
        residual_slope,
        defect_slope,
        defect_non_increasing,
    })
}
