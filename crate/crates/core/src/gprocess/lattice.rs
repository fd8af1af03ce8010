use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Axis, DiscretizationGrid, GSetting};

/// Values on the space-time lattice, read between nodes by multilinear
/// interpolation and outside the box by extending the end cells linearly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeFunction {
    pub axes: Vec<Axis>,
    pub times: Vec<f64>,
    /// `values[i][k]`: time index `i`, flat node index `k` (first axis fastest).
    pub values: Vec<Vec<f64>>,
}

impl LatticeFunction {
    pub fn zeros(grid: &DiscretizationGrid) -> Self {
        LatticeFunction {
            axes: grid.axes.clone(),
            times: (0..=grid.n_steps).map(|i| grid.time(i)).collect(),
            values: vec![vec![0.0; grid.n_nodes()]; grid.n_steps + 1],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn n_times(&self) -> usize {
        self.values.len()
    }

    /// Value at time index `i` and point `x`.
    pub fn eval(&self, i: usize, x: &[f64]) -> f64 {
        interpolate(&self.axes, &self.values[i], x)
    }

    pub fn terminal(&self) -> &[f64] {
        self.values.last().expect("lattice has at least one time")
    }
}

/// Multilinear interpolation of node values over `axes`.
#[inline]
pub fn interpolate(axes: &[Axis], values: &[f64], x: &[f64]) -> f64 {
    if axes.len() == 1 {
        let (i, w) = axes[0].locate(x[0]);
        let a = values[i];
        let b = values[i + 1];
        // `a + w (b - a)` keeps constant data exact.
        return a + w * (b - a);
    }
    let d = axes.len();
    let mut base = 0usize;
    let mut stride = 1usize;
    let mut cell = [(0usize, 0.0f64); 8];
    let mut strides = [0usize; 8];
    assert!(d <= 8, "interpolation supports up to 8 coordinates");
    for (j, a) in axes.iter().enumerate() {
        let (i, w) = a.locate(x[j]);
        cell[j] = (i, w);
        strides[j] = stride;
        base += i * stride;
        stride *= a.n;
    }
    // Reduce the 2^d corner values one coordinate at a time.
    let corners = 1usize << d;
    let mut buf = [0.0f64; 256];
    for (c, slot) in buf.iter_mut().enumerate().take(corners) {
        let mut k = base;
        for j in 0..d {
            if c >> j & 1 == 1 {
                k += strides[j];
            }
        }
        *slot = values[k];
    }
    let mut len = corners;
    for j in 0..d {
        let w = cell[j].1;
        len /= 2;
        for c in 0..len {
            let a = buf[2 * c];
            let b = buf[2 * c + 1];
            buf[c] = a + w * (b - a);
        }
    }
    buf[0]
}

/// Volatility levels the one-step sup runs over.
pub fn vol_levels(setting: &GSetting) -> Vec<f64> {
    if setting.classical || setting.sigma_low == setting.sigma_high {
        vec![setting.sigma_high]
    } else {
        vec![setting.sigma_low, setting.sigma_high]
    }
}

/// Lattice G-expectation result.
#[derive(Debug, Clone, Serialize)]
pub struct LatticeExpectation {
    /// `u_0(0)`.
    pub value: f64,
    pub n_steps: usize,
    pub n_nodes: usize,
    pub quadrature: &'static str,
}

/// `E^[payoff(B_T)]` by the backward recursion
/// `u_i(x) = max_sigma sum_k w_k u_{i+1}(x + sigma sqrt(dt) xi_k)`.
///
/// With the two-point rule the one-step value is affine in `sigma^2`, so
/// the max over the two band ends is the max over the whole band.
pub fn gexpect_lattice(
    payoff: &(dyn Fn(f64) -> f64 + Sync),
    setting: &GSetting,
    grid: &DiscretizationGrid,
) -> Result<LatticeExpectation> {
    let u = gexpect_lattice_function(payoff, setting, grid)?;
    Ok(LatticeExpectation {
        value: u.eval(0, &[0.0]),
        n_steps: grid.n_steps,
        n_nodes: grid.n_nodes(),
        quadrature: grid.quadrature.name(),
    })
}

/// Whole value function of [`gexpect_lattice`].
pub fn gexpect_lattice_function(
    payoff: &(dyn Fn(f64) -> f64 + Sync),
    setting: &GSetting,
    grid: &DiscretizationGrid,
) -> Result<LatticeFunction> {
    if grid.dim() != 1 {
        return Err(Error::InvalidGrid("G-expectation lattice is one-dimensional".into()));
    }
    let axis = &grid.axes[0];
    let nodes = axis.nodes();
    let mut u = LatticeFunction::zeros(grid);
    let n = grid.n_steps;
    for (k, &x) in nodes.iter().enumerate() {
        let v = payoff(x);
        if !v.is_finite() {
            return Err(Error::non_finite("payoff", format!("x = {x}")));
        }
        u.values[n][k] = v;
    }
    let rule = grid.quadrature.rule();
    let sq = grid.dt().sqrt();
    let levels = vol_levels(setting);
    for i in (0..n).rev() {
        let (head, tail) = u.values.split_at_mut(i + 1);
        let next = &tail[0];
        head[i].par_iter_mut().zip(nodes.par_iter()).for_each(|(out, &x)| {
            let mut best = f64::NEG_INFINITY;
            for &s in &levels {
                let mut e = 0.0;
                for &(xi, w) in &rule {
                    e += w * interpolate(std::slice::from_ref(axis), next, &[x + s * sq * xi]);
                }
                if e > best {
                    best = e;
                }
            }
            *out = best;
        });
    }
    Ok(u)
}
