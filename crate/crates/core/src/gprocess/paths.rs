use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gprocess::VolatilityControl;
use crate::model::{DiscretizationGrid, GSetting};

/// Distribution of the normalized increments `xi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncrementModel {
    #[default]
    Gaussian,
    /// `xi = +-1`; realized quadratic variation then equals `<B>` exactly.
    Rademacher,
}

/// Independent generator for one path: the seed picks the stream family,
/// the path index picks the stream. Results do not depend on how paths
/// are spread over threads.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

#[inline]
pub fn draw_xi(rng: &mut ChaCha8Rng, model: IncrementModel) -> f64 {
    match model {
        IncrementModel::Gaussian => rng.sample(StandardNormal),
        IncrementModel::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Brownian increments `dB_i = sqrt(gamma_i dt) xi_i` for many paths
/// under one volatility control.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub control: VolatilityControl,
    pub seed: u64,
    pub model: IncrementModel,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    /// Path-major: `increments[path * n_steps + i]`.
    increments: Vec<f64>,
    /// Shared across paths since controls are deterministic.
    qv: Vec<f64>,
}

fn cumulative_qv(control: &VolatilityControl, dt: f64) -> Vec<f64> {
    let mut qv = Vec::with_capacity(control.gamma.len() + 1);
    qv.push(0.0);
    let mut acc = 0.0;
    for g in &control.gamma {
        acc += g * dt;
        qv.push(acc);
    }
    qv
}

/// Sample `n_paths` paths. The same seed gives the same `xi` for every
/// control (common random numbers).
pub fn sample_paths(
    setting: &GSetting,
    grid: &DiscretizationGrid,
    control: &VolatilityControl,
    n_paths: usize,
    seed: u64,
    model: IncrementModel,
) -> Result<PathEnsemble> {
    control.check_band(setting)?;
    if control.n_steps() != grid.n_steps {
        return Err(Error::InvalidGrid(format!(
            "control has {} steps, grid has {}",
            control.n_steps(),
            grid.n_steps
        )));
    }
    let n = grid.n_steps;
    let dt = grid.dt();
    let scale: Vec<f64> = control.gamma.iter().map(|g| (g * dt).sqrt()).collect();
    let mut increments = vec![0.0; n_paths * n];
    increments.par_chunks_mut(n.max(1)).enumerate().for_each(|(path, row)| {
        let mut rng = path_rng(seed, path);
        for (d, s) in row.iter_mut().zip(&scale) {
            *d = s * draw_xi(&mut rng, model);
        }
    });
    Ok(PathEnsemble {
        control: control.clone(),
        seed,
        model,
        n_paths,
        n_steps: n,
        dt,
        increments,
        qv: cumulative_qv(control, dt),
    })
}

impl PathEnsemble {
    #[inline]
    pub fn increments(&self, path: usize) -> &[f64] {
        &self.increments[path * self.n_steps..(path + 1) * self.n_steps]
    }

    /// `<B>` at grid times `0..=n_steps`.
    pub fn qv(&self) -> &[f64] {
        &self.qv
    }

    /// `<B>_{i+1} - <B>_i = gamma_i dt`.
    #[inline]
    pub fn qv_increment(&self, i: usize) -> f64 {
        self.control.gamma[i] * self.dt
    }

    #[inline]
    pub fn gamma(&self, i: usize) -> f64 {
        self.control.gamma[i]
    }

    /// `B` at grid times `0..=n_steps` along one path.
    pub fn brownian(&self, path: usize) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.n_steps + 1);
        b.push(0.0);
        let mut acc = 0.0;
        for d in self.increments(path) {
            acc += d;
            b.push(acc);
        }
        b
    }

    /// Same paths on a grid with `factor` times fewer steps.
    pub fn coarsen(&self, factor: usize) -> Result<PathEnsemble> {
        let control = self.control.coarsen(factor)?;
        let n = self.n_steps / factor;
        let mut increments = vec![0.0; self.n_paths * n];
        for (path, row) in increments.chunks_mut(n.max(1)).enumerate() {
            for (i, r) in row.iter_mut().enumerate() {
                *r = self.increments(path)[i * factor..(i + 1) * factor].iter().sum();
            }
        }
        let dt = self.dt * factor as f64;
        Ok(PathEnsemble {
            qv: cumulative_qv(&control, dt),
            control,
            seed: self.seed,
            model: self.model,
            n_paths: self.n_paths,
            n_steps: n,
            dt,
            increments,
        })
    }
}
