//! Discrete G-Brownian motion: volatility controls, sampled paths, and
//! lattice and Monte Carlo G-expectations.

mod control;
mod expectation;
mod lattice;
mod paths;

pub use control::{sup_over_family, ControlFamily, VolatilityControl};
pub use expectation::{bdg_check, gexpect_mc, per_path, qv_sandwich, BdgCheck, McExpectation, QvSandwich};
pub use lattice::{gexpect_lattice, gexpect_lattice_function, interpolate, vol_levels, LatticeExpectation, LatticeFunction};
pub use paths::{draw_xi, path_rng, sample_paths, IncrementModel, PathEnsemble};
