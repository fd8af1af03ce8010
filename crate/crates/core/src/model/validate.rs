use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CoefficientSet, DiscretizationGrid, GSetting};

/// Randomized Lipschitz audit settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub samples: usize,
    pub seed: u64,
    /// Per-coordinate sampling box; `None` uses `x0 +- 6 sigma_high sqrt(T)`.
    pub x_box: Option<Vec<(f64, f64)>>,
    pub yz_range: (f64, f64),
    /// Relative excess over the declared bound that counts as a failure.
    pub rel_tol: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            samples: 10_000,
            seed: 0x5eed_a0d1,
            x_box: None,
            yz_range: (-10.0, 10.0),
            rel_tol: 1e-9,
        }
    }
}

impl AuditConfig {
    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_box_from_grid(mut self, grid: &DiscretizationGrid) -> Self {
        self.x_box = Some(grid.axes.iter().map(|a| (a.min, a.max)).collect());
        self
    }
}

/// Point pair on which a declared bound failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub z: f64,
    pub x2: Vec<f64>,
    pub y2: f64,
    pub z2: f64,
    pub lhs: f64,
    pub rhs: f64,
}

/// Outcome of one Lipschitz inequality over all sampled pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditGroup {
    pub name: String,
    pub worst_ratio: f64,
    pub failures: usize,
    pub witness: Option<Witness>,
}

impl AuditGroup {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub audit: Vec<AuditGroup>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.audit.iter().all(AuditGroup::passed)
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        for g in self.audit.iter().filter(|g| !g.passed()) {
            let w = g.witness.as_ref().expect("failed group carries a witness");
            out.push(format!(
                "{}: {} of the sampled pairs exceed the declared bound; worst ratio {:.6}, e.g. x = {:?}, y = {}, z = {} vs x' = {:?}, y' = {}, z' = {}",
                g.name, g.failures, g.worst_ratio, w.x, w.y, w.z, w.x2, w.y2, w.z2
            ));
        }
        out
    }
}

/// Check the setting invariants and audit the declared Lipschitz constants
/// on random point pairs. Non-finite coefficient values are an error.
pub fn validate_problem(setting: &GSetting, coeffs: &CoefficientSet, cfg: &AuditConfig) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let setting_ok = match setting.validate() {
        Ok(()) => {
            checks.push(Check {
                name: "setting".into(),
                passed: true,
                detail: String::new(),
            });
            true
        }
        Err(e) => {
            checks.push(Check {
                name: "setting".into(),
                passed: false,
                detail: e.to_string(),
            });
            false
        }
    };
    let dim_ok = coeffs.dim() == setting.dim();
    checks.push(Check {
        name: "dimension".into(),
        passed: dim_ok,
        detail: if dim_ok {
            String::new()
        } else {
            format!("coefficients have dimension {}, x0 has {}", coeffs.dim(), setting.dim())
        },
    });
    let l = coeffs.lipschitz;
    let l_ok = [l.l1, l.l2, l.l3].iter().all(|v| v.is_finite() && *v >= 0.0);
    checks.push(Check {
        name: "lipschitz-constants".into(),
        passed: l_ok,
        detail: if l_ok {
            String::new()
        } else {
            format!("declared constants must be finite and nonnegative: {l:?}")
        },
    });
    if !dim_ok || !setting_ok {
        return Ok(ValidationReport { checks, audit: vec![] });
    }

    let n = setting.dim();
    let x_box = cfg.x_box.clone().unwrap_or_else(|| {
        let half = 6.0 * setting.sigma_high * setting.horizon.sqrt();
        setting.x0.iter().map(|&x| (x - half, x + half)).collect()
    });
    if x_box.len() != n {
        return Err(Error::Precondition("audit box dimension differs from the problem".into()));
    }

    let results: Vec<Result<Sample>> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| audit_sample(setting, coeffs, cfg, &x_box, k as u64))
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    for r in results {
        samples.push(r?);
    }

    let mut audit = Vec::new();
    for (gi, name) in ["forward (b, h, sigma)", "driver (f, g)", "terminal (phi)"].iter().enumerate() {
        let mut group = AuditGroup {
            name: name.to_string(),
            worst_ratio: 0.0,
            failures: 0,
            witness: None,
        };
        for s in &samples {
            let (lhs, rhs, slack) = s.pairs[gi];
            let ratio = if rhs > 0.0 {
                lhs / rhs
            } else if lhs > slack {
                f64::INFINITY
            } else {
                0.0
            };
            if ratio > group.worst_ratio {
                group.worst_ratio = ratio;
            }
            if lhs > rhs * (1.0 + cfg.rel_tol) + slack {
                group.failures += 1;
                if group.witness.is_none() {
                    group.witness = Some(s.witness(lhs, rhs));
                }
            }
        }
        audit.push(group);
    }

    if !coeffs.sigma_depends_on_y {
        let bad = samples.iter().find(|s| s.sigma_moves_with_y);
        checks.push(Check {
            name: "sigma-independent-of-y".into(),
            passed: bad.is_none(),
            detail: bad
                .map(|s| format!("sigma changes with y at t = {}, x = {:?}", s.t, s.x))
                .unwrap_or_default(),
        });
    }
    Ok(ValidationReport { checks, audit })
}

struct Sample {
    t: f64,
    x: Vec<f64>,
    y: f64,
    z: f64,
    x2: Vec<f64>,
    y2: f64,
    z2: f64,
    /// (lhs, rhs, rounding slack) for the three inequality groups.
    pairs: [(f64, f64, f64); 3],
    sigma_moves_with_y: bool,
}

impl Sample {
    fn witness(&self, lhs: f64, rhs: f64) -> Witness {
        Witness {
            t: self.t,
            x: self.x.clone(),
            y: self.y,
            z: self.z,
            x2: self.x2.clone(),
            y2: self.y2,
            z2: self.z2,
            lhs,
            rhs,
        }
    }
}

fn finite(v: f64, what: &str, t: f64, x: &[f64], y: f64, z: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(what, format!("t = {t}, x = {x:?}, y = {y}, z = {z}")))
    }
}

fn audit_sample(
    setting: &GSetting,
    c: &CoefficientSet,
    cfg: &AuditConfig,
    x_box: &[(f64, f64)],
    k: u64,
) -> Result<Sample> {
    let n = setting.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k);
    let (ylo, yhi) = cfg.yz_range;
    let t = rng.random_range(0.0..=setting.horizon);
    let x: Vec<f64> = x_box.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
    let y = rng.random_range(ylo..=yhi);
    let z = rng.random_range(ylo..=yhi);

    // Perturb x only, (y, z) only, or everything; sizes log-uniform over
    // three decades so that rounding cannot dominate the quotient.
    let mode = k % 3;
    let x_scale = x_box.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max) / 4.0;
    let yz_scale = (yhi - ylo) / 4.0;
    let mut size = |scale: f64| scale * 10f64.powf(rng.random_range(-3.0..=0.0));
    let dx = if mode != 1 { size(x_scale) } else { 0.0 };
    let dyz = if mode != 0 { size(yz_scale) } else { 0.0 };
    let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    // Both points stay on the working box.
    let x2: Vec<f64> = x
        .iter()
        .zip(&dir)
        .zip(x_box)
        .map(|((xi, di), &(lo, hi))| (xi + dx * di / norm).clamp(lo, hi))
        .collect();
    let (sy, sz): (f64, f64) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    let y2 = (y + dyz * sy).clamp(ylo, yhi);
    let z2 = (z + dyz * sz).clamp(ylo, yhi);
    let ddx = crate::stats::euclid_diff(&x, &x2);
    let ddy = (y - y2).abs();
    let ddz = (z - z2).abs();
    let l = c.lipschitz;
    let eps = 4.0 * f64::EPSILON;

    // Forward: per component j, |db_j| + |dh_j| + |dsigma_j| <= L1 |dx| + L2 |dy|.
    let mut f1 = vec![vec![0.0; n]; 3];
    let mut f2 = vec![vec![0.0; n]; 3];
    for (slot, field) in [&c.b, &c.h, &c.sigma].into_iter().enumerate() {
        field(t, &x, y, &mut f1[slot]);
        field(t, &x2, y2, &mut f2[slot]);
    }
    let names = ["b", "h", "sigma"];
    let rhs_fwd = l.l1 * ddx + l.l2 * ddy;
    let mut fwd = (0.0, rhs_fwd, 0.0);
    for j in 0..n {
        let mut lhs = 0.0;
        let mut mag = 0.0;
        for slot in 0..3 {
            finite(f1[slot][j], names[slot], t, &x, y, z)?;
            finite(f2[slot][j], names[slot], t, &x2, y2, z2)?;
            lhs += (f1[slot][j] - f2[slot][j]).abs();
            mag += f1[slot][j].abs() + f2[slot][j].abs();
        }
        if lhs - rhs_fwd - eps * mag > fwd.0 - fwd.1 - fwd.2 {
            fwd = (lhs, rhs_fwd, eps * mag);
        }
    }

    // Driver: |df| + |dg| <= L3 |dx| + L1 (|dy| + |dz|).
    let fa = finite((c.f)(t, &x, y, z), "f", t, &x, y, z)?;
    let fb = finite((c.f)(t, &x2, y2, z2), "f", t, &x2, y2, z2)?;
    let ga = finite((c.g)(t, &x, y, z), "g", t, &x, y, z)?;
    let gb = finite((c.g)(t, &x2, y2, z2), "g", t, &x2, y2, z2)?;
    let drv = (
        (fa - fb).abs() + (ga - gb).abs(),
        l.l3 * ddx + l.l1 * (ddy + ddz),
        eps * (fa.abs() + fb.abs() + ga.abs() + gb.abs()),
    );

    let pa = finite((c.phi)(&x), "phi", t, &x, y, z)?;
    let pb = finite((c.phi)(&x2), "phi", t, &x2, y2, z2)?;
    let term = ((pa - pb).abs(), l.l3 * ddx, eps * (pa.abs() + pb.abs()));

    let sigma_moves_with_y = if c.sigma_depends_on_y {
        false
    } else {
        let mut s_other = vec![0.0; n];
        (c.sigma)(t, &x, y2 + 1.0, &mut s_other);
        s_other != f1[2]
    };

    Ok(Sample {
        t,
        x,
        y,
        z,
        x2,
        y2,
        z2,
        pairs: [fwd, drv, term],
        sigma_moves_with_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Lipschitz;

    fn setting() -> GSetting {
        GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0])
    }

    #[test]
    fn exact_affine_slopes_pass() {
        let c = CoefficientSet::scalar(
            |_, x, y| -0.5 * x + 0.2 * y,
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            |_, x, y, _| 0.3 * x - 0.4 * y,
            |_, _, _, z| 0.6 * z,
            |x| 0.7 * x,
            Lipschitz::new(0.6, 0.2, 0.7),
            false,
        );
        let r = validate_problem(&setting(), &c, &AuditConfig::default().with_samples(3000)).unwrap();
        assert!(r.passed(), "{:?}", r.failures());
        assert!(r.audit[0].worst_ratio > 0.99);
    }

    #[test]
    fn sine_drift_with_small_constant_fails_near_origin() {
        let c = CoefficientSet::scalar(
            |_, x, _| x.sin(),
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
            |_| 0.0,
            Lipschitz::new(0.5, 0.0, 0.0),
            false,
        );
        let r = validate_problem(&setting(), &c, &AuditConfig::default()).unwrap();
        assert!(!r.passed());
        let g = &r.audit[0];
        assert!(g.worst_ratio > 1.8 && g.worst_ratio <= 2.0 + 1e-9);
    }

    #[test]
    fn hidden_y_dependence_of_sigma_is_caught() {
        let c = CoefficientSet::scalar(
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |_, _, y| 1.0 + 0.01 * y.tanh(),
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
            |_| 0.0,
            Lipschitz::new(1.0, 1.0, 1.0),
            false,
        );
        let r = validate_problem(&setting(), &c, &AuditConfig::default().with_samples(200)).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let c = CoefficientSet::scalar(
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
            |x| if x > 1.0 { f64::NAN } else { 0.0 },
            Lipschitz::new(1.0, 1.0, 1.0),
            false,
        );
        let e = validate_problem(&setting(), &c, &AuditConfig::default()).unwrap_err();
        assert!(e.to_string().contains("phi"), "{e}");
    }

    #[test]
    fn equal_band_without_flag_is_rejected() {
        let s = GSetting::new(1.0, 1.0, 2.0, 3.0, 1.0, vec![0.0]);
        let c = CoefficientSet::scalar(
            |_, _, _| 0.0,
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
            |_| 0.0,
            Lipschitz::new(1.0, 0.0, 0.0),
            false,
        );
        let r = validate_problem(&s, &c, &AuditConfig::default()).unwrap();
        assert!(!r.passed());
        assert!(!r.checks[0].passed);
    }
}
