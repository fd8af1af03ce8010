//! Least-squares conditional expectations on polynomial features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Monomials of total degree `<= degree` in standardized coordinates.
/// Coordinates with (numerically) zero spread are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Exponent vector of each feature, over the active coordinates.
    exponents: Vec<Vec<u8>>,
    active: Vec<usize>,
}

impl PolyBasis {
    /// Fit the standardization to `points` (row-major, `dim` columns).
    pub fn new(points: &[f64], dim: usize, degree: u8) -> Self {
        let rows = points.len() / dim.max(1);
        let mut center = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        let mut active = Vec::new();
        for j in 0..dim {
            let col: Vec<f64> = (0..rows).map(|r| points[r * dim + j]).collect();
            let m = crate::stats::mean(&col);
            let dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
            let sd = (crate::stats::mean(&dev)).sqrt();
            center[j] = m;
            if sd > 1e-12 * (1.0 + m.abs()) {
                scale[j] = sd;
                active.push(j);
            }
        }
        let mut exponents = Vec::new();
        let k = active.len();
        let mut cur = vec![0u8; k];
        push_monomials(&mut exponents, &mut cur, 0, degree);
        exponents.sort_by_key(|e| (e.iter().map(|&v| v as u32).sum::<u32>(), std::cmp::Reverse(e.clone())));
        PolyBasis {
            center,
            scale,
            exponents,
            active,
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn features(&self, x: &[f64], out: &mut [f64]) {
        let z: smallvec::SmallVec<[f64; 8]> =
            self.active.iter().map(|&j| (x[j] - self.center[j]) / self.scale[j]).collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (zi, &k) in z.iter().zip(e) {
                v *= zi.powi(k as i32);
            }
            *o = v;
        }
    }

    pub fn design(&self, points: &[f64], dim: usize) -> DMatrix<f64> {
        let rows = points.len() / dim;
        let mut m = DMatrix::zeros(rows, self.len());
        let mut buf = vec![0.0; self.len()];
        for r in 0..rows {
            self.features(&points[r * dim..(r + 1) * dim], &mut buf);
            for (c, v) in buf.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    }
}

fn push_monomials(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, j: usize, left: u8) {
    if j == cur.len() {
        out.push(cur.clone());
        return;
    }
    for k in 0..=left {
        cur[j] = k;
        push_monomials(out, cur, j + 1, left - k);
    }
    cur[j] = 0;
}

/// Solved regression: one coefficient vector per target.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub basis: PolyBasis,
    pub coefficients: Vec<DVector<f64>>,
}

impl Fit {
    pub fn eval(&self, target: usize, x: &[f64]) -> f64 {
        let mut buf: smallvec::SmallVec<[f64; 32]> = smallvec::smallvec![0.0; self.basis.len()];
        self.basis.features(x, &mut buf);
        buf.iter().zip(self.coefficients[target].iter()).map(|(a, b)| a * b).sum()
    }

    /// All targets at once.
    pub fn eval_all(&self, x: &[f64], out: &mut [f64]) {
        let mut buf: smallvec::SmallVec<[f64; 32]> = smallvec::smallvec![0.0; self.basis.len()];
        self.basis.features(x, &mut buf);
        for (o, c) in out.iter_mut().zip(&self.coefficients) {
            *o = buf.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        }
    }
}

/// Regress each target column on the polynomial features of `points`.
pub fn fit(points: &[f64], dim: usize, degree: u8, targets: &[&[f64]]) -> Result<Fit> {
    let basis = PolyBasis::new(points, dim, degree);
    let a = basis.design(points, dim);
    let rows = a.nrows();
    let svd = a.svd(true, true);
    let mut coefficients = Vec::with_capacity(targets.len());
    for t in targets {
        if t.len() != rows {
            return Err(Error::Precondition("regression target length differs from the sample".into()));
        }
        let b = DVector::from_column_slice(t);
        let c = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::Precondition(format!("least squares failed: {e}")))?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("regression coefficients", "least squares"));
        }
        coefficients.push(c);
    }
    Ok(Fit { basis, coefficients })
}
