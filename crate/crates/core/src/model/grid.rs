use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GSetting;

/// One-step increment model: `dB = sigma * sqrt(dt) * xi` with `xi` drawn
/// from a symmetric quadrature rule of unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// `xi = +-1` with equal weights.
    #[default]
    TwoPoint,
    #[serde(rename = "gauss-hermite-3")]
    GaussHermite3,
    #[serde(rename = "gauss-hermite-5")]
    GaussHermite5,
}

const TWO_POINT: [(f64, f64); 2] = [(-1.0, 0.5), (1.0, 0.5)];

impl Quadrature {
    /// `(node, weight)` pairs for the standard normal.
    pub fn rule(self) -> Vec<(f64, f64)> {
        match self {
            Quadrature::TwoPoint => TWO_POINT.to_vec(),
            Quadrature::GaussHermite3 => {
                let r = 3f64.sqrt();
                vec![(-r, 1.0 / 6.0), (0.0, 2.0 / 3.0), (r, 1.0 / 6.0)]
            }
            Quadrature::GaussHermite5 => {
                let s10 = 10f64.sqrt();
                let outer = (5.0 + s10).sqrt();
                let inner = (5.0 - s10).sqrt();
                // w = n! / (n^2 He_{n-1}(x)^2) with He_4 = x^4 - 6x^2 + 3
                let w = |x: f64| {
                    let x2 = x * x;
                    let he4 = x2 * x2 - 6.0 * x2 + 3.0;
                    120.0 / (25.0 * he4 * he4)
                };
                vec![
                    (-outer, w(outer)),
                    (-inner, w(inner)),
                    (0.0, w(0.0)),
                    (inner, w(inner)),
                    (outer, w(outer)),
                ]
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two-point" | "two_point" | "2" => Some(Quadrature::TwoPoint),
            "gauss-hermite-3" | "gh3" | "3" => Some(Quadrature::GaussHermite3),
            "gauss-hermite-5" | "gh5" | "5" => Some(Quadrature::GaussHermite5),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrature::TwoPoint => "two-point",
            Quadrature::GaussHermite3 => "gauss-hermite-3",
            Quadrature::GaussHermite5 => "gauss-hermite-5",
        }
    }
}

/// Uniform lattice along one state coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Axis { min, max, n }
    }

    /// Axis with spacing exactly `step` and a node at `anchor`, covering
    /// at least `[lo, hi]`.
    pub fn aligned(anchor: f64, step: f64, lo: f64, hi: f64) -> Self {
        let below = ((anchor - lo) / step).ceil().max(1.0) as usize;
        let above = ((hi - anchor) / step).ceil().max(1.0) as usize;
        Axis {
            min: anchor - below as f64 * step,
            max: anchor + above as f64 * step,
            n: below + above + 1,
        }
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Cell index `i` (in `0..n-1`) and local coordinate `w` with
    /// `x = node(i) + w * spacing`. Outside the axis `w` leaves `[0, 1]`,
    /// which turns interpolation into extrapolation along the end cell.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let h = self.spacing();
        let s = (x - self.min) / h;
        let i = if s <= 0.0 {
            0
        } else {
            (s.floor() as usize).min(self.n - 2)
        };
        let w = s - i as f64;
        // Snap rounding noise so that on-node lookups are exact.
        let w = if (w - w.round()).abs() < 1e-9 { w.round() } else { w };
        (i, w)
    }
}

/// Time steps, spatial lattice and increment model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationGrid {
    pub n_steps: usize,
    pub horizon: f64,
    pub axes: Vec<Axis>,
    pub quadrature: Quadrature,
}

/// Default node counts per coordinate by state dimension.
pub fn default_nodes(dim: usize) -> usize {
    match dim {
        1 => 4000,
        2 => 201,
        _ => 41,
    }
}

impl DiscretizationGrid {
    pub fn new(horizon: f64, n_steps: usize, axes: Vec<Axis>, quadrature: Quadrature) -> Result<Self> {
        let g = DiscretizationGrid {
            n_steps,
            horizon,
            axes,
            quadrature,
        };
        g.check_shape()?;
        Ok(g)
    }

    /// Box `x0 +- 6 sigma_high sqrt(T)` per coordinate.
    pub fn standard(setting: &GSetting, n_steps: usize) -> Result<Self> {
        Self::scaled(setting, n_steps, 1.0, 0.0, default_nodes(setting.dim()), Quadrature::TwoPoint)
    }

    /// Lattice whose spacing divides `vol_scale * sigma_high * sqrt(dt)`,
    /// with a node at each `x0` coordinate. The box is
    /// `x0 +- (6 sigma_high vol_scale sqrt(T) + drift T)`, never narrower
    /// than the default. `nodes` is the target node count per coordinate.
    pub fn scaled(
        setting: &GSetting,
        n_steps: usize,
        vol_scale: f64,
        drift: f64,
        nodes: usize,
        quadrature: Quadrature,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if nodes < 3 {
            return Err(Error::InvalidGrid("need at least 3 nodes per coordinate".into()));
        }
        let t = setting.horizon;
        let dt = t / n_steps as f64;
        let vol_scale = if vol_scale.is_finite() && vol_scale > 0.0 {
            vol_scale.max(1.0)
        } else {
            1.0
        };
        let half = 6.0 * setting.sigma_high * vol_scale * t.sqrt() + drift.abs() * t;
        let jump = setting.sigma_high * vol_scale * dt.sqrt();
        let target = 2.0 * half / (nodes - 1) as f64;
        let k = (jump / target).ceil().max(1.0);
        let step = jump / k;
        let axes = setting
            .x0
            .iter()
            .map(|&x| Axis::aligned(x, step, x - half, x + half))
            .collect();
        Self::new(t, n_steps, axes, quadrature)
    }

    fn check_shape(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidGrid("horizon must be positive".into()));
        }
        if self.axes.is_empty() {
            return Err(Error::InvalidGrid("no spatial axes".into()));
        }
        for (j, a) in self.axes.iter().enumerate() {
            if a.n < 3 || !(a.min < a.max) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "axis {j}: need finite min < max and n >= 3 (got [{}, {}], n = {})",
                    a.min, a.max, a.n
                )));
            }
        }
        Ok(())
    }

    /// Shape checks plus the margin requirement around `x0`.
    pub fn validate(&self, setting: &GSetting) -> Result<()> {
        self.check_shape()?;
        if self.axes.len() != setting.dim() {
            return Err(Error::InvalidGrid(format!(
                "grid has {} axes, problem dimension is {}",
                self.axes.len(),
                setting.dim()
            )));
        }
        if (self.horizon - setting.horizon).abs() > 1e-14 * setting.horizon {
            return Err(Error::InvalidGrid("grid horizon differs from the setting".into()));
        }
        let margin = 4.0 * setting.sigma_high * setting.horizon.sqrt();
        for (j, (a, &x)) in self.axes.iter().zip(&setting.x0).enumerate() {
            if x - a.min < margin * (1.0 - 1e-12) || a.max - x < margin * (1.0 - 1e-12) {
                return Err(Error::InvalidGrid(format!(
                    "axis {j}: [{}, {}] leaves less than 4 sigma_high sqrt(T) = {margin} around x0 = {x}",
                    a.min, a.max
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    /// Coordinates of flat node index `k` (first axis fastest).
    pub fn node_point(&self, mut k: usize, out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&self.axes) {
            *o = a.node(k % a.n);
            k /= a.n;
        }
    }

    /// Same lattice with `factor` times more time steps.
    pub fn refined(&self, factor: usize) -> Self {
        DiscretizationGrid {
            n_steps: self.n_steps * factor,
            ..self.clone()
        }
    }

    pub fn with_steps(&self, n_steps: usize) -> Self {
        DiscretizationGrid {
            n_steps,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_rules_match_normal_moments() {
        for q in [Quadrature::TwoPoint, Quadrature::GaussHermite3, Quadrature::GaussHermite5] {
            let r = q.rule();
            let m = |k: i32| r.iter().map(|(x, w)| w * x.powi(k)).sum::<f64>();
            assert!((m(0) - 1.0).abs() < 1e-14, "{q:?}");
            assert!(m(1).abs() < 1e-14);
            assert!((m(2) - 1.0).abs() < 1e-13);
            if q != Quadrature::TwoPoint {
                assert!((m(4) - 3.0).abs() < 1e-12, "{q:?}");
            }
        }
        let r = Quadrature::GaussHermite5.rule();
        let m6: f64 = r.iter().map(|(x, w)| w * x.powi(6)).sum();
        let m8: f64 = r.iter().map(|(x, w)| w * x.powi(8)).sum();
        assert!((m6 - 15.0).abs() < 1e-11);
        assert!((m8 - 105.0).abs() < 1e-10);
        assert!((r[2].1 - 8.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn aligned_axis_has_anchor_node() {
        let a = Axis::aligned(0.3, 0.1, -1.0, 1.0);
        let (i, w) = a.locate(0.3);
        assert_eq!(w, 0.0);
        assert!((a.node(i) - 0.3).abs() < 1e-14);
        assert!(a.min <= -1.0 && a.max >= 1.0);
    }

    #[test]
    fn locate_extrapolates_past_the_ends() {
        let a = Axis::new(0.0, 1.0, 11);
        assert_eq!(a.locate(-0.25).0, 0);
        assert!((a.locate(-0.25).1 + 2.5).abs() < 1e-12);
        let (i, w) = a.locate(1.5);
        assert_eq!(i, 9);
        assert!((w - 6.0).abs() < 1e-12);
        assert_eq!(a.locate(1.0), (9, 1.0));
    }

    #[test]
    fn scaled_grid_spacing_divides_the_jump() {
        let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
        let g = DiscretizationGrid::standard(&s, 200).unwrap();
        let jump = 1.2 * g.dt().sqrt();
        let ratio = jump / g.axes[0].spacing();
        assert!((ratio - ratio.round()).abs() < 1e-9);
        assert!(g.axes[0].n > 3900 && g.axes[0].n < 4300);
        g.validate(&s).unwrap();
        assert!((g.dt() * g.n_steps as f64 - s.horizon).abs() < 1e-15);
    }

    #[test]
    fn narrow_box_is_rejected() {
        let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
        let g = DiscretizationGrid::new(1.0, 10, vec![Axis::new(-1.0, 1.0, 21)], Quadrature::TwoPoint).unwrap();
        assert!(g.validate(&s).is_err());
    }

    #[test]
    fn node_point_is_first_axis_fastest() {
        let g = DiscretizationGrid::new(
            1.0,
            1,
            vec![Axis::new(0.0, 2.0, 3), Axis::new(10.0, 12.0, 3)],
            Quadrature::TwoPoint,
        )
        .unwrap();
        let mut p = [0.0; 2];
        g.node_point(4, &mut p);
        assert_eq!(p, [1.0, 11.0]);
    }
}
