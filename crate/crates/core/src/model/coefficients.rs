use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::expr::{Expr, ExprError};

/// `(t, x, y, out)`: writes an R^n-valued forward coefficient into `out`.
pub type VectorField = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
/// `(t, x, y, z) -> R`: backward driver.
pub type Driver = Arc<dyn Fn(f64, &[f64], f64, f64) -> f64 + Send + Sync>;
/// `x -> R`: terminal function.
pub type Terminal = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Declared Lipschitz constants, grouped as in the standing assumption:
/// `l1` bounds the x-slope of `b, h, sigma` and the (y, z)-slope of `f, g`;
/// `l2` the y-slope of `b, h, sigma`; `l3` the x-slope of `f, g, phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Lipschitz {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Self {
        Lipschitz { l1, l2, l3 }
    }

    pub fn coupling(&self) -> f64 {
        self.l2 * self.l3
    }
}

/// Expression text of each coefficient, kept for reports and for
/// re-parsing user problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientText {
    pub b: Vec<String>,
    pub h: Vec<String>,
    pub sigma: Vec<String>,
    pub f: String,
    pub g: String,
    pub phi: String,
}

/// The six problem functions with their declared regularity.
#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    pub b: VectorField,
    pub h: VectorField,
    pub sigma: VectorField,
    pub f: Driver,
    pub g: Driver,
    pub phi: Terminal,
    pub lipschitz: Lipschitz,
    pub sigma_depends_on_y: bool,
    pub text: Option<CoefficientText>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("sigma_depends_on_y", &self.sigma_depends_on_y)
            .field("text", &self.text)
            .finish()
    }
}

/// Which coefficient a DSL error belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientExprError {
    pub field: String,
    pub error: ExprError,
}

impl CoefficientSet {
    /// One-dimensional problem from plain closures.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        b: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        h: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lipschitz: Lipschitz,
        sigma_depends_on_y: bool,
    ) -> Self {
        CoefficientSet {
            dim: 1,
            b: Arc::new(move |t, x, y, out| out[0] = b(t, x[0], y)),
            h: Arc::new(move |t, x, y, out| out[0] = h(t, x[0], y)),
            sigma: Arc::new(move |t, x, y, out| out[0] = sigma(t, x[0], y)),
            f: Arc::new(move |t, x, y, z| f(t, x[0], y, z)),
            g: Arc::new(move |t, x, y, z| g(t, x[0], y, z)),
            phi: Arc::new(move |x| phi(x[0])),
            lipschitz,
            sigma_depends_on_y,
            text: None,
        }
    }

    /// General problem from vector-valued closures.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        b: VectorField,
        h: VectorField,
        sigma: VectorField,
        f: Driver,
        g: Driver,
        phi: Terminal,
        lipschitz: Lipschitz,
        sigma_depends_on_y: bool,
    ) -> Self {
        CoefficientSet {
            dim,
            b,
            h,
            sigma,
            f,
            g,
            phi,
            lipschitz,
            sigma_depends_on_y,
            text: None,
        }
    }

    /// Compile expression text. Variables: `t`, `y`, `z`, `x1..xn`
    /// (plus `x` for `x1` when n = 1).
    pub fn from_text(
        text: CoefficientText,
        lipschitz: Lipschitz,
        sigma_depends_on_y: bool,
    ) -> Result<Self, CoefficientExprError> {
        let dim = text.b.len();
        let names = variable_names(dim);
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let aliases: Vec<(&str, usize)> = if dim == 1 { vec![("x", 3)] } else { vec![] };
        let parse = |field: String, src: &str| {
            Expr::parse_with_aliases(src, &name_refs, &aliases)
                .map_err(|error| CoefficientExprError { field, error })
        };
        let parse_vec = |name: &str, srcs: &[String]| -> Result<Vec<Expr>, CoefficientExprError> {
            if srcs.len() != dim {
                return Err(CoefficientExprError {
                    field: name.to_string(),
                    error: ExprError {
                        offset: 0,
                        message: format!("expected {dim} components, got {}", srcs.len()),
                    },
                });
            }
            srcs.iter()
                .enumerate()
                .map(|(j, s)| parse(format!("{name}[{j}]"), s))
                .collect()
        };
        let b = parse_vec("b", &text.b)?;
        let h = parse_vec("h", &text.h)?;
        let sigma = parse_vec("sigma", &text.sigma)?;
        let f = parse("f".into(), &text.f)?;
        let g = parse("g".into(), &text.g)?;
        let phi = parse("phi".into(), &text.phi)?;

        let field = |exprs: Vec<Expr>| -> VectorField {
            Arc::new(move |t, x, y, out| {
                let vars = pack(t, x, y, 0.0);
                for (o, e) in out.iter_mut().zip(&exprs) {
                    *o = e.eval(&vars);
                }
            })
        };
        let driver = |e: Expr| -> Driver { Arc::new(move |t, x, y, z| e.eval(&pack(t, x, y, z))) };
        Ok(CoefficientSet {
            dim,
            b: field(b),
            h: field(h),
            sigma: field(sigma),
            f: driver(f),
            g: driver(g),
            phi: Arc::new(move |x| phi.eval(&pack(0.0, x, 0.0, 0.0))),
            lipschitz,
            sigma_depends_on_y,
            text: Some(text),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_phi(&self, phi: Terminal) -> Self {
        let mut out = self.clone();
        out.phi = phi;
        if let Some(text) = out.text.as_mut() {
            text.phi = "<closure>".into();
        }
        out
    }

    pub fn with_lipschitz(&self, lipschitz: Lipschitz) -> Self {
        let mut out = self.clone();
        out.lipschitz = lipschitz;
        out
    }

    /// Forward coefficients `(b, h, sigma)` at one point.
    #[inline]
    pub fn forward(&self, t: f64, x: &[f64], y: f64, b: &mut [f64], h: &mut [f64], s: &mut [f64]) {
        (self.b)(t, x, y, b);
        (self.h)(t, x, y, h);
        (self.sigma)(t, x, y, s);
    }
}

pub(crate) fn variable_names(dim: usize) -> Vec<String> {
    let mut v = vec!["t".to_string(), "y".to_string(), "z".to_string()];
    v.extend((1..=dim).map(|i| format!("x{i}")));
    v
}

// Slot layout must match `variable_names`.
fn pack(t: f64, x: &[f64], y: f64, z: f64) -> SmallVec<[f64; 8]> {
    let mut v = SmallVec::with_capacity(3 + x.len());
    v.extend_from_slice(&[t, y, z]);
    v.extend_from_slice(x);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text() -> CoefficientText {
        CoefficientText {
            b: vec!["-0.5*x + 0.1*y".into()],
            h: vec!["0.2".into()],
            sigma: vec!["1 + 0*t".into()],
            f: "x1 - y + 2*z".into(),
            g: "t".into(),
            phi: "x^2".into(),
        }
    }

    #[test]
    fn text_coefficients_evaluate() {
        let c = CoefficientSet::from_text(text(), Lipschitz::new(2.0, 0.1, 1.0), false).unwrap();
        let mut out = [0.0];
        (c.b)(0.0, &[2.0], 1.0, &mut out);
        assert!((out[0] - (-0.9)).abs() < 1e-15);
        assert_eq!((c.f)(0.0, &[1.0], 2.0, 3.0), 5.0);
        assert_eq!((c.g)(0.25, &[1.0], 2.0, 3.0), 0.25);
        assert_eq!((c.phi)(&[3.0]), 9.0);
    }

    #[test]
    fn wrong_component_count_is_reported() {
        let mut t = text();
        t.h = vec!["0".into(), "1".into()];
        let err = CoefficientSet::from_text(t, Lipschitz::new(1.0, 1.0, 1.0), false).unwrap_err();
        assert_eq!(err.field, "h");
    }

    #[test]
    fn bad_expression_names_the_field() {
        let mut t = text();
        t.g = "t +".into();
        let err = CoefficientSet::from_text(t, Lipschitz::new(1.0, 1.0, 1.0), false).unwrap_err();
        assert_eq!(err.field, "g");
        assert_eq!(err.error.offset, 3);
    }

    #[test]
    fn two_dimensional_names() {
        let t = CoefficientText {
            b: vec!["x2".into(), "-x1".into()],
            h: vec!["0".into(), "0".into()],
            sigma: vec!["1".into(), "0".into()],
            f: "0".into(),
            g: "0".into(),
            phi: "x1 + x2".into(),
        };
        let c = CoefficientSet::from_text(t, Lipschitz::new(1.0, 0.0, 1.0), false).unwrap();
        let mut out = [0.0; 2];
        (c.b)(0.0, &[1.0, 2.0], 0.0, &mut out);
        assert_eq!(out, [2.0, -1.0]);
        assert!(CoefficientSet::from_text(
            CoefficientText {
                phi: "x".into(),
                ..c.text.clone().unwrap()
            },
            Lipschitz::new(1.0, 0.0, 1.0),
            false
        )
        .is_err());
    }
}
