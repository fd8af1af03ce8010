//! TOML problem files.
//!
//! ```toml
//! [setting]
//! sigma_low = 0.4
//! sigma_high = 0.6
//! p = 2.0
//! beta = 3.0
//! horizon = 0.5
//! x0 = [0.0]
//! classical_reduction = false   # optional
//!
//! [coefficients]
//! b = ["0.05*sin(x) + 0.005*tanh(y)"]
//! h = ["0.02*cos(x)"]
//! sigma = ["1 + 0.03*sin(x)"]
//! f = "0.3*sin(x) - 0.05*tanh(y)"
//! g = "0"
//! phi = "sqrt(1 + x^2)"
//! L1 = 0.1
//! L2 = 0.005
//! L3 = 1.0
//! sigma_depends_on_y = false
//!
//! [grid]            # optional
//! n_steps = 100
//! n_space = 4000
//! quadrature = "two-point"
//!
//! [pair]            # optional, second problem for comparisons
//! phi = "sqrt(1 + x^2) + 0.1"
//! L3 = 1.0
//! x0 = [1.0]
//!
//! [bdg]             # optional
//! formula = "(10*p)^(p/2)"
//! ```
//!
//! A file may instead start with `catalog = "<name>"` and carry only the
//! `[grid]` and `[bdg]` tables.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::constants::BdgFormula;
use crate::error::{Error, Result};
use crate::expr::{line_col, Expr};
use crate::model::coefficients::variable_names;
use crate::model::{
    catalog_entry, catalog_names, AnalyticReference, Axis, CoefficientSet, CoefficientText, DiscretizationGrid,
    GSetting, Lipschitz, PairSpec, Quadrature,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    catalog: Option<Spanned<String>>,
    setting: Option<RawSetting>,
    coefficients: Option<RawCoefficients>,
    grid: Option<RawGrid>,
    pair: Option<RawPair>,
    bdg: Option<RawBdg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSetting {
    sigma_low: f64,
    sigma_high: f64,
    p: f64,
    beta: f64,
    horizon: f64,
    x0: Vec<f64>,
    #[serde(default)]
    classical_reduction: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    b: Vec<Spanned<String>>,
    h: Vec<Spanned<String>>,
    sigma: Vec<Spanned<String>>,
    f: Spanned<String>,
    g: Spanned<String>,
    phi: Spanned<String>,
    #[serde(rename = "L1")]
    l1: f64,
    #[serde(rename = "L2")]
    l2: f64,
    #[serde(rename = "L3")]
    l3: f64,
    #[serde(default)]
    sigma_depends_on_y: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    n_steps: usize,
    n_space: Option<usize>,
    space_min: Option<Vec<f64>>,
    space_max: Option<Vec<f64>>,
    quadrature: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    phi: Option<Spanned<String>>,
    #[serde(rename = "L3")]
    l3: Option<f64>,
    x0: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBdg {
    formula: Spanned<String>,
}

/// Grid section of a problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub n_steps: usize,
    pub n_space: Option<usize>,
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub quadrature: Quadrature,
}

impl GridSpec {
    pub fn with_steps(n_steps: usize) -> Self {
        GridSpec {
            n_steps,
            n_space: None,
            bounds: None,
            quadrature: Quadrature::TwoPoint,
        }
    }

    /// Explicit bounds if given, else a box sized for the coefficients.
    pub fn build(&self, setting: &GSetting, coeffs: &CoefficientSet) -> Result<DiscretizationGrid> {
        let grid = match &self.bounds {
            Some((lo, hi)) => {
                let n = self.n_space.unwrap_or_else(|| crate::model::default_nodes(setting.dim()));
                let axes = lo.iter().zip(hi).map(|(&a, &b)| Axis::new(a, b, n)).collect();
                DiscretizationGrid::new(setting.horizon, self.n_steps, axes, self.quadrature)?
            }
            None => problem_grid(setting, coeffs, self.n_steps, self.n_space, self.quadrature)?,
        };
        grid.validate(setting)?;
        Ok(grid)
    }
}

/// Lattice sized from sampled coefficient magnitudes on the default box:
/// volatility scale `max |sigma|` and drift `max |b| + sh^2 max |h|`,
/// both taken at `|y| <= 1`.
pub fn problem_grid(
    setting: &GSetting,
    coeffs: &CoefficientSet,
    n_steps: usize,
    n_space: Option<usize>,
    quadrature: Quadrature,
) -> Result<DiscretizationGrid> {
    let n = setting.dim();
    let half = 6.0 * setting.sigma_high * setting.horizon.sqrt();
    let mut vol = 0.0f64;
    let mut drift = 0.0f64;
    let (mut b, mut h, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut x = vec![0.0; n];
    for k in 0..=64 {
        let u = -1.0 + 2.0 * k as f64 / 64.0;
        for (xi, x0) in x.iter_mut().zip(&setting.x0) {
            *xi = x0 + u * half;
        }
        for &y in &[-1.0, 0.0, 1.0] {
            for &t in &[0.0, setting.horizon] {
                coeffs.forward(t, &x, y, &mut b, &mut h, &mut s);
                for j in 0..n {
                    vol = vol.max(s[j].abs());
                    drift = drift.max(b[j].abs() + setting.gamma_high() * h[j].abs());
                }
            }
        }
    }
    if !(vol.is_finite() && drift.is_finite()) {
        return Err(Error::non_finite("forward coefficients", "grid sizing"));
    }
    let nodes = n_space.unwrap_or_else(|| crate::model::default_nodes(n));
    DiscretizationGrid::scaled(setting, n_steps, vol, drift, nodes, quadrature)
}

/// A loaded problem.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub name: String,
    pub setting: GSetting,
    pub coefficients: CoefficientSet,
    pub grid: Option<GridSpec>,
    pub pair: Option<PairSpec>,
    pub bdg: BdgFormula,
    pub analytic_reference: Option<AnalyticReference>,
}

impl ProblemFile {
    pub fn from_catalog(name: &str) -> Result<Self> {
        let e = catalog_entry(name).ok_or_else(|| Error::Config {
            key: "catalog".into(),
            message: format!("unknown entry `{name}`; known: {}", catalog_names().join(", ")),
        })?;
        Ok(ProblemFile {
            name: e.name.to_string(),
            setting: e.setting,
            coefficients: e.coefficients,
            grid: None,
            pair: e.pair,
            bdg: BdgFormula::Default,
            analytic_reference: e.analytic_reference,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("problem");
        Self::parse(&text, stem)
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let raw: RawFile = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let grid = raw.grid.map(|g| grid_spec(g, text)).transpose()?;
        let bdg = match raw.bdg {
            Some(b) => BdgFormula::parse(b.formula.get_ref()).map_err(|e| expr_error(text, &b.formula, e))?,
            None => BdgFormula::Default,
        };
        if let Some(cat) = raw.catalog {
            if raw.setting.is_some() || raw.coefficients.is_some() || raw.pair.is_some() {
                return Err(Error::Config {
                    key: "catalog".into(),
                    message: "a catalog problem takes only [grid] and [bdg] tables".into(),
                });
            }
            let mut p = Self::from_catalog(cat.get_ref())?;
            p.grid = grid;
            p.bdg = bdg;
            return Ok(p);
        }
        let s = raw.setting.ok_or_else(|| missing("setting"))?;
        let c = raw.coefficients.ok_or_else(|| missing("coefficients"))?;
        let setting = GSetting {
            sigma_low: s.sigma_low,
            sigma_high: s.sigma_high,
            p: s.p,
            beta: s.beta,
            horizon: s.horizon,
            x0: s.x0,
            classical: s.classical_reduction,
        };
        setting.validate()?;
        let n = setting.dim();

        let mut spans: HashMap<String, &Spanned<String>> = HashMap::new();
        for (name, list) in [("b", &c.b), ("h", &c.h), ("sigma", &c.sigma)] {
            if list.len() != n {
                return Err(Error::Config {
                    key: format!("coefficients.{name}"),
                    message: format!("expected {n} components, got {}", list.len()),
                });
            }
            for (j, e) in list.iter().enumerate() {
                spans.insert(format!("{name}[{j}]"), e);
            }
        }
        spans.insert("f".into(), &c.f);
        spans.insert("g".into(), &c.g);
        spans.insert("phi".into(), &c.phi);
        let text_of = |v: &[Spanned<String>]| v.iter().map(|s| s.get_ref().clone()).collect::<Vec<_>>();
        let ctext = CoefficientText {
            b: text_of(&c.b),
            h: text_of(&c.h),
            sigma: text_of(&c.sigma),
            f: c.f.get_ref().clone(),
            g: c.g.get_ref().clone(),
            phi: c.phi.get_ref().clone(),
        };
        let lipschitz = Lipschitz::new(c.l1, c.l2, c.l3);
        let coefficients = CoefficientSet::from_text(ctext, lipschitz, c.sigma_depends_on_y)
            .map_err(|e| expr_error(text, spans[&e.field], e.error))?;
        if !c.sigma_depends_on_y {
            let names = variable_names(n);
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let aliases: Vec<(&str, usize)> = if n == 1 { vec![("x", 3)] } else { vec![] };
            for (j, e) in c.sigma.iter().enumerate() {
                let parsed = Expr::parse_with_aliases(e.get_ref(), &refs, &aliases).expect("parsed above");
                if parsed.uses("y") {
                    let (line, column) = line_col(text, e.span().start);
                    return Err(Error::Parse {
                        line,
                        column,
                        message: format!("sigma[{j}] uses y but sigma_depends_on_y = false"),
                    });
                }
            }
        }

        let pair = match raw.pair {
            None => None,
            Some(RawPair { phi: Some(phi), l3, x0: None }) => {
                let mut t = coefficients.text.clone().expect("text coefficients");
                t.phi = phi.get_ref().clone();
                let l3 = l3.unwrap_or(c.l3);
                let other = CoefficientSet::from_text(t.clone(), lipschitz, c.sigma_depends_on_y)
                    .map_err(|e| expr_error(text, &phi, e.error))?;
                Some(PairSpec::Terminal {
                    phi1: other.phi,
                    l3,
                    description: format!("phi1 = {}", t.phi),
                })
            }
            Some(RawPair { phi: None, l3: None, x0: Some(x1) }) => {
                if n != 1 || x1.len() != 1 {
                    return Err(Error::Config {
                        key: "pair.x0".into(),
                        message: "initial-state pairs are one-dimensional".into(),
                    });
                }
                Some(PairSpec::Initial {
                    x1: x1[0],
                    x2: setting.x0[0],
                })
            }
            Some(_) => {
                return Err(Error::Config {
                    key: "pair".into(),
                    message: "give either `phi` (and optionally `L3`) or `x0`".into(),
                })
            }
        };
        Ok(ProblemFile {
            name: name.to_string(),
            setting,
            coefficients,
            grid,
            pair,
            bdg,
            analytic_reference: None,
        })
    }

    /// Grid from the file, or `n_steps` on a coefficient-sized box.
    pub fn grid_or(&self, n_steps: usize) -> Result<DiscretizationGrid> {
        self.grid
            .clone()
            .unwrap_or_else(|| GridSpec::with_steps(n_steps))
            .build(&self.setting, &self.coefficients)
    }

    /// Coefficients of the first problem of a terminal pair.
    pub fn pair_coefficients(&self) -> Option<CoefficientSet> {
        match &self.pair {
            Some(PairSpec::Terminal { phi1, l3, .. }) => {
                let mut c = self.coefficients.with_phi(phi1.clone());
                c.lipschitz.l3 = *l3;
                Some(c)
            }
            _ => None,
        }
    }
}

fn missing(table: &str) -> Error {
    Error::Config {
        key: table.into(),
        message: "table is required unless `catalog` is given".into(),
    }
}

fn grid_spec(g: RawGrid, text: &str) -> Result<GridSpec> {
    let quadrature = match g.quadrature {
        None => Quadrature::TwoPoint,
        Some(q) => Quadrature::parse(q.get_ref()).ok_or_else(|| {
            let (line, column) = line_col(text, q.span().start);
            Error::Parse {
                line,
                column,
                message: format!(
                    "unknown quadrature `{}`; use two-point, gauss-hermite-3 or gauss-hermite-5",
                    q.get_ref()
                ),
            }
        })?,
    };
    let bounds = match (g.space_min, g.space_max) {
        (None, None) => None,
        (Some(lo), Some(hi)) if lo.len() == hi.len() => Some((lo, hi)),
        _ => {
            return Err(Error::Config {
                key: "grid.space_min".into(),
                message: "space_min and space_max must be given together with equal lengths".into(),
            })
        }
    };
    Ok(GridSpec {
        n_steps: g.n_steps,
        n_space: g.n_space,
        bounds,
        quadrature,
    })
}

/// Map an error inside an expression string to the file position. The
/// span of a basic string starts at its opening quote.
fn expr_error(text: &str, s: &Spanned<String>, e: crate::expr::ExprError) -> Error {
    let (line, column) = line_col(text, s.span().start + 1 + e.offset);
    Error::Parse {
        line,
        column,
        message: e.message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[setting]
sigma_low = 0.4
sigma_high = 0.6
p = 2.0
beta = 3.0
horizon = 0.5
x0 = [0.0]

[coefficients]
b = ["0.05*sin(x) + 0.005*tanh(y)"]
h = ["0.02*cos(x)"]
sigma = ["1 + 0.03*sin(x)"]
f = "0.3*sin(x) - 0.05*tanh(y) + 0.05*tanh(z)"
g = "0"
phi = "sqrt(1 + x^2)"
L1 = 0.1
L2 = 0.005
L3 = 1.0

[grid]
n_steps = 40
n_space = 801
"#;

    #[test]
    fn sample_file_loads() {
        let p = ProblemFile::parse(SAMPLE, "sample").unwrap();
        assert_eq!(p.setting.dim(), 1);
        assert_eq!((p.coefficients.phi)(&[0.0]), 1.0);
        let g = p.grid_or(10).unwrap();
        assert_eq!(g.n_steps, 40);
    }

    #[test]
    fn bad_expression_reports_its_position() {
        let bad = SAMPLE.replace("g = \"0\"", "g = \"1 + * 2\"");
        match ProblemFile::parse(&bad, "bad").unwrap_err() {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 15);
                assert_eq!(column, 10);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = SAMPLE.replace("n_space = 801", "n_space = 801\nnodes = 3");
        assert!(matches!(ProblemFile::parse(&bad, "bad"), Err(Error::Parse { line: 24, .. })), "{:?}", ProblemFile::parse(&bad, "bad").unwrap_err());
    }

    #[test]
    fn hidden_y_in_sigma_is_rejected() {
        let bad = SAMPLE.replace("1 + 0.03*sin(x)", "1 + 0.03*sin(y)");
        assert!(matches!(ProblemFile::parse(&bad, "bad"), Err(Error::Parse { .. })));
    }

    #[test]
    fn catalog_shortcut() {
        let p = ProblemFile::parse("catalog = \"decoupled\"\n[grid]\nn_steps = 7\n", "x").unwrap();
        assert_eq!(p.name, "decoupled");
        assert_eq!(p.grid.unwrap().n_steps, 7);
        assert!(ProblemFile::parse("catalog = \"nope\"\n", "x").is_err());
    }
}
