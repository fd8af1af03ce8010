//! Browser bindings: certificate, G-expectation curve and Picard trace.
//!
//! Every entry point takes plain strings and numbers and returns JSON.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use gfbsde::constants::{certify, BdgFormula};
use gfbsde::expr::Expr;
use gfbsde::gprocess::{gexpect_lattice_function, ControlFamily};
use gfbsde::model::{catalog, DiscretizationGrid, GSetting, GridSpec, ProblemFile, Quadrature};
use gfbsde::picard::{contraction_report, picard_solve, PicardConfig};
use gfbsde::sde::McConfig;

/// `catalog:<name>` or the text of a problem file.
fn problem(src: &str) -> Result<ProblemFile, String> {
    match src.trim().strip_prefix("catalog:") {
        Some(name) => ProblemFile::from_catalog(name.trim()),
        None => ProblemFile::parse(src, "problem"),
    }
    .map_err(|e| e.to_string())
}

fn formula(src: &str, p: &ProblemFile) -> Result<BdgFormula, String> {
    if src.trim().is_empty() {
        Ok(p.bdg.clone())
    } else {
        BdgFormula::parse(src).map_err(|e| format!("C(p) formula: {e}"))
    }
}

pub fn catalog_json() -> String {
    let entries: Vec<Value> = catalog()
        .iter()
        .map(|e| json!({ "name": e.name, "description": e.description }))
        .collect();
    Value::Array(entries).to_string()
}

pub fn certify_json(problem_src: &str, cp_formula: &str) -> Result<String, String> {
    let p = problem(problem_src)?;
    let f = formula(cp_formula, &p)?;
    let report = certify(&p.setting, &p.coefficients, &f).map_err(|e| e.to_string())?;
    let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    v["problem"] = json!(p.name);
    Ok(v.to_string())
}

/// `x -> E^[payoff(x + B_T)]` on the lattice, restricted to
/// `|x| <= 3 sigma_high sqrt(T)` and thinned to about `points` values.
pub fn gexp_curve_json(
    payoff: &str,
    sigma_low: f64,
    sigma_high: f64,
    horizon: f64,
    n_steps: usize,
    points: usize,
) -> Result<String, String> {
    let expr = Expr::parse(payoff, &["x"]).map_err(|e| format!("payoff: {e}"))?;
    let f = |x: f64| expr.eval(&[x]);
    let setting = GSetting::new(sigma_low, sigma_high, 2.0, 3.0, horizon, vec![0.0]);
    setting.validate().map_err(|e| e.to_string())?;
    let grid = DiscretizationGrid::scaled(&setting, n_steps.max(1), 1.0, 0.0, 2001, Quadrature::TwoPoint)
        .map_err(|e| e.to_string())?;
    let u = gexpect_lattice_function(&f, &setting, &grid).map_err(|e| e.to_string())?;
    let axis = &grid.axes[0];
    let half = 3.0 * sigma_high * horizon.sqrt();
    let inside: Vec<usize> = (0..axis.n).filter(|&k| axis.node(k).abs() <= half).collect();
    let stride = (inside.len() / points.max(2)).max(1);
    let picked: Vec<usize> = inside.iter().copied().step_by(stride).collect();
    Ok(json!({
        "x": picked.iter().map(|&k| axis.node(k)).collect::<Vec<_>>(),
        "value": picked.iter().map(|&k| u.values[0][k]).collect::<Vec<_>>(),
        "payoff": picked.iter().map(|&k| f(axis.node(k))).collect::<Vec<_>>(),
        "at_zero": u.eval(0, &[0.0]),
        "n_steps": grid.n_steps,
    })
    .to_string())
}

pub fn picard_trace_json(problem_src: &str, n_steps: usize, n_paths: usize, seed: u64) -> Result<String, String> {
    let p = problem(problem_src)?;
    let spec = GridSpec {
        n_steps: n_steps.max(1),
        n_space: Some(401),
        ..p.grid.clone().unwrap_or_else(|| GridSpec::with_steps(n_steps))
    };
    let grid = spec.build(&p.setting, &p.coefficients).map_err(|e| e.to_string())?;
    let family = ControlFamily::standard(&p.setting, grid.n_steps);
    let cfg = PicardConfig {
        tol: 1e-8,
        max_iter: 12,
        mc: McConfig::new(n_paths.max(10), seed),
        bdg: p.bdg.clone(),
        ..PicardConfig::default()
    };
    let sol = picard_solve(&p.setting, &p.coefficients, &grid, &family, &cfg).map_err(|e| e.to_string())?;
    let report = contraction_report(&sol.trace, &sol.certificate.constants);
    Ok(json!({
        "problem": p.name,
        "verdict": sol.certified.as_str(),
        "y0": sol.y0,
        "converged": sol.trace.converged,
        "trace": sol.trace,
        "contraction": report,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn catalog_list() -> String {
    catalog_json()
}

#[wasm_bindgen]
pub fn certify_problem(problem_src: &str, cp_formula: &str) -> Result<String, JsValue> {
    certify_json(problem_src, cp_formula).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn gexp_curve(
    payoff: &str,
    sigma_low: f64,
    sigma_high: f64,
    horizon: f64,
    n_steps: usize,
    points: usize,
) -> Result<String, JsValue> {
    gexp_curve_json(payoff, sigma_low, sigma_high, horizon, n_steps, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn picard_trace(problem_src: &str, n_steps: usize, n_paths: usize, seed: u64) -> Result<String, JsValue> {
    picard_trace_json(problem_src, n_steps, n_paths, seed).map_err(|e| JsValue::from_str(&e))
}
