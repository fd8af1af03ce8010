//! One function per subcommand. Each returns the documents to write and
//! whether the run passed.

use serde::Serialize;

use gfbsde::bsde::{dp_backward, k_diagnostics, BackwardOptions, BackwardSolution, KDiagnostics};
use gfbsde::constants::{certify, BdgFormula, CertificateReport};
use gfbsde::duality::{
    compare_thm41, compare_thm42, comparison_battery, BatteryReport, ComparisonConfig, ComparisonOutcome, Status,
    Theorem,
};
use gfbsde::expr::{Expr, ExprError};
use gfbsde::gprocess::{gexpect_lattice, gexpect_mc, sample_paths, ControlFamily, IncrementModel};
use gfbsde::model::{default_nodes, DiscretizationGrid, GridSpec, PairSpec, Quadrature};
use gfbsde::picard::{contraction_report, picard_solve, picard_solve_p_lt2, Backend, PicardConfig};
use gfbsde::sde::{euler_forward, summarize, McConfig, YInput};
use gfbsde::{Error, Result};

use crate::config::{load_problem, Command, Format, LoadedProblem, RunConfig};
use crate::output::{json_doc, num, opt, Artifact, CsvDoc, Header};

const DEFAULT_STEPS: usize = 100;
const GEXP_STEPS: usize = 200;
const DEFAULT_PATHS: usize = 2000;
const GEXP_PATHS: usize = 20_000;

pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// `Some(reason)` when the verdict is FAIL.
    pub failure: Option<String>,
}

/// Everything a command needs besides its own options.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub seed: u64,
    pub hash: String,
}

pub fn problem_of(cfg: &RunConfig) -> Result<Option<LoadedProblem>> {
    match cfg.command {
        Command::Compare => Ok(None),
        _ => load_problem(cfg.options.problem.as_deref()).map(Some),
    }
}

pub fn run(ctx: &Context, problem: Option<&LoadedProblem>) -> Result<Outcome> {
    let need = || problem.ok_or_else(|| Error::Config {
        key: "problem".into(),
        message: "required for this command".into(),
    });
    match ctx.cfg.command {
        Command::Certify => cmd_certify(ctx, need()?),
        Command::Gexp => cmd_gexp(ctx, need()?),
        Command::SolveSde => cmd_solve_sde(ctx, need()?),
        Command::SolveBsde => cmd_solve_bsde(ctx, need()?),
        Command::SolveFbsde => cmd_solve_fbsde(ctx, need()?),
        Command::Compare => cmd_compare(ctx),
        Command::Duality => cmd_duality(ctx, need()?),
    }
}

fn flag_expr_error(key: &str, e: ExprError) -> Error {
    Error::Parse {
        line: 1,
        column: e.offset + 1,
        message: format!("`{key}`: {}", e.message),
    }
}

/// Formula from the flag, else from the problem file, else the default.
pub fn cp_formula(cfg: &RunConfig, problem: Option<&LoadedProblem>) -> Result<BdgFormula> {
    match &cfg.options.cp_formula {
        Some(s) => BdgFormula::parse(s).map_err(|e| flag_expr_error("cp-formula", e)),
        None => Ok(problem.map(|p| p.problem.bdg.clone()).unwrap_or(BdgFormula::Default)),
    }
}

fn header(ctx: &Context, schema: &str, problem: Option<&LoadedProblem>) -> Result<Header> {
    let f = cp_formula(ctx.cfg, problem)?;
    Ok(Header::new(schema, &ctx.hash, ctx.seed, f.text()))
}

/// Problem grid with the step and node overrides applied.
fn grid_for(ctx: &Context, lp: &LoadedProblem, default_steps: usize) -> Result<DiscretizationGrid> {
    let p = &lp.problem;
    let mut spec = p.grid.clone().unwrap_or_else(|| GridSpec::with_steps(default_steps));
    if let Some(n) = ctx.cfg.options.n_steps {
        spec.n_steps = n;
    }
    if let Some(n) = ctx.cfg.options.n_space {
        spec.n_space = Some(n);
    }
    if spec.n_steps == 0 {
        return Err(Error::Config {
            key: "n-steps".into(),
            message: "must be positive".into(),
        });
    }
    spec.build(&p.setting, &p.coefficients)
}

fn paths(ctx: &Context, default: usize) -> Result<usize> {
    match ctx.cfg.options.paths {
        Some(0) => Err(Error::Config {
            key: "paths".into(),
            message: "must be positive".into(),
        }),
        Some(n) => Ok(n),
        None => Ok(default),
    }
}

fn single(ctx: &Context, bytes: Vec<u8>) -> Artifact {
    Artifact {
        path: ctx.cfg.options.output.clone(),
        bytes,
    }
}

fn cmd_certify(ctx: &Context, lp: &LoadedProblem) -> Result<Outcome> {
    let formula = cp_formula(ctx.cfg, Some(lp))?;
    let p = &lp.problem;
    let report = certify(&p.setting, &p.coefficients, &formula)?;
    let h = header(ctx, "certify", Some(lp))?;
    let bytes = match ctx.cfg.format() {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                problem: &'a str,
                #[serde(flatten)]
                report: &'a CertificateReport,
            }
            json_doc(&h, &Out { problem: &p.name, report: &report })?
        }
        Format::Csv => certify_csv(h, &p.name, &report)?,
    };
    Ok(Outcome {
        artifacts: vec![single(ctx, bytes)],
        failure: (!report.verdict.certified()).then(|| report.reasons.join("; ")),
    })
}

fn certify_csv(h: Header, name: &str, r: &CertificateReport) -> Result<Vec<u8>> {
    let c = &r.constants;
    let mut d = CsvDoc::new(h, &["key", "value"]);
    let mut kv = |k: &str, v: String| d.row(vec![k.to_string(), v]);
    kv("problem", name.to_string());
    kv("verdict", r.verdict.as_str().to_string());
    kv("p", num(c.inputs.p));
    kv("beta", num(r.beta));
    kv("sigma_depends_on_y", r.sigma_depends_on_y.to_string());
    kv("bdg_c", num(c.bdg_c));
    kv("lambda2", num(c.lambda2));
    kv("lambda3", opt(c.lambda3));
    kv("lambda4", num(c.lambda4));
    kv("lambda5", num(c.lambda5));
    kv("c1_log10", num(c.c1.log10()));
    kv("c2_log10", num(c.c2.log10()));
    kv("lambda_p", num(c.lambda_p.value));
    kv("lambda_p_log10", num(c.lambda_p.log10()));
    kv("lambda_tilde_p", num(c.lambda_tilde_p.value));
    kv("lambda_tilde_p_log10", num(c.lambda_tilde_p.log10()));
    kv("coupling_threshold", num(c.delta_threshold));
    kv("coupling_threshold_tilde", num(c.delta_threshold_tilde));
    kv("p_prime", opt(c.p_prime));
    kv("lambda_p_prime", opt(c.lambda_p_prime.map(|b| b.value)));
    for (i, reason) in r.reasons.iter().enumerate() {
        kv(&format!("reason{}", i + 1), reason.clone());
    }
    d.render()
}

fn cmd_gexp(ctx: &Context, lp: &LoadedProblem) -> Result<Outcome> {
    let src = ctx.cfg.options.payoff.as_deref().unwrap_or("x^2");
    let payoff = Expr::parse(src, &["x"]).map_err(|e| flag_expr_error("payoff", e))?;
    let f = |x: f64| payoff.eval(&[x]);
    let setting = lp.problem.setting.with_x0(vec![0.0]);
    let n_steps = ctx.cfg.options.n_steps.unwrap_or(GEXP_STEPS);
    let nodes = ctx.cfg.options.n_space.unwrap_or(default_nodes(1));
    let grid = DiscretizationGrid::scaled(&setting, n_steps, 1.0, 0.0, nodes, Quadrature::TwoPoint)?;
    let lattice = gexpect_lattice(&f, &setting, &grid)?;
    let family = ControlFamily::standard(&setting, n_steps);
    let n_paths = paths(ctx, GEXP_PATHS)?;
    let mc = gexpect_mc(&f, &setting, &grid, &family, n_paths, ctx.seed, IncrementModel::Gaussian)?;
    let h = header(ctx, "gexp", Some(lp))?;
    let bytes = match ctx.cfg.format() {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                payoff: &'a str,
                lattice: &'a gfbsde::gprocess::LatticeExpectation,
                mc: &'a gfbsde::gprocess::McExpectation,
                n_paths: usize,
            }
            json_doc(
                &h,
                &Out {
                    payoff: src,
                    lattice: &lattice,
                    mc: &mc,
                    n_paths,
                },
            )?
        }
        Format::Csv => {
            let mut d = CsvDoc::new(h, &["method", "control", "value", "std_err", "n_steps", "n_nodes", "n_paths"]);
            d.note("payoff", src);
            let steps = n_steps.to_string();
            d.row(vec![
                "lattice".into(),
                String::new(),
                num(lattice.value),
                num(0.0),
                steps.clone(),
                lattice.n_nodes.to_string(),
                String::new(),
            ]);
            d.row(vec![
                "mc".into(),
                "sup".into(),
                num(mc.value),
                num(mc.std_err),
                steps.clone(),
                String::new(),
                n_paths.to_string(),
            ]);
            for (label, e) in mc.labels.iter().zip(&mc.per_control) {
                d.row(vec![
                    "mc".into(),
                    label.clone(),
                    num(e.mean),
                    num(e.std_err),
                    steps.clone(),
                    String::new(),
                    n_paths.to_string(),
                ]);
            }
            d.render()?
        }
    };
    Ok(Outcome {
        artifacts: vec![single(ctx, bytes)],
        failure: None,
    })
}

fn cmd_solve_sde(ctx: &Context, lp: &LoadedProblem) -> Result<Outcome> {
    let p = &lp.problem;
    let grid = grid_for(ctx, lp, DEFAULT_STEPS)?;
    let y = YInput::Constant(ctx.cfg.options.y.unwrap_or(0.0));
    let family = ControlFamily::standard(&p.setting, grid.n_steps);
    let n_paths = paths(ctx, DEFAULT_PATHS)?;
    let mut summaries = Vec::with_capacity(family.len());
    for c in &family.controls {
        let ens = sample_paths(&p.setting, &grid, c, n_paths, ctx.seed, IncrementModel::Gaussian)?;
        let sol = euler_forward(&p.coefficients, &grid, &p.setting.x0, &y, &ens)?;
        summaries.push(summarize(&sol, &grid));
    }
    let h = header(ctx, "solve-sde", Some(lp))?;
    let bytes = match ctx.cfg.format() {
        Format::Json => json_doc(&h, &summaries)?,
        Format::Csv => {
            let mut d = CsvDoc::new(h, &["control", "t", "coord", "mean", "q05", "q50", "q95"]);
            d.note("y", y.tag());
            d.note("n-paths", n_paths);
            for s in &summaries {
                for j in 0..s.mean.len() {
                    for (i, t) in s.times.iter().enumerate() {
                        d.row(vec![
                            s.control.clone(),
                            num(*t),
                            (j + 1).to_string(),
                            num(s.mean[j][i]),
                            num(s.q05[j][i]),
                            num(s.q50[j][i]),
                            num(s.q95[j][i]),
                        ]);
                    }
                }
            }
            d.render()?
        }
    };
    Ok(Outcome {
        artifacts: vec![single(ctx, bytes)],
        failure: None,
    })
}

fn slice_times(ctx: &Context, n_steps: usize) -> Result<Vec<usize>> {
    let every = match ctx.cfg.options.slice_every {
        Some(0) => {
            return Err(Error::Config {
                key: "slice-every".into(),
                message: "must be positive".into(),
            })
        }
        Some(k) => k,
        None => (n_steps / 8).max(1),
    };
    let mut t: Vec<usize> = (0..=n_steps).step_by(every).collect();
    if t.last() != Some(&n_steps) {
        t.push(n_steps);
    }
    Ok(t)
}

#[derive(Serialize)]
struct Slice {
    t: f64,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    z: Vec<f64>,
}

fn slices(sol: &BackwardSolution, grid: &DiscretizationGrid, times: &[usize]) -> Vec<Slice> {
    let dim = grid.dim();
    let mut pt = vec![0.0; dim];
    times
        .iter()
        .map(|&i| {
            let n = grid.n_nodes();
            let mut x = Vec::with_capacity(n);
            for k in 0..n {
                grid.node_point(k, &mut pt);
                x.push(pt.clone());
            }
            Slice {
                t: grid.time(i),
                x,
                y: sol.y_fn.values[i].clone(),
                z: sol.z_fn.values[i].clone(),
            }
        })
        .collect()
}

fn slice_columns(dim: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    if dim == 1 {
        cols.push("x".into());
    } else {
        cols.extend((1..=dim).map(|j| format!("x{j}")));
    }
    cols.push("y".into());
    cols.push("z".into());
    cols
}

fn slice_rows(d: &mut CsvDoc, sl: &[Slice]) {
    for s in sl {
        for k in 0..s.y.len() {
            let mut r = vec![num(s.t)];
            r.extend(s.x[k].iter().map(|v| num(*v)));
            r.push(num(s.y[k]));
            r.push(num(s.z[k]));
            d.row(r);
        }
    }
}

fn k_notes(d: &mut CsvDoc, k: &KDiagnostics) {
    d.note("k-max-increment", num(k.max_increment));
    d.note("k-tol", num(k.tol_k));
    d.note("k-terminal", num(k.k_terminal.value));
    d.note("k-terminal-se", num(k.k_terminal.std_err));
    d.note("k-monotone", k.monotone_ok);
    d.note("k-martingale", k.martingale_ok);
}

fn cmd_solve_bsde(ctx: &Context, lp: &LoadedProblem) -> Result<Outcome> {
    let p = &lp.problem;
    let grid = grid_for(ctx, lp, DEFAULT_STEPS)?;
    let policy = YInput::Constant(ctx.cfg.options.y.unwrap_or(0.0));
    let sol = dp_backward(&p.setting, &p.coefficients, &grid, &policy, BackwardOptions::default())?;
    let family = ControlFamily::standard(&p.setting, grid.n_steps);
    let mc = McConfig::new(paths(ctx, DEFAULT_PATHS)?, ctx.seed);
    let k = k_diagnostics(&p.setting, &p.coefficients, &grid, &sol, &policy, &family, mc)?;
    let y0 = sol.y0(&p.setting.x0);
    let sl = slices(&sol, &grid, &slice_times(ctx, grid.n_steps)?);
    let h = header(ctx, "solve-bsde", Some(lp))?;
    let bytes = match ctx.cfg.format() {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                y0: f64,
                top_share: f64,
                k: &'a KDiagnostics,
                slices: &'a [Slice],
            }
            json_doc(
                &h,
                &Out {
                    y0,
                    top_share: sol.top_share,
                    k: &k,
                    slices: &sl,
                },
            )?
        }
        Format::Csv => {
            let cols = slice_columns(grid.dim());
            let mut d = CsvDoc::new(h, &cols.iter().map(String::as_str).collect::<Vec<_>>());
            d.note("y", policy.tag());
            d.note("y0", num(y0));
            d.note("top-share", num(sol.top_share));
            k_notes(&mut d, &k);
            slice_rows(&mut d, &sl);
            d.render()?
        }
    };
    let failure = match (k.monotone_ok, k.martingale_ok) {
        (true, true) => None,
        (false, _) => Some(format!(
            "K increment {:e} exceeds tolerance {:e}",
            k.max_increment, k.tol_k
        )),
        (true, false) => Some(format!(
            "E^[K_T] = {:e} is not zero within 5 SE ({:e})",
            k.k_terminal.value, k.k_terminal.std_err
        )),
    };
    Ok(Outcome {
        artifacts: vec![single(ctx, bytes)],
        failure,
    })
}

fn cmd_solve_fbsde(ctx: &Context, lp: &LoadedProblem) -> Result<Outcome> {
    let p = &lp.problem;
    let o = &ctx.cfg.options;
    let grid = grid_for(ctx, lp, DEFAULT_STEPS)?;
    let backend = match o.backend.as_deref() {
        None => Backend::Lattice,
        Some(s) => Backend::parse(s).ok_or_else(|| Error::Config {
            key: "backend".into(),
            message: format!("unknown backend `{s}`; use lattice or paths"),
        })?,
    };
    let defaults = PicardConfig::default();
    let pc = PicardConfig {
        backend,
        tol: o.tol.unwrap_or(defaults.tol),
        max_iter: o.max_iter.unwrap_or(defaults.max_iter),
        exponent: o.p_prime,
        force: o.force,
        mc: McConfig::new(paths(ctx, DEFAULT_PATHS)?, ctx.seed),
        bdg: cp_formula(ctx.cfg, Some(lp))?,
        ..defaults
    };
    if pc.force {
        log::warn!("force is set: solving without requiring a certificate");
    }
    let family = ControlFamily::standard(&p.setting, grid.n_steps);
    let sol = if p.setting.p < 2.0 {
        picard_solve_p_lt2(&p.setting, &p.coefficients, &grid, &family, &pc)?
    } else {
        picard_solve(&p.setting, &p.coefficients, &grid, &family, &pc)?
    };
    if sol.forced {
        log::warn!("problem is {}; solved under force", sol.certified);
    }
    let report = contraction_report(&sol.trace, &sol.certificate.constants);
    let h = header(ctx, "solve-fbsde", Some(lp))?;
    let sl = match &sol.backward {
        Some(b) => slices(b, &grid, &slice_times(ctx, grid.n_steps)?),
        None => Vec::new(),
    };
    let mut artifacts = Vec::new();
    match ctx.cfg.format() {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                backend: &'static str,
                note: &'static str,
                verdict: &'static str,
                forced: bool,
                y0: f64,
                trace: &'a gfbsde::picard::ContractionTrace,
                contraction: &'a gfbsde::picard::ContractionReport,
                slices: &'a [Slice],
            }
            let bytes = json_doc(
                &h,
                &Out {
                    backend: backend.name(),
                    note: sol.note,
                    verdict: sol.certified.as_str(),
                    forced: sol.forced,
                    y0: sol.y0,
                    trace: &sol.trace,
                    contraction: &report,
                    slices: &sl,
                },
            )?;
            artifacts.push(single(ctx, bytes));
        }
        Format::Csv => {
            let notes = |d: &mut CsvDoc| {
                d.note("backend", backend.name());
                d.note("verdict", sol.certified.as_str());
                d.note("forced", sol.forced);
                d.note("y0", num(sol.y0));
                d.note("iterations", sol.trace.iterations());
                d.note("converged", sol.trace.converged);
                d.note("exponent", format!("{} ({})", num(sol.trace.exponent), sol.trace.exponent_source));
                d.note("lambda", num(report.lambda));
            };
            let main = match &sol.backward {
                Some(_) => {
                    let cols = slice_columns(grid.dim());
                    let mut d = CsvDoc::new(h.clone(), &cols.iter().map(String::as_str).collect::<Vec<_>>());
                    notes(&mut d);
                    slice_rows(&mut d, &sl);
                    d
                }
                None => {
                    let mut d = CsvDoc::new(
                        h.with_schema("solve-fbsde-paths"),
                        &["control", "t", "coord", "mean", "q05", "q50", "q95"],
                    );
                    notes(&mut d);
                    for x in &sol.x_solution {
                        let s = summarize(x, &grid);
                        for j in 0..s.mean.len() {
                            for (i, t) in s.times.iter().enumerate() {
                                d.row(vec![
                                    s.control.clone(),
                                    num(*t),
                                    (j + 1).to_string(),
                                    num(s.mean[j][i]),
                                    num(s.q05[j][i]),
                                    num(s.q50[j][i]),
                                    num(s.q95[j][i]),
                                ]);
                            }
                        }
                    }
                    d
                }
            };
            artifacts.push(single(ctx, main.render()?));
            let mut t = CsvDoc::new(
                h.with_schema("solve-fbsde-trace"),
                &[
                    "m", "d_x", "d_x_se", "d_y", "d_y_se", "distance", "ratio", "envelope", "budget", "flagged", "y0",
                ],
            );
            t.note("exponent", num(report.exponent));
            t.note("lambda", num(report.lambda));
            for (r, c) in sol.trace.rows.iter().zip(&report.rows) {
                t.row(vec![
                    r.m.to_string(),
                    num(r.d_x),
                    num(r.d_x_se),
                    num(r.d_y),
                    num(r.d_y_se),
                    num(r.distance),
                    opt(r.ratio),
                    num(c.envelope),
                    num(c.budget),
                    c.flagged.to_string(),
                    num(r.y0),
                ]);
            }
            let trace_path = o.trace.clone().or_else(|| {
                o.output.as_ref().map(|out| {
                    let mut s = out.clone().into_os_string();
                    s.push(".trace.csv");
                    s.into()
                })
            });
            if let Some(path) = trace_path {
                artifacts.push(Artifact {
                    path: Some(path),
                    bytes: t.render()?,
                });
            }
        }
    }
    let failure = if !sol.trace.converged {
        Some(format!(
            "no convergence in {} iterations (tol {:e})",
            sol.trace.iterations(),
            sol.trace.tol
        ))
    } else if !report.flagged.is_empty() {
        Some(format!("iterations {:?} exceed the contraction envelope", report.flagged))
    } else {
        None
    };
    Ok(Outcome { artifacts, failure })
}

fn comparison_config(ctx: &Context) -> Result<ComparisonConfig> {
    let mut c = ComparisonConfig::default();
    c.picard.mc = McConfig::new(paths(ctx, c.picard.mc.n_paths)?, ctx.seed);
    if let Some(t) = ctx.cfg.options.tol {
        c.picard.tol = t;
    }
    c.n_space = ctx.cfg.options.n_space;
    Ok(c)
}

fn theorem(ctx: &Context) -> Result<Theorem> {
    let s = ctx.cfg.options.theorem.as_deref().ok_or_else(|| Error::Config {
        key: "theorem".into(),
        message: "required; use 41 or 42".into(),
    })?;
    Theorem::parse(s).ok_or_else(|| Error::Config {
        key: "theorem".into(),
        message: format!("unknown theorem `{s}`; use 41 or 42"),
    })
}

const COMPARE_COLUMNS: [&str; 14] = [
    "seed", "grid", "y0_1", "y0_2", "margin", "eps_num", "l_min", "residual", "budget", "defect", "k2_term",
    "reference", "verdict", "reason",
];

fn outcome_row(o: &ComparisonOutcome) -> Vec<String> {
    let d = o.duality.as_ref();
    vec![
        o.seed.to_string(),
        o.n_steps.to_string(),
        num(o.y0[0]),
        num(o.y0[1]),
        num(o.margin),
        num(o.eps_num),
        num(o.l_min),
        opt(d.map(|d| d.residual)),
        opt(d.map(|d| d.budget)),
        opt(d.map(|d| d.defect)),
        opt(d.map(|d| d.k2_term)),
        o.reference.clone().unwrap_or_default(),
        status(o.status).into(),
        o.reason.clone().unwrap_or_default(),
    ]
}

fn status(s: Status) -> &'static str {
    match s {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skipped => "SKIPPED",
    }
}

fn cmd_compare(ctx: &Context) -> Result<Outcome> {
    let o = &ctx.cfg.options;
    let th = theorem(ctx)?;
    let n_seeds = o.seeds.unwrap_or(20);
    if n_seeds == 0 {
        return Err(Error::Config {
            key: "seeds".into(),
            message: "must be positive".into(),
        });
    }
    let grids = o.grids.clone().unwrap_or_else(|| vec![16, 32, 64]);
    if grids.is_empty() || grids.contains(&0) {
        return Err(Error::Config {
            key: "grids".into(),
            message: "need at least one positive step count".into(),
        });
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| ctx.seed.wrapping_add(k)).collect();
    let report = comparison_battery(th, &seeds, &grids, &comparison_config(ctx)?)?;
    let h = header(ctx, "compare", None)?;
    let bytes = match ctx.cfg.format() {
        Format::Json => json_doc(&h, &report)?,
        Format::Csv => compare_csv(h, &report)?,
    };
    Ok(Outcome {
        artifacts: vec![single(ctx, bytes)],
        failure: (report.violations > 0).then(|| format!("{} ordering or duality violations", report.violations)),
    })
}

fn compare_csv(h: Header, r: &BatteryReport) -> Result<Vec<u8>> {
    let mut d = CsvDoc::new(h, &COMPARE_COLUMNS);
    d.note("theorem", r.theorem.tag());
    d.note("violations", r.violations);
    d.note("skipped", r.skipped);
    d.note("residual-slope", num(r.residual_slope));
    d.note("defect-slope", num(r.defect_slope));
    d.note("defect-non-increasing", r.defect_non_increasing);
    for g in &r.grids {
        d.note(
            &format!("grid-{}", g.n_steps),
            format!(
                "mean_residual={} mean_budget={} mean_defect={} defect_se={}",
                num(g.mean_residual),
                num(g.mean_budget),
                num(g.mean_defect),
                num(g.defect_se)
            ),
        );
    }
    for o in &r.rows {
        d.row(outcome_row(o));
    }
    d.render()
}

fn cmd_duality(ctx: &Context, lp: &LoadedProblem) -> Result<Outcome> {
    let p = &lp.problem;
    let n_steps = ctx
        .cfg
        .options
        .n_steps
        .or(p.grid.as_ref().map(|g| g.n_steps))
        .unwrap_or(32);
    let cfg = comparison_config(ctx)?;
    let outcome = match &p.pair {
        Some(PairSpec::Terminal { .. }) => {
            let c1 = p.pair_coefficients().expect("terminal pair");
            compare_thm41(&p.setting, &c1, &p.coefficients, n_steps, &cfg)?
        }
        Some(PairSpec::Initial { x1, x2 }) => compare_thm42(
            &p.setting.with_x0(vec![*x1]),
            &p.setting.with_x0(vec![*x2]),
            &p.coefficients,
            n_steps,
            &cfg,
        )?,
        None => {
            return Err(Error::Config {
                key: "problem".into(),
                message: format!("`{}` has no comparison pair", p.name),
            })
        }
    };
    let h = header(ctx, "duality", Some(lp))?;
    let bytes = match ctx.cfg.format() {
        Format::Json => json_doc(&h, &outcome)?,
        Format::Csv => {
            let mut d = CsvDoc::new(h, &COMPARE_COLUMNS);
            d.note("theorem", outcome.theorem.tag());
            d.note("problem", &p.name);
            d.row(outcome_row(&outcome));
            d.render()?
        }
    };
    Ok(Outcome {
        artifacts: vec![single(ctx, bytes)],
        failure: match outcome.status {
            Status::Pass => None,
            _ => Some(outcome.reason.clone().unwrap_or_else(|| status(outcome.status).into())),
        },
    })
}
