//! Acceptance run: one line per criterion. Exits nonzero on a failure only
//! when `ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gfbsde::bsde::{bsde_apriori_check, dp_backward, k_diagnostics, BackwardOptions, XInput};
use gfbsde::constants::{self as k, bdg_constant, BdgFormula, ConstantInputs, Delta0};
use gfbsde::duality::{comparison_battery, ComparisonConfig, Status, Theorem};
use gfbsde::gprocess::{gexpect_lattice, gexpect_mc, qv_sandwich, sample_paths, ControlFamily, IncrementModel};
use gfbsde::model::{catalog, catalog_entry, problem_grid, CoefficientSet, DiscretizationGrid, GSetting, Lipschitz, Quadrature};
use gfbsde::picard::{contraction_report, perturbation_experiment, picard_solve, PicardConfig, Problem};
use gfbsde::sde::{sde_stability_check, McConfig, StabilityVerdict, YInput};
use gfbsde::DEFAULT_SEED;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Line {
    line(false, detail)
}

// ---------------------------------------------------------------------------
// Constants oracle, written directly from the closed forms in log space.

struct Oracle {
    p: f64,
    t: f64,
    n: f64,
    l1: f64,
    l2: f64,
    l3: f64,
    sh: f64,
    sl: f64,
    ln_cp: f64,
}

/// `ln(sum exp(terms))`, ignoring `-inf` terms.
fn lse(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Oracle {
    fn ln_lambda1(&self, delta: f64) -> f64 {
        let p = self.p;
        let a = lse(&[0.0, 2.0 * p * self.sh.ln()]) + p * (self.n * self.l1 * delta).ln();
        let b = 2f64.ln() + self.ln_cp + p * (self.l1 * self.n * self.n * self.sh).ln() + 0.5 * p * delta.ln();
        (p - 1.0) * 8f64.ln() + lse(&[a, b])
    }

    fn ln_lambda2(&self, base: f64) -> f64 {
        let p = self.p;
        (p - 1.0) * base.ln()
            + lse(&[0.0, 2.0 * p * self.sh.ln(), 2f64.ln() + self.ln_cp + p * (self.n * self.sh).ln()])
    }

    fn ln_lambda3(&self) -> f64 {
        let p = self.p;
        let a = lse(&[0.0, 2.0 * p * self.sh.ln()]) + p * (self.n * self.l1).ln() + (p - 1.0) * self.t.ln();
        let b = 2f64.ln()
            + self.ln_cp
            + p * (self.l1 * self.n * self.n * self.sh).ln()
            + 0.5 * (p - 2.0) * self.t.ln();
        (p - 1.0) * 6f64.ln() + lse(&[a, b])
    }

    fn lambda5(&self) -> f64 {
        let p = self.p;
        let s2 = self.sh * self.sh;
        let q = 1.0 + 1.0 / (self.sl * self.sl);
        p * self.l1 * (1.0 + s2) + 0.5 * p * self.l1 * self.l1 * s2 * q * q * (1.0 / (p - 1.0)).max(1.0)
    }

    /// `lambda_1 = A u^2 + B u` with `u = delta^(p/2)`; stable positive root of `= 3/4`.
    fn delta0(&self) -> Option<f64> {
        if self.l1 == 0.0 {
            return None;
        }
        let p = self.p;
        let e8 = 8f64.powf(p - 1.0);
        let a = e8 * (1.0 + self.sh.powf(2.0 * p)) * (self.n * self.l1).powf(p);
        let b = e8 * 2.0 * self.ln_cp.exp() * (self.l1 * self.n * self.n * self.sh).powf(p);
        let u = 1.5 / (b + (b * b + 3.0 * a).sqrt());
        Some(u.powf(2.0 / p))
    }

    fn ln_c1_patch(&self) -> f64 {
        let p = self.p;
        let d0 = self.delta0().unwrap_or(self.t);
        let ln4 = 4f64.ln();
        let q = 4f64.powf(p) - 1.0;
        let a = p * (self.t + 2.0 * d0) / d0;
        // 4^a - 4^p - (T/d0)(4^p - 1), factored by 4^a.
        let rest = (4f64.powf(p) + self.t / d0 * q) * (-a * ln4).exp();
        let ln_bracket = a * ln4 + (-rest).ln_1p() - q.ln();
        ln4 + self.ln_lambda2(8.0) - q.ln() + ln_bracket
    }

    fn ln_c1_gronwall(&self) -> Option<f64> {
        (self.p >= 2.0).then(|| self.ln_lambda3().exp() * self.t + self.ln_lambda2(6.0))
    }

    fn ln_c1(&self) -> f64 {
        let patch = self.ln_c1_patch();
        self.ln_c1_gronwall().map_or(patch, |g| g.min(patch))
    }

    fn ln_c2(&self) -> f64 {
        let p = self.p;
        let s2 = self.sh * self.sh;
        let inner = p * (1.0 + s2).ln() + p * self.l1 * (1.0 + s2) * self.t;
        (p - 1.0) * 2f64.ln() + lse(&[0.0, inner]) + self.lambda5() * self.t
    }

    fn ln_time(&self, tilde: bool) -> f64 {
        let p = self.p;
        let t = self.t;
        let base = if tilde {
            p * t.ln()
        } else {
            lse(&[p * t.ln(), 0.5 * p * t.ln()])
        };
        base + p * (1.0 + t).ln()
    }

    fn ln_lambda_at(&self, coupling: f64, tilde: bool) -> f64 {
        self.ln_c1() + self.ln_c2() + self.p * (self.n * coupling).ln() + self.ln_time(tilde)
    }

    fn coupling(&self) -> f64 {
        self.l2 * self.l3
    }

    /// `L2 L3` with `Lambda_p = 1`, by bisection on `ln(L2 L3)`.
    fn threshold_bisect(&self) -> f64 {
        let (mut lo, mut hi) = (-800.0f64, 800.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.ln_lambda_at(mid.exp(), false) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    }
}

fn rel_ok(got: f64, want: f64, tol: f64) -> bool {
    if got == want {
        return true;
    }
    (got - want).abs() <= tol * want.abs()
}

/// Value comparison when both sides are finite, else on logs.
fn big_ok(got: k::Big, want_ln: f64, tol: f64) -> bool {
    let want = want_ln.exp();
    if got.value.is_finite() && want.is_finite() && want > 0.0 {
        rel_ok(got.value, want, tol)
    } else {
        (got.ln - want_ln).abs() <= tol * want_ln.abs().max(1.0)
    }
}

fn criterion_constants() -> Line {
    const TOL: f64 = 1e-12;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
    let mut bad: Vec<String> = Vec::new();
    let mut threshold_err = 0.0f64;
    for case in 0..1000 {
        let p = match case % 10 {
            0 => 2.0,
            _ => 1.0 + 3.0 * (1.0 - rng.random::<f64>()),
        };
        let sl = rng.random_range(0.2..1.5);
        let inp = ConstantInputs {
            p,
            horizon: rng.random_range(0.05..3.0),
            n: rng.random_range(1..=4),
            l1: if case % 7 == 0 { 0.0 } else { rng.random_range(0.0..2.0) },
            l2: if case % 11 == 0 { 0.0 } else { rng.random_range(0.0..2.0) },
            l3: rng.random_range(0.0..2.0),
            sigma_low: sl,
            sigma_high: sl + rng.random_range(0.0..1.0),
        };
        let cp = bdg_constant(p, &BdgFormula::Default).unwrap();
        let o = Oracle {
            p,
            t: inp.horizon,
            n: inp.n as f64,
            l1: inp.l1,
            l2: inp.l2,
            l3: inp.l3,
            sh: inp.sigma_high,
            sl: inp.sigma_low,
            ln_cp: 0.5 * p * (10.0 * p).ln(),
        };
        let mut check = |name: &str, ok: bool| {
            if !ok && bad.len() < 5 {
                bad.push(format!("case {case} {name} {inp:?}"));
            }
        };
        check("C(p)", rel_ok(cp, o.ln_cp.exp(), TOL));
        let delta = rng.random_range(0.001..1.0);
        let l1v = k::lambda1(delta, p, inp.n, inp.l1, inp.sigma_high, cp);
        check("lambda1", if inp.l1 == 0.0 { l1v == 0.0 } else { rel_ok(l1v, o.ln_lambda1(delta).exp(), TOL) });
        check("lambda2", rel_ok(k::lambda2(p, inp.n, inp.sigma_high, cp), o.ln_lambda2(8.0).exp(), TOL));
        let l3v = k::lambda3(&inp, cp);
        check("lambda3", if inp.l1 == 0.0 { l3v == 0.0 } else { rel_ok(l3v, o.ln_lambda3().exp(), TOL) });
        check("lambda4", rel_ok(k::lambda4(p, inp.n, inp.sigma_high, cp), o.ln_lambda2(6.0).exp(), TOL));
        check("lambda5", rel_ok(k::lambda5(p, inp.l1, inp.sigma_high, inp.sigma_low), o.lambda5(), TOL));
        let d0 = k::solve_delta0(p, inp.n, inp.l1, inp.sigma_high, cp);
        check(
            "delta0",
            match (d0, o.delta0()) {
                (Delta0::Finite(a), Some(b)) => rel_ok(a, b, TOL),
                (Delta0::Unbounded, None) => true,
                _ => false,
            },
        );
        check("C1 patch", big_ok(k::c1_patch(&inp, cp), o.ln_c1_patch(), TOL));
        match (k::c1_gronwall(&inp, cp), o.ln_c1_gronwall()) {
            (Ok(g), Some(w)) => check("C1 gronwall", big_ok(g, w, TOL)),
            (Err(_), None) => {}
            _ => check("C1 gronwall domain", false),
        }
        check("C2", big_ok(k::c2(&inp).unwrap(), o.ln_c2(), TOL));
        let coupling = o.coupling();
        for (name, got, tilde) in [
            ("Lambda_p", k::lambda_p(&inp, cp).unwrap(), false),
            ("Lambda~_p", k::lambda_tilde_p(&inp, cp).unwrap(), true),
        ] {
            if coupling == 0.0 {
                check(name, got.value == 0.0);
            } else {
                check(name, big_ok(got, o.ln_lambda_at(coupling, tilde), TOL));
            }
        }
        let th = k::coupling_threshold(&inp, cp).unwrap();
        let want = o.threshold_bisect();
        let err = if th.is_finite() && want.is_finite() && want > 0.0 {
            (th - want).abs() / want
        } else if th == want {
            0.0
        } else {
            f64::INFINITY
        };
        threshold_err = threshold_err.max(err);
        check("threshold", err <= 1e-9);
    }
    let secs = start.elapsed().as_secs_f64();
    if !bad.is_empty() {
        return fail(bad.join("; "));
    }
    line(
        secs < 1.0,
        format!("1000 random inputs agree to 1e-12; worst threshold error {threshold_err:.1e}; {secs:.2} s"),
    )
}

// ---------------------------------------------------------------------------

fn criterion_gexp() -> Line {
    let start = Instant::now();
    let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
    let g = DiscretizationGrid::standard(&s, 200).unwrap();
    let fam = ControlFamily::standard(&s, 200);
    let cases: [(&str, fn(f64) -> f64, f64); 3] = [
        ("B", |x| x, 0.0),
        ("B^2", |x| x * x, 1.44),
        ("-B^2", |x| -x * x, -0.64),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f, exact) in cases {
        let lat = gexpect_lattice(&f, &s, &g).unwrap().value;
        let lat_ok = if exact == 0.0 {
            lat.abs() <= 1e-3
        } else {
            (lat - exact).abs() <= 1e-3 * exact.abs()
        };
        let mc = gexpect_mc(&f, &s, &g, &fam, 20_000, DEFAULT_SEED, IncrementModel::Gaussian).unwrap();
        let gap = (lat - mc.value) / mc.std_err.max(f64::MIN_POSITIVE);
        let mc_ok = gap.abs() <= 5.0;
        ok &= lat_ok && mc_ok;
        parts.push(format!("{name}: lattice {lat:.6} (exact {exact}), MC gap {gap:.2} SE"));
    }
    let secs = start.elapsed().as_secs_f64();
    line(ok && secs < 10.0, format!("{}; {secs:.2} s", parts.join(", ")))
}

fn criterion_qv() -> Line {
    let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
    let n = 40;
    let g = DiscretizationGrid::standard(&s, n).unwrap();
    let fam = ControlFamily::standard(&s, n);
    if fam.len() != 5 {
        return fail(format!("standard family has {} controls", fam.len()));
    }
    let mut worst = 0.0f64;
    let mut realized = 0.0f64;
    for c in &fam.controls {
        for model in [IncrementModel::Gaussian, IncrementModel::Rademacher] {
            let e = sample_paths(&s, &g, c, 100_000, DEFAULT_SEED, model).unwrap();
            let r = qv_sandwich(&s, &e);
            if !r.steps_in_band || r.worst_pair_excess > 1e-12 {
                return fail(format!("{}: {r:?}", c.label));
            }
            worst = worst.max(r.worst_pair_excess);
            realized = realized.max(r.worst_realized_gap.unwrap_or(0.0));
        }
    }
    line(
        realized <= 1e-12,
        format!("5 controls x 1e5 paths, worst pair excess {worst:.1e}, worst realized gap {realized:.1e}"),
    )
}

fn brownian_square() -> CoefficientSet {
    CoefficientSet::scalar(
        |_, _, _| 0.0,
        |_, _, _| 0.0,
        |_, _, _| 1.0,
        |_, _, _, _| 0.0,
        |_, _, _, _| 0.0,
        |x| x * x,
        Lipschitz::new(0.0, 0.0, 1.0),
        false,
    )
}

fn criterion_convex() -> Line {
    let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
    let n = 100;
    let g = DiscretizationGrid::standard(&s, n).unwrap();
    let c = brownian_square();
    let sol = dp_backward(&s, &c, &g, &YInput::Zero, BackwardOptions::default()).unwrap();
    let y0 = sol.y0(&s.x0);
    let fam = ControlFamily::standard(&s, n);
    let kd = k_diagnostics(&s, &c, &g, &sol, &YInput::Zero, &fam, McConfig::new(4000, DEFAULT_SEED)).unwrap();
    let low = fam
        .controls
        .iter()
        .position(|c| c.gamma.iter().all(|&v| v == s.gamma_low()))
        .expect("constant low control");
    let kt = kd.per_control[low].k_terminal;
    let want = s.gamma_low() - s.gamma_high();
    let k_gap = (kt.mean - want).abs() / kt.std_err.max(f64::MIN_POSITIVE);
    let ok = (y0 - 1.44).abs() <= 1.44e-3 && kd.monotone_ok && kd.martingale_ok && k_gap <= 5.0;
    line(
        ok,
        format!(
            "Y0 {y0:.6} vs 1.44; max K increment {:.2e} <= tol_K {:.2e}; sup E[K_T] {:.2e} (SE {:.1e}); low-control K_T {:.4} vs {want:.2} ({k_gap:.2} SE)",
            kd.max_increment, kd.tol_k, kd.k_terminal.value, kd.k_terminal.std_err, kt.mean
        ),
    )
}

/// Linear interpolation on a uniform axis with end-cell extrapolation.
fn interp(min: f64, h: f64, vals: &[f64], x: f64) -> f64 {
    let n = vals.len();
    let s = (x - min) / h;
    let i = (s.floor().max(0.0) as usize).min(n - 2);
    let w = s - i as f64;
    vals[i] + w * (vals[i + 1] - vals[i])
}

fn criterion_classical() -> Line {
    let e = catalog_entry("classical-linear").unwrap();
    let (s, c) = (&e.setting, &e.coefficients);
    let n = 50;
    let g = problem_grid(s, c, n, Some(401), Quadrature::TwoPoint).unwrap();
    let fam = ControlFamily::standard(s, n);
    let cfg = PicardConfig {
        mc: McConfig::new(500, DEFAULT_SEED),
        tol: 1e-10,
        ..PicardConfig::default()
    };
    let sol = picard_solve(s, c, &g, &fam, &cfg).unwrap();
    let exact = e.analytic_reference.as_ref().unwrap().y0;
    let y_ok = sol.trace.converged && (sol.y0 - exact).abs() <= 1e-3 * exact.abs();

    // Backward induction for dX = a1 X dt + s dB, dY = k Y dt + Z dB, Y_T = m X
    // with Y frozen at zero in the forward drift.
    let (a1, kk, m, sig) = (-0.1, 0.05, 1.0, s.sigma_high);
    let ax = &g.axes[0];
    let h = ax.spacing();
    let dt = g.dt();
    let nodes: Vec<f64> = (0..ax.n).map(|i| ax.min + i as f64 * h).collect();
    let mut u: Vec<f64> = nodes.iter().map(|x| m * x).collect();
    for _ in 0..n {
        u = nodes
            .iter()
            .map(|&x| {
                let mean = x + a1 * x * dt;
                let jump = sig * dt.sqrt();
                let e = 0.5 * (interp(ax.min, h, &u, mean - jump) + interp(ax.min, h, &u, mean + jump));
                e - kk * e * dt
            })
            .collect();
    }
    let stage = dp_backward(s, c, &g, &YInput::Zero, BackwardOptions::default()).unwrap();
    let worst = stage.y_fn.values[0].iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    line(
        y_ok && worst <= 1e-10,
        format!(
            "Picard Y0 {:.8} vs closed form {exact:.8} (rel {:.1e}); decoupled stage vs induction oracle max {worst:.1e} over {} nodes",
            sol.y0,
            (sol.y0 - exact).abs() / exact.abs(),
            ax.n
        ),
    )
}

fn criterion_picard() -> Line {
    let solve = |name: &str| {
        let e = catalog_entry(name).unwrap();
        let g = problem_grid(&e.setting, &e.coefficients, 20, Some(401), Quadrature::TwoPoint).unwrap();
        let fam = ControlFamily::standard(&e.setting, 20);
        let cfg = PicardConfig {
            mc: McConfig::new(1000, DEFAULT_SEED),
            tol: 1e-8,
            ..PicardConfig::default()
        };
        picard_solve(&e.setting, &e.coefficients, &g, &fam, &cfg).unwrap()
    };
    let w = solve("weakly-coupled");
    let rep = contraction_report(&w.trace, &w.certificate.constants);
    let ratios: Vec<f64> = rep.rows.iter().filter(|r| r.m >= 3).filter_map(|r| r.ratio).collect();
    let geometric = !ratios.is_empty() && ratios.iter().all(|&r| r < 1.0);
    let d = solve("decoupled");
    let exact_two = d.trace.converged
        && d.trace.iterations() == 2
        && d.trace.rows[1].d_x == 0.0
        && d.trace.rows[1].d_y == 0.0;
    line(
        w.trace.converged && geometric && rep.flagged.is_empty() && exact_two,
        format!(
            "weakly-coupled: {} iterations, ratios m>=3 {:?}, Lambda_p' {:.3e}, flagged {:?}; decoupled: {} iterations, d_2 = {:e}",
            w.trace.iterations(),
            ratios.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>(),
            rep.lambda,
            rep.flagged,
            d.trace.iterations(),
            d.trace.rows.get(1).map_or(f64::NAN, |r| r.distance)
        ),
    )
}

/// Share of the bound used by the left side.
fn usage(v: &StabilityVerdict) -> f64 {
    let bound = v.constant * v.rhs.value;
    if v.lhs.value == 0.0 {
        0.0
    } else {
        v.lhs.value / bound
    }
}

fn criterion_stability() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED ^ 7);
    let n = 10;
    let mut checks = 0usize;
    let mut failures = Vec::new();
    let mut growth = Vec::new();
    let mut tightest = 0.0f64;
    for e in catalog() {
        let s = &e.setting;
        let c = &e.coefficients;
        let dim = s.dim();
        let g = problem_grid(s, c, n, Some(201), Quadrature::TwoPoint).unwrap();
        let fam = ControlFamily::standard(s, n);
        let inp = ConstantInputs::from_problem(s, c);
        let cp = bdg_constant(s.p, &BdgFormula::Default).unwrap();
        let c1 = k::c1(&inp, cp).value;
        let c2 = k::c2(&inp).unwrap().value;
        for pair in 0..20u64 {
            let mc = McConfig::new(200, DEFAULT_SEED + pair);
            let y1 = YInput::Constant(rng.random_range(-1.0..1.0));
            let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
            let y2 = YInput::Policy(Arc::new(move |_, _, x: &[f64]| a + b * x[0]));
            let v = sde_stability_check(s, c, &g, &fam, &y1, &y2, s.p, c1, mc).unwrap();
            checks += 1;
            tightest = tightest.max(usage(&v));
            if !v.passed {
                failures.push(format!("{} sde pair {pair}: margin {:e}", e.name, v.margin));
            }
            let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let x1 = XInput::start(s.x0.clone());
            let x2 = XInput::shifted(s.x0.clone(), shift);
            let policy = YInput::Constant(rng.random_range(-1.0..1.0));
            let v = bsde_apriori_check(s, c, &g, &policy, [&x1, &x2], s.p, c2, &fam, mc).unwrap();
            checks += 1;
            tightest = tightest.max(usage(&v));
            if !v.passed {
                failures.push(format!("{} bsde pair {pair}: margin {:e}", e.name, v.margin));
            }
        }
        let moved = s.with_x0(s.x0.iter().map(|x| x + rng.random_range(-0.3..0.3)).collect());
        let mut bumped = c.clone();
        let phi = c.phi.clone();
        let eps = rng.random_range(0.01..0.1);
        bumped.phi = Arc::new(move |x: &[f64]| phi(x) + eps * x[0].tanh());
        let cfg = PicardConfig {
            mc: McConfig::new(200, DEFAULT_SEED),
            tol: 1e-8,
            force: true,
            ..PicardConfig::default()
        };
        let gp = problem_grid(s, c, n, Some(401), Quadrature::TwoPoint).unwrap();
        let rep = perturbation_experiment(
            [
                Problem { setting: s, coeffs: c },
                Problem {
                    setting: &moved,
                    coeffs: &bumped,
                },
            ],
            &gp,
            &fam,
            &cfg,
        )
        .unwrap();
        growth.push(format!("{} {:.2}", e.name, rep.growth));
        if !rep.passed {
            failures.push(format!("{} perturbation growth {:.3}", e.name, rep.growth));
        }
    }
    if !failures.is_empty() {
        return fail(failures.join("; "));
    }
    line(true, format!("{checks} stability checks passed, largest lhs / (C rhs) {tightest:.2e}; refinement growth: {}", growth.join(", ")))
}

fn criterion_battery() -> Line {
    let start = Instant::now();
    let cfg = ComparisonConfig::default();
    let seeds: Vec<u64> = (0..20).map(|k| DEFAULT_SEED + k).collect();
    let grids = [16, 32, 64];
    let mut ok = true;
    let mut parts = Vec::new();
    for theorem in [Theorem::Terminal, Theorem::Initial] {
        let rep = match comparison_battery(theorem, &seeds, &grids, &cfg) {
            Ok(r) => r,
            Err(e) => return fail(format!("{theorem:?}: {e}")),
        };
        let passing: Vec<_> = rep.rows.iter().filter(|r| r.status == Status::Pass).collect();
        let l_min_ok = passing.iter().all(|r| r.l_min >= -r.tol_pos);
        let residual_ok = passing
            .iter()
            .all(|r| r.duality.as_ref().is_none_or(|d| d.residual <= d.budget));
        let this = rep.violations == 0 && rep.skipped == 0 && l_min_ok && residual_ok && rep.defect_non_increasing;
        ok &= this;
        parts.push(format!(
            "{theorem:?}: {} runs, {} violations, {} skipped, l_min ok {l_min_ok}, residual within budget {residual_ok}, residual slope {:.2}, defect slope {:.2}, defect non-increasing {}",
            rep.rows.len(),
            rep.violations,
            rep.skipped,
            rep.residual_slope,
            rep.defect_slope,
            rep.defect_non_increasing
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    line(ok && secs < 600.0, format!("{}; {secs:.0} s", parts.join("; ")))
}

// ---------------------------------------------------------------------------

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn criterion_determinism() -> Line {
    let bin = env!("CARGO_BIN_EXE_gfbsde");
    let dir = tempfile::tempdir().unwrap();
    let smooth = repo_file("problems/smooth-coupled.toml");
    let smooth = smooth.to_str().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        format!("command = \"solve-fbsde\"\nproblem = {smooth:?}\npaths = 400\nseed = 11\n"),
    )
    .unwrap();
    let cfg_path = cfg_path.to_str().unwrap().to_string();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("certify", vec!["certify", "catalog:weakly-coupled"]),
        ("gexp", vec!["gexp", "catalog:convex-terminal", "--n-steps", "50", "--paths", "2000"]),
        ("solve-sde", vec!["solve-sde", smooth, "--n-steps", "16", "--paths", "500"]),
        ("solve-bsde", vec!["solve-bsde", "catalog:convex-terminal", "--n-steps", "20", "--paths", "500", "--n-space", "401"]),
        ("solve-fbsde", vec!["solve-fbsde", smooth, "--paths", "500"]),
        ("solve-fbsde-paths", vec!["solve-fbsde", "catalog:weakly-coupled", "--backend", "paths", "--n-steps", "16", "--paths", "400"]),
        ("compare", vec!["compare", "--theorem", "41", "--seeds", "2", "--grids", "8,16", "--paths", "300"]),
        ("duality", vec!["duality", "catalog:monotone-pair", "--n-steps", "16", "--paths", "400"]),
        ("run", vec!["run", "--config", &cfg_path]),
    ];
    let mut bad = Vec::new();
    for (name, args) in &cases {
        let mut outputs = Vec::new();
        for (k, threads) in [None, Some("1"), Some("4")].iter().enumerate() {
            let mut cmd = Command::new(bin);
            cmd.args(args).env_remove("GFBSDE_SEED").env("RUST_LOG", "error");
            if let Some(t) = threads {
                if *name == "run" {
                    // A config run takes its options from the file only.
                    cmd.env("RAYON_NUM_THREADS", t);
                } else {
                    cmd.args(["--threads", t]);
                }
            }
            let out = dir.path().join(format!("{name}-{k}.out"));
            let o = if *name == "run" {
                cmd.output().unwrap()
            } else {
                cmd.args(["-o", out.to_str().unwrap()]).output().unwrap()
            };
            if !matches!(o.status.code(), Some(0) | Some(2)) {
                bad.push(format!("{name}: exit {:?}", o.status.code()));
                break;
            }
            let mut got = vec![if *name == "run" { o.stdout } else { std::fs::read(&out).unwrap() }];
            let trace = PathBuf::from(format!("{}.trace.csv", out.display()));
            if trace.exists() {
                got.push(std::fs::read(&trace).unwrap());
            }
            outputs.push(got);
        }
        if outputs.len() == 3 && !(outputs[0] == outputs[1] && outputs[0] == outputs[2]) {
            bad.push(format!("{name}: outputs differ"));
        }
    }
    if !bad.is_empty() {
        return fail(bad.join("; "));
    }
    line(true, format!("{} commands byte-identical over repeat runs on 1 and 4 threads", cases.len()))
}

fn main() {
    let criteria: [(u32, fn() -> Line); 9] = [
        (1, criterion_constants),
        (2, criterion_gexp),
        (3, criterion_qv),
        (4, criterion_convex),
        (5, criterion_classical),
        (6, criterion_picard),
        (7, criterion_stability),
        (8, criterion_battery),
        (9, criterion_determinism),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let r = f();
        println!("criterion {n}: {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
