use gfbsde::bsde::{dp_backward, BackwardOptions};
use gfbsde::gprocess::ControlFamily;
use gfbsde::model::{catalog, problem_grid, Quadrature};
use gfbsde::picard::{picard_solve, Backend, InitialPolicy, PicardConfig};
use gfbsde::sde::McConfig;

fn config() -> PicardConfig {
    PicardConfig { force: true, tol: 1e-6, mc: McConfig::new(2000, 7), ..Default::default() }
}

#[test]
fn lattice_and_path_backends_agree() {
    for e in catalog() {
        let g = problem_grid(&e.setting, &e.coefficients, 16, Some(201), Quadrature::TwoPoint).unwrap();
        let fam = ControlFamily::standard(&e.setting, 16);
        let mut cfg = config();
        let lat = picard_solve(&e.setting, &e.coefficients, &g, &fam, &cfg).unwrap();
        cfg.backend = Backend::Paths;
        let paths = picard_solve(&e.setting, &e.coefficients, &g, &fam, &cfg).unwrap();
        assert!(lat.trace.converged && paths.trace.converged, "{}", e.name);
        let tol = 0.03 * lat.y0.abs().max(1.0);
        assert!((lat.y0 - paths.y0).abs() <= tol, "{}: {} vs {}", e.name, lat.y0, paths.y0);
    }
}

#[test]
fn solution_is_a_fixed_point_and_ignores_the_start() {
    for e in catalog() {
        let g = problem_grid(&e.setting, &e.coefficients, 16, Some(201), Quadrature::TwoPoint).unwrap();
        let fam = ControlFamily::standard(&e.setting, 16);
        let mut cfg = config();
        let sol = picard_solve(&e.setting, &e.coefficients, &g, &fam, &cfg).unwrap();
        let again = dp_backward(&e.setting, &e.coefficients, &g, &sol.policy().unwrap(), BackwardOptions::default()).unwrap();
        assert!((again.y0(&e.setting.x0) - sol.y0).abs() <= cfg.tol, "{}", e.name);

        for seed in [3, 11] {
            cfg.initial = InitialPolicy::random_affine(e.setting.x0.len(), seed);
            let other = picard_solve(&e.setting, &e.coefficients, &g, &fam, &cfg).unwrap();
            assert!((other.y0 - sol.y0).abs() <= 10.0 * cfg.tol, "{} seed {seed}: {} vs {}", e.name, other.y0, sol.y0);
        }
    }
}
