use gfbsde::gprocess::{sample_paths, ControlFamily, IncrementModel};
use gfbsde::model::{catalog_entry, problem_grid, Quadrature};
use gfbsde::sde::{euler_forward, YInput};
use gfbsde::stats::Estimate;

#[test]
fn same_ensemble_same_input_is_bit_identical() {
    let e = catalog_entry("weakly-coupled").unwrap();
    let g = problem_grid(&e.setting, &e.coefficients, 20, Some(201), Quadrature::TwoPoint).unwrap();
    let fam = ControlFamily::standard(&e.setting, 20);
    let y = YInput::Constant(0.4);
    for c in &fam.controls {
        let ens = sample_paths(&e.setting, &g, c, 300, 17, IncrementModel::Gaussian).unwrap();
        let a = euler_forward(&e.coefficients, &g, &e.setting.x0, &y, &ens).unwrap();
        let b = euler_forward(&e.coefficients, &g, &e.setting.x0, &y, &ens).unwrap();
        assert_eq!(a, b);
        assert!((0..a.n_paths).all(|p| a.state(p, 0) == e.setting.x0.as_slice()));
        assert!(a.states.iter().all(|v| v.is_finite()));
    }
}

/// Strong error of `X_T` against a fine-grid solution on the same paths.
#[test]
fn classical_affine_strong_error_halves_under_refinement() {
    let e = catalog_entry("classical-linear").unwrap();
    let s = &e.setting;
    let fine = 512;
    let g = problem_grid(s, &e.coefficients, fine, Some(201), Quadrature::TwoPoint).unwrap();
    let fam = ControlFamily::extremes(s, fine);
    let ens = sample_paths(s, &g, &fam.controls[0], 4000, 5, IncrementModel::Gaussian).unwrap();
    let y = YInput::Zero;
    let reference = euler_forward(&e.coefficients, &g, &s.x0, &y, &ens).unwrap();
    let error = |n: usize| {
        let coarse = ens.coarsen(fine / n).unwrap();
        let x = euler_forward(&e.coefficients, &g.with_steps(n), &s.x0, &y, &coarse).unwrap();
        let d: Vec<f64> = (0..x.n_paths)
            .map(|p| (x.terminal(p)[0] - reference.terminal(p)[0]).abs())
            .collect();
        Estimate::from_samples(&d).mean
    };
    let (e16, e32) = (error(16), error(32));
    let ratio = e16 / e32;
    assert!((1.2..=2.8).contains(&ratio), "{e16} / {e32} = {ratio}");
}
