use proptest::prelude::*;

use gfbsde::constants::BdgFormula;
use gfbsde::gprocess::{bdg_check, gexpect_lattice, gexpect_lattice_function, qv_sandwich, sample_paths, ControlFamily, IncrementModel, VolatilityControl};
use gfbsde::model::{DiscretizationGrid, GSetting};

fn setting() -> GSetting {
    GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0])
}

/// Bounded payoff shapes indexed by a small integer.
fn payoff(kind: u8, a: f64) -> impl Fn(f64) -> f64 + Sync {
    move |x: f64| match kind % 4 {
        0 => (x - a).max(0.0),
        1 => (a * x).sin(),
        2 => (x * x).min(4.0 + a),
        _ => (x - a).abs().tanh(),
    }
}

/// `sum_k C(n, k) 2^-n phi(s sqrt(dt) (2k - n))`.
fn binomial(phi: &dyn Fn(f64) -> f64, sigma: f64, horizon: f64, n: usize) -> f64 {
    let jump = sigma * (horizon / n as f64).sqrt();
    let mut ln_choose = 0.0f64;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        let w = (ln_choose - n as f64 * 2f64.ln()).exp();
        total += w * phi(jump * (2.0 * k as f64 - n as f64));
    }
    total
}

#[test]
fn bdg_moment_bound_at_two() {
    let s = setting();
    let g = DiscretizationGrid::standard(&s, 50).unwrap();
    let fam = ControlFamily::standard(&s, 50);
    let r = bdg_check(&s, &g, &fam, 2.0, 20_000, 3, &BdgFormula::Default).unwrap();
    assert!(r.passed, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constants_pass_through(kind in 0u8..4, a in -1.0f64..1.0, c in -5.0f64..5.0, n in 1usize..60) {
        let s = setting();
        let g = DiscretizationGrid::standard(&s, n).unwrap();
        let f = payoff(kind, a);
        let base = gexpect_lattice(&f, &s, &g).unwrap().value;
        let shifted = gexpect_lattice(&|x| f(x) + c, &s, &g).unwrap().value;
        prop_assert!((shifted - base - c).abs() <= 1e-12 * (1.0 + base.abs() + c.abs()));
    }

    #[test]
    fn ordered_payoffs_give_ordered_values(kind in 0u8..4, a in -1.0f64..1.0, bump in 0.0f64..1.0, n in 1usize..40) {
        let s = setting();
        let g = DiscretizationGrid::standard(&s, n).unwrap();
        let f = payoff(kind, a);
        let lo = gexpect_lattice_function(&f, &s, &g).unwrap();
        let hi = gexpect_lattice_function(&|x| f(x) + bump * (1.0 + x.cos()), &s, &g).unwrap();
        for (u, v) in lo.values.iter().flatten().zip(hi.values.iter().flatten()) {
            prop_assert!(u <= v);
        }
    }

    #[test]
    fn degenerate_band_is_the_binomial_tree(kind in 0u8..4, a in -1.0f64..1.0, sigma in 0.3f64..1.5, n in 1usize..30) {
        let s = GSetting::classical(sigma, 2.0, 3.0, 0.7, vec![0.0]);
        let g = DiscretizationGrid::standard(&s, n).unwrap();
        let f = payoff(kind, a);
        let lat = gexpect_lattice(&f, &s, &g).unwrap().value;
        let tree = binomial(&f, sigma, 0.7, n);
        prop_assert!((lat - tree).abs() <= 1e-12 * (1.0 + tree.abs()), "{lat} vs {tree}");
    }

    #[test]
    fn quadratic_variation_stays_in_the_band(
        gammas in prop::collection::vec(0.0f64..1.0, 1..40),
        gaussian in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let s = setting();
        let (lo, hi) = (s.gamma_low(), s.gamma_high());
        let n = gammas.len();
        let c = VolatilityControl {
            label: "random".into(),
            gamma: gammas.iter().map(|u| lo + u * (hi - lo)).collect(),
        };
        let g = DiscretizationGrid::standard(&s, n).unwrap();
        let model = if gaussian { IncrementModel::Gaussian } else { IncrementModel::Rademacher };
        let e = sample_paths(&s, &g, &c, 50, seed, model).unwrap();
        let r = qv_sandwich(&s, &e);
        prop_assert!(r.steps_in_band);
        prop_assert!(r.worst_pair_excess <= 1e-12);
        if let Some(gap) = r.worst_realized_gap {
            prop_assert!(gap <= 1e-12);
        }
    }
}
