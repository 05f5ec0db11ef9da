//! Randomised invariants of the building blocks.

use fbp_core::div_inverse::{rinv_grid, rinv_spatial, staggered_div, BoxSpec};
use fbp_core::pde::{boundary_defect, build_boundary_function, solve_neumann_ibvp};
use fbp_core::profile_mod::verify_modification;
use fbp_core::verification::minmax_check;
use fbp_core::{modify_profile, Branch, Grid, Profile, Sigma};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use std::f64::consts::PI;

/// Smooth datum built from a few cosine modes.
fn datum(grid: &Grid, coef: &[f64]) -> Vec<f64> {
    grid.sample(|x| {
        coef.iter()
            .enumerate()
            .map(|(k, c)| c * ((k + 1) as f64 * PI * x[0]).cos() * (1.0 + 0.3 * x.get(1).copied().unwrap_or(0.0)))
            .sum()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn branch_inverses_recover_level(s0 in 0.2f64..3.0, frac in 0.02f64..0.98) {
        let prof = Profile::perona_malik_rational(s0).unwrap();
        let r = frac * prof.sigma(s0);
        let lo = prof.branch_inverse(r, Branch::Minus).unwrap();
        let hi = prof.branch_inverse(r, Branch::Plus).unwrap();
        prop_assert!(lo < s0 && s0 < hi);
        prop_assert!((prof.sigma(lo) - r).abs() <= 1e-10 * (1.0 + r));
        prop_assert!((prof.sigma(hi) - r).abs() <= 1e-10 * (1.0 + r));
    }

    #[test]
    fn modified_profile_is_elliptic(a in 0.05f64..0.8, b in 0.05f64..0.8) {
        let prof = Profile::perona_malik_rational(1.0).unwrap();
        let (r1, r2) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(r2 - r1 > 0.02 && r2 < 0.49);
        let mp = modify_profile(&prof, r1, r2).unwrap();
        prop_assert!(verify_modification(&mp, 400).passed());
        let mut prev = mp.sigma(0.0);
        for i in 1..=200 {
            let s = mp.s_max() * i as f64 / 200.0;
            let cur = mp.sigma(s);
            prop_assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn spatial_inverse_is_right_inverse(
        vals in prop::collection::vec(-2.0f64..2.0, 6 * 5),
        lx in 0.5f64..3.0,
        ly in 0.5f64..3.0,
    ) {
        let spec = BoxSpec::new(vec![(0.0, lx), (-1.0, ly - 1.0)]);
        let u = ArrayD::from_shape_vec(IxDyn(&[6, 5]), vals).unwrap();
        let back = staggered_div(&rinv_spatial(&u, &spec), &spec);
        let err = (&back - &u).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(err <= 1e-11);
    }

    #[test]
    fn grid_inverse_matches_divergence(vals in prop::collection::vec(-1.0f64..1.0, 12 * 7)) {
        let g = Grid::new_2d([12, 7], [0.0, 0.0], [1.5, 1.0], 1, 1.0).unwrap();
        let v = rinv_grid(&g, &vals);
        let div = g.divergence(&v);
        let err = div.iter().zip(&vals).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err <= 1e-11);
    }

    #[test]
    fn solver_keeps_mass_and_range(coef in prop::collection::vec(-0.15f64..0.15, 3), shift in -1.0f64..1.0) {
        let mp = modify_profile(&Profile::perona_malik_rational(1.0).unwrap(), 0.3, 0.4).unwrap();
        let g = Grid::new_1d(64, 0.0, 1.0, 40, 0.02).unwrap();
        let u0: Vec<f64> = datum(&g, &coef).iter().map(|x| x + shift).collect();
        let u = solve_neumann_ibvp(&mp, &u0, &g).unwrap();
        let m0 = g.mass(&u0);
        for s in &u.slices {
            prop_assert!((g.mass(s) - m0).abs() <= 1e-10);
        }
        prop_assert!(minmax_check(&u, &u0) <= 1e-8);
    }

    #[test]
    fn boundary_function_matches_divergence(coef in prop::collection::vec(-0.2f64..0.2, 3), two_d in any::<bool>()) {
        let mp = modify_profile(&Profile::perona_malik_rational(1.0).unwrap(), 0.3, 0.4).unwrap();
        let g = if two_d {
            Grid::new_2d([16, 12], [0.0, 0.0], [1.0, 1.0], 8, 0.01).unwrap()
        } else {
            Grid::new_1d(48, 0.0, 1.0, 16, 0.02).unwrap()
        };
        let bf = build_boundary_function(&mp, &datum(&g, &coef), &g).unwrap();
        prop_assert!(boundary_defect(&bf) <= 1e-9);
    }
}
