use malliavin_score::eval::{mmd, wasserstein_1d};
use malliavin_score::linalg;
use malliavin_score::linear_score::covering_identity_check;
use malliavin_score::variation::{closed_form_gamma, closed_form_gamma_inv, linear_track, regularized_inverse, Regularization};
use malliavin_score::verify::random_linear_spec;
use malliavin_score::{Schedule, TimeGrid};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covering_identity_for_random_linear_specs(m in 1usize..=3, seed in 0u64..10_000, n in 50usize..400) {
        let spec = random_linear_spec(m, seed).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let track = linear_track(&spec, &grid).unwrap();
        let mm = covering_identity_check(&spec, &grid, &track, n).unwrap();
        prop_assert!(linalg::max_abs_diff(&mm, &linalg::identity(m)) <= 1e-10);
        prop_assert!(track.reorthogonality_error() <= 1e-8);
    }

    #[test]
    fn closed_form_gamma_and_inverse_agree(t in 0.01f64..1.0, which in 0usize..3, m in 1usize..=3) {
        let s = match which {
            0 => Schedule::ve(0.01, 50.0, 1.0).unwrap(),
            1 => Schedule::vp(0.1, 20.0, 1.0).unwrap(),
            _ => Schedule::sub_vp_constant(0.1, 1.0).unwrap(),
        };
        let g = closed_form_gamma(&s, t, m).unwrap();
        let gi = closed_form_gamma_inv(&s, t, m).unwrap();
        let mut prod = vec![0.0; m * m];
        linalg::matmul(&g, &gi, &mut prod, m, m, m);
        prop_assert!(linalg::max_abs_diff(&prod, &linalg::identity(m)) <= 1e-9);
    }

    #[test]
    fn regularized_inverse_of_spd(a in prop::collection::vec(-1.0f64..1.0, 9)) {
        let m = 3;
        let mut g = vec![0.0; 9];
        linalg::matmul_bt(&a, &a, &mut g, m, m, m);
        for i in 0..m {
            g[i * m + i] += 0.5;
        }
        let inv = regularized_inverse(&g, m, Regularization::Fixed { epsilon: 0.0 }).unwrap();
        let mut prod = vec![0.0; 9];
        linalg::matmul(&g, &inv, &mut prod, m, m, m);
        prop_assert!(linalg::max_abs_diff(&prod, &linalg::identity(m)) <= 1e-10);
        prop_assert!(linalg::max_abs_diff(&inv, &linalg::transpose(&inv, m, m)) <= 1e-12);
    }

    #[test]
    fn mmd_is_symmetric(x in prop::collection::vec(-3.0f64..3.0, 8..40), y in prop::collection::vec(-3.0f64..3.0, 8..40)) {
        let (nx, ny) = (x.len() / 2 * 2, y.len() / 2 * 2);
        let a = mmd(&x[..nx], &y[..ny], 2, Some(0.7)).unwrap();
        let b = mmd(&y[..ny], &x[..nx], 2, Some(0.7)).unwrap();
        prop_assert!((a.mmd - b.mmd).abs() <= 1e-14);
        prop_assert!(a.mmd >= 0.0);
    }

    #[test]
    fn wasserstein_matches_sorted_pairing(a in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 1.3 + (i as f64 * 0.7).sin()).collect();
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let brute = sa.iter().zip(&sb).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        let (mut ca, mut cb) = (a, b);
        prop_assert!((wasserstein_1d(&mut ca, &mut cb) - brute).abs() <= 1e-12);
    }
}
