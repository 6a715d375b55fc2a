use malliavin_score::linear_score::{exact_gaussian_posterior, mixture_marginal_score};
use malliavin_score::rng;
use malliavin_score::variation::{closed_form_gamma, closed_form_y};
use malliavin_score::{GaussianMixturePrior, Schedule};

#[test]
fn gaussian_posterior_mean_matches_binned_monte_carlo() {
    // VP with constant β = 0.1 at t = 1 and X_0 ~ N(0, 1).
    let a = (-0.05f64).exp();
    let g = 1.0 - (-0.1f64).exp();
    let s = Schedule::vp_constant(0.1, 1.0).unwrap();
    let yt = closed_form_y(&s, 1.0, 1).unwrap();
    let gamma = closed_form_gamma(&s, 1.0, 1).unwrap();
    assert!((yt[0] - a).abs() < 1e-14);
    assert!((gamma[0] - g).abs() < 1e-14);

    let prior = GaussianMixturePrior::gaussian(vec![0.0], vec![1.0]).unwrap();
    let post = exact_gaussian_posterior(&prior, &[1.0], &yt, &gamma).unwrap();
    assert!((post.mean[0] - 0.951229).abs() < 1e-6);

    let mut r = rng::stream(17, 0, 0);
    let (mut sum, mut sum2, mut count) = (0.0, 0.0, 0usize);
    for _ in 0..1_000_000 {
        let x0 = rng::standard_normal(&mut r);
        let xt = a * x0 + g.sqrt() * rng::standard_normal(&mut r);
        if (xt - 1.0).abs() < 0.005 {
            sum += x0;
            sum2 += x0 * x0;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let se = ((sum2 / count as f64 - mean * mean) / count as f64).sqrt();
    assert!(count > 1000, "{count} samples in the bin");
    assert!((mean - post.mean[0]).abs() < 4.0 * se, "binned {mean} vs exact {} (se {se})", post.mean[0]);
}

#[test]
fn mixture_marginal_score_matches_finite_difference_of_density() {
    let prior = GaussianMixturePrior::new(
        vec![0.3, 0.7],
        vec![vec![-1.0], vec![1.5]],
        vec![vec![0.2], vec![0.5]],
    )
    .unwrap();
    let (a, g) = (0.8, 0.4);
    let density = |y: f64| -> f64 {
        [(0.3, -1.0, 0.2), (0.7, 1.5, 0.5)]
            .iter()
            .map(|&(w, mu, var): &(f64, f64, f64)| {
                let v = a * a * var + g;
                w * (-(y - a * mu).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            })
            .sum()
    };
    for y in [-2.0, -0.5, 0.0, 0.7, 2.5] {
        let h = 1e-5;
        let fd = (density(y + h).ln() - density(y - h).ln()) / (2.0 * h);
        let s = mixture_marginal_score(&prior, &[y], &[a], &[g]).unwrap();
        assert!((s[0] - fd).abs() < 1e-6, "y={y}: {} vs {fd}", s[0]);
    }
}
