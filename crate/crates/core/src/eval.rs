//! Synthetic 2D datasets and sample-quality metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::GaussianMixturePrior;
use crate::rng;
use crate::sampler::PriorKind;

/// Points used to estimate the median pairwise distance.
const MEDIAN_SUBSAMPLE: usize = 2000;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DatasetKind {
    /// Eight Gaussians centred on the unit circle.
    Gmm8 { std: f64 },
    /// Spiral `r = θ`, `θ ∈ [1.5π, 4.5π]`, scaled into `[-2, 2]²`, with jitter.
    SwissRoll { noise: f64 },
    /// Uniform over the even-parity cells of a 4×4 board on `[-2, 2]²`.
    Checkerboard,
}

impl DatasetKind {
    pub fn gmm8() -> Self {
        DatasetKind::Gmm8 { std: 0.1 }
    }

    /// The component spread stated with the benchmark description.
    pub fn gmm8_unit_std() -> Self {
        DatasetKind::Gmm8 { std: 1.0 }
    }

    pub fn swiss_roll() -> Self {
        DatasetKind::SwissRoll { noise: 0.05 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Gmm8 { .. } => "gmm8",
            DatasetKind::SwissRoll { .. } => "swiss_roll",
            DatasetKind::Checkerboard => "checkerboard",
        }
    }
}

pub fn gmm8_means() -> Vec<Vec<f64>> {
    (0..8)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / 8.0;
            vec![a.cos(), a.sin()]
        })
        .collect()
}

pub fn gmm8_prior(std: f64) -> Result<GaussianMixturePrior> {
    GaussianMixturePrior::isotropic(gmm8_means(), std)
}

/// `n × 2` points, deterministic per seed (one stream per point).
pub fn generate_dataset(kind: &DatasetKind, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 1 {
        return invalid("dataset needs at least one point");
    }
    let prior = match kind {
        DatasetKind::Gmm8 { std } => Some(gmm8_prior(*std)?),
        DatasetKind::SwissRoll { noise } if !(*noise >= 0.0) => return invalid("noise must be non-negative"),
        _ => None,
    };
    let mut out = vec![0.0; 2 * n];
    out.par_chunks_mut(2).enumerate().for_each(|(i, p)| {
        let mut r = rng::stream(seed, rng::domain::DATASET, i as u64);
        match kind {
            DatasetKind::Gmm8 { .. } => prior.as_ref().expect("prior").sample(&mut r, p),
            DatasetKind::SwissRoll { noise } => {
                let pi = std::f64::consts::PI;
                let theta = r.random_range(1.5 * pi..4.5 * pi);
                let scale = 2.0 / (4.5 * pi);
                p[0] = scale * theta * theta.cos() + noise * rng::standard_normal(&mut r);
                p[1] = scale * theta * theta.sin() + noise * rng::standard_normal(&mut r);
            }
            DatasetKind::Checkerboard => loop {
                let x = r.random_range(-2.0..2.0);
                let y = r.random_range(-2.0..2.0);
                if checkerboard_active(x, y) {
                    p[0] = x;
                    p[1] = y;
                    break;
                }
            },
        }
    });
    Ok(out)
}

pub fn checkerboard_active(x: f64, y: f64) -> bool {
    let i = (x + 2.0).floor() as i64;
    let j = (y + 2.0).floor() as i64;
    (i + j).rem_euclid(2) == 0
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance, on a seeded subsample for large sets.
pub fn median_pairwise_distance(points: &[f64], m: usize, seed: u64) -> f64 {
    let n = points.len() / m;
    let idx: Vec<usize> = if n > MEDIAN_SUBSAMPLE {
        let mut r = rng::stream(seed, rng::domain::PERMUTATION, u64::MAX);
        rand::seq::index::sample(&mut r, n, MEDIAN_SUBSAMPLE).into_vec()
    } else {
        (0..n).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(sq_dist(&points[i * m..(i + 1) * m], &points[j * m..(j + 1) * m]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, v, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *v
}

fn kernel_mean(a: &[f64], b: &[f64], m: usize, inv2h2: f64) -> f64 {
    let na = a.len() / m;
    let nb = b.len() / m;
    let total: f64 = a
        .par_chunks(m)
        .with_min_len(64)
        .map(|x| b.chunks(m).map(|y| (-sq_dist(x, y) * inv2h2).exp()).sum::<f64>())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / (na * nb) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MmdResult {
    /// Biased V-statistic estimate of the squared discrepancy, clamped at 0.
    pub mmd: f64,
    /// `sqrt(mmd)`, in the units of the kernel feature norm.
    pub mmd_root: f64,
    pub bandwidth: f64,
}

/// Gaussian-kernel MMD between row-major point sets. The default bandwidth
/// is the median pairwise distance of `X ∪ Y`.
pub fn mmd(x: &[f64], y: &[f64], m: usize, bandwidth: Option<f64>) -> Result<MmdResult> {
    if x.len() / m < 2 || y.len() / m < 2 || x.len() % m != 0 || y.len() % m != 0 {
        return invalid("MMD needs at least two points per set");
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("MMD input contains non-finite points".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return invalid(format!("bandwidth must be positive, got {h}")),
        None => {
            let mut both = x.to_vec();
            both.extend_from_slice(y);
            median_pairwise_distance(&both, m, 0).max(BANDWIDTH_FLOOR)
        }
    };
    let g = 1.0 / (2.0 * h * h);
    let v = kernel_mean(x, x, m, g) + kernel_mean(y, y, m, g) - 2.0 * kernel_mean(x, y, m, g);
    let sq = v.max(0.0);
    Ok(MmdResult { mmd: sq, mmd_root: sq.sqrt(), bandwidth: h })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null_quantile_95: f64,
    pub p_value: f64,
}

/// Permutation null for the MMD at a fixed bandwidth.
pub fn mmd_permutation_test(x: &[f64], y: &[f64], m: usize, n_perm: usize, seed: u64, bandwidth: Option<f64>) -> Result<PermutationTest> {
    let base = mmd(x, y, m, bandwidth)?;
    let nx = x.len() / m;
    let mut pooled = x.to_vec();
    pooled.extend_from_slice(y);
    let n = pooled.len() / m;
    let mut null = Vec::with_capacity(n_perm);
    for p in 0..n_perm {
        let mut r = rng::stream(seed, rng::domain::PERMUTATION, p as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        let a: Vec<f64> = idx[..nx].iter().flat_map(|&i| pooled[i * m..(i + 1) * m].to_vec()).collect();
        let b: Vec<f64> = idx[nx..].iter().flat_map(|&i| pooled[i * m..(i + 1) * m].to_vec()).collect();
        null.push(mmd(&a, &b, m, Some(base.bandwidth))?.mmd);
    }
    let exceed = null.iter().filter(|&&v| v >= base.mmd).count();
    null.sort_by(f64::total_cmp);
    let q = null[((0.95 * n_perm as f64).ceil() as usize).clamp(1, n_perm) - 1];
    Ok(PermutationTest { statistic: base.mmd, null_quantile_95: q, p_value: (exceed + 1) as f64 / (n_perm + 1) as f64 })
}

/// Exact Wasserstein-1 between two 1D empirical distributions of possibly
/// different sizes, by aligning their quantile functions.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    total
}

pub fn random_directions(n: usize, m: usize, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for p in 0..n {
        let mut r = rng::stream(seed, rng::domain::PROJECTION, p as u64);
        let v: Vec<f64> = (0..m).map(|_| rng::standard_normal(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

/// Mean 1D Wasserstein-1 over the given unit directions (`n_dir × m`).
pub fn sliced_wasserstein_along(x: &[f64], y: &[f64], m: usize, dirs: &[f64]) -> Result<f64> {
    if dirs.is_empty() || dirs.len() % m != 0 {
        return invalid("need at least one projection direction");
    }
    if x.is_empty() || y.is_empty() {
        return invalid("sliced Wasserstein needs non-empty sets");
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sliced Wasserstein input contains non-finite points".into()));
    }
    let proj = |pts: &[f64], d: &[f64]| -> Vec<f64> { pts.chunks(m).map(|p| p.iter().zip(d).map(|(a, b)| a * b).sum()).collect() };
    let total: f64 = dirs
        .chunks(m)
        .map(|d| wasserstein_1d(&mut proj(x, d), &mut proj(y, d)))
        .sum();
    Ok(total / (dirs.len() / m) as f64)
}

pub fn sliced_wasserstein(x: &[f64], y: &[f64], m: usize, n_proj: usize, seed: u64) -> Result<f64> {
    if n_proj < 1 {
        return invalid("need at least one projection");
    }
    sliced_wasserstein_along(x, y, m, &random_directions(n_proj, m, seed))
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCoverage {
    pub covered: usize,
    pub n_modes: usize,
    /// Fraction of samples within the radius of each mode.
    pub fractions: Vec<f64>,
}

/// A mode is covered when at least `min_fraction` of the samples lie within
/// `radius` of its mean.
pub fn mode_coverage(samples: &[f64], m: usize, means: &[Vec<f64>], radius: f64, min_fraction: f64) -> ModeCoverage {
    let n = (samples.len() / m) as f64;
    let fractions: Vec<f64> = means
        .iter()
        .map(|mu| samples.chunks(m).filter(|p| sq_dist(p, mu) <= radius * radius).count() as f64 / n)
        .collect();
    let covered = fractions.iter().filter(|&&f| f >= min_fraction).count();
    ModeCoverage { covered, n_modes: means.len(), fractions }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub n_projections: usize,
    pub bandwidth: Option<f64>,
    /// Component std of a Gmm8 target; enables mode coverage.
    pub gmm8_std: Option<f64>,
    pub coverage_radius_std: f64,
    pub coverage_min_fraction: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            n_projections: 64,
            bandwidth: None,
            gmm8_std: None,
            coverage_radius_std: 3.0,
            coverage_min_fraction: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub n_truth: usize,
    pub mmd: f64,
    pub mmd_bandwidth: f64,
    /// MMD between prior draws and the truth at the same bandwidth.
    pub mmd_prior_baseline: f64,
    pub sliced_wasserstein: f64,
    pub n_projections: usize,
    pub mode_coverage: Option<usize>,
    pub n_modes: Option<usize>,
    pub seed: u64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "n_samples,n_truth,mmd,mmd_bandwidth,mmd_prior_baseline,sliced_wasserstein,n_projections,mode_coverage,n_modes,seed";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{}",
            self.n_samples,
            self.n_truth,
            self.mmd,
            self.mmd_bandwidth,
            self.mmd_prior_baseline,
            self.sliced_wasserstein,
            self.n_projections,
            opt(self.mode_coverage),
            opt(self.n_modes),
            self.seed
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// Nested JSON with the producing configuration echoed alongside.
    pub fn to_json(&self, config: &serde_json::Value) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "metrics": self, "config": config }))?)
    }
}

pub fn assemble_report(samples: &[f64], truth: &[f64], m: usize, prior: &PriorKind, config: &MetricConfig) -> Result<MetricsReport> {
    let main = mmd(samples, truth, m, config.bandwidth)?;
    let n = samples.len() / m;
    let mut draws = vec![0.0; n * m];
    for (i, p) in draws.chunks_mut(m).enumerate() {
        let mut r = rng::stream(config.seed, rng::domain::PRIOR, i as u64);
        match prior {
            PriorKind::StandardNormal => p.iter_mut().for_each(|v| *v = rng::standard_normal(&mut r)),
            PriorKind::Isotropic { std } => p.iter_mut().for_each(|v| *v = std * rng::standard_normal(&mut r)),
            PriorKind::Empirical { dim, points } => {
                let k = r.random_range(0..points.len() / dim);
                p.copy_from_slice(&points[k * dim..(k + 1) * dim]);
            }
        }
    }
    let baseline = mmd(&draws, truth, m, Some(main.bandwidth))?;
    let sw = sliced_wasserstein(samples, truth, m, config.n_projections, config.seed)?;
    let coverage = match config.gmm8_std {
        Some(std) if m == 2 => Some(mode_coverage(
            samples,
            2,
            &gmm8_means(),
            config.coverage_radius_std * std,
            config.coverage_min_fraction,
        )),
        _ => None,
    };
    Ok(MetricsReport {
        n_samples: n,
        n_truth: truth.len() / m,
        mmd: main.mmd,
        mmd_bandwidth: main.bandwidth,
        mmd_prior_baseline: baseline.mmd,
        sliced_wasserstein: sw,
        n_projections: config.n_projections,
        mode_coverage: coverage.as_ref().map(|c| c.covered),
        n_modes: coverage.as_ref().map(|c| c.n_modes),
        seed: config.seed,
    })
}
