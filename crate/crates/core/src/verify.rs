//! Bundled verification suites. Each returns a table of named checks with
//! fixed tolerances; every value is a pure function of the configured seed.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Bandwidth, ConditionalEstimator};
use crate::linalg;
use crate::linear_score::{
    covering_identity_check, fokker_planck_score_oracle, mixture_marginal_score, score_linear, skorokhod_linear,
    stochastic_convolution, LinearScoreField, MomentSource, PointMassMean,
};
use crate::mixture::GaussianMixturePrior;
use crate::nonlinear::{dgamma_malliavin, skorokhod_ensemble, skorokhod_nonlinear, PathTracks};
use crate::rng::{self, coarsen_increments, BrownianStore};
use crate::schedule::Schedule;
use crate::sde::{simulate_path, InitialLaw, SdeSpec, TimeGrid};
use crate::variation::{
    closed_form_gamma, closed_form_gamma_inv, closed_form_y, fit_singularity_slope, gamma_from_derivative, linear_fit,
    linear_track, log_spaced, malliavin_derivative, malliavin_matrix, regularized_inverse, Regularization,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    LinearEquivalence,
    Covering,
    Lemma35,
    Singularity,
    Nonlinear,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::LinearEquivalence, Suite::Covering, Suite::Lemma35, Suite::Singularity, Suite::Nonlinear];

    pub fn name(self) -> &'static str {
        match self {
            Suite::LinearEquivalence => "linear-equivalence",
            Suite::Covering => "covering",
            Suite::Lemma35 => "lemma35",
            Suite::Singularity => "singularity",
            Suite::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub check: String,
    pub value: f64,
    /// Human-readable acceptance rule, empty for informational rows.
    pub criterion: String,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { check: name.into(), value, criterion: format!("<= {limit:e}"), pass: value <= limit }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { check: name.into(), value, criterion: format!(">= {limit}"), pass: value >= limit }
    }

    pub fn within(name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Check { check: name.into(), value, criterion: format!("{target} +/- {tol}"), pass: (value - target).abs() <= tol }
    }

    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Check { check: name.into(), value, criterion: String::new(), pass: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub rows: Vec<Check>,
}

impl SuiteReport {
    pub const CSV_HEADER: &'static str = "suite,check,value,criterion,pass";

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.16e},{},{}\n", self.suite, r.check, r.value, r.criterion, r.pass));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub lemma_paths: usize,
    pub bismut_paths: usize,
    pub bump_checks: usize,
    pub symmetry_paths: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { seed: 0, lemma_paths: 1000, bismut_paths: 100_000, bump_checks: 24, symmetry_paths: 20_000 }
    }
}

pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> Result<SuiteReport> {
    let rows = match suite {
        Suite::LinearEquivalence => linear_equivalence(cfg)?,
        Suite::Covering => covering(cfg)?,
        Suite::Lemma35 => lemma35(cfg)?,
        Suite::Singularity => singularity()?,
        Suite::Nonlinear => nonlinear(cfg)?,
    };
    Ok(SuiteReport { suite, rows })
}

/// VE(0.01, 50), VP and sub-VP with constant β = 0.1, all on `[0, 1]`.
pub fn reference_schedules() -> Result<Vec<(&'static str, Schedule)>> {
    Ok(vec![
        ("ve", Schedule::ve(0.01, 50.0, 1.0)?),
        ("vp", Schedule::vp_constant(0.1, 1.0)?),
        ("subvp", Schedule::sub_vp_constant(0.1, 1.0)?),
    ])
}

/// `|a - b| / |b|`, or `|a|` when the reference is exactly zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

pub const EQUIVALENCE_TIMES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
pub const EQUIVALENCE_STARTS: [f64; 3] = [-1.0, 0.0, 1.0];

pub fn equivalence_states() -> Vec<f64> {
    (0..9).map(|i| -2.0 + 0.5 * i as f64).collect()
}

/// Largest relative deviation from the Fokker–Planck score over the
/// reference grid of starts, times and states.
pub fn equivalence_error(schedule: &Schedule, moments: impl Fn(&SdeSpec) -> Result<MomentSource>, reg: Regularization) -> Result<f64> {
    let spec = SdeSpec::new(schedule.clone(), 1)?;
    let mut worst = 0.0f64;
    for &x0 in &EQUIVALENCE_STARTS {
        let field = LinearScoreField::new(&spec, moments(&spec)?, Arc::new(PointMassMean { x0: vec![x0] }))?.with_regularization(reg);
        for &t in &EQUIVALENCE_TIMES {
            for y in equivalence_states() {
                let s = score_linear(&field, t, &[y])?[0];
                let fp = fokker_planck_score_oracle(schedule, t, &[y], &[x0])?[0];
                worst = worst.max(relative_error(s, fp));
            }
        }
    }
    Ok(worst)
}

/// Relative error of quadrature `γ` and `γ⁻¹` against the closed forms at `t`.
pub fn gamma_quadrature_error(schedule: &Schedule, n_steps: usize, t: f64) -> Result<f64> {
    let spec = SdeSpec::new(schedule.clone(), 1)?;
    let horizon = schedule.horizon().unwrap_or(1.0);
    let grid = TimeGrid::new(0.0, horizon, n_steps)?;
    let mom = MomentSource::quadrature(&spec, &grid)?.at(t)?;
    let g = mom.gamma[0];
    let ginv = regularized_inverse(&mom.gamma, 1, Regularization::Fixed { epsilon: 0.0 })?[0];
    let eg = relative_error(g, closed_form_gamma(schedule, t, 1)?[0]);
    let ei = relative_error(ginv, closed_form_gamma_inv(schedule, t, 1)?[0]);
    Ok(eg.max(ei))
}

pub const ORDER_STEPS: [usize; 4] = [100, 200, 400, 800];

fn linear_equivalence(_cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rows = Vec::new();
    let exact = Regularization::Fixed { epsilon: 0.0 };
    for (name, sch) in reference_schedules()? {
        let e = equivalence_error(&sch, MomentSource::closed_form, Regularization::Default)?;
        rows.push(Check::at_most(format!("{name}/closed_form_max_rel_err"), e, 1e-6));
        let horizon = sch.horizon().unwrap_or(1.0);
        let grid = TimeGrid::new(0.0, horizon, 10_000)?;
        let e = equivalence_error(&sch, |s| MomentSource::quadrature(s, &grid), exact)?;
        rows.push(Check::at_most(format!("{name}/quadrature_max_rel_err"), e, 1e-2));
        for t in [0.25, 0.5, 1.0] {
            let e = gamma_quadrature_error(&sch, 10_000, t)?;
            rows.push(Check::at_most(format!("{name}/gamma_rel_err/t={t}"), e, 1e-3));
        }
        let errs: Vec<f64> = ORDER_STEPS.iter().map(|&n| gamma_quadrature_error(&sch, n, 1.0)).collect::<Result<_>>()?;
        let dts: Vec<f64> = ORDER_STEPS.iter().map(|&n| (horizon / n as f64).ln()).collect();
        let fit = linear_fit(&dts, &errs.iter().map(|e| e.ln()).collect::<Vec<_>>());
        rows.push(Check::at_least(format!("{name}/gamma_order"), fit.slope, 0.9));
    }
    Ok(rows)
}

/// Stable random drift `-(G Gᵀ/m + 0.2 I) + S` with skew `S`, and a random
/// diffusion matrix, both from the given seed.
pub fn random_linear_spec(m: usize, seed: u64) -> Result<SdeSpec> {
    let mut r = rng::stream(seed, rng::domain::VERIFY, m as u64);
    let g: Vec<f64> = (0..m * m).map(|_| rng::standard_normal(&mut r)).collect();
    let s: Vec<f64> = (0..m * m).map(|_| 0.3 * rng::standard_normal(&mut r)).collect();
    let mut drift = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let ggt: f64 = (0..m).map(|k| g[i * m + k] * g[j * m + k]).sum();
            drift[i][j] = -ggt / m as f64 + s[i * m + j] - s[j * m + i];
        }
        drift[i][i] -= 0.2;
    }
    let diffusion = (0..m).map(|_| (0..m).map(|_| rng::standard_normal(&mut r)).collect()).collect();
    SdeSpec::new(Schedule::const_linear(drift, diffusion)?, m)
}

fn covering_rows(name: &str, spec: &SdeSpec, grid: &TimeGrid) -> Result<Vec<Check>> {
    let m = spec.dim();
    let n = grid.n_steps;
    let track = linear_track(spec, grid)?;
    let mm = covering_identity_check(spec, grid, &track, n)?;
    let id = linalg::identity(m);
    let gamma = malliavin_matrix(spec, grid, &track);
    let direct = gamma_from_derivative(&malliavin_derivative(spec, grid, &track, n), m, spec.noise_dim(), grid.dt());
    let scale = linalg::max_abs(gamma.at(n)).max(f64::MIN_POSITIVE);
    Ok(vec![
        Check::at_most(format!("{name}/covering_max_abs_err"), linalg::max_abs_diff(&mm, &id), 1e-10),
        Check::at_most(format!("{name}/gamma_vs_direct_rel"), linalg::max_abs_diff(&direct, gamma.at(n)) / scale, 1e-12),
        Check::at_most(format!("{name}/reorthogonality"), track.reorthogonality_error(), 1e-8),
    ])
}

fn covering(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let grid = TimeGrid::new(0.0, 1.0, 1000)?;
    let mut rows = covering_rows("m=1", &SdeSpec::new(Schedule::vp_constant(0.1, 1.0)?, 1)?, &grid)?;
    let diag = Schedule::const_linear(vec![vec![-0.1, 0.0], vec![0.0, -0.2]], vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    rows.extend(covering_rows("m=2", &SdeSpec::new(diag, 2)?, &grid)?);
    rows.extend(covering_rows("m=3", &random_linear_spec(3, cfg.seed)?, &grid)?);
    Ok(rows)
}

/// RMS over paths of `Y_T ∫ Y⁻¹σ dB - (X_T - Y_T x0)` for each step count,
/// all grids driven by the same coarsened Brownian paths.
pub fn lemma35_residuals(spec: &SdeSpec, x0: &[f64], horizon: f64, steps: &[usize], n_paths: usize, seed: u64) -> Result<Vec<f64>> {
    let (m, d) = (spec.dim(), spec.noise_dim());
    let finest = *steps.iter().max().ok_or_else(|| Error::InvalidParameter("no step counts".into()))?;
    let fine = TimeGrid::new(0.0, horizon, finest)?;
    steps
        .iter()
        .map(|&n| {
            if finest % n != 0 {
                return Err(Error::InvalidParameter(format!("{n} steps do not divide {finest}")));
            }
            let grid = TimeGrid::new(0.0, horizon, n)?;
            let track = linear_track(spec, &grid)?;
            let yt = track.y_at(n);
            let sq: f64 = (0..n_paths)
                .into_par_iter()
                .map(|i| {
                    let dw = coarsen_increments(&BrownianStore::new(seed, i as u64, &fine, d).increments(), d, finest / n);
                    let mut x = vec![0.0; grid.n_nodes() * m];
                    x[..m].copy_from_slice(x0);
                    simulate_path(spec, &grid, &dw, &mut x);
                    let xi = stochastic_convolution(spec, &grid, &track, &dw, n);
                    let mut a = vec![0.0; m];
                    linalg::matvec(yt, &xi, &mut a, m, m);
                    let mut b = vec![0.0; m];
                    linalg::matvec(yt, x0, &mut b, m, m);
                    (0..m).map(|j| (a[j] - (x[n * m + j] - b[j])).powi(2)).sum::<f64>()
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            Ok((sq / n_paths as f64).sqrt())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BismutPoint {
    pub y: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub exact: f64,
}

/// Kernel-conditioned `-E[δ(u) | X_T = y]` for VP with constant β = 0.1 and
/// data `N(0, 1)`, with `δ(u)` from the Itô form of each path.
pub fn bismut_linear_vp(n_paths: usize, seed: u64, ys: &[f64]) -> Result<Vec<BismutPoint>> {
    let spec = SdeSpec::new(Schedule::vp_constant(0.1, 1.0)?, 1)?;
    let grid = TimeGrid::new(0.0, 1.0, 1000)?;
    let prior = GaussianMixturePrior::gaussian(vec![0.0], vec![1.0])?;
    let init = InitialLaw::Mixture { prior: prior.clone() };
    let track = linear_track(&spec, &grid)?;
    let gamma = malliavin_matrix(&spec, &grid, &track);
    let n = grid.n_steps;
    let pairs: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || vec![0.0; grid.n_nodes()],
            |x, i| {
                init.sample(seed, i as u64, &mut x[..1]);
                let dw = BrownianStore::new(seed, i as u64, &grid, 1).increments();
                simulate_path(&spec, &grid, &dw, x);
                let s = skorokhod_linear(&spec, &grid, &track, &gamma, x, &dw, n, Regularization::Fixed { epsilon: 0.0 })?;
                Ok((x[n], s.ito_form[0]))
            },
        )
        .collect::<Result<_>>()?;
    let (xs, deltas): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let est = ConditionalEstimator { bandwidth: Bandwidth::Fixed { h: vec![0.02] }, seed, ..Default::default() };
    let queries: Vec<Vec<f64>> = ys.iter().map(|&y| vec![y]).collect();
    let yt = closed_form_y(spec.schedule(), 1.0, 1)?;
    let gt = closed_form_gamma(spec.schedule(), 1.0, 1)?;
    est.estimate(&xs, 1, &deltas, 1, &queries)?
        .into_iter()
        .zip(ys)
        .map(|(e, &y)| {
            Ok(BismutPoint { y, estimate: -e.value[0], std_error: e.std_error[0], exact: mixture_marginal_score(&prior, &[y], &yt, &gt)?[0] })
        })
        .collect()
}

fn lemma35(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let spec = SdeSpec::new(Schedule::vp_constant(0.1, 1.0)?, 1)?;
    let rms = lemma35_residuals(&spec, &[1.0], 1.0, &ORDER_STEPS, cfg.lemma_paths, cfg.seed)?;
    let mut rows: Vec<Check> = ORDER_STEPS.iter().zip(&rms).map(|(n, r)| Check::info(format!("rms_residual/dt={}", 1.0 / *n as f64), *r)).collect();
    let ldt: Vec<f64> = ORDER_STEPS.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let fit = linear_fit(&ldt, &rms.iter().map(|r| r.ln()).collect::<Vec<_>>());
    rows.push(Check::at_least("residual_order", fit.slope, 0.9));
    rows.push(Check::at_most("rms_residual_finest", rms[rms.len() - 1], 5e-2));
    for p in bismut_linear_vp(cfg.bismut_paths, cfg.seed, &[-1.0, 0.0, 1.0])? {
        rows.push(Check::at_most(
            format!("bismut_gap_in_se/y={}", p.y),
            (p.estimate - p.exact).abs() / p.std_error,
            3.0,
        ));
    }
    Ok(rows)
}

pub const SINGULARITY_TARGETS: [f64; 3] = [-1.0, -1.0, -2.0];

fn singularity() -> Result<Vec<Check>> {
    let ts = log_spaced(1e-4, 1e-2, 20);
    let mut rows = Vec::new();
    for ((name, sch), target) in reference_schedules()?.into_iter().zip(SINGULARITY_TARGETS) {
        let fit = fit_singularity_slope(&sch, &ts)?;
        rows.push(Check::within(format!("{name}/slope"), fit.slope, target, 0.05));
        rows.push(Check::at_least(format!("{name}/r2"), fit.r2, 0.999));
    }
    Ok(rows)
}

/// Relative gap between the analytic `D_tγ` and a central difference of
/// `γ_T` under a bump of one Brownian increment.
pub fn bump_check(spec: &SdeSpec, grid: &TimeGrid, x0: &[f64], dw: &[f64], step: usize, h: f64) -> Result<Option<(f64, f64)>> {
    if spec.dim() != 1 || spec.noise_dim() != 1 {
        return Err(Error::Unsupported("bump check is scalar".into()));
    }
    let Some(base) = PathTracks::build(spec, grid, x0, dw)? else { return Ok(None) };
    let analytic = dgamma_malliavin(&base, step + 1)?[0];
    let mut up = dw.to_vec();
    up[step] += h;
    let mut down = dw.to_vec();
    down[step] -= h;
    let (Some(a), Some(b)) = (PathTracks::build(spec, grid, x0, &up)?, PathTracks::build(spec, grid, x0, &down)?) else {
        return Ok(None);
    };
    Ok(Some((analytic, (a.gamma[0] - b.gamma[0]) / (2.0 * h))))
}

fn nonlinear(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rows = Vec::new();
    let cubic = SdeSpec::cubic(1.0)?;
    let grid = TimeGrid::new(0.0, 1.0, 1000)?;
    let mut r = rng::stream(cfg.seed, rng::domain::VERIFY, 100);
    let mut worst = 0.0f64;
    for j in 0..cfg.bump_checks {
        let path = r.random_range(0..1_000_000u64);
        let step = r.random_range(0..grid.n_steps - 1);
        let dw = BrownianStore::new(cfg.seed, path, &grid, 1).increments();
        let (a, fd) = bump_check(&cubic, &grid, &[0.0], &dw, step, 1e-3)?
            .ok_or_else(|| Error::Numeric(format!("bump path {path} diverged")))?;
        let e = relative_error(a, fd);
        worst = worst.max(e);
        rows.push(Check::at_most(format!("bump_rel_err/{j}/path={path}/step={step}"), e, 5e-2));
    }
    rows.push(Check::info("bump_rel_err_max", worst));

    let vp = SdeSpec::new(Schedule::vp_constant(0.1, 1.0)?, 1)?;
    let track = linear_track(&vp, &grid)?;
    let gamma = malliavin_matrix(&vp, &grid, &track);
    let init = InitialLaw::Mixture { prior: GaussianMixturePrior::gaussian(vec![0.0], vec![1.0])? };
    let mut gap = 0.0f64;
    for i in 0..200u64 {
        let dw = BrownianStore::new(cfg.seed, i, &grid, 1).increments();
        let mut x0 = [0.0];
        init.sample(cfg.seed, i, &mut x0);
        let tracks = PathTracks::build(&vp, &grid, &x0, &dw)?.ok_or_else(|| Error::Numeric("linear path diverged".into()))?;
        let full = skorokhod_nonlinear(&tracks, &dw, Regularization::Fixed { epsilon: 0.0 }, i as usize)?;
        let lin = skorokhod_linear(&vp, &grid, &track, &gamma, &tracks.x, &dw, grid.n_steps, Regularization::Fixed { epsilon: 0.0 })?;
        gap = gap.max((full.delta[0] - lin.ito_form[0]).abs() / lin.ito_form[0].abs().max(1.0));
    }
    rows.push(Check::at_most("linear_reduction_max_rel_gap", gap, 1e-10));

    let set = skorokhod_ensemble(&cubic, &grid, &InitialLaw::point(vec![0.0]), cfg.symmetry_paths, cfg.seed, Regularization::Default)?;
    let deltas: Vec<f64> = set.valid().map(|s| s.delta[0]).collect();
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    rows.push(Check::at_most("zero_mean_in_se", mean.abs() / (var / n).sqrt(), 4.0));
    let est = ConditionalEstimator { seed: cfg.seed, ..Default::default() };
    let q = crate::kernel::conditional_score(&set, &[vec![0.0], vec![-0.5], vec![0.5]], &est)?;
    rows.push(Check::at_most("score_at_zero_in_se", q[0].value[0].abs() / q[0].std_error[0], 3.0));
    let combined = (q[1].std_error[0].powi(2) + q[2].std_error[0].powi(2)).sqrt();
    rows.push(Check::at_most("antisymmetry_at_0.5_in_se", (q[1].value[0] + q[2].value[0]).abs() / combined, 2.0));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn csv_has_one_row_per_check() {
        let rep = SuiteReport { suite: Suite::Covering, rows: vec![Check::at_most("a", 1.0, 2.0), Check::at_least("b", 1.0, 2.0)] };
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(!rep.passed());
        assert_eq!(rep.failures().count(), 1);
    }

    #[test]
    fn nan_never_passes() {
        assert!(!Check::at_most("x", f64::NAN, 1.0).pass);
        assert!(!Check::at_least("x", f64::NAN, 1.0).pass);
        assert!(!Check::within("x", f64::NAN, 1.0, 1.0).pass);
    }
}
