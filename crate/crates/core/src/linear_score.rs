//! Score of linear SDEs with additive noise:
//! `∇log p_t(y) = -γ_t⁻¹ (y - Y_t E[X_0 | X_t = y])`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::field::ScoreField;
use crate::linalg;
use crate::mixture::GaussianMixturePrior;
use crate::schedule::Schedule;
use crate::sde::{SdeSpec, TimeGrid};
use crate::variation::{
    closed_form_gamma, closed_form_y, linear_track, malliavin_derivative, malliavin_matrix,
    regularized_inverse, MalliavinMatrix, Regularization, VariationTrack,
};

pub const DEFAULT_T_FLOOR: f64 = 1e-3;

/// `Y_t` and `γ_t` at one time.
#[derive(Clone, Debug)]
pub struct Moments {
    pub y: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Where `Y_t` and `γ_t` come from.
#[derive(Clone, Debug)]
pub enum MomentSource {
    ClosedForm { schedule: Schedule, m: usize },
    /// Quadrature on a grid, looked up at the nearest node.
    Tabulated { grid: TimeGrid, m: usize, y: Vec<f64>, gamma: Vec<f64> },
}

impl MomentSource {
    pub fn closed_form(spec: &SdeSpec) -> Result<Self> {
        if !spec.schedule().is_isotropic() {
            return Err(Error::Unsupported(format!(
                "no closed-form moments for {}",
                spec.schedule().name()
            )));
        }
        Ok(MomentSource::ClosedForm { schedule: spec.schedule().clone(), m: spec.dim() })
    }

    pub fn quadrature(spec: &SdeSpec, grid: &TimeGrid) -> Result<Self> {
        spec.check_grid(grid)?;
        let track = linear_track(spec, grid)?;
        let mm = malliavin_matrix(spec, grid, &track);
        Ok(MomentSource::Tabulated { grid: *grid, m: spec.dim(), y: track.y, gamma: mm.gamma })
    }

    pub fn dim(&self) -> usize {
        match self {
            MomentSource::ClosedForm { m, .. } | MomentSource::Tabulated { m, .. } => *m,
        }
    }

    pub fn at(&self, t: f64) -> Result<Moments> {
        match self {
            MomentSource::ClosedForm { schedule, m } => {
                if !(t > 0.0) {
                    return Err(Error::Singular(format!("γ_t is singular at t = {t}")));
                }
                Ok(Moments { y: closed_form_y(schedule, t, *m)?, gamma: closed_form_gamma(schedule, t, *m)? })
            }
            MomentSource::Tabulated { grid, .. } => self.at_step(grid.nearest_index(t)),
        }
    }

    /// Moments at grid node `k`; node 0 is rejected.
    pub fn at_step(&self, k: usize) -> Result<Moments> {
        match self {
            MomentSource::ClosedForm { .. } => invalid("closed-form moments are indexed by time"),
            MomentSource::Tabulated { grid, m, y, gamma } => {
                if k == 0 {
                    return Err(Error::Singular("γ vanishes at the first grid node".into()));
                }
                if k > grid.n_steps {
                    return invalid(format!("step {k} is past the grid end"));
                }
                let s = m * m;
                Ok(Moments { y: y[k * s..(k + 1) * s].to_vec(), gamma: gamma[k * s..(k + 1) * s].to_vec() })
            }
        }
    }
}

/// Provider of `E[X_0 | X_t = y]`.
pub trait PosteriorMean: Send + Sync {
    fn dim(&self) -> usize;

    fn posterior_mean(&self, t: f64, y: &[f64], moments: &Moments, out: &mut [f64]) -> Result<()>;

    fn posterior_mean_batch(&self, t: f64, ys: &[f64], moments: &Moments, out: &mut [f64]) -> Result<()> {
        let m = self.dim();
        for (y, o) in ys.chunks(m).zip(out.chunks_mut(m)) {
            self.posterior_mean(t, y, moments, o)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PointMassMean {
    pub x0: Vec<f64>,
}

impl PosteriorMean for PointMassMean {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn posterior_mean(&self, _t: f64, _y: &[f64], _moments: &Moments, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.x0);
        Ok(())
    }
}

/// Exact conditional mean under a Gaussian-mixture initial law.
#[derive(Debug)]
pub struct ExactGaussianMean {
    pub prior: GaussianMixturePrior,
    degenerate: AtomicUsize,
}

impl ExactGaussianMean {
    pub fn new(prior: GaussianMixturePrior) -> Self {
        ExactGaussianMean { prior, degenerate: AtomicUsize::new(0) }
    }

    /// Number of queries where every responsibility underflowed.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.load(Ordering::Relaxed)
    }
}

impl PosteriorMean for ExactGaussianMean {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn posterior_mean(&self, _t: f64, y: &[f64], moments: &Moments, out: &mut [f64]) -> Result<()> {
        let post = exact_gaussian_posterior(&self.prior, y, &moments.y, &moments.gamma)?;
        if post.degenerate {
            self.degenerate.fetch_add(1, Ordering::Relaxed);
        }
        out.copy_from_slice(&post.mean);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    /// Posterior component weights.
    pub responsibilities: Vec<f64>,
    pub degenerate: bool,
}

struct ComponentTerms {
    log_lik: f64,
    /// `C⁻¹ (y - Y μ)`.
    precision_residual: Vec<f64>,
}

fn component_terms(prior: &GaussianMixturePrior, i: usize, y: &[f64], yt: &[f64], gamma: &[f64]) -> Result<ComponentTerms> {
    let m = prior.dim();
    let mu = &prior.means[i];
    let sig = &prior.covariances[i];
    let mut tmp = vec![0.0; m * m];
    let mut cov = vec![0.0; m * m];
    linalg::matmul(yt, sig, &mut tmp, m, m, m);
    linalg::matmul_bt(&tmp, yt, &mut cov, m, m, m);
    for (c, g) in cov.iter_mut().zip(gamma) {
        *c += g;
    }
    linalg::symmetrize(&mut cov, m);
    let (logdet, cinv) = linalg::spd_logdet_inverse(&cov, m)
        .ok_or_else(|| Error::Singular("marginal covariance is not positive definite".into()))?;
    let mut mean = vec![0.0; m];
    linalg::matvec(yt, mu, &mut mean, m, m);
    let resid: Vec<f64> = y.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let mut pr = vec![0.0; m];
    linalg::matvec(&cinv, &resid, &mut pr, m, m);
    let quad: f64 = resid.iter().zip(&pr).map(|(a, b)| a * b).sum();
    let log_lik = prior.weights[i].ln()
        - 0.5 * (quad + logdet + m as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(ComponentTerms { log_lik, precision_residual: pr })
}

fn responsibilities(terms: &[ComponentTerms]) -> (Vec<f64>, bool) {
    let max = terms.iter().map(|c| c.log_lik).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (vec![0.0; terms.len()], true);
    }
    let w: Vec<f64> = terms.iter().map(|c| (c.log_lik - max).exp()).collect();
    let total: f64 = w.iter().sum();
    (w.into_iter().map(|v| v / total).collect(), false)
}

/// `E[X_0 | X_t = y]` when `X_0` is a Gaussian mixture, so that `X_t` is the
/// mixture `N(Y_t μ_i, Y_t Σ_i Y_tᵀ + γ_t)`.
pub fn exact_gaussian_posterior(
    prior: &GaussianMixturePrior,
    y: &[f64],
    yt: &[f64],
    gamma: &[f64],
) -> Result<GaussianPosterior> {
    let m = prior.dim();
    if y.len() != m || yt.len() != m * m || gamma.len() != m * m {
        return invalid("posterior inputs have inconsistent dimensions");
    }
    let terms = (0..prior.n_components())
        .map(|i| component_terms(prior, i, y, yt, gamma))
        .collect::<Result<Vec<_>>>()?;
    let (mut resp, degenerate) = responsibilities(&terms);
    if degenerate {
        let best = terms
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.log_lik.total_cmp(&b.1.log_lik))
            .map(|(i, _)| i)
            .unwrap_or(0);
        resp[best] = 1.0;
    }
    let mut mean = vec![0.0; m];
    let mut sy = vec![0.0; m * m];
    let mut shift = vec![0.0; m];
    for (i, c) in terms.iter().enumerate() {
        if resp[i] == 0.0 {
            continue;
        }
        // μ_i + Σ_i Y_tᵀ C_i⁻¹ (y - Y_t μ_i)
        linalg::matmul_bt(&prior.covariances[i], yt, &mut sy, m, m, m);
        linalg::matvec(&sy, &c.precision_residual, &mut shift, m, m);
        for j in 0..m {
            mean[j] += resp[i] * (prior.means[i][j] + shift[j]);
        }
    }
    Ok(GaussianPosterior { mean, responsibilities: resp, degenerate })
}

/// `∇ log Σ_i w_i N(y; Y_t μ_i, Y_t Σ_i Y_tᵀ + γ_t)`.
pub fn mixture_marginal_score(prior: &GaussianMixturePrior, y: &[f64], yt: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    let m = prior.dim();
    let terms = (0..prior.n_components())
        .map(|i| component_terms(prior, i, y, yt, gamma))
        .collect::<Result<Vec<_>>>()?;
    let (resp, degenerate) = responsibilities(&terms);
    if degenerate {
        return Err(Error::Numeric("mixture density underflows at the query point".into()));
    }
    let mut out = vec![0.0; m];
    for (r, c) in resp.iter().zip(&terms) {
        for j in 0..m {
            out[j] -= r * c.precision_residual[j];
        }
    }
    Ok(out)
}

/// Transition score of the isotropic families from the Fokker–Planck
/// solutions, for a point initial condition `x`.
pub fn fokker_planck_score_oracle(schedule: &Schedule, t: f64, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Singular(format!("transition density is degenerate at t = {t}")));
    }
    if y.len() != x.len() {
        return invalid("y and x differ in dimension");
    }
    let (a, var) = match *schedule {
        Schedule::Ve { sigma_min, sigma_max, horizon } => {
            (1.0, sigma_min * sigma_min * ((sigma_max / sigma_min).powf(2.0 * t / horizon) - 1.0))
        }
        Schedule::Vp { .. } => {
            let b = schedule.integrated_beta(t).unwrap_or(f64::NAN);
            ((-0.5 * b).exp(), 1.0 - (-b).exp())
        }
        Schedule::SubVp { .. } => {
            let b = schedule.integrated_beta(t).unwrap_or(f64::NAN);
            ((-0.5 * b).exp(), (1.0 - (-b).exp()).powi(2))
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "no Fokker–Planck oracle for {}",
                schedule.name()
            )))
        }
    };
    Ok(y.iter().zip(x).map(|(yi, xi)| -(yi - a * xi) / var).collect())
}

/// Score field of a linear SDE.
#[derive(Clone)]
pub struct LinearScoreField {
    pub moments: MomentSource,
    pub mean: Arc<dyn PosteriorMean>,
    pub regularization: Regularization,
    pub t_floor: f64,
}

impl std::fmt::Debug for LinearScoreField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearScoreField")
            .field("moments", &self.moments)
            .field("regularization", &self.regularization)
            .field("t_floor", &self.t_floor)
            .finish_non_exhaustive()
    }
}

impl LinearScoreField {
    pub fn new(spec: &SdeSpec, moments: MomentSource, mean: Arc<dyn PosteriorMean>) -> Result<Self> {
        if !spec.is_linear() {
            return Err(Error::Unsupported("linear score requires an affine drift".into()));
        }
        if moments.dim() != spec.dim() || mean.dim() != spec.dim() {
            return invalid("score field components disagree on dimension");
        }
        Ok(LinearScoreField { moments, mean, regularization: Regularization::Default, t_floor: DEFAULT_T_FLOOR })
    }

    pub fn with_regularization(mut self, reg: Regularization) -> Self {
        self.regularization = reg;
        self
    }

    pub fn with_t_floor(mut self, t_floor: f64) -> Self {
        self.t_floor = t_floor;
        self
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t > 0.0) {
            return Err(Error::Singular(format!("score is undefined at t = {t}")));
        }
        if t < self.t_floor {
            return invalid(format!("t = {t} is below the floor {}", self.t_floor));
        }
        Ok(())
    }

    fn apply(&self, t: f64, ys: &[f64], mom: &Moments, out: &mut [f64]) -> Result<()> {
        let m = self.moments.dim();
        let ginv = regularized_inverse(&mom.gamma, m, self.regularization)?;
        self.mean.posterior_mean_batch(t, ys, mom, out)?;
        let mut resid = vec![0.0; m];
        let mut ym = vec![0.0; m];
        for (y, o) in ys.chunks(m).zip(out.chunks_mut(m)) {
            linalg::matvec(&mom.y, o, &mut ym, m, m);
            for j in 0..m {
                resid[j] = y[j] - ym[j];
            }
            linalg::matvec(&ginv, &resid, o, m, m);
            for v in o.iter_mut() {
                *v = -*v;
            }
        }
        Ok(())
    }

    /// Integer-step evaluation on a tabulated source, starting at `k = 1`.
    pub fn score_at_step(&self, k: usize, y: &[f64], out: &mut [f64]) -> Result<()> {
        let mom = self.moments.at_step(k)?;
        let t = match &self.moments {
            MomentSource::Tabulated { grid, .. } => grid.time(k),
            MomentSource::ClosedForm { .. } => unreachable!(),
        };
        self.apply(t, y, &mom, out)
    }
}

impl ScoreField for LinearScoreField {
    fn dim(&self) -> usize {
        self.moments.dim()
    }

    fn score(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.score_batch(t, y, out)
    }

    fn score_batch(&self, t: f64, ys: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_time(t)?;
        let mom = self.moments.at(t)?;
        self.apply(t, ys, &mom, out)
    }
}

pub fn score_linear(field: &LinearScoreField, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; y.len()];
    field.score(t, y, &mut out)?;
    Ok(out)
}

/// `M_ik = Σ_t D_t X^i · u_k(t) dt` with `u_k = Σ_j γ⁻¹_{kj} D_t X^j`,
/// `γ` built from the same discrete derivative. Should be the identity.
pub fn covering_identity_check(spec: &SdeSpec, grid: &TimeGrid, track: &VariationTrack, end: usize) -> Result<Vec<f64>> {
    if end == 0 || end > grid.n_steps {
        return invalid(format!("end index {end} is outside the grid"));
    }
    let (m, d) = (spec.dim(), spec.noise_dim());
    let dt = grid.dt();
    let deriv = malliavin_derivative(spec, grid, track, end);
    let gamma = crate::variation::gamma_from_derivative(&deriv, m, d, dt);
    let ginv = regularized_inverse(&gamma, m, Regularization::Fixed { epsilon: 0.0 })?;
    let mut out = vec![0.0; m * m];
    let mut u = vec![0.0; m * d];
    for dj in deriv.chunks(m * d) {
        linalg::matmul(&ginv, dj, &mut u, m, m, d);
        for i in 0..m {
            for k in 0..m {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += dj[i * d + l] * u[k * d + l];
                }
                out[i * m + k] += acc * dt;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearSkorokhod {
    /// `γ⁻¹ Y_T ∫ Y⁻¹ σ dB`.
    pub ito_form: Vec<f64>,
    /// `γ⁻¹ (X_T - Y_T x_0)`.
    pub algebraic_form: Vec<f64>,
}

impl LinearSkorokhod {
    pub fn gap(&self) -> f64 {
        linalg::max_abs_diff(&self.ito_form, &self.algebraic_form)
    }
}

/// `Σ_k Y⁻¹_k σ_k ΔW_k` over the first `end` steps.
pub fn stochastic_convolution(spec: &SdeSpec, grid: &TimeGrid, track: &VariationTrack, dw: &[f64], end: usize) -> Vec<f64> {
    let (m, d) = (spec.dim(), spec.noise_dim());
    let mut sig = vec![0.0; m * d];
    let mut v = vec![0.0; m * d];
    let mut acc = vec![0.0; m];
    let mut inc = vec![0.0; m];
    for k in 0..end {
        spec.diffusion(grid.time(k), &mut sig);
        linalg::matmul(track.yinv_at(k), &sig, &mut v, m, m, d);
        linalg::matvec(&v, &dw[k * d..(k + 1) * d], &mut inc, m, d);
        for j in 0..m {
            acc[j] += inc[j];
        }
    }
    acc
}

/// Both evaluations of `δ(u)` for a linear SDE path (`x` holds all nodes).
pub fn skorokhod_linear(
    spec: &SdeSpec,
    grid: &TimeGrid,
    track: &VariationTrack,
    gamma: &MalliavinMatrix,
    x: &[f64],
    dw: &[f64],
    end: usize,
    reg: Regularization,
) -> Result<LinearSkorokhod> {
    if !spec.is_linear() {
        return Err(Error::Unsupported("linear Skorokhod form requires affine drift".into()));
    }
    let m = spec.dim();
    let g = gamma.at(end);
    if linalg::max_abs(g) == 0.0 {
        return Ok(LinearSkorokhod { ito_form: vec![0.0; m], algebraic_form: vec![0.0; m] });
    }
    let ginv = regularized_inverse(g, m, reg)?;
    let xi = stochastic_convolution(spec, grid, track, dw, end);
    let yt = track.y_at(end);
    let mut a = vec![0.0; m];
    linalg::matvec(yt, &xi, &mut a, m, m);
    let mut ito = vec![0.0; m];
    linalg::matvec(&ginv, &a, &mut ito, m, m);
    let x0 = &x[..m];
    let xt = &x[end * m..(end + 1) * m];
    let mut yx0 = vec![0.0; m];
    linalg::matvec(yt, x0, &mut yx0, m, m);
    let resid: Vec<f64> = xt.iter().zip(&yx0).map(|(a, b)| a - b).collect();
    let mut alg = vec![0.0; m];
    linalg::matvec(&ginv, &resid, &mut alg, m, m);
    Ok(LinearSkorokhod { ito_form: ito, algebraic_form: alg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn point_mass_is_transition_score() {
        let spec = SdeSpec::new(Schedule::ve(0.01, 50.0, 1.0).unwrap(), 1).unwrap();
        let field = LinearScoreField::new(
            &spec,
            MomentSource::closed_form(&spec).unwrap(),
            Arc::new(PointMassMean { x0: vec![0.0] }),
        )
        .unwrap()
        .with_regularization(Regularization::Fixed { epsilon: 0.0 });
        let s = score_linear(&field, 1.0, &[1.0]).unwrap();
        assert!(rel(s[0], -4.0e-4) < 1e-6, "{s:?}");
        assert!(matches!(score_linear(&field, 0.0, &[1.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn fokker_planck_values() {
        let vp = Schedule::vp_constant(0.1, 1.0).unwrap();
        let s = fokker_planck_score_oracle(&vp, 1.0, &[0.0], &[1.0]).unwrap()[0];
        assert!((s - 9.99578).abs() < 1e-4, "{s}");
        let mean = (-0.05f64).exp();
        assert_eq!(fokker_planck_score_oracle(&vp, 1.0, &[mean], &[1.0]).unwrap()[0], 0.0);
        let sub = Schedule::sub_vp_constant(0.1, 1.0).unwrap();
        let s = fokker_planck_score_oracle(&sub, 1.0, &[0.1], &[0.0]).unwrap()[0];
        assert!((s + 11.0424).abs() < 2e-4, "{s}");
    }

    #[test]
    fn posterior_of_single_gaussian() {
        let spec_sched = Schedule::vp_constant(0.1, 1.0).unwrap();
        let a = spec_sched.mean_factor(1.0).unwrap();
        let g = spec_sched.transition_variance(1.0).unwrap();
        let prior = GaussianMixturePrior::gaussian(vec![0.0], vec![1.0]).unwrap();
        let post = exact_gaussian_posterior(&prior, &[1.0], &[a], &[g]).unwrap();
        let expected = a / (a * a + g);
        assert!(rel(post.mean[0], expected) < 1e-12);
        // a² + γ = 1 for this schedule, so the mean is a·y.
        assert!((post.mean[0] - 0.951_229_4).abs() < 1e-6, "{}", post.mean[0]);
        let point = GaussianMixturePrior::gaussian(vec![0.7], vec![0.0]).unwrap();
        let post = exact_gaussian_posterior(&point, &[3.0], &[a], &[g]).unwrap();
        assert!((post.mean[0] - 0.7).abs() < 1e-15);
        let sym = GaussianMixturePrior::isotropic(vec![vec![-1.0], vec![1.0]], 0.3).unwrap();
        let post = exact_gaussian_posterior(&sym, &[0.0], &[a], &[g]).unwrap();
        assert!(post.mean[0].abs() < 1e-15);
    }

    #[test]
    fn far_tail_falls_back_to_best_component() {
        let prior = GaussianMixturePrior::isotropic(vec![vec![-1.0], vec![1.0]], 1e-3).unwrap();
        let post = exact_gaussian_posterior(&prior, &[1e200], &[1.0], &[1e-6]).unwrap();
        assert!(post.mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mixture_score_matches_posterior_form() {
        let spec = SdeSpec::new(Schedule::vp(0.1, 20.0, 1.0).unwrap(), 2).unwrap();
        let means: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let a = std::f64::consts::PI * i as f64 / 4.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let prior = GaussianMixturePrior::isotropic(means, 0.1).unwrap();
        let moments = MomentSource::closed_form(&spec).unwrap();
        let field = LinearScoreField::new(&spec, moments.clone(), Arc::new(ExactGaussianMean::new(prior.clone())))
            .unwrap()
            .with_regularization(Regularization::Fixed { epsilon: 0.0 });
        for &t in &[0.01, 0.1, 0.5, 1.0] {
            let mom = moments.at(t).unwrap();
            for y in [[0.3, -0.2], [1.0, 0.0], [-0.5, 0.9]] {
                let a = score_linear(&field, t, &y).unwrap();
                let b = mixture_marginal_score(&prior, &y, &mom.y, &mom.gamma).unwrap();
                for j in 0..2 {
                    assert!((a[j] - b[j]).abs() <= 1e-8 * b[j].abs().max(1.0), "t={t} {a:?} {b:?}");
                }
                let neg = score_linear(&field, t, &[-y[0], -y[1]]).unwrap();
                assert!((neg[0] + a[0]).abs() <= 1e-12 * a[0].abs().max(1.0));
            }
        }
    }

    #[test]
    fn covering_identity_on_diagonal_example() {
        let b = vec![vec![-0.1, 0.0], vec![0.0, -0.2]];
        let s = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let spec = SdeSpec::new(Schedule::const_linear(b, s).unwrap(), 2).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let track = linear_track(&spec, &grid).unwrap();
        let m = covering_identity_check(&spec, &grid, &track, grid.n_steps).unwrap();
        assert!(linalg::max_abs_diff(&m, &linalg::identity(2)) <= 1e-10);
    }

    #[test]
    fn zero_noise_skorokhod_is_zero() {
        let spec = SdeSpec::new(Schedule::const_linear(vec![vec![-1.0]], vec![vec![0.0]]).unwrap(), 1).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let track = linear_track(&spec, &grid).unwrap();
        let mm = malliavin_matrix(&spec, &grid, &track);
        let x = vec![1.0; 101];
        let s = skorokhod_linear(&spec, &grid, &track, &mm, &x, &[0.0; 100], 100, Regularization::Default).unwrap();
        assert_eq!(s.ito_form, vec![0.0]);
        assert_eq!(s.algebraic_form, vec![0.0]);
    }
}
