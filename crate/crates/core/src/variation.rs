//! First and second variation processes and the Malliavin matrix.
//!
//! `Y` solves `dY = ∂_x b(t, X) Y dt`, `Z` solves
//! `dZ = [∂_xx b (Y ⊗ Y) + ∂_x b Z] dt`, and the Malliavin matrix is
//! `γ_t = Y_t (∫₀ᵗ Y_r⁻¹ σσᵀ Y_r⁻ᵀ dr) Y_tᵀ`, accumulated by the left
//! rectangle rule on the simulation grid.
//!
//! `Y⁻¹` is propagated alongside `Y` as `Y⁻¹_{k+1} = Y⁻¹_k (I + J_k dt)⁻¹`,
//! the exact inverse of the Euler step, so `Y_k Y⁻¹_k = I` holds to rounding
//! at every node without ever inverting `Y` itself.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::schedule::Schedule;
use crate::sde::{SdeSpec, TimeGrid};

#[derive(Clone, Debug)]
pub struct VariationTrack {
    pub m: usize,
    pub n_nodes: usize,
    /// `n_nodes × m × m`.
    pub y: Vec<f64>,
    pub yinv: Vec<f64>,
    /// `n_nodes × m × m × m`, layout `[k][i][p][q]`, present once the second
    /// variation has been propagated.
    pub z: Option<Vec<f64>>,
    /// Path-independent track (linear drift).
    pub deterministic: bool,
}

impl VariationTrack {
    pub fn y_at(&self, k: usize) -> &[f64] {
        let s = self.m * self.m;
        &self.y[k * s..(k + 1) * s]
    }

    pub fn yinv_at(&self, k: usize) -> &[f64] {
        let s = self.m * self.m;
        &self.yinv[k * s..(k + 1) * s]
    }

    pub fn z_at(&self, k: usize) -> Option<&[f64]> {
        let s = self.m * self.m * self.m;
        self.z.as_ref().map(|z| &z[k * s..(k + 1) * s])
    }

    /// `max_k ‖Y_k Y⁻¹_k − I‖_max`.
    pub fn reorthogonality_error(&self) -> f64 {
        let m = self.m;
        let id = linalg::identity(m);
        let mut prod = vec![0.0; m * m];
        (0..self.n_nodes)
            .map(|k| {
                linalg::matmul(self.y_at(k), self.yinv_at(k), &mut prod, m, m, m);
                linalg::max_abs_diff(&prod, &id)
            })
            .fold(0.0, f64::max)
    }
}

/// One Euler step of `Y` and the matching exact step of `Y⁻¹`.
#[inline]
pub(crate) fn step_first_variation(
    jac: &[f64],
    dt: f64,
    m: usize,
    y: &[f64],
    yinv: &[f64],
    y_next: &mut [f64],
    yinv_next: &mut [f64],
    scratch: &mut [f64],
) {
    if m == 1 {
        let phi = 1.0 + jac[0] * dt;
        y_next[0] = phi * y[0];
        yinv_next[0] = yinv[0] / phi;
        return;
    }
    // scratch = I + J dt
    for i in 0..m {
        for j in 0..m {
            scratch[i * m + j] = jac[i * m + j] * dt + if i == j { 1.0 } else { 0.0 };
        }
    }
    linalg::matmul(scratch, y, y_next, m, m, m);
    let phi_inv = linalg::inverse(scratch, m).unwrap_or_else(|| vec![f64::NAN; m * m]);
    linalg::matmul(yinv, &phi_inv, yinv_next, m, m, m);
}

/// One Euler step of `Z`: `Z_{k+1} = Z_k + [H(Y⊗Y) + J Z] dt`.
#[inline]
pub(crate) fn step_second_variation(
    jac: &[f64],
    hess: &[f64],
    dt: f64,
    m: usize,
    y: &[f64],
    z: &[f64],
    z_next: &mut [f64],
) {
    for i in 0..m {
        for p in 0..m {
            for q in 0..m {
                let mut acc = 0.0;
                for a in 0..m {
                    let ya = y[a * m + p];
                    for b in 0..m {
                        acc += hess[(i * m + a) * m + b] * ya * y[b * m + q];
                    }
                }
                for r in 0..m {
                    acc += jac[i * m + r] * z[(r * m + p) * m + q];
                }
                let idx = (i * m + p) * m + q;
                z_next[idx] = z[idx] + acc * dt;
            }
        }
    }
}

/// Propagates `Y` and `Y⁻¹` along the states `x` (`n_nodes × m`). For linear
/// drift the states are ignored and the track is marked deterministic.
pub fn propagate_first_variation(spec: &SdeSpec, grid: &TimeGrid, x: &[f64]) -> VariationTrack {
    let m = spec.dim();
    let n = grid.n_nodes();
    let mm = m * m;
    let mut y = vec![0.0; n * mm];
    let mut yinv = vec![0.0; n * mm];
    let id = linalg::identity(m);
    y[..mm].copy_from_slice(&id);
    yinv[..mm].copy_from_slice(&id);
    let linear = spec.is_linear();
    let zero = vec![0.0; m];
    let mut jac = vec![0.0; mm];
    let mut scratch = vec![0.0; mm];
    let dt = grid.dt();
    for k in 0..grid.n_steps {
        let xk = if linear { &zero[..] } else { &x[k * m..(k + 1) * m] };
        spec.drift_jacobian(grid.time(k), xk, &mut jac);
        let (yh, yt) = y.split_at_mut((k + 1) * mm);
        let (ih, it) = yinv.split_at_mut((k + 1) * mm);
        step_first_variation(
            &jac,
            dt,
            m,
            &yh[k * mm..],
            &ih[k * mm..],
            &mut yt[..mm],
            &mut it[..mm],
            &mut scratch,
        );
    }
    VariationTrack {
        m,
        n_nodes: n,
        y,
        yinv,
        z: None,
        deterministic: linear,
    }
}

/// The shared deterministic track of a linear SDE.
pub fn linear_track(spec: &SdeSpec, grid: &TimeGrid) -> Result<VariationTrack> {
    if !spec.is_linear() {
        return invalid("linear_track requires an affine drift");
    }
    Ok(propagate_first_variation(spec, grid, &[]))
}

/// Adds the second variation `Z` to a track. Rejected for linear drift,
/// where `Z ≡ 0`.
pub fn propagate_second_variation(
    spec: &SdeSpec,
    grid: &TimeGrid,
    x: &[f64],
    track: &mut VariationTrack,
) -> Result<()> {
    if spec.is_linear() {
        return Err(Error::Unsupported(
            "second variation of an affine drift is identically zero".into(),
        ));
    }
    let m = spec.dim();
    let (mm, mmm) = (m * m, m * m * m);
    let n = grid.n_nodes();
    let mut z = vec![0.0; n * mmm];
    let mut jac = vec![0.0; mm];
    let mut hess = vec![0.0; mmm];
    let dt = grid.dt();
    for k in 0..grid.n_steps {
        let xk = &x[k * m..(k + 1) * m];
        let t = grid.time(k);
        spec.drift_jacobian(t, xk, &mut jac);
        spec.drift_hessian(t, xk, &mut hess);
        let (zh, zt) = z.split_at_mut((k + 1) * mmm);
        step_second_variation(&jac, &hess, dt, m, track.y_at(k), &zh[k * mmm..], &mut zt[..mmm]);
    }
    track.z = Some(z);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MalliavinMatrix {
    pub m: usize,
    /// `γ_k`, `n_nodes × m × m`.
    pub gamma: Vec<f64>,
    /// Accumulated `I_k = Σ_{j<k} Y_j⁻¹ σ_j σ_jᵀ Y_j⁻ᵀ dt`.
    pub integral: Vec<f64>,
}

impl MalliavinMatrix {
    pub fn at(&self, k: usize) -> &[f64] {
        let s = self.m * self.m;
        &self.gamma[k * s..(k + 1) * s]
    }

    pub fn integral_at(&self, k: usize) -> &[f64] {
        let s = self.m * self.m;
        &self.integral[k * s..(k + 1) * s]
    }

    pub fn n_nodes(&self) -> usize {
        self.gamma.len() / (self.m * self.m)
    }
}

/// Left-rectangle accumulation of the Malliavin matrix along a track.
pub fn malliavin_matrix(spec: &SdeSpec, grid: &TimeGrid, track: &VariationTrack) -> MalliavinMatrix {
    let m = spec.dim();
    let d = spec.noise_dim();
    let mm = m * m;
    let n = track.n_nodes;
    let mut integral = vec![0.0; n * mm];
    let mut gamma = vec![0.0; n * mm];
    let mut sig = vec![0.0; m * d];
    let mut v = vec![0.0; m * d];
    let mut outer = vec![0.0; mm];
    let mut tmp = vec![0.0; mm];
    let dt = grid.dt();
    for k in 0..n - 1 {
        spec.diffusion(grid.time(k), &mut sig);
        linalg::matmul(track.yinv_at(k), &sig, &mut v, m, m, d);
        linalg::matmul_bt(&v, &v, &mut outer, m, d, m);
        for j in 0..mm {
            integral[(k + 1) * mm + j] = integral[k * mm + j] + outer[j] * dt;
        }
        let yk = track.y_at(k + 1);
        linalg::matmul(yk, &integral[(k + 1) * mm..(k + 2) * mm], &mut tmp, m, m, m);
        let g = &mut gamma[(k + 1) * mm..(k + 2) * mm];
        linalg::matmul_bt(&tmp, yk, g, m, m, m);
        linalg::symmetrize(g, m);
    }
    MalliavinMatrix { m, gamma, integral }
}

/// `D_{t_j} X_{t_end} = Y_end Y_j⁻¹ σ(t_j)` for `j < end`, as `end × m × d`.
pub fn malliavin_derivative(spec: &SdeSpec, grid: &TimeGrid, track: &VariationTrack, end: usize) -> Vec<f64> {
    let m = spec.dim();
    let d = spec.noise_dim();
    let mut out = vec![0.0; end * m * d];
    let mut sig = vec![0.0; m * d];
    let mut tmp = vec![0.0; m * d];
    for j in 0..end {
        spec.diffusion(grid.time(j), &mut sig);
        linalg::matmul(track.yinv_at(j), &sig, &mut tmp, m, m, d);
        linalg::matmul(track.y_at(end), &tmp, &mut out[j * m * d..(j + 1) * m * d], m, m, d);
    }
    out
}

/// `γ = Σ_j D_j D_jᵀ dt` assembled directly from the Malliavin derivative.
pub fn gamma_from_derivative(deriv: &[f64], m: usize, d: usize, dt: f64) -> Vec<f64> {
    let mut g = vec![0.0; m * m];
    for dj in deriv.chunks(m * d) {
        for i in 0..m {
            for k in 0..m {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += dj[i * d + l] * dj[k * d + l];
                }
                g[i * m + k] += acc * dt;
            }
        }
    }
    g
}

/// Closed-form Malliavin matrix `γ(t)` of the isotropic families.
pub fn closed_form_gamma(schedule: &Schedule, t: f64, m: usize) -> Result<Vec<f64>> {
    let v = schedule
        .transition_variance(t)
        .ok_or_else(|| Error::Unsupported(format!("no closed form for {}", schedule.name())))?;
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        g[i * m + i] = v;
    }
    Ok(g)
}

/// Closed-form `γ⁻¹(t)`; singular at `t = 0`.
pub fn closed_form_gamma_inv(schedule: &Schedule, t: f64, m: usize) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Singular(format!("γ⁻¹ is unbounded at t = {t}")));
    }
    let mut g = closed_form_gamma(schedule, t, m)?;
    for i in 0..m {
        let v = g[i * m + i];
        if !(v > 0.0) {
            return Err(Error::Singular(format!("γ({t}) = {v} is not invertible")));
        }
        g[i * m + i] = 1.0 / v;
    }
    Ok(g)
}

/// Closed-form first variation `Y_t` of the isotropic families.
pub fn closed_form_y(schedule: &Schedule, t: f64, m: usize) -> Result<Vec<f64>> {
    let a = schedule
        .mean_factor(t)
        .ok_or_else(|| Error::Unsupported(format!("no closed form for {}", schedule.name())))?;
    let mut y = vec![0.0; m * m];
    for i in 0..m {
        y[i * m + i] = a;
    }
    Ok(y)
}

/// Tikhonov shift applied before inverting `γ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "mode", deny_unknown_fields)]
pub enum Regularization {
    /// `ε = max(1e-8 · tr(γ)/m, 1e-12)`.
    Default,
    Fixed { epsilon: f64 },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Default
    }
}

impl Regularization {
    pub fn epsilon(&self, gamma: &[f64], m: usize) -> f64 {
        match *self {
            Regularization::Default => (1e-8 * linalg::trace(gamma, m) / m as f64).max(1e-12),
            Regularization::Fixed { epsilon } => epsilon,
        }
    }
}

/// `(γ + εI)⁻¹` through a Cholesky factorization. On failure `ε` is raised
/// tenfold (from at least `1e-12`) up to three times before giving up.
pub fn regularized_inverse(gamma: &[f64], m: usize, reg: Regularization) -> Result<Vec<f64>> {
    if gamma.len() != m * m {
        return invalid("γ has the wrong size");
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("γ has non-finite entries".into()));
    }
    let mut eps = reg.epsilon(gamma, m);
    if eps < 0.0 {
        return invalid("regularization must be non-negative");
    }
    let mut shifted = gamma.to_vec();
    for attempt in 0..=3 {
        for i in 0..m {
            shifted[i * m + i] = gamma[i * m + i] + eps;
        }
        if let Some(inv) = linalg::spd_inverse(&shifted, m) {
            if inv.iter().all(|v| v.is_finite()) {
                return Ok(inv);
            }
        }
        if attempt < 3 {
            eps = (eps * 10.0).max(1e-12);
        }
    }
    Err(Error::Singular(format!(
        "γ could not be factorized even with jitter {eps:e}"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `ys` against `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> SlopeFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    SlopeFit { slope, intercept, r2 }
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Slope of `log ‖γ⁻¹(t)‖₂` against `log t` for the closed-form families.
pub fn fit_singularity_slope(schedule: &Schedule, t_grid: &[f64]) -> Result<SlopeFit> {
    if t_grid.len() < 8 {
        return invalid("singularity fit needs at least 8 times");
    }
    if t_grid.iter().any(|&t| !(1e-4 * (1.0 - 1e-12)..=1e-2 * (1.0 + 1e-12)).contains(&t)) {
        return invalid("singularity fit times must lie in [1e-4, 1e-2]");
    }
    let mut xs = Vec::with_capacity(t_grid.len());
    let mut ys = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let inv = closed_form_gamma_inv(schedule, t, 1)?;
        let norm = linalg::sym_norm2(&inv, 1);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("γ⁻¹({t}) is not finite")));
        }
        xs.push(t.ln());
        ys.push(norm.ln());
    }
    Ok(linear_fit(&xs, &ys))
}
