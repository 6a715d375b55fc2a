//! Pathwise Skorokhod integral `δ(u_k)` for nonlinear drift with
//! state-independent diffusion, and the resulting Monte Carlo score.
//!
//! With `c = γ_T⁻¹`, `F_k = Y_Tᵀ c e_k` and `ξ = ∫ Y_t⁻¹ σ(t) dB_t`,
//!
//! ```text
//! δ(u_k) = F_k · ξ − ∫ Σ_l [ c A_t^l v_l − c (D_t^l γ) c Y_T v_l ]_k dt
//! ```
//!
//! where `v_l` is column `l` of `Y_t⁻¹σ(t)` and
//! `A_t^l = D_t^l Y_T = Z_T[v_l] − Y_T Y_t⁻¹ Z_t[v_l]`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::BrownianStore;
use crate::sde::{simulate_path, InitialLaw, SdeSpec, TimeGrid};
use crate::variation::{
    propagate_first_variation, propagate_second_variation, regularized_inverse, Regularization, VariationTrack,
};

/// Samples whose `γ_T` condition number exceeds this are excluded.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest diverged fraction tolerated before an ensemble is rejected.
pub const MAX_DIVERGED_FRACTION: f64 = 0.01;

/// Everything the Skorokhod formula needs for one path.
#[derive(Clone, Debug)]
pub struct PathTracks {
    pub m: usize,
    pub d: usize,
    pub grid: TimeGrid,
    /// States, `n_nodes × m`.
    pub x: Vec<f64>,
    pub track: VariationTrack,
    /// `σ(t_k)` per step, `n_steps × m × d`.
    pub sigma: Vec<f64>,
    /// `Σ_k Y_k⁻¹ σ_k σ_kᵀ Y_k⁻ᵀ dt` over the whole grid.
    pub integral: Vec<f64>,
    /// `γ_T = Y_T I Y_Tᵀ`.
    pub gamma: Vec<f64>,
}

impl PathTracks {
    /// Simulates from `x0` with increments `dw`; `None` if the path diverges.
    pub fn build(spec: &SdeSpec, grid: &TimeGrid, x0: &[f64], dw: &[f64]) -> Result<Option<PathTracks>> {
        let (m, d) = (spec.dim(), spec.noise_dim());
        if x0.len() != m || dw.len() != grid.n_steps * d {
            return invalid("initial state or increments have the wrong size");
        }
        let mut x = vec![0.0; grid.n_nodes() * m];
        x[..m].copy_from_slice(x0);
        if simulate_path(spec, grid, dw, &mut x) {
            return Ok(None);
        }
        let mut track = propagate_first_variation(spec, grid, &x);
        if !spec.is_linear() {
            propagate_second_variation(spec, grid, &x, &mut track)?;
        }
        if track.y.iter().chain(track.z.iter().flatten()).any(|v| !v.is_finite()) {
            return Ok(None);
        }
        let n = grid.n_steps;
        let mut sigma = vec![0.0; n * m * d];
        for k in 0..n {
            spec.diffusion(grid.time(k), &mut sigma[k * m * d..(k + 1) * m * d]);
        }
        let mut integral = vec![0.0; m * m];
        let mut p = vec![0.0; m * d];
        let mut outer = vec![0.0; m * m];
        let dt = grid.dt();
        for k in 0..n {
            linalg::matmul(track.yinv_at(k), &sigma[k * m * d..(k + 1) * m * d], &mut p, m, m, d);
            linalg::matmul_bt(&p, &p, &mut outer, m, d, m);
            for (a, b) in integral.iter_mut().zip(&outer) {
                *a += b * dt;
            }
        }
        let yn = track.y_at(n);
        let mut tmp = vec![0.0; m * m];
        let mut gamma = vec![0.0; m * m];
        linalg::matmul(yn, &integral, &mut tmp, m, m, m);
        linalg::matmul_bt(&tmp, yn, &mut gamma, m, m, m);
        linalg::symmetrize(&mut gamma, m);
        Ok(Some(PathTracks { m, d, grid: *grid, x, track, sigma, integral, gamma }))
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn terminal(&self) -> &[f64] {
        let n = self.grid.n_steps;
        &self.x[n * self.m..(n + 1) * self.m]
    }

    fn sigma_at(&self, k: usize) -> &[f64] {
        let s = self.m * self.d;
        &self.sigma[k * s..(k + 1) * s]
    }

    /// `Y_k⁻¹ σ_k`, `m × d`.
    fn p_at(&self, k: usize, out: &mut [f64]) {
        linalg::matmul(self.track.yinv_at(k), self.sigma_at(k), out, self.m, self.m, self.d);
    }

    /// `Z_k[v]_{iq} = Σ_p Z_k^{i,p,q} v_p`; zero for linear drift.
    fn z_contract(&self, k: usize, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        match self.track.z_at(k) {
            None => out.fill(0.0),
            Some(z) => {
                for i in 0..m {
                    for q in 0..m {
                        let mut acc = 0.0;
                        for p in 0..m {
                            acc += z[(i * m + p) * m + q] * v[p];
                        }
                        out[i * m + q] = acc;
                    }
                }
            }
        }
    }

    /// `A_t^l = Z_T[v] − Y_T Y_t⁻¹ Z_t[v]` along with `Y_T Y_t⁻¹ Z_t[v]`.
    fn a_term(&self, t: usize, v: &[f64], a: &mut [f64], carried: &mut [f64], s1: &mut [f64], s2: &mut [f64]) {
        let m = self.m;
        let n = self.n_steps();
        self.z_contract(t, v, s1);
        linalg::matmul(self.track.yinv_at(t), s1, s2, m, m, m);
        linalg::matmul(self.track.y_at(n), s2, carried, m, m, m);
        self.z_contract(n, v, a);
        for (ai, ci) in a.iter_mut().zip(carried.iter()) {
            *ai -= ci;
        }
    }
}

/// `F_k · ξ` for every `k`, i.e. `γ_T⁻¹ Y_T ∫ Y⁻¹σ dB`.
pub fn substituted_ito_term(tracks: &PathTracks, dw: &[f64], gamma_inv: &[f64]) -> Vec<f64> {
    let (m, d) = (tracks.m, tracks.d);
    let mut xi = vec![0.0; m];
    let mut p = vec![0.0; m * d];
    let mut inc = vec![0.0; m];
    for k in 0..tracks.n_steps() {
        tracks.p_at(k, &mut p);
        linalg::matvec(&p, &dw[k * d..(k + 1) * d], &mut inc, m, d);
        for j in 0..m {
            xi[j] += inc[j];
        }
    }
    let mut a = vec![0.0; m];
    linalg::matvec(tracks.track.y_at(tracks.n_steps()), &xi, &mut a, m, m);
    let mut out = vec![0.0; m];
    linalg::matvec(gamma_inv, &a, &mut out, m, m);
    out
}

/// `D_t γ_T` at node `t_index`, layout `[p][q][l]`, summed directly over
/// the grid from `D_t(Y_T Y_s⁻¹) σ_s W_sᵀ` (zero for `s < t` apart from the
/// `D_t Y_T` factor).
pub fn dgamma_malliavin(tracks: &PathTracks, t_index: usize) -> Result<Vec<f64>> {
    let (m, d) = (tracks.m, tracks.d);
    let n = tracks.n_steps();
    if t_index >= n {
        return invalid(format!("t index {t_index} is outside [0, {n})"));
    }
    let dt = tracks.grid.dt();
    let yn = tracks.track.y_at(n);
    let mut pt = vec![0.0; m * d];
    tracks.p_at(t_index, &mut pt);
    let mut out = vec![0.0; m * m * d];
    let (mut a, mut carried, mut s1, mut s2) = (vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m]);
    let mut zt_v = vec![0.0; m * m];
    let mut zs_v = vec![0.0; m * m];
    let mut ps = vec![0.0; m * d];
    let mut ws = vec![0.0; m * d];
    let mut bs = vec![0.0; m * d];
    let mut tmp = vec![0.0; m * d];
    let mut core = vec![0.0; m * m];
    let mut mmat = vec![0.0; m * m];
    let mut outer = vec![0.0; m * m];
    let mut v = vec![0.0; m];
    for l in 0..d {
        for i in 0..m {
            v[i] = pt[i * d + l];
        }
        tracks.a_term(t_index, &v, &mut a, &mut carried, &mut s1, &mut s2);
        // Y_t⁻¹ Z_t[v]
        tracks.z_contract(t_index, &v, &mut s1);
        linalg::matmul(tracks.track.yinv_at(t_index), &s1, &mut zt_v, m, m, m);
        mmat.fill(0.0);
        for s in 0..n {
            tracks.p_at(s, &mut ps);
            linalg::matmul(yn, &ps, &mut ws, m, m, d);
            linalg::matmul(&a, &ps, &mut bs, m, m, d);
            if s >= t_index {
                // Y_T (−Y_s⁻¹ Z_s[v] + Y_t⁻¹ Z_t[v]) Y_s⁻¹ σ_s
                tracks.z_contract(s, &v, &mut s1);
                linalg::matmul(tracks.track.yinv_at(s), &s1, &mut zs_v, m, m, m);
                for (c, (zt, zs)) in core.iter_mut().zip(zt_v.iter().zip(&zs_v)) {
                    *c = zt - zs;
                }
                linalg::matmul(&core, &ps, &mut tmp, m, m, d);
                linalg::matmul(yn, &tmp, &mut ps, m, m, d);
                for (b, e) in bs.iter_mut().zip(&ps) {
                    *b += e;
                }
            }
            linalg::matmul_bt(&bs, &ws, &mut outer, m, d, m);
            for (mv, o) in mmat.iter_mut().zip(&outer) {
                *mv += o * dt;
            }
        }
        for p in 0..m {
            for q in 0..m {
                out[(p * m + q) * d + l] = mmat[p * m + q] + mmat[q * m + p];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkorokhodSample {
    pub path: usize,
    pub x_t: Vec<f64>,
    /// `δ(u_k)` for `k = 1..m`.
    pub delta: Vec<f64>,
    pub ito_term: Vec<f64>,
    pub correction_term: Vec<f64>,
    /// `γ_T` was too ill-conditioned; the sample should not be used.
    pub flagged: bool,
}

/// `δ(u_k)` for all `k`, with the `s`-integrals of `D_tγ` accumulated by a
/// single backward sweep.
pub fn skorokhod_nonlinear(tracks: &PathTracks, dw: &[f64], reg: Regularization, path: usize) -> Result<SkorokhodSample> {
    let (m, d) = (tracks.m, tracks.d);
    let n = tracks.n_steps();
    let dt = tracks.grid.dt();
    let x_t = tracks.terminal().to_vec();
    let cond = linalg::sym_condition(&tracks.gamma, m);
    if !(cond <= MAX_CONDITION) || linalg::max_abs(&tracks.gamma) == 0.0 {
        return Ok(SkorokhodSample {
            path,
            x_t,
            delta: vec![f64::NAN; m],
            ito_term: vec![f64::NAN; m],
            correction_term: vec![f64::NAN; m],
            flagged: true,
        });
    }
    let c = regularized_inverse(&tracks.gamma, m, reg)?;
    let ito = substituted_ito_term(tracks, dw, &c);
    let mut correction = vec![0.0; m];

    if tracks.track.z.is_some() {
        let yn = tracks.track.y_at(n);
        let mut g = vec![0.0; m * m];
        linalg::matmul_bt(&tracks.integral, yn, &mut g, m, m, m);
        let mut q = vec![0.0; m * m];
        let mut r = vec![0.0; m * m * m]; // R^{(p)} stacked by p
        let mut ps = vec![0.0; m * d];
        let mut ws = vec![0.0; m * d];
        let mut pw = vec![0.0; m * m];
        let mut e = vec![0.0; m];
        let (mut s1, mut s2, mut s3) = (vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m]);
        let (mut a, mut carried) = (vec![0.0; m * m], vec![0.0; m * m]);
        let mut mm = vec![0.0; m * m];
        let mut sm = vec![0.0; m * m];
        let mut v = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut av = vec![0.0; m];
        let mut t1 = vec![0.0; m];
        let mut t2 = vec![0.0; m];
        let mut t3 = vec![0.0; m];
        for t in (0..n).rev() {
            tracks.p_at(t, &mut ps);
            linalg::matmul(yn, &ps, &mut ws, m, m, d);
            linalg::matmul_bt(&ps, &ws, &mut pw, m, d, m);
            for (qi, x) in q.iter_mut().zip(&pw) {
                *qi += x * dt;
            }
            for p in 0..m {
                e.fill(0.0);
                e[p] = 1.0;
                tracks.z_contract(t, &e, &mut s1);
                linalg::matmul(tracks.track.yinv_at(t), &s1, &mut s2, m, m, m);
                linalg::matmul(&s2, &pw, &mut s3, m, m, m);
                for (ri, x) in r[p * m * m..(p + 1) * m * m].iter_mut().zip(&s3) {
                    *ri += x * dt;
                }
            }
            for l in 0..d {
                for i in 0..m {
                    v[i] = ps[i * d + l];
                }
                tracks.a_term(t, &v, &mut a, &mut carried, &mut s1, &mut s2);
                // M = A G − Y_T Σ_p v_p R^{(p)} + (Y_T Y_t⁻¹ Z_t[v]) Q
                linalg::matmul(&a, &g, &mut mm, m, m, m);
                s1.fill(0.0);
                for p in 0..m {
                    for (x, rp) in s1.iter_mut().zip(&r[p * m * m..(p + 1) * m * m]) {
                        *x += v[p] * rp;
                    }
                }
                linalg::matmul(yn, &s1, &mut s2, m, m, m);
                linalg::matmul(&carried, &q, &mut s3, m, m, m);
                for i in 0..m * m {
                    mm[i] += s3[i] - s2[i];
                }
                for i in 0..m {
                    for j in 0..m {
                        sm[i * m + j] = mm[i * m + j] + mm[j * m + i];
                    }
                }
                // c A v − c S c w,  w = Y_T v
                linalg::matvec(&a, &v, &mut av, m, m);
                linalg::matvec(yn, &v, &mut w, m, m);
                linalg::matvec(&c, &w, &mut t1, m, m);
                linalg::matvec(&sm, &t1, &mut t2, m, m);
                for i in 0..m {
                    t3[i] = av[i] - t2[i];
                }
                linalg::matvec(&c, &t3, &mut t1, m, m);
                for i in 0..m {
                    correction[i] += t1[i] * dt;
                }
            }
        }
    }
    let delta: Vec<f64> = ito.iter().zip(&correction).map(|(a, b)| a - b).collect();
    let flagged = delta.iter().any(|v| !v.is_finite());
    Ok(SkorokhodSample { path, x_t, delta, ito_term: ito, correction_term: correction, flagged })
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleSet {
    pub dim: usize,
    pub samples: Vec<SkorokhodSample>,
    pub n_paths: usize,
    pub n_diverged: usize,
    pub n_flagged: usize,
}

impl SampleSet {
    pub fn valid(&self) -> impl Iterator<Item = &SkorokhodSample> {
        self.samples.iter().filter(|s| !s.flagged)
    }

    pub fn n_valid(&self) -> usize {
        self.samples.len() - self.n_flagged
    }

    /// `path,xT_0..,delta_1..,ito_term,correction_term`; vector terms are
    /// written one column per coordinate when `m > 1`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let m = self.dim;
        let mut header = vec!["path".to_string()];
        header.extend((0..m).map(|i| format!("xT_{i}")));
        header.extend((1..=m).map(|k| format!("delta_{k}")));
        if m == 1 {
            header.push("ito_term".into());
            header.push("correction_term".into());
        } else {
            header.extend((1..=m).map(|k| format!("ito_term_{k}")));
            header.extend((1..=m).map(|k| format!("correction_term_{k}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row = vec![s.path.to_string()];
            for v in s.x_t.iter().chain(&s.delta).chain(&s.ito_term).chain(&s.correction_term) {
                row.push(format!("{v:.16e}"));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Simulates `n_paths` paths and evaluates `δ(u)` at the end of `grid` for
/// each, without retaining whole trajectories.
pub fn skorokhod_ensemble(
    spec: &SdeSpec,
    grid: &TimeGrid,
    init: &InitialLaw,
    n_paths: usize,
    seed: u64,
    reg: Regularization,
) -> Result<SampleSet> {
    spec.check_grid(grid)?;
    if init.dim() != spec.dim() {
        return invalid("initial law dimension differs from the SDE");
    }
    if spec.dim() > 4 {
        return Err(Error::Unsupported("dense second-variation tensors are limited to m ≤ 4".into()));
    }
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    let m = spec.dim();
    let results: Vec<Result<Option<SkorokhodSample>>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let dw = BrownianStore::new(seed, i as u64, grid, spec.noise_dim()).increments();
            let mut x0 = vec![0.0; m];
            init.sample(seed, i as u64, &mut x0);
            match PathTracks::build(spec, grid, &x0, &dw)? {
                None => Ok(None),
                Some(tracks) => skorokhod_nonlinear(&tracks, &dw, reg, i).map(Some),
            }
        })
        .collect();
    let mut samples = Vec::with_capacity(n_paths);
    let mut n_diverged = 0;
    for r in results {
        match r? {
            None => n_diverged += 1,
            Some(s) => samples.push(s),
        }
    }
    if n_diverged as f64 > MAX_DIVERGED_FRACTION * n_paths as f64 {
        return Err(Error::Numeric(format!(
            "{n_diverged} of {n_paths} paths diverged (limit {:.0}%)",
            MAX_DIVERGED_FRACTION * 100.0
        )));
    }
    let n_flagged = samples.iter().filter(|s| s.flagged).count();
    Ok(SampleSet { dim: m, samples, n_paths, n_diverged, n_flagged })
}
