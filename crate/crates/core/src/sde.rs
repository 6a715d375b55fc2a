//! SDE specifications, time grids and Euler–Maruyama forward simulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::GaussianMixturePrior;
use crate::rng::{self, domain, BrownianStore};
use crate::schedule::{CustomDrift, Schedule};

/// Paths whose state exceeds this magnitude are flagged as diverged.
pub const OVERFLOW_GUARD: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
    /// Integer-step mode: nodes are `0, 1, …, N` and the score is only
    /// evaluated from node 1 on.
    #[serde(default)]
    pub integer_steps: bool,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        let g = TimeGrid {
            t0,
            t_end,
            n_steps,
            integer_steps: false,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid `0, 1, …, n_steps` with unit spacing.
    pub fn integer(n_steps: usize) -> Result<Self> {
        let g = TimeGrid {
            t0: 0.0,
            t_end: n_steps as f64,
            n_steps,
            integer_steps: true,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid on `[0, horizon]` with step as close as possible to `dt`.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return invalid("time step must be positive");
        }
        Self::new(0.0, horizon, (horizon / dt).round().max(1.0) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return invalid("time grid needs at least one step");
        }
        if !(self.t0 >= 0.0 && self.t0.is_finite()) {
            return invalid(format!("t0 must be non-negative, got {}", self.t0));
        }
        if !(self.t_end > self.t0 && self.t_end.is_finite()) {
            return invalid("t_end must exceed t0");
        }
        if self.integer_steps && (self.t_end - self.t0 - self.n_steps as f64).abs() > 1e-9 {
            return invalid("integer-step grids must have unit spacing");
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Node `k`, computed as `t0 + k·dt` everywhere in the crate.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of the node closest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.dt()).round();
        k.clamp(0.0, self.n_steps as f64) as usize
    }

    /// Refinement of this grid with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            n_steps: self.n_steps * factor,
            integer_steps: false,
            ..*self
        }
    }
}

/// An SDE `dX = b(t, X) dt + σ(t) dB` on `ℝ^m` driven by `d`-dimensional
/// Brownian motion. The diffusion never sees the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SdeSpecRepr", into = "SdeSpecRepr")]
pub struct SdeSpec {
    dim: usize,
    noise_dim: usize,
    schedule: Schedule,
    drift_matrix: Vec<f64>,
    diffusion_matrix: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SdeSpecRepr {
    dim: usize,
    noise_dim: usize,
    schedule: Schedule,
    linear: bool,
}

impl TryFrom<SdeSpecRepr> for SdeSpec {
    type Error = Error;

    fn try_from(r: SdeSpecRepr) -> Result<Self> {
        let spec = SdeSpec::new(r.schedule, r.dim)?;
        if spec.noise_dim != r.noise_dim {
            return invalid("noise_dim does not match the schedule");
        }
        if spec.is_linear() != r.linear {
            return invalid("linear flag does not match the schedule");
        }
        Ok(spec)
    }
}

impl From<SdeSpec> for SdeSpecRepr {
    fn from(s: SdeSpec) -> Self {
        SdeSpecRepr {
            dim: s.dim,
            noise_dim: s.noise_dim,
            linear: s.is_linear(),
            schedule: s.schedule,
        }
    }
}

impl SdeSpec {
    /// Builds a spec; `dim` is only consulted for the isotropic families, the
    /// matrix families take their dimensions from the matrices.
    pub fn new(schedule: Schedule, dim: usize) -> Result<Self> {
        schedule.validate()?;
        let (dim, noise_dim, drift_matrix, diffusion_matrix) = match &schedule {
            Schedule::Ve { .. } | Schedule::Vp { .. } | Schedule::SubVp { .. } => {
                if dim == 0 {
                    return invalid("dimension must be positive");
                }
                (dim, dim, Vec::new(), Vec::new())
            }
            Schedule::ConstLinear { drift, diffusion } => {
                let m = drift.len();
                (
                    m,
                    diffusion[0].len(),
                    drift.iter().flatten().copied().collect(),
                    diffusion.iter().flatten().copied().collect(),
                )
            }
            Schedule::Custom { diffusion, .. } => (
                diffusion.len(),
                diffusion[0].len(),
                Vec::new(),
                diffusion.iter().flatten().copied().collect(),
            ),
        };
        Ok(SdeSpec {
            dim,
            noise_dim,
            schedule,
            drift_matrix,
            diffusion_matrix,
        })
    }

    /// One-dimensional cubic SDE `dX = -X³ dt + σ dB`.
    pub fn cubic(sigma: f64) -> Result<Self> {
        Self::new(Schedule::cubic(1.0, vec![vec![sigma]])?, 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Drift affine in `x` (and the diffusion is state-independent by
    /// construction).
    pub fn is_linear(&self) -> bool {
        !matches!(self.schedule, Schedule::Custom { .. })
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let m = self.dim;
        match self.schedule {
            Schedule::Ve { .. } => out.fill(0.0),
            Schedule::Vp { .. } | Schedule::SubVp { .. } => {
                let a = -0.5 * self.schedule.beta(t).unwrap_or(0.0);
                for i in 0..m {
                    out[i] = a * x[i];
                }
            }
            Schedule::ConstLinear { .. } => {
                crate::linalg::matvec(&self.drift_matrix, x, out, m, m);
            }
            Schedule::Custom {
                drift: CustomDrift::Cubic { coefficient },
                ..
            } => {
                for i in 0..m {
                    out[i] = -coefficient * x[i] * x[i] * x[i];
                }
            }
        }
    }

    /// `∂_x b(t, x)`, row-major m×m.
    #[inline]
    pub fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let m = self.dim;
        match self.schedule {
            Schedule::Ve { .. } => out.fill(0.0),
            Schedule::Vp { .. } | Schedule::SubVp { .. } => {
                out.fill(0.0);
                let a = -0.5 * self.schedule.beta(t).unwrap_or(0.0);
                for i in 0..m {
                    out[i * m + i] = a;
                }
            }
            Schedule::ConstLinear { .. } => out.copy_from_slice(&self.drift_matrix),
            Schedule::Custom {
                drift: CustomDrift::Cubic { coefficient },
                ..
            } => {
                out.fill(0.0);
                for i in 0..m {
                    out[i * m + i] = -3.0 * coefficient * x[i] * x[i];
                }
            }
        }
    }

    /// `∂_xx b(t, x)` with layout `[i][p][q] = ∂²b_i / ∂x_p ∂x_q`.
    #[inline]
    pub fn drift_hessian(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let m = self.dim;
        out.fill(0.0);
        if let Schedule::Custom {
            drift: CustomDrift::Cubic { coefficient },
            ..
        } = self.schedule
        {
            for i in 0..m {
                out[(i * m + i) * m + i] = -6.0 * coefficient * x[i];
            }
        }
    }

    /// `σ(t)`, row-major m×d.
    #[inline]
    pub fn diffusion(&self, t: f64, out: &mut [f64]) {
        let m = self.dim;
        match self.schedule {
            Schedule::Ve { .. } | Schedule::Vp { .. } | Schedule::SubVp { .. } => {
                out.fill(0.0);
                let g = self.schedule.g2(t).unwrap_or(0.0).max(0.0).sqrt();
                for i in 0..m {
                    out[i * m + i] = g;
                }
            }
            Schedule::ConstLinear { .. } | Schedule::Custom { .. } => {
                out.copy_from_slice(&self.diffusion_matrix)
            }
        }
    }

    /// Horizon implied by the schedule, if it carries one.
    pub fn horizon(&self) -> Option<f64> {
        self.schedule.horizon()
    }

    /// Checks that a grid fits the schedule's horizon.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        grid.validate()?;
        if let Some(h) = self.horizon() {
            if grid.t_end > h * (1.0 + 1e-12) {
                return Err(Error::GridMismatch(format!(
                    "grid ends at {} beyond the schedule horizon {h}",
                    grid.t_end
                )));
            }
        }
        Ok(())
    }
}

/// Law of `X_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", deny_unknown_fields)]
pub enum InitialLaw {
    PointMass { x: Vec<f64> },
    Mixture { prior: GaussianMixturePrior },
    /// Path `i` starts at point `i mod n_points` (row-major `n_points × dim`).
    Points { dim: usize, data: Vec<f64> },
}

impl InitialLaw {
    pub fn point(x: Vec<f64>) -> Self {
        InitialLaw::PointMass { x }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::PointMass { x } => x.len(),
            InitialLaw::Mixture { prior } => prior.dim(),
            InitialLaw::Points { dim, .. } => *dim,
        }
    }

    pub fn sample(&self, seed: u64, path_index: u64, out: &mut [f64]) {
        match self {
            InitialLaw::PointMass { x } => out.copy_from_slice(x),
            InitialLaw::Mixture { prior } => {
                let mut r = rng::stream(seed, domain::INITIAL, path_index);
                prior.sample(&mut r, out);
            }
            InitialLaw::Points { dim, data } => {
                let n = data.len() / dim;
                let i = (path_index as usize) % n;
                out.copy_from_slice(&data[i * dim..(i + 1) * dim]);
            }
        }
    }
}

/// Euler–Maruyama on one path with caller-supplied increments. `x` holds
/// `(n_steps + 1) × m` states with `x[0..m]` the initial state. Returns
/// `true` if the path diverged; later states are then NaN.
pub fn simulate_path(spec: &SdeSpec, grid: &TimeGrid, dw: &[f64], x: &mut [f64]) -> bool {
    let m = spec.dim();
    let d = spec.noise_dim();
    let dt = grid.dt();
    let mut b = vec![0.0; m];
    let mut sig = vec![0.0; m * d];
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        let (head, tail) = x.split_at_mut((k + 1) * m);
        let xk = &head[k * m..];
        let next = &mut tail[..m];
        spec.drift(t, xk, &mut b);
        spec.diffusion(t, &mut sig);
        let inc = &dw[k * d..(k + 1) * d];
        let mut bad = false;
        for i in 0..m {
            let mut noise = 0.0;
            for l in 0..d {
                noise += sig[i * d + l] * inc[l];
            }
            let v = xk[i] + b[i] * dt + noise;
            if !v.is_finite() || v.abs() > OVERFLOW_GUARD {
                bad = true;
            }
            next[i] = v;
        }
        if bad {
            x[(k + 1) * m..].fill(f64::NAN);
            return true;
        }
    }
    false
}

/// Forward trajectories of an ensemble.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub spec: SdeSpec,
    pub grid: TimeGrid,
    pub seed: u64,
    pub n_paths: usize,
    /// `n_paths × (n_steps + 1) × m`.
    pub x: Vec<f64>,
    pub diverged: Vec<bool>,
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn stride(&self) -> usize {
        self.grid.n_nodes() * self.dim()
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.x[i * s..(i + 1) * s]
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let m = self.dim();
        &self.path(i)[k * m..(k + 1) * m]
    }

    pub fn initial(&self, i: usize) -> &[f64] {
        self.state(i, 0)
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        self.state(i, self.grid.n_steps)
    }

    pub fn brownian(&self, i: usize) -> BrownianStore {
        BrownianStore::new(self.seed, i as u64, &self.grid, self.spec.noise_dim())
    }

    /// The increments used when path `i` was simulated.
    pub fn increments(&self, i: usize) -> Vec<f64> {
        self.brownian(i).increments()
    }

    pub fn n_diverged(&self) -> usize {
        self.diverged.iter().filter(|&&d| d).count()
    }

    /// Indices of paths usable by estimators.
    pub fn valid_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(move |&i| !self.diverged[i])
    }
}

pub fn simulate_forward(
    spec: &SdeSpec,
    grid: &TimeGrid,
    init: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    spec.check_grid(grid)?;
    if init.dim() != spec.dim() {
        return invalid("initial law dimension differs from the SDE dimension");
    }
    let m = spec.dim();
    let stride = grid.n_nodes() * m;
    let mut x = vec![0.0; n_paths * stride];
    let diverged: Vec<bool> = x
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(i, path)| {
            init.sample(seed, i as u64, &mut path[..m]);
            let dw = BrownianStore::new(seed, i as u64, grid, spec.noise_dim()).increments();
            simulate_path(spec, grid, &dw, path)
        })
        .collect();
    Ok(PathEnsemble {
        spec: spec.clone(),
        grid: *grid,
        seed,
        n_paths,
        x,
        diverged,
    })
}

/// Terminal states only (`n_paths × m`, NaN rows for diverged paths), from
/// the same streams as [`simulate_forward`].
pub fn simulate_terminal(
    spec: &SdeSpec,
    grid: &TimeGrid,
    init: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    spec.check_grid(grid)?;
    if init.dim() != spec.dim() {
        return invalid("initial law dimension differs from the SDE dimension");
    }
    let m = spec.dim();
    let mut out = vec![0.0; n_paths * m];
    out.par_chunks_mut(m).enumerate().for_each_init(
        || vec![0.0; grid.n_nodes() * m],
        |path, (i, term)| {
            init.sample(seed, i as u64, &mut path[..m]);
            let dw = BrownianStore::new(seed, i as u64, grid, spec.noise_dim()).increments();
            simulate_path(spec, grid, &dw, path);
            term.copy_from_slice(&path[grid.n_steps * m..]);
        },
    );
    Ok(out)
}

/// An integrand tabulated on the nodes of a grid, `(n_steps + 1) × m × d`.
#[derive(Clone, Debug)]
pub struct TabulatedIntegrand {
    pub grid: TimeGrid,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl TabulatedIntegrand {
    pub fn from_fn<F: FnMut(f64, &mut [f64])>(grid: TimeGrid, rows: usize, cols: usize, mut f: F) -> Self {
        let mut values = vec![0.0; grid.n_nodes() * rows * cols];
        for (k, chunk) in values.chunks_mut(rows * cols).enumerate() {
            f(grid.time(k), chunk);
        }
        TabulatedIntegrand {
            grid,
            rows,
            cols,
            values,
        }
    }
}

/// Left-point Itô sum `Σ_k f(t_k) dW_k` against a path's stored increments.
pub fn ito_integral(grid: &TimeGrid, dw: &[f64], integrand: &TabulatedIntegrand) -> Result<Vec<f64>> {
    if integrand.grid != *grid {
        return Err(Error::GridMismatch(
            "integrand is tabulated on a different grid than the path".into(),
        ));
    }
    let (m, d) = (integrand.rows, integrand.cols);
    if dw.len() != grid.n_steps * d {
        return Err(Error::GridMismatch(format!(
            "expected {} increments, got {}",
            grid.n_steps * d,
            dw.len()
        )));
    }
    let mut out = vec![0.0; m];
    for k in 0..grid.n_steps {
        let f = &integrand.values[k * m * d..(k + 1) * m * d];
        let inc = &dw[k * d..(k + 1) * d];
        for i in 0..m {
            for l in 0..d {
                out[i] += f[i * d + l] * inc[l];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_are_exact_multiples() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        assert_eq!(g.time(500), 0.0 + 500.0 * g.dt());
        let nodes = g.nodes();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.nearest_index(0.2504), 250);
        assert_eq!(g.nearest_index(7.0), 1000);
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn integer_grid_has_unit_spacing() {
        let g = TimeGrid::integer(100).unwrap();
        assert_eq!(g.dt(), 1.0);
        assert_eq!(g.time(1), 1.0);
    }

    #[test]
    fn zero_dynamics_freeze_the_state() {
        let spec = SdeSpec::new(Schedule::const_linear(vec![vec![0.0]], vec![vec![0.0]]).unwrap(), 1).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let ens = simulate_forward(&spec, &grid, &InitialLaw::point(vec![3.0]), 4, 1).unwrap();
        assert!(ens.x.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn initial_state_is_recorded() {
        let spec = SdeSpec::new(Schedule::vp_constant(0.1, 1.0).unwrap(), 2).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let ens = simulate_forward(&spec, &grid, &InitialLaw::point(vec![1.0, -2.0]), 3, 9).unwrap();
        for i in 0..3 {
            assert_eq!(ens.initial(i), &[1.0, -2.0]);
        }
    }

    #[test]
    fn divergence_is_flagged_not_dropped() {
        // Explicit Euler for -x³ from x0 = 100 with dt = 0.1 overshoots.
        let spec = SdeSpec::cubic(1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let ens = simulate_forward(&spec, &grid, &InitialLaw::point(vec![100.0]), 2, 0).unwrap();
        assert_eq!(ens.n_diverged(), 2);
        assert_eq!(ens.valid_paths().count(), 0);
    }

    #[test]
    fn ito_integral_rejects_foreign_grid() {
        let g1 = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let g2 = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let f = TabulatedIntegrand::from_fn(g2, 1, 1, |_, o| o[0] = 1.0);
        assert!(matches!(ito_integral(&g1, &[0.0; 10], &f), Err(Error::GridMismatch(_))));
        let zero = TabulatedIntegrand::from_fn(g1, 1, 1, |_, o| o[0] = 0.0);
        assert_eq!(ito_integral(&g1, &[0.3; 10], &zero).unwrap(), vec![0.0]);
    }

    #[test]
    fn spec_json_roundtrip_and_strictness() {
        let spec = SdeSpec::new(Schedule::ve(0.01, 50.0, 1.0).unwrap(), 2).unwrap();
        let j = serde_json::to_string(&spec).unwrap();
        let back: SdeSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, spec);
        let tampered = j.replace("\"linear\":true", "\"linear\":false");
        assert!(serde_json::from_str::<SdeSpec>(&tampered).is_err());
    }
}
