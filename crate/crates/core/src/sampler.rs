//! Reverse-time Euler–Maruyama sampling driven by a score field:
//! `x ← x − [f(t, x) − σσᵀ s(t, x)] Δt + σ √Δt ξ`, from `t = T` down to
//! `t = Δt`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::ScoreField;
use crate::kernel::ConditionalEstimator;
use crate::linalg;
use crate::nonlinear::{skorokhod_ensemble, SampleSet};
use crate::rng;
use crate::schedule::Schedule;
use crate::sde::{InitialLaw, SdeSpec, TimeGrid};
use crate::variation::Regularization;

/// Samples advanced together through one batched score call.
pub const DEFAULT_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PriorKind {
    StandardNormal,
    Isotropic { std: f64 },
    /// Uniform resampling of stored points (`n × m`).
    Empirical { dim: usize, points: Vec<f64> },
}

impl PriorKind {
    /// `N(0, σ_max² I)` for VE, `N(0, I)` otherwise.
    pub fn for_schedule(schedule: &Schedule) -> Self {
        match *schedule {
            Schedule::Ve { sigma_max, .. } => PriorKind::Isotropic { std: sigma_max },
            _ => PriorKind::StandardNormal,
        }
    }

    fn draw(&self, r: &mut rand_chacha::ChaCha8Rng, out: &mut [f64]) {
        match self {
            PriorKind::StandardNormal => out.iter_mut().for_each(|v| *v = rng::standard_normal(r)),
            PriorKind::Isotropic { std } => out.iter_mut().for_each(|v| *v = std * rng::standard_normal(r)),
            PriorKind::Empirical { dim, points } => {
                let n = points.len() / dim;
                let i = r.random_range(0..n);
                out.copy_from_slice(&points[i * dim..(i + 1) * dim]);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReverseRun {
    pub spec: SdeSpec,
    pub horizon: f64,
    pub steps: usize,
    pub prior: PriorKind,
    pub seed: u64,
    pub keep_trajectories: bool,
    pub block: usize,
}

impl ReverseRun {
    pub fn new(spec: SdeSpec, horizon: f64, steps: usize, seed: u64) -> Self {
        let prior = PriorKind::for_schedule(spec.schedule());
        ReverseRun { spec, horizon, steps, prior, seed, keep_trajectories: false, block: DEFAULT_BLOCK }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("reverse sampling needs at least one step");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid("horizon must be positive");
        }
        if self.block == 0 {
            return invalid("block size must be positive");
        }
        match &self.prior {
            PriorKind::Isotropic { std } if !(*std >= 0.0) => invalid("prior std must be non-negative"),
            PriorKind::Empirical { dim, points } if *dim != self.spec.dim() || points.is_empty() || points.len() % dim != 0 => {
                invalid("empirical prior has the wrong shape")
            }
            _ => Ok(()),
        }
    }

    /// Time at reverse step `step ∈ 1..=steps`.
    pub fn time(&self, step: usize) -> f64 {
        self.horizon - (step - 1) as f64 * self.horizon / self.steps as f64
    }
}

#[derive(Clone, Debug)]
pub struct ReverseOutput {
    pub dim: usize,
    /// `n × m`.
    pub samples: Vec<f64>,
    /// `n × (steps + 1) × m` when requested; node 0 is the prior draw.
    pub trajectories: Option<Vec<f64>>,
}

pub fn reverse_sample(run: &ReverseRun, field: &dyn ScoreField, n: usize) -> Result<ReverseOutput> {
    run.validate()?;
    let m = run.spec.dim();
    let d = run.spec.noise_dim();
    if field.dim() != m {
        return invalid("score field dimension differs from the SDE");
    }
    if n == 0 {
        return invalid("need at least one sample");
    }
    let dt = run.horizon / run.steps as f64;
    let sq = dt.sqrt();
    let blocks: Vec<(usize, usize)> = (0..n).step_by(run.block).map(|s| (s, (s + run.block).min(n))).collect();
    let results: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let nb = hi - lo;
            let mut rngs: Vec<_> = (lo..hi).map(|i| rng::stream(run.seed, rng::domain::REVERSE, i as u64)).collect();
            let mut x = vec![0.0; nb * m];
            for (r, xi) in rngs.iter_mut().zip(x.chunks_mut(m)) {
                run.prior.draw(r, xi);
            }
            let mut traj = run.keep_trajectories.then(|| {
                let mut t = vec![0.0; nb * (run.steps + 1) * m];
                for i in 0..nb {
                    t[i * (run.steps + 1) * m..i * (run.steps + 1) * m + m].copy_from_slice(&x[i * m..(i + 1) * m]);
                }
                t
            });
            let mut score = vec![0.0; nb * m];
            let mut sig = vec![0.0; m * d];
            let mut sst = vec![0.0; m * m];
            let mut f = vec![0.0; m];
            let mut corr = vec![0.0; m];
            let mut xi = vec![0.0; d];
            let mut noise = vec![0.0; m];
            for step in 1..=run.steps {
                let t = run.time(step);
                field.score_batch(t, &x, &mut score)?;
                if let Some(bad) = score.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "score is not finite for sample {} at reverse step {step} (t = {t})",
                        lo + bad / m
                    )));
                }
                run.spec.diffusion(t, &mut sig);
                linalg::matmul_bt(&sig, &sig, &mut sst, m, d, m);
                for (i, r) in rngs.iter_mut().enumerate() {
                    let xs = &mut x[i * m..(i + 1) * m];
                    run.spec.drift(t, xs, &mut f);
                    linalg::matvec(&sst, &score[i * m..(i + 1) * m], &mut corr, m, m);
                    for v in xi.iter_mut() {
                        *v = rng::standard_normal(r);
                    }
                    linalg::matvec(&sig, &xi, &mut noise, m, d);
                    for j in 0..m {
                        xs[j] += -(f[j] - corr[j]) * dt + sq * noise[j];
                    }
                    if xs.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "sample {} left the finite range at reverse step {step} (t = {t})",
                            lo + i
                        )));
                    }
                    if let Some(tr) = traj.as_mut() {
                        let off = (i * (run.steps + 1) + step) * m;
                        tr[off..off + m].copy_from_slice(xs);
                    }
                }
            }
            Ok((x, traj))
        })
        .collect();
    let mut samples = Vec::with_capacity(n * m);
    let mut trajectories = run.keep_trajectories.then(Vec::new);
    for r in results {
        let (x, t) = r?;
        samples.extend_from_slice(&x);
        if let (Some(all), Some(t)) = (trajectories.as_mut(), t) {
            all.extend_from_slice(&t);
        }
    }
    Ok(ReverseOutput { dim: m, samples, trajectories })
}

/// Score from Skorokhod ensembles simulated to a ladder of horizons, looked
/// up at the nearest horizon and conditioned by kernel regression.
#[derive(Clone, Debug)]
pub struct NonlinearMcField {
    pub horizons: Vec<f64>,
    pub sets: Vec<SampleSet>,
    pub estimator: ConditionalEstimator,
    bandwidths: Vec<Vec<f64>>,
    points: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NonlinearMcField {
    /// One ensemble of `n_paths` per horizon, each on a grid of step `dt`.
    pub fn build(
        spec: &SdeSpec,
        init: &InitialLaw,
        horizons: &[f64],
        dt: f64,
        n_paths: usize,
        seed: u64,
        estimator: ConditionalEstimator,
    ) -> Result<Self> {
        if horizons.is_empty() {
            return invalid("need at least one horizon");
        }
        let mut sets = Vec::with_capacity(horizons.len());
        let mut bandwidths = Vec::with_capacity(horizons.len());
        let mut points = Vec::with_capacity(horizons.len());
        for (i, &h) in horizons.iter().enumerate() {
            let grid = TimeGrid::with_step(h, dt)?;
            let set = skorokhod_ensemble(spec, &grid, init, n_paths, seed.wrapping_add(i as u64), Regularization::Default)?;
            let m = set.dim;
            let (mut xs, mut ds) = (Vec::new(), Vec::new());
            for s in set.valid() {
                xs.extend_from_slice(&s.x_t);
                ds.extend_from_slice(&s.delta);
            }
            if xs.is_empty() {
                return Err(Error::InsufficientData(format!("no valid samples at horizon {h}")));
            }
            bandwidths.push(estimator.bandwidths(&xs, m)?);
            points.push((xs, ds));
            sets.push(set);
        }
        Ok(NonlinearMcField { horizons: horizons.to_vec(), sets, estimator, bandwidths, points })
    }

    fn nearest(&self, t: f64) -> usize {
        self.horizons
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

impl ScoreField for NonlinearMcField {
    fn dim(&self) -> usize {
        self.sets[0].dim
    }

    fn score(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        let k = self.nearest(t);
        let m = self.dim();
        let (xs, ds) = &self.points[k];
        let h = &self.bandwidths[k];
        let mut num = vec![0.0; m];
        let mut den = 0.0;
        for (x, dl) in xs.chunks(m).zip(ds.chunks(m)) {
            let e: f64 = x.iter().zip(y).zip(h).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
            let w = (-0.5 * e).exp();
            den += w;
            for j in 0..m {
                num[j] += w * dl[j];
            }
        }
        for j in 0..m {
            // An empty kernel neighbourhood gives no information; fall back to 0.
            out[j] = if den > 0.0 { -num[j] / den } else { 0.0 };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero(usize);

    impl ScoreField for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, _t: f64, _y: &[f64], out: &mut [f64]) -> Result<()> {
            out.fill(0.0);
            Ok(())
        }
    }

    struct Bad;

    impl ScoreField for Bad {
        fn dim(&self) -> usize {
            1
        }
        fn score(&self, _t: f64, _y: &[f64], out: &mut [f64]) -> Result<()> {
            out.fill(f64::NAN);
            Ok(())
        }
    }

    fn still() -> SdeSpec {
        SdeSpec::new(Schedule::const_linear(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(), 2)
            .unwrap()
    }

    #[test]
    fn frozen_dynamics_return_prior_draws() {
        let run = ReverseRun::new(still(), 1.0, 10, 3);
        let out = reverse_sample(&run, &Zero(2), 5).unwrap();
        for i in 0..5 {
            let mut r = rng::stream(3, rng::domain::REVERSE, i as u64);
            let mut p = [0.0; 2];
            run.prior.draw(&mut r, &mut p);
            assert_eq!(&out.samples[2 * i..2 * i + 2], &p);
        }
    }

    #[test]
    fn block_size_does_not_change_samples() {
        let spec = SdeSpec::new(Schedule::vp(0.1, 20.0, 1.0).unwrap(), 2).unwrap();
        let mut run = ReverseRun::new(spec, 1.0, 20, 9);
        let a = reverse_sample(&run, &Zero(2), 37).unwrap();
        run.block = 5;
        run.keep_trajectories = true;
        let b = reverse_sample(&run, &Zero(2), 37).unwrap();
        assert_eq!(a.samples, b.samples);
        let tr = b.trajectories.unwrap();
        assert_eq!(tr.len(), 37 * 21 * 2);
        assert_eq!(&tr[20 * 2..21 * 2], &b.samples[..2]);
    }

    #[test]
    fn non_finite_score_aborts() {
        let spec = SdeSpec::new(Schedule::vp(0.1, 20.0, 1.0).unwrap(), 1).unwrap();
        let err = reverse_sample(&ReverseRun::new(spec, 1.0, 5, 0), &Bad, 3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn reverse_times_follow_the_step_map() {
        let run = ReverseRun::new(still(), 2.0, 4, 0);
        assert_eq!((1..=4).map(|s| run.time(s)).collect::<Vec<_>>(), vec![2.0, 1.5, 1.0, 0.5]);
        assert_eq!(PriorKind::for_schedule(&Schedule::ve(0.01, 50.0, 1.0).unwrap()), PriorKind::Isotropic { std: 50.0 });
    }
}
