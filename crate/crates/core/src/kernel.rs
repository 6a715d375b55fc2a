//! Nadaraya–Watson estimation of `E[δ | X_T = y]` with a Gaussian product
//! kernel and bootstrap standard errors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nonlinear::SampleSet;
use crate::rng;

pub const MIN_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", deny_unknown_fields)]
pub enum Bandwidth {
    /// `scale · 0.9 · min(sd, IQR/1.34) · n^{-1/5}` per coordinate.
    Silverman { scale: f64 },
    Fixed { h: Vec<f64> },
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Silverman { scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalEstimator {
    #[serde(default)]
    pub bandwidth: Bandwidth,
    /// Kish effective sample size below which an estimate is flagged.
    #[serde(default = "default_min_ess")]
    pub min_ess: f64,
    #[serde(default = "default_bootstrap")]
    pub n_bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_ess() -> f64 {
    50.0
}

fn default_bootstrap() -> usize {
    200
}

impl Default for ConditionalEstimator {
    fn default() -> Self {
        ConditionalEstimator { bandwidth: Bandwidth::default(), min_ess: default_min_ess(), n_bootstrap: default_bootstrap(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionalEstimate {
    pub y: Vec<f64>,
    pub value: Vec<f64>,
    pub std_error: Vec<f64>,
    pub ess: f64,
    pub low_confidence: bool,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb for one coordinate.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

impl ConditionalEstimator {
    pub fn bandwidths(&self, xs: &[f64], m: usize) -> Result<Vec<f64>> {
        let h = match &self.bandwidth {
            Bandwidth::Fixed { h } => h.clone(),
            Bandwidth::Silverman { scale } => (0..m)
                .map(|j| {
                    let col: Vec<f64> = xs.iter().skip(j).step_by(m).copied().collect();
                    scale * silverman_bandwidth(&col)
                })
                .collect(),
        };
        if h.len() != m || h.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid(format!("kernel bandwidth must be positive per coordinate, got {h:?}"));
        }
        Ok(h)
    }

    /// Nadaraya–Watson regression of `values` (`n × k`) on `xs` (`n × m`) at
    /// each query point.
    pub fn estimate(&self, xs: &[f64], m: usize, values: &[f64], k: usize, queries: &[Vec<f64>]) -> Result<Vec<ConditionalEstimate>> {
        let n = xs.len() / m;
        if n * m != xs.len() || values.len() != n * k {
            return invalid("sample and value arrays disagree in length");
        }
        if n < 2 {
            return Err(Error::InsufficientData(format!("{n} samples")));
        }
        let h = self.bandwidths(xs, m)?;
        let weights: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| {
                xs.chunks(m)
                    .map(|x| {
                        let e: f64 = x.iter().zip(q).zip(&h).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
                        (-0.5 * e).exp()
                    })
                    .collect()
            })
            .collect();
        let point = |w: &[f64], counts: Option<&[u32]>| -> Vec<f64> {
            let mut num = vec![0.0; k];
            let mut den = 0.0;
            for i in 0..n {
                let c = counts.map_or(1.0, |c| c[i] as f64);
                if c == 0.0 || w[i] == 0.0 {
                    continue;
                }
                let wi = c * w[i];
                den += wi;
                for j in 0..k {
                    num[j] += wi * values[i * k + j];
                }
            }
            num.into_iter().map(|v| v / den).collect()
        };
        let mut out: Vec<ConditionalEstimate> = queries
            .iter()
            .zip(&weights)
            .map(|(q, w)| {
                let s1: f64 = w.iter().sum();
                let s2: f64 = w.iter().map(|v| v * v).sum();
                let ess = if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 };
                ConditionalEstimate {
                    y: q.clone(),
                    value: point(w, None),
                    std_error: vec![0.0; k],
                    ess,
                    low_confidence: !(ess >= self.min_ess),
                }
            })
            .collect();
        if self.n_bootstrap > 1 {
            let mut reps: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(self.n_bootstrap); queries.len()];
            let mut counts = vec![0u32; n];
            for b in 0..self.n_bootstrap {
                let mut r = rng::stream(self.seed, rng::domain::BOOTSTRAP, b as u64);
                counts.fill(0);
                for _ in 0..n {
                    counts[r.random_range(0..n)] += 1;
                }
                for (qi, w) in weights.iter().enumerate() {
                    let est = point(w, Some(&counts));
                    if est.iter().all(|v| v.is_finite()) {
                        reps[qi].push(est);
                    }
                }
            }
            for (o, rep) in out.iter_mut().zip(&reps) {
                let b = rep.len() as f64;
                for j in 0..k {
                    o.std_error[j] = if rep.len() > 1 {
                        let mean = rep.iter().map(|e| e[j]).sum::<f64>() / b;
                        (rep.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt()
                    } else {
                        f64::INFINITY
                    };
                }
                if rep.len() < self.n_bootstrap {
                    o.low_confidence = true;
                }
            }
        }
        for o in &mut out {
            if o.value.iter().any(|v| !v.is_finite()) {
                o.low_confidence = true;
            }
        }
        Ok(out)
    }
}

/// `-E[δ(u) | X_T = y]` at each query, from the valid samples of a set.
pub fn conditional_score(samples: &SampleSet, queries: &[Vec<f64>], estimator: &ConditionalEstimator) -> Result<Vec<ConditionalEstimate>> {
    let m = samples.dim;
    let n = samples.n_valid();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!("{n} valid samples, need at least {MIN_SAMPLES}")));
    }
    if queries.iter().any(|q| q.len() != m) {
        return invalid("query dimension differs from the samples");
    }
    let mut xs = Vec::with_capacity(n * m);
    let mut vals = Vec::with_capacity(n * m);
    for s in samples.valid() {
        xs.extend_from_slice(&s.x_t);
        vals.extend_from_slice(&s.delta);
    }
    let mut est = estimator.estimate(&xs, m, &vals, m, queries)?;
    for e in &mut est {
        for v in &mut e.value {
            *v = -*v;
        }
    }
    Ok(est)
}
