//! Gaussian mixture laws, used both as data distributions and as the exact
//! posterior oracle for linear SDEs.

use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg;
use crate::rng::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixturePrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major m×m covariances.
    pub covariances: Vec<Vec<f64>>,
    #[serde(skip)]
    chol: Vec<Vec<f64>>,
}

impl GaussianMixturePrior {
    /// Builds a mixture, normalizing the weights to sum to one.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return invalid("mixture needs matching non-empty weights, means and covariances");
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return invalid("mixture weights must be positive");
        }
        let m = means[0].len();
        if m == 0 || means.iter().any(|mu| mu.len() != m) {
            return invalid("mixture means must share a positive dimension");
        }
        if covariances.iter().any(|c| c.len() != m * m) {
            return invalid("each covariance must be m×m");
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        let mut prior = GaussianMixturePrior {
            weights,
            means,
            covariances,
            chol: Vec::new(),
        };
        prior.factor()?;
        Ok(prior)
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Equal-weight isotropic components with standard deviation `std`.
    pub fn isotropic(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let m = means.first().map_or(0, Vec::len);
        let mut cov = vec![0.0; m * m];
        for i in 0..m {
            cov[i * m + i] = std * std;
        }
        let k = means.len();
        Self::new(vec![1.0; k], means, vec![cov; k])
    }

    fn factor(&mut self) -> Result<()> {
        let m = self.dim();
        let mut chol = Vec::with_capacity(self.weights.len());
        for c in &self.covariances {
            // Semi-definite covariances (point masses) fall back to the
            // symmetric square root.
            let l = linalg::cholesky_lower(c, m).or_else(|| psd_sqrt(c, m));
            match l {
                Some(l) => chol.push(l),
                None => return invalid("mixture covariance is not positive semidefinite"),
            }
        }
        self.chol = chol;
        Ok(())
    }

    /// Restores derived state after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.weights, self.means, self.covariances)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let m = self.dim();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        let z: Vec<f64> = (0..m).map(|_| standard_normal(rng)).collect();
        let l = &self.chol[comp];
        for i in 0..m {
            let mut v = self.means[comp][i];
            for j in 0..m {
                v += l[i * m + j] * z[j];
            }
            out[i] = v;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let m = self.dim();
        let mut out = vec![0.0; m];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for i in 0..m {
                out[i] += w * mu[i];
            }
        }
        out
    }
}

/// Symmetric square root through the eigendecomposition, for PSD matrices
/// that Cholesky rejects.
fn psd_sqrt(a: &[f64], m: usize) -> Option<Vec<f64>> {
    use nalgebra::{DMatrix, SymmetricEigen};
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, a));
    if eig.eigenvalues.iter().any(|&v| v < -1e-12) {
        return None;
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                acc += eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt() * eig.eigenvectors[(j, k)];
            }
            out[i * m + j] = acc;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn weights_normalize() {
        let p = GaussianMixturePrior::new(
            vec![2.0, 6.0],
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p.weights[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn point_mass_component_samples_its_mean() {
        let p = GaussianMixturePrior::gaussian(vec![0.3, -0.2], vec![0.0; 4]).unwrap();
        let mut r = rng::stream(1, 0, 0);
        let mut out = [0.0; 2];
        p.sample(&mut r, &mut out);
        assert_eq!(out, [0.3, -0.2]);
    }

    #[test]
    fn rejects_nonpositive_weight() {
        assert!(GaussianMixturePrior::new(vec![0.0], vec![vec![0.0]], vec![vec![1.0]]).is_err());
    }
}
