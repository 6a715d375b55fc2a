//! Noise schedules and the coefficient families they induce.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A forward-SDE family. The isotropic families (VE, VP, SubVP) act
/// coordinate-wise with `d = m`; the two matrix families carry explicit
/// coefficient matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    /// `dX = g(t) dB`, `σ(t) = σ_min (σ_max/σ_min)^{t/T}`, `g² = dσ²/dt`.
    #[serde(rename = "VE")]
    Ve {
        sigma_min: f64,
        sigma_max: f64,
        horizon: f64,
    },
    /// `dX = -β(t)/2 X dt + √β(t) dB` with `β` affine from `β_min` to `β_max`.
    #[serde(rename = "VP")]
    Vp {
        beta_min: f64,
        beta_max: f64,
        horizon: f64,
    },
    /// `dX = -β(t)/2 X dt + √(β(t)(1 - e^{-2B(t)})) dB`.
    #[serde(rename = "SubVP")]
    SubVp {
        beta_min: f64,
        beta_max: f64,
        horizon: f64,
    },
    /// `dX = b X dt + σ dB` with constant `b` (m×m) and `σ` (m×d).
    ConstLinear {
        drift: Vec<Vec<f64>>,
        diffusion: Vec<Vec<f64>>,
    },
    /// Nonlinear drift from a fixed catalogue, constant diffusion matrix.
    Custom {
        drift: CustomDrift,
        diffusion: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", deny_unknown_fields)]
pub enum CustomDrift {
    /// `b(x)_i = -c · x_i³`, acting coordinate-wise.
    Cubic { coefficient: f64 },
}

impl Schedule {
    pub fn ve(sigma_min: f64, sigma_max: f64, horizon: f64) -> Result<Self> {
        let s = Schedule::Ve {
            sigma_min,
            sigma_max,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn vp(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let s = Schedule::Vp {
            beta_min,
            beta_max,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn vp_constant(beta: f64, horizon: f64) -> Result<Self> {
        Self::vp(beta, beta, horizon)
    }

    pub fn sub_vp(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let s = Schedule::SubVp {
            beta_min,
            beta_max,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn sub_vp_constant(beta: f64, horizon: f64) -> Result<Self> {
        Self::sub_vp(beta, beta, horizon)
    }

    pub fn const_linear(drift: Vec<Vec<f64>>, diffusion: Vec<Vec<f64>>) -> Result<Self> {
        let s = Schedule::ConstLinear { drift, diffusion };
        s.validate()?;
        Ok(s)
    }

    pub fn cubic(coefficient: f64, diffusion: Vec<Vec<f64>>) -> Result<Self> {
        let s = Schedule::Custom {
            drift: CustomDrift::Cubic { coefficient },
            diffusion,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Ve {
                sigma_min,
                sigma_max,
                horizon,
            } => {
                if !(sigma_min > 0.0 && sigma_min.is_finite()) {
                    return invalid(format!("VE sigma_min must be positive, got {sigma_min}"));
                }
                if !(sigma_max > sigma_min && sigma_max.is_finite()) {
                    return invalid(format!(
                        "VE requires sigma_max > sigma_min, got {sigma_min} >= {sigma_max}"
                    ));
                }
                check_horizon(horizon)
            }
            Schedule::Vp {
                beta_min,
                beta_max,
                horizon,
            }
            | Schedule::SubVp {
                beta_min,
                beta_max,
                horizon,
            } => {
                if !(beta_min > 0.0 && beta_min.is_finite()) {
                    return invalid(format!("beta_min must be positive, got {beta_min}"));
                }
                if !(beta_max >= beta_min && beta_max.is_finite()) {
                    return invalid(format!(
                        "beta_max must be at least beta_min, got {beta_max} < {beta_min}"
                    ));
                }
                check_horizon(horizon)
            }
            Schedule::ConstLinear {
                ref drift,
                ref diffusion,
            } => {
                let m = drift.len();
                if m == 0 || drift.iter().any(|r| r.len() != m) {
                    return invalid("ConstLinear drift must be a non-empty square matrix");
                }
                check_diffusion(diffusion, m)
            }
            Schedule::Custom {
                drift,
                ref diffusion,
            } => {
                let CustomDrift::Cubic { coefficient } = drift;
                if !coefficient.is_finite() {
                    return invalid("cubic coefficient must be finite");
                }
                check_diffusion(diffusion, diffusion.len())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Ve { .. } => "VE",
            Schedule::Vp { .. } => "VP",
            Schedule::SubVp { .. } => "SubVP",
            Schedule::ConstLinear { .. } => "ConstLinear",
            Schedule::Custom { .. } => "Custom",
        }
    }

    /// True for the coordinate-wise families with closed-form moments.
    pub fn is_isotropic(&self) -> bool {
        matches!(
            self,
            Schedule::Ve { .. } | Schedule::Vp { .. } | Schedule::SubVp { .. }
        )
    }

    pub fn horizon(&self) -> Option<f64> {
        match *self {
            Schedule::Ve { horizon, .. }
            | Schedule::Vp { horizon, .. }
            | Schedule::SubVp { horizon, .. } => Some(horizon),
            _ => None,
        }
    }

    /// `β(t)` for VP/SubVP.
    pub fn beta(&self, t: f64) -> Option<f64> {
        match *self {
            Schedule::Vp {
                beta_min,
                beta_max,
                horizon,
            }
            | Schedule::SubVp {
                beta_min,
                beta_max,
                horizon,
            } => Some(beta_min + (beta_max - beta_min) * t / horizon),
            _ => None,
        }
    }

    /// `B(t) = ∫₀ᵗ β(s) ds` in closed form for the affine `β`.
    pub fn integrated_beta(&self, t: f64) -> Option<f64> {
        match *self {
            Schedule::Vp {
                beta_min,
                beta_max,
                horizon,
            }
            | Schedule::SubVp {
                beta_min,
                beta_max,
                horizon,
            } => Some(beta_min * t + 0.5 * (beta_max - beta_min) * t * t / horizon),
            _ => None,
        }
    }

    /// VE noise scale `σ(t)`.
    pub fn ve_sigma(&self, t: f64) -> Option<f64> {
        match *self {
            Schedule::Ve {
                sigma_min,
                sigma_max,
                horizon,
            } => Some(sigma_min * (sigma_max / sigma_min).powf(t / horizon)),
            _ => None,
        }
    }

    /// Squared scalar diffusion `g(t)²` of the isotropic families.
    pub fn g2(&self, t: f64) -> Option<f64> {
        match *self {
            Schedule::Ve {
                sigma_min,
                sigma_max,
                horizon,
            } => {
                let s = self.ve_sigma(t)?;
                Some(2.0 * (sigma_max / sigma_min).ln() / horizon * s * s)
            }
            Schedule::Vp { .. } => self.beta(t),
            Schedule::SubVp { .. } => {
                let b = self.integrated_beta(t)?;
                Some(self.beta(t)? * -(-2.0 * b).exp_m1())
            }
            _ => None,
        }
    }

    /// Scalar linear drift rate `a(t)` with `b(t, x) = a(t) x` for the
    /// isotropic families.
    pub fn drift_rate(&self, t: f64) -> Option<f64> {
        match self {
            Schedule::Ve { .. } => Some(0.0),
            Schedule::Vp { .. } | Schedule::SubVp { .. } => Some(-0.5 * self.beta(t)?),
            _ => None,
        }
    }

    /// Mean factor `Y_t` of the isotropic families (`E[X_t | X_0 = x] = Y_t x`).
    pub fn mean_factor(&self, t: f64) -> Option<f64> {
        match self {
            Schedule::Ve { .. } => Some(1.0),
            Schedule::Vp { .. } | Schedule::SubVp { .. } => {
                Some((-0.5 * self.integrated_beta(t)?).exp())
            }
            _ => None,
        }
    }

    /// Transition variance `γ(t)` (per coordinate) of the isotropic families.
    pub fn transition_variance(&self, t: f64) -> Option<f64> {
        match *self {
            Schedule::Ve {
                sigma_min,
                sigma_max,
                horizon,
            } => {
                // σ_min² ((σ_max/σ_min)^{2t/T} − 1), with expm1 for small t.
                Some(sigma_min * sigma_min * (2.0 * t / horizon * (sigma_max / sigma_min).ln()).exp_m1())
            }
            Schedule::Vp { .. } => Some(-(-self.integrated_beta(t)?).exp_m1()),
            Schedule::SubVp { .. } => {
                let v = -(-self.integrated_beta(t)?).exp_m1();
                Some(v * v)
            }
            _ => None,
        }
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return invalid(format!("horizon must be positive, got {horizon}"));
    }
    Ok(())
}

fn check_diffusion(diffusion: &[Vec<f64>], m: usize) -> Result<()> {
    if diffusion.len() != m || m == 0 {
        return invalid(format!("diffusion must have {m} rows"));
    }
    let d = diffusion[0].len();
    if d == 0 || diffusion.iter().any(|r| r.len() != d) {
        return invalid("diffusion rows must share a positive length");
    }
    if diffusion.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("diffusion entries must be finite");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ve_endpoints() {
        let s = Schedule::ve(0.01, 50.0, 1.0).unwrap();
        assert!((s.ve_sigma(0.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.ve_sigma(1.0).unwrap() - 50.0).abs() < 1e-10);
    }

    #[test]
    fn constant_vp_integrated_beta() {
        let s = Schedule::vp_constant(0.1, 1.0).unwrap();
        assert!((s.integrated_beta(1.0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ve_g2_integrates_to_variance_gap() {
        // Trapezoid quadrature of g² on dt = 1e-5 against σ_max² − σ_min².
        let s = Schedule::ve(0.01, 50.0, 1.0).unwrap();
        let n = 100_000;
        let dt = 1.0 / n as f64;
        let mut acc = 0.0;
        for k in 0..n {
            let a = s.g2(k as f64 * dt).unwrap();
            let b = s.g2((k + 1) as f64 * dt).unwrap();
            acc += 0.5 * (a + b) * dt;
        }
        assert!((acc - 2499.9999).abs() / 2499.9999 < 1e-6, "{acc}");
        assert!((s.transition_variance(1.0).unwrap() - 2499.9999).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Schedule::ve(1.0, 1.0, 1.0).is_err());
        assert!(Schedule::ve(2.0, 1.0, 1.0).is_err());
        assert!(Schedule::vp(0.0, 1.0, 1.0).is_err());
        assert!(Schedule::sub_vp(-0.1, 1.0, 1.0).is_err());
        assert!(Schedule::vp(1.0, 0.5, 1.0).is_err());
        assert!(Schedule::const_linear(vec![vec![1.0, 0.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn beta_stays_above_minimum() {
        let s = Schedule::sub_vp(0.1, 20.0, 1.0).unwrap();
        for k in 0..=100 {
            assert!(s.beta(k as f64 / 100.0).unwrap() >= 0.1);
        }
    }

    #[test]
    fn json_uses_string_tag() {
        let s = Schedule::vp(0.1, 20.0, 1.0).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"kind\":\"VP\""));
        let back: Schedule = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"kind":"VP","beta_min":0.1,"beta_max":20.0,"horizon":1.0,"typo":1}"#;
        assert!(serde_json::from_str::<Schedule>(bad).is_err());
    }
}
