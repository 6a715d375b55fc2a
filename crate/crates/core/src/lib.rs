//! Score functions of SDE marginals through the Malliavin–Bismut formula.
//!
//! For linear SDEs with additive noise the score reduces to
//! `∇log p_t(y) = -γ_t⁻¹ (y - Y_t E[X_0 | X_t = y])`, with `Y` the first
//! variation process and `γ` the Malliavin matrix. For nonlinear drift with
//! state-independent diffusion the score is `-E[δ(u) | X_t = y]`, where the
//! Skorokhod integral `δ(u)` is evaluated pathwise from the first and second
//! variation processes and conditioned by kernel regression.

pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod linear_score;
pub mod mixture;
pub mod mlp;
pub mod nonlinear;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sde;
pub mod variation;
pub mod verify;

pub use error::{Error, Result};
pub use mixture::GaussianMixturePrior;
pub use schedule::{CustomDrift, Schedule};
pub use sde::{simulate_forward, simulate_terminal, InitialLaw, PathEnsemble, SdeSpec, TimeGrid};
