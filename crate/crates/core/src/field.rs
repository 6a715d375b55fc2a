//! The score-field interface consumed by the reverse-time sampler.

use crate::error::Result;

pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// `∇_y log p_t(y)` written into `out`.
    fn score(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()>;

    /// Row-major batch of `ys.len() / dim` query points.
    fn score_batch(&self, t: f64, ys: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.dim();
        for (y, o) in ys.chunks(m).zip(out.chunks_mut(m)) {
            self.score(t, y, o)?;
        }
        Ok(())
    }
}
