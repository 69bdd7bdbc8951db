use rand::RngCore;

use crate::error::Result;
use crate::trajectory::{Token, Turn};

/// An agent: maps a dialog prefix `e_0, a_1, ..., e_{t-1}` to its next turn.
pub trait Policy: Send + Sync {
    /// Draws the next agent turn.
    fn sample(&self, prefix: &[Turn], rng: &mut dyn RngCore) -> Result<Vec<Token>>;

    /// The full action distribution, when it can be enumerated.
    fn distribution(&self, _prefix: &[Turn]) -> Option<Result<Vec<(Vec<Token>, f64)>>> {
        None
    }
}

/// Samples an index from a probability vector using one uniform draw.
pub(crate) fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u = uniform(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: fall back to the last index with non-zero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub(crate) fn uniform(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
