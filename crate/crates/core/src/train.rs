//! Small pieces shared by the training loops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Uniform minibatch indices, drawn with replacement.
pub fn minibatch<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Losses on unit-scale features never get near this; past it the weights
/// have blown up even if saturating activations keep the value finite.
pub const LOSS_CEILING: f64 = 1e8;

pub fn check_loss(loss: f64, context: &str, step: usize) -> Result<()> {
    if loss.is_finite() && loss.abs() < LOSS_CEILING {
        Ok(())
    } else {
        Err(Error::Divergence { context: context.to_string(), step })
    }
}

pub fn should_log(step: usize, every: usize, total: usize) -> bool {
    step == 0 || step + 1 == total || (every > 0 && (step + 1) % every == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blown_up_losses_count_as_divergence() {
        assert!(check_loss(3.5, "t", 0).is_ok());
        for bad in [f64::NAN, f64::INFINITY, 4e23, -LOSS_CEILING] {
            assert!(matches!(check_loss(bad, "t", 7), Err(Error::Divergence { step: 7, .. })));
        }
    }
}
