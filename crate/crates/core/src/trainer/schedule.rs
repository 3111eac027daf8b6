//! Learning-rate schedule: constant, then linear decay to zero.

use crate::trainer::{TrainConfig, TrainError};

/// Learning rate for a 0-indexed epoch: `cfg.lr` through the constant phase,
/// then `cfg.lr * (total - epoch) / epochs_decay`.
///
/// The domain includes `epoch == total` (where the line reaches exactly
/// zero), so the schedule's endpoint is observable; anything past that is an
/// error.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let total = cfg.epochs_const + cfg.epochs_decay;
    if epoch > total {
        return Err(TrainError::EpochOutOfRange { epoch, total });
    }
    if epoch < cfg.epochs_const {
        return Ok(cfg.lr);
    }
    if epoch == total {
        return Ok(0.0);
    }
    Ok(cfg.lr * (total - epoch) as f64 / cfg.epochs_decay as f64)
}
