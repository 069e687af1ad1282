use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Training SNR: a fixed value, or a uniform draw from a discrete set per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SnrSchedule {
    Fixed { snr_db: f64 },
    Set { values_db: Vec<f64> },
}

impl SnrSchedule {
    pub fn fixed(snr_db: f64) -> Self {
        Self::Fixed { snr_db }
    }

    pub fn set(values_db: impl Into<Vec<f64>>) -> Self {
        Self::Set {
            values_db: values_db.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed { snr_db } if !snr_db.is_finite() => Err(Error::config("fixed SNR must be finite")),
            Self::Set { values_db } if values_db.is_empty() => Err(Error::config("SNR set is empty")),
            Self::Set { values_db } if values_db.iter().any(|v| !v.is_finite()) => {
                Err(Error::config("SNR set contains non-finite values"))
            }
            _ => Ok(()),
        }
    }
}

pub fn sample_snr(schedule: &SnrSchedule, rng: &mut SimRng) -> Result<f64> {
    schedule.validate()?;
    Ok(match schedule {
        SnrSchedule::Fixed { snr_db } => *snr_db,
        SnrSchedule::Set { values_db } => values_db[rng.random_range(0..values_db.len())],
    })
}

/// `lr(i) = lr₀ · (1 − i/I)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyDecay {
    pub base_lr: f64,
    pub total_iters: usize,
    pub power: f64,
}

impl PolyDecay {
    pub fn at(&self, iteration: usize) -> f64 {
        let frac = (iteration as f64 / self.total_iters.max(1) as f64).min(1.0);
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}
