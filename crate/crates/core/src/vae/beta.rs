use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adaptive KL weight. Starts at `beta_max`; every `patience` consecutive
/// epochs without a new best reconstruction loss multiply it by `lambda`,
/// never going below `beta_min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaScheduler {
    beta_max: f64,
    beta_min: f64,
    lambda: f64,
    patience: usize,
    best: f64,
    stall: usize,
    decays: i32,
}

impl BetaScheduler {
    pub fn new(beta_max: f64, beta_min: f64, lambda: f64, patience: usize) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max, got {beta_min} and {beta_max}"
            )));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got {lambda}")));
        }
        if patience == 0 {
            return Err(Error::Config("patience must be at least one epoch".into()));
        }
        Ok(Self {
            beta_max,
            beta_min,
            lambda,
            patience,
            best: f64::INFINITY,
            stall: 0,
            decays: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        (self.beta_max * self.lambda.powi(self.decays)).max(self.beta_min)
    }

    /// Number of decays applied so far.
    pub fn decays(&self) -> u32 {
        self.decays as u32
    }

    pub fn stall(&self) -> usize {
        self.stall
    }

    /// Feeds one epoch's reconstruction loss and returns the β for the next epoch.
    pub fn step(&mut self, recon: f64) -> f64 {
        if recon < self.best {
            self.best = recon;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall == self.patience {
                self.stall = 0;
                if self.beta() > self.beta_min {
                    self.decays += 1;
                }
            }
        }
        self.beta()
    }
}
