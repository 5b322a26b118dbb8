//! Plain SGD with classical momentum, plus the worker-count-aware learning
//! rate schedule used for data-parallel runs.
//!
//! The velocity recurrence is
//!
//! ```text
//! H_k = m * H_{k-1} - lambda * dW
//! W_k = W_{k-1} + H_k
//! ```
//!
//! applied coordinate-wise at the policy's update precision. The schedule
//! shrinks the base rate as workers are added, `lambda0' = lambda0 / (1 + N/n)`,
//! then caps the *effective* base rate (base rate times worker count) at 0.1,
//! and decays exponentially per epoch: `lambda_i = lambda0' * gamma^i`.

use crate::numerics::Precision;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Momentum buffer; same flat layout as the parameter vector it drives.
#[derive(Debug, Clone)]
pub struct SgdMomentumState {
    h: Vec<f64>,
    pub m: f64,
}

impl SgdMomentumState {
    pub fn new(param_count: usize, m: f64) -> SgdMomentumState {
        SgdMomentumState { h: vec![0.0; param_count], m }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.h
    }
}

/// One optimizer step in place. `grads` must be descaled (loss-scale factor
/// already divided out) and averaged; `lr` is the rate for the current
/// epoch. Every elementary operation rounds at `update` precision, so with
/// `Precision::Fp64` this is the textbook recurrence exactly.
pub fn apply_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut SgdMomentumState,
    lr: f64,
    update: Precision,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.h.len() {
        return Err(Error::ShapeMismatch(format!(
            "update lengths: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            state.h.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| g.is_nan()) {
        return Err(Error::NumericFault(format!(
            "NaN gradient at flat index {i}; refusing to update"
        )));
    }
    let m = state.m;
    for ((w, h), &g) in params.iter_mut().zip(&mut state.h).zip(grads) {
        let decay = update.mul(m, *h);
        let step = update.mul(lr, g);
        *h = update.sub(decay, step);
        *w = update.add(*w, *h);
    }
    Ok(())
}

/// Learning-rate schedule. `n` is the worker count at which the base rate
/// halves; `clip` bounds the effective base rate (rate times workers).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lambda0: f64,
    pub gamma: f64,
    pub n: f64,
    pub clip: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        // gamma and the momentum default live here and in TrainSection; the
        // run config can override both.
        LrSchedule { lambda0: 0.0004, gamma: 0.8, n: 100.0, clip: 0.1 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) {
            return Err(Error::Config(format!("lambda0 must be > 0, got {}", self.lambda0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.n > 0.0) {
            return Err(Error::Config(format!("n must be > 0, got {}", self.n)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be > 0, got {}", self.clip)));
        }
        Ok(())
    }

    /// Worker-adjusted base rate: `lambda0 / (1 + N/n)`, then if the
    /// effective base rate `lambda0' * N` exceeds the clip, `clip / N`.
    pub fn base_rate(&self, workers: usize) -> f64 {
        debug_assert!(workers >= 1);
        let n_f = workers as f64;
        let reduced = self.lambda0 / (1.0 + n_f / self.n);
        if reduced * n_f > self.clip {
            self.clip / n_f
        } else {
            reduced
        }
    }

    /// Rate for epoch `i` (0-based): `base_rate * gamma^i`.
    pub fn rate_for_epoch(&self, epoch: usize, workers: usize) -> f64 {
        self.base_rate(workers) * self.gamma.powi(epoch as i32)
    }
}
