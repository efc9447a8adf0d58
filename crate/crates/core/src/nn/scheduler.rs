use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce-on-plateau learning-rate schedule.
///
/// An epoch improves only if its validation loss is strictly below the best
/// seen so far. After more than `patience` consecutive non-improving epochs
/// the rate is multiplied by `factor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerState {
    pub factor: f64,
    pub patience: u32,
    /// `None` until the first epoch is observed.
    pub best_loss: Option<f64>,
    pub bad_count: u32,
    pub initial_lr: f64,
    pub reductions: u32,
    pub current_lr: f64,
}

impl SchedulerState {
    pub fn new(initial_lr: f64, factor: f64, patience: u32) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::config("factor", "must lie in (0, 1)"));
        }
        if !(initial_lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(Self {
            factor,
            patience,
            best_loss: None,
            bad_count: 0,
            initial_lr,
            reductions: 0,
            current_lr: initial_lr,
        })
    }
}

pub fn plateau_step(mut state: SchedulerState, val_loss: f64) -> SchedulerState {
    let improved = state.best_loss.is_none_or(|best| val_loss < best);
    if improved {
        state.best_loss = Some(val_loss);
        state.bad_count = 0;
    } else {
        state.bad_count += 1;
    }
    if state.bad_count > state.patience {
        state.reductions += 1;
        // computed from the initial rate so k reductions give lr0 * factor^k exactly
        state.current_lr = state.initial_lr * state.factor.powi(state.reductions as i32);
        state.bad_count = 0;
    }
    state
}
