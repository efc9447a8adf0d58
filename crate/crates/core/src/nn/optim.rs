//! Adam and AdamW with decoupled weight decay.
//!
//! ```text
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
//! ```
//!
//! `m_hat`, `v_hat` are the bias-corrected moments. The decay term sits
//! outside the adaptive ratio, so with `wd = 0` AdamW is exactly Adam.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adamw,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            algorithm: Algorithm::Adamw,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            weight_decay: 0.0,
            ..Self::adamw(lr, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::config(key, reason));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.algorithm == Algorithm::Adam && self.weight_decay != 0.0 {
            return bad("weight_decay", "adam takes no weight decay; use adamw");
        }
        Ok(())
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(names: Vec<String>, params: &[&Tensor]) -> Self {
        Self {
            names,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &OptimConfig,
) -> Result<()> {
    step(params, grads, state, cfg, cfg.weight_decay)
}

/// Adam: the AdamW update with zero weight decay.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &OptimConfig,
) -> Result<()> {
    step(params, grads, state, cfg, 0.0)
}

fn step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &OptimConfig,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = state.names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "optimizer: `{name}` param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = cfg.lr;

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gi = gi as f64;
            let m_new = b1 * (*mi as f64) + (1.0 - b1) * gi;
            let v_new = b2 * (*vi as f64) + (1.0 - b2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let th = *theta as f64;
            *theta = (th - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + weight_decay * th)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    fn run(
        f: fn(&mut [&mut Tensor], &[&Tensor], &mut OptimizerState, &OptimConfig) -> Result<()>,
        theta: &mut Tensor,
        g: &Tensor,
        state: &mut OptimizerState,
        cfg: &OptimConfig,
    ) {
        f(&mut [theta], &[g], state, cfg).unwrap();
    }

    #[test]
    fn decay_only_step() {
        let cfg = OptimConfig::adamw(3e-5, 0.01);
        let mut theta = Tensor::from_vec(vec![1.0f32, -2.0, 0.5]);
        let before = theta.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = OptimizerState::new(vec!["w".into()], &[&theta]);
        run(adamw_step, &mut theta, &g, &mut st, &cfg);
        for (a, b) in theta.data().iter().zip(before.data()) {
            let delta = (*a - *b) as f64;
            // one f32 ulp of slack
            assert!((delta - (-3e-7 * *b as f64)).abs() <= 1.2e-7 * b.abs() as f64, "{delta}");
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_decay_adamw_equals_adam_bitwise() {
        let cfg_w = OptimConfig::adamw(1e-3, 0.0);
        let cfg_a = OptimConfig::adam(1e-3);
        let mut a = Tensor::from_vec(vec![0.3f32, -0.7, 1.1]);
        let mut b = a.clone();
        let mut sa = OptimizerState::new(vec!["w".into()], &[&a]);
        let mut sb = sa.clone();
        for k in 0..5 {
            let g = Tensor::from_vec(vec![0.1 * k as f32, -0.2, 0.05 * k as f32]);
            run(adamw_step, &mut a, &g, &mut sa, &cfg_w);
            run(adam_step, &mut b, &g, &mut sb, &cfg_a);
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig::adamw(1e-3, 0.0);
        for gv in [0.5f32, -3.0, 1e-2] {
            let mut theta = scalar(1.0);
            let mut st = OptimizerState::new(vec!["w".into()], &[&theta]);
            run(adamw_step, &mut theta, &scalar(gv), &mut st, &cfg);
            let delta = theta.data()[0] as f64 - 1.0;
            assert!((delta + 1e-3 * gv.signum() as f64).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let cfg = OptimConfig::adam(5e-5);
        let mut theta = Tensor::from_vec(vec![0.25f32, -4.0]);
        let before = theta.clone();
        let mut st = OptimizerState::new(vec!["w".into()], &[&theta]);
        run(adam_step, &mut theta, &Tensor::zeros(&[2]), &mut st, &cfg);
        assert_eq!(theta, before);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let cfg = OptimConfig::adam(1e-2);
        for gv in [1.0f32, -0.3, 5.0] {
            let mut theta = scalar(0.0);
            let mut st = OptimizerState::new(vec!["w".into()], &[&theta]);
            let g = scalar(gv);
            run(adam_step, &mut theta, &g, &mut st, &cfg);
            let d1 = theta.data()[0] as f64;
            run(adam_step, &mut theta, &g, &mut st, &cfg);
            let d2 = theta.data()[0] as f64 - d1;
            assert!(d2.abs() <= d1.abs() + 1e-9, "{d1} {d2}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = OptimConfig::adam(1e-3);
        let mut theta = scalar(1.0);
        let mut st = OptimizerState::new(vec!["layers.0.weight".into()], &[&theta]);
        let err = adam_step(&mut [&mut theta], &[&scalar(f32::NAN)], &mut st, &cfg).unwrap_err();
        assert!(err.to_string().contains("layers.0.weight"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::adamw(3e-5, 1e-2).validate().is_ok());
        let mut bad = OptimConfig::adam(1e-3);
        bad.weight_decay = 0.1;
        assert!(bad.validate().is_err());
        assert!(OptimConfig::adam(0.0).validate().is_err());
        let mut bad = OptimConfig::adam(1e-3);
        bad.beta2 = 1.0;
        assert!(bad.validate().is_err());
    }
}
