//! Stochastic gradient descent and Adam.
//!
//! Both optimizers mutate the parameter store in place and never touch the
//! gradient inputs. Gradients must align name-for-name with the store's
//! trainable entries (see [`ParamStore::check_grad_alignment`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// Plain SGD: theta <- theta - lr * grad. No momentum, no weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
}

impl SgdConfig {
    /// Experiment configs insist on a positive rate; the raw step accepts
    /// zero so degenerate trajectories can be constructed in tests.
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Config(format!("sgd learning rate {learning_rate} invalid")));
        }
        Ok(SgdConfig { learning_rate })
    }
}

pub fn sgd_step<E: Element>(
    params: &mut ParamStore<E>,
    grads: &ParamStore<E>,
    config: &SgdConfig,
) -> Result<()> {
    params.check_grad_alignment(grads)?;
    let lr = E::from_f64(config.learning_rate);
    for (p, g) in params.trainable_mut().zip(grads.iter()) {
        for (w, &gv) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
            *w = *w - lr * gv;
        }
    }
    Ok(())
}

/// Adam with bias correction; defaults match the common framework values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("adam learning rate {} invalid", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("adam epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the shared step counter. Layout is
/// fixed at construction from the store's trainable entries.
pub struct AdamState<E> {
    names: Vec<String>,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    step: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &ParamStore<E>) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in params.trainable() {
            names.push(p.name.clone());
            m.push(Tensor::zeros(p.tensor.shape()));
            v.push(Tensor::zeros(p.tensor.shape()));
        }
        AdamState { names, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn adam_step<E: Element>(
    params: &mut ParamStore<E>,
    grads: &ParamStore<E>,
    config: &AdamConfig,
    state: &mut AdamState<E>,
) -> Result<()> {
    config.validate()?;
    params.check_grad_alignment(grads)?;
    if state.names.len() != grads.len()
        || state.names.iter().zip(grads.iter()).any(|(n, g)| *n != g.name)
    {
        return Err(Error::State("adam state does not match gradient layout".into()));
    }

    state.step += 1;
    let t = state.step;
    let b1 = E::from_f64(config.beta1);
    let b2 = E::from_f64(config.beta2);
    let one_minus_b1 = E::from_f64(1.0 - config.beta1);
    let one_minus_b2 = E::from_f64(1.0 - config.beta2);
    let corr1 = E::from_f64(1.0 / (1.0 - config.beta1.powi(t as i32)));
    let corr2 = E::from_f64(1.0 / (1.0 - config.beta2.powi(t as i32)));
    let lr = E::from_f64(config.learning_rate);
    let eps = E::from_f64(config.epsilon);

    for (i, (p, g)) in params.trainable_mut().zip(grads.iter()).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((w, &gv), (mi, vi)) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.tensor.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + one_minus_b1 * gv;
            *vi = b2 * *vi + one_minus_b2 * gv * gv;
            let m_hat = *mi * corr1;
            let v_hat = *vi * corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Uniform handle over both optimizers for the training loops.
pub enum Optimizer<E: Element> {
    Sgd(SgdConfig),
    Adam(AdamConfig, AdamState<E>),
}

impl<E: Element> Optimizer<E> {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Ok(Optimizer::Sgd(SgdConfig::new(learning_rate)?))
    }

    pub fn adam(config: AdamConfig, params: &ParamStore<E>) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer::Adam(config, AdamState::new(params)))
    }

    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &ParamStore<E>) -> Result<()> {
        match self {
            Optimizer::Sgd(cfg) => sgd_step(params, grads, cfg),
            Optimizer::Adam(cfg, state) => adam_step(params, grads, cfg, state),
        }
    }
}
