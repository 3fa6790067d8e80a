//! Streaming per-parameter mean and variance over a weight trajectory.
//!
//! During fine-tuning every post-update parameter vector is fed to a
//! [`WelfordAccumulator`]; at the end a [`StatsSnapshot`] freezes the
//! running mean and the population standard deviation per scalar. The
//! accumulator always works in f64 regardless of the model dtype; a single
//! pass over ~10^3 observations of f32 weights would otherwise lose most
//! of the variance signal to rounding.
//!
//! Update recurrences, with t the number of observations already seen:
//!
//! ```text
//! mean_{t+1} = mean_t + (x - mean_t) / (t + 1)
//! m2_{t+1}   = m2_t + (x - mean_t) * (x - mean_{t+1})
//! var_t      = m2_t / t            (population)
//! ```
//!
//! The m2 form is the numerically stable equivalent of accumulating the
//! variance recurrence directly; `stats` tests pin the two against each
//! other and against a two-pass oracle.

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// Running first and second moments for every trainable parameter of a
/// store, shape-aligned by name.
pub struct WelfordAccumulator {
    count: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl WelfordAccumulator {
    /// Set up zeroed accumulators matching `params`' trainable entries.
    pub fn for_params<E: Element>(params: &ParamStore<E>) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut mean = Vec::new();
        let mut m2 = Vec::new();
        for p in params.trainable() {
            names.push(p.name.clone());
            shapes.push(p.tensor.shape().to_vec());
            mean.push(vec![0.0; p.tensor.numel()]);
            m2.push(vec![0.0; p.tensor.numel()]);
        }
        WelfordAccumulator { count: 0, names, shapes, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Fold in one observation of the trainable parameters.
    pub fn update<E: Element>(&mut self, observed: &ParamStore<E>) -> Result<()> {
        let obs: Vec<_> = observed.trainable().collect();
        if obs.len() != self.names.len() {
            return Err(Error::Config(format!(
                "observation has {} trainable tensors, accumulator tracks {}",
                obs.len(),
                self.names.len()
            )));
        }
        for (i, p) in obs.iter().enumerate() {
            if p.name != self.names[i] || p.tensor.shape() != self.shapes[i].as_slice() {
                return Err(Error::Config(format!(
                    "observation entry `{}` {:?} does not match tracked `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    self.names[i],
                    self.shapes[i]
                )));
            }
        }
        let inv = 1.0 / (self.count + 1) as f64;
        for (i, p) in obs.iter().enumerate() {
            let mean = &mut self.mean[i];
            let m2 = &mut self.m2[i];
            for ((&x, m), s) in p.tensor.data().iter().zip(mean.iter_mut()).zip(m2.iter_mut()) {
                let x = x.as_f64();
                let delta = x - *m;
                *m += delta * inv;
                *s += delta * (x - *m);
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Freeze the statistics into per-parameter mean and population-stddev
    /// stores in the requested dtype. Errors if nothing was observed.
    pub fn snapshot<E: Element>(&self) -> Result<StatsSnapshot<E>> {
        if self.count == 0 {
            return Err(Error::State("cannot snapshot statistics before any observation".into()));
        }
        let inv_n = 1.0 / self.count as f64;
        let mut mean = ParamStore::new();
        let mut stddev = ParamStore::new();
        for (i, name) in self.names.iter().enumerate() {
            let m: Vec<E> = self.mean[i].iter().map(|&v| E::from_f64(v)).collect();
            // clamp tiny negative m2 from cancellation before the sqrt
            let s: Vec<E> = self.m2[i]
                .iter()
                .map(|&v| E::from_f64((v * inv_n).max(0.0).sqrt()))
                .collect();
            mean.insert(name.clone(), Tensor::from_vec(&self.shapes[i], m)?, true)?;
            stddev.insert(name.clone(), Tensor::from_vec(&self.shapes[i], s)?, true)?;
        }
        Ok(StatsSnapshot { mean, stddev, count: self.count })
    }
}

/// Frozen trajectory statistics: per-scalar mean and population standard
/// deviation, plus the number of observations behind them.
#[derive(Debug)]
pub struct StatsSnapshot<E> {
    mean: ParamStore<E>,
    stddev: ParamStore<E>,
    count: u64,
}

impl<E: Element> StatsSnapshot<E> {
    /// Reassemble from parts (checkpoint loading); layouts must agree.
    pub fn from_parts(mean: ParamStore<E>, stddev: ParamStore<E>, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::State("snapshot count must be positive".into()));
        }
        if mean.len() != stddev.len() {
            return Err(Error::Config(format!(
                "snapshot mean has {} tensors, stddev {}",
                mean.len(),
                stddev.len()
            )));
        }
        for (m, s) in mean.iter().zip(stddev.iter()) {
            if m.name != s.name || m.tensor.shape() != s.tensor.shape() {
                return Err(Error::Config(format!(
                    "snapshot mean `{}` {:?} does not match stddev `{}` {:?}",
                    m.name,
                    m.tensor.shape(),
                    s.name,
                    s.tensor.shape()
                )));
            }
            if s.tensor.data().iter().any(|&v| v < E::zero() || !v.is_finite()) {
                return Err(Error::Config(format!(
                    "snapshot stddev `{}` has negative or non-finite entries",
                    s.name
                )));
            }
        }
        Ok(StatsSnapshot { mean, stddev, count })
    }

    pub fn mean(&self) -> &ParamStore<E> {
        &self.mean
    }

    pub fn stddev(&self) -> &ParamStore<E> {
        &self.stddev
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Scale every standard deviation by `factor` (>= 0). `0.0` collapses
    /// Gaussian resampling onto the mean.
    pub fn scale_stddev(&self, factor: f64) -> Result<StatsSnapshot<E>> {
        if !(factor >= 0.0) {
            return Err(Error::Config(format!("stddev scale {factor} must be >= 0")));
        }
        let f = E::from_f64(factor);
        let mut stddev = ParamStore::new();
        for p in self.stddev.iter() {
            let mut t = p.tensor.clone();
            for v in t.data_mut() {
                *v = *v * f;
            }
            stddev.insert(p.name.clone(), t, true)?;
        }
        Ok(StatsSnapshot { mean: self.mean.clone(), stddev, count: self.count })
    }
}
