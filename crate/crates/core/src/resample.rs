//! Turn trajectory statistics back into model weights.
//!
//! Two strategies: reassign every trainable scalar to its trajectory mean,
//! or draw it from a per-scalar Gaussian N(mean, stddev^2). Non-trainable
//! entries are carried over from the base store untouched. Ensembles run
//! several weight sets over the same inputs and combine predictions,
//! by default by averaging softmax probabilities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::rng_from_seed;
use crate::stats::StatsSnapshot;
use crate::tensor::{Element, ParamStore, Tensor};

fn check_snapshot_against_base<E: Element>(
    base: &ParamStore<E>,
    snapshot: &StatsSnapshot<E>,
) -> Result<()> {
    let trainable: Vec<_> = base.trainable().collect();
    if trainable.len() != snapshot.mean().len() {
        return Err(Error::Config(format!(
            "snapshot tracks {} tensors, base has {} trainable",
            snapshot.mean().len(),
            trainable.len()
        )));
    }
    for (p, m) in trainable.iter().zip(snapshot.mean().iter()) {
        if p.name != m.name || p.tensor.shape() != m.tensor.shape() {
            return Err(Error::Config(format!(
                "snapshot entry `{}` {:?} does not match base `{}` {:?}",
                m.name,
                m.tensor.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Copy of `base` with every trainable tensor replaced by the trajectory
/// mean, bit for bit.
pub fn resample_mean<E: Element>(
    base: &ParamStore<E>,
    snapshot: &StatsSnapshot<E>,
) -> Result<ParamStore<E>> {
    check_snapshot_against_base(base, snapshot)?;
    let mut out = base.clone();
    for (p, m) in out.trainable_mut().zip(snapshot.mean().iter()) {
        p.tensor = m.tensor.clone();
    }
    Ok(out)
}

/// Copy of `base` with every trainable scalar drawn from
/// N(mean, stddev^2). Draws are taken from a single counter-based stream
/// in parameter order then flat order, so the result is a pure function of
/// `(snapshot, seed)`. A scalar with zero stddev comes out exactly equal
/// to its mean (the Gaussian draw is still consumed to keep the stream
/// aligned across parameters).
pub fn resample_gaussian<E: Element>(
    base: &ParamStore<E>,
    snapshot: &StatsSnapshot<E>,
    seed: u64,
) -> Result<ParamStore<E>> {
    check_snapshot_against_base(base, snapshot)?;
    let mut rng = rng_from_seed(seed);
    let mut out = base.clone();
    for ((p, m), s) in out
        .trainable_mut()
        .zip(snapshot.mean().iter())
        .zip(snapshot.stddev().iter())
    {
        let mut t = m.tensor.clone();
        for (x, &sd) in t.data_mut().iter_mut().zip(s.tensor.data()) {
            let z: f64 = rng.sample(StandardNormal);
            if sd > E::zero() {
                *x = E::from_f64(x.as_f64() + sd.as_f64() * z);
            }
        }
        p.tensor = t;
    }
    Ok(out)
}

/// How ensemble members are built from a snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    /// Single model at the trajectory mean.
    Mean,
    /// Independent Gaussian draws around the mean.
    Gaussian,
}

/// Member count + seeding for an ensemble of resampled models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub method: ResampleMethod,
    pub k: usize,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        if self.method == ResampleMethod::Mean && self.k != 1 {
            return Err(Error::Config(format!(
                "mean resampling is a single model, got k = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Build the member weight sets for `spec`. Gaussian member i draws with
/// seed `derive_seed(spec.seed, [i])`.
pub fn build_members<E: Element>(
    base: &ParamStore<E>,
    snapshot: &StatsSnapshot<E>,
    spec: &EnsembleSpec,
) -> Result<Vec<ParamStore<E>>> {
    spec.validate()?;
    match spec.method {
        ResampleMethod::Mean => Ok(vec![resample_mean(base, snapshot)?]),
        ResampleMethod::Gaussian => (0..spec.k)
            .map(|i| {
                resample_gaussian(base, snapshot, crate::rng::derive_seed(spec.seed, &[i as u64]))
            })
            .collect(),
    }
}

/// How member predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Average the members' softmax probability rows (the default).
    #[default]
    Probabilities,
    /// Average raw logits, then softmax once.
    Logits,
}

/// Run every member over `images` and combine into one [N, classes]
/// probability tensor. Members are reduced in slice order, so the result
/// is independent of threading and repeatable.
pub fn ensemble_predict<E: Element>(
    model: &Model,
    members: &[&ParamStore<E>],
    images: &Tensor<E>,
    combine: Combine,
) -> Result<Tensor<E>> {
    if members.is_empty() {
        return Err(Error::Config("ensemble_predict called with no members".into()));
    }
    let mut acc: Option<Vec<f64>> = None;
    for params in members {
        let out = match combine {
            Combine::Probabilities => model.predict_probs(params, images)?,
            Combine::Logits => model.predict_logits(params, images)?,
        };
        match &mut acc {
            None => acc = Some(out.data().iter().map(|&v| v.as_f64()).collect()),
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(out.data()) {
                    *a += v.as_f64();
                }
            }
        }
    }
    let inv = 1.0 / members.len() as f64;
    let data: Vec<E> = acc.unwrap().iter().map(|&v| E::from_f64(v * inv)).collect();
    let n = images.shape()[0];
    let averaged = Tensor::from_vec(&[n, model.classes()], data)?;
    match combine {
        Combine::Probabilities => Ok(averaged),
        Combine::Logits => crate::nn::softmax_probs(&averaged),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_spec, Model};
    use crate::rng::rng_from_seed;
    use crate::stats::WelfordAccumulator;

    fn toy_base() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
        s.insert("frozen", Tensor::from_vec(&[2], vec![7.0, 8.0]).unwrap(), false).unwrap();
        s.insert("b", Tensor::from_vec(&[1], vec![-1.0]).unwrap(), true).unwrap();
        s
    }

    fn toy_snapshot(base: &ParamStore<f64>) -> StatsSnapshot<f64> {
        let mut acc = WelfordAccumulator::for_params(base);
        let mut a = base.clone();
        a.get_mut("w").unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 0.0]);
        a.get_mut("b").unwrap().data_mut()[0] = 1.0;
        let mut b = base.clone();
        b.get_mut("w").unwrap().data_mut().copy_from_slice(&[2.0, 4.0, 6.0]);
        b.get_mut("b").unwrap().data_mut()[0] = 3.0;
        acc.update(&a).unwrap();
        acc.update(&b).unwrap();
        acc.snapshot().unwrap()
    }

    #[test]
    fn mean_resample_copies_means_and_keeps_frozen() {
        let base = toy_base();
        let snap = toy_snapshot(&base);
        let out = resample_mean(&base, &snap).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(out.get("b").unwrap().data(), &[2.0]);
        assert_eq!(out.get("frozen").unwrap().data(), &[7.0, 8.0]);
        // bitwise identical to the snapshot mean buffers
        assert_eq!(out.get("w").unwrap().data(), snap.mean().get("w").unwrap().data());
    }

    #[test]
    fn gaussian_same_seed_same_weights() {
        let base = toy_base();
        let snap = toy_snapshot(&base);
        let a = resample_gaussian(&base, &snap, 99).unwrap();
        let b = resample_gaussian(&base, &snap, 99).unwrap();
        let c = resample_gaussian(&base, &snap, 100).unwrap();
        assert_eq!(a.get("w").unwrap().data(), b.get("w").unwrap().data());
        assert_ne!(a.get("w").unwrap().data(), c.get("w").unwrap().data());
        assert_eq!(a.get("frozen").unwrap().data(), &[7.0, 8.0]);
    }

    #[test]
    fn gaussian_with_zero_stddev_equals_mean_bitwise() {
        let base = toy_base();
        let snap = toy_snapshot(&base).scale_stddev(0.0).unwrap();
        let drawn = resample_gaussian(&base, &snap, 4242).unwrap();
        let mean = resample_mean(&base, &toy_snapshot(&base)).unwrap();
        for (a, b) in drawn.iter().zip(mean.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn gaussian_moments_match_over_many_draws() {
        let mut base = ParamStore::<f64>::new();
        base.insert("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), true).unwrap();
        // hand-built snapshot: means [1, -2], stddevs [0.5, 2]
        let mut mean = ParamStore::new();
        mean.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true).unwrap();
        let mut sd = ParamStore::new();
        sd.insert("w", Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap(), true).unwrap();
        let snap = StatsSnapshot::from_parts(mean, sd, 10).unwrap();

        let n = 100_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for i in 0..n {
            let draw = resample_gaussian(&base, &snap, i as u64).unwrap();
            for (j, &v) in draw.get("w").unwrap().data().iter().enumerate() {
                sums[j] += v;
                sq[j] += v * v;
            }
        }
        let n = n as f64;
        for (j, (&target_m, &target_sd)) in [1.0f64, -2.0].iter().zip(&[0.5f64, 2.0]).enumerate() {
            let m = sums[j] / n;
            let var = sq[j] / n - m * m;
            assert!((m - target_m).abs() < 0.02 * target_sd.max(1.0), "mean {m}");
            assert!((var / (target_sd * target_sd) - 1.0).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn gaussian_draws_decorrelated_across_parameters() {
        let base = toy_base();
        let snap = {
            // unit stddev everywhere so correlation is easy to read
            let mut mean = ParamStore::new();
            mean.insert("w", Tensor::zeros(&[3]), true).unwrap();
            mean.insert("b", Tensor::zeros(&[1]), true).unwrap();
            let mut sd = ParamStore::new();
            sd.insert("w", Tensor::filled(&[3], 1.0), true).unwrap();
            sd.insert("b", Tensor::filled(&[1], 1.0), true).unwrap();
            StatsSnapshot::from_parts(mean, sd, 5).unwrap()
        };
        let n = 10_000;
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let draw = resample_gaussian(&base, &snap, 31_000 + i as u64).unwrap();
            let x = draw.get("w").unwrap().data()[0];
            let y = draw.get("b").unwrap().data()[0];
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let n = n as f64;
        let cov = sxy / n - (sx / n) * (sy / n);
        let vx = sxx / n - (sx / n) * (sx / n);
        let vy = syy / n - (sy / n) * (sy / n);
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn ensemble_spec_validation() {
        assert!(EnsembleSpec { method: ResampleMethod::Mean, k: 1, seed: 0 }.validate().is_ok());
        assert!(EnsembleSpec { method: ResampleMethod::Mean, k: 3, seed: 0 }.validate().is_err());
        assert!(EnsembleSpec { method: ResampleMethod::Gaussian, k: 0, seed: 0 }
            .validate()
            .is_err());
        assert!(EnsembleSpec { method: ResampleMethod::Gaussian, k: 10, seed: 0 }
            .validate()
            .is_ok());
    }

    #[test]
    fn single_member_ensemble_is_plain_inference() {
        let model = Model::new(tiny_spec(false)).unwrap();
        let params = model.init_params::<f64>(8);
        let images = {
            let mut rng = rng_from_seed(77);
            let mut t = Tensor::zeros(&[5, 1, 8, 8]);
            for x in t.data_mut() {
                *x = rng.random::<f64>();
            }
            t
        };
        let direct = model.predict_probs(&params, &images).unwrap();
        let via_ensemble =
            ensemble_predict(&model, &[&params], &images, Combine::Probabilities).unwrap();
        assert_eq!(direct.data(), via_ensemble.data());
    }

    #[test]
    fn identical_members_average_to_member_output() {
        let model = Model::new(tiny_spec(false)).unwrap();
        let params = model.init_params::<f64>(9);
        let mut rng = rng_from_seed(78);
        let mut images = Tensor::zeros(&[3, 1, 8, 8]);
        for x in images.data_mut() {
            *x = rng.random::<f64>();
        }
        let single = ensemble_predict(&model, &[&params], &images, Combine::Probabilities).unwrap();
        let triple = ensemble_predict(
            &model,
            &[&params, &params, &params],
            &images,
            Combine::Probabilities,
        )
        .unwrap();
        for (a, b) in single.data().iter().zip(triple.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn averaged_rows_stay_on_simplex() {
        let model = Model::new(tiny_spec(false)).unwrap();
        let a = model.init_params::<f64>(1);
        let b = model.init_params::<f64>(2);
        let c = model.init_params::<f64>(3);
        let mut rng = rng_from_seed(79);
        let mut images = Tensor::zeros(&[7, 1, 8, 8]);
        for x in images.data_mut() {
            *x = rng.random::<f64>() * 2.0 - 1.0;
        }
        for combine in [Combine::Probabilities, Combine::Logits] {
            let probs = ensemble_predict(&model, &[&a, &b, &c], &images, combine).unwrap();
            for row in probs.data().chunks(10) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn empty_member_list_is_config_error() {
        let model = Model::new(tiny_spec(false)).unwrap();
        let images = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let members: [&ParamStore<f64>; 0] = [];
        assert!(ensemble_predict(&model, &members, &images, Combine::Probabilities).is_err());
    }
}
