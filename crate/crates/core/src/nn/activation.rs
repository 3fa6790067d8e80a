//! ReLU and inverted dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    for x in out.data_mut() {
        if *x < E::zero() {
            *x = E::zero();
        }
    }
    out
}

/// Gradient is zero where the pre-activation was <= 0.
pub fn relu_backward<E: Element>(input: &Tensor<E>, upstream: &Tensor<E>) -> Result<Tensor<E>> {
    if input.shape() != upstream.shape() {
        return Err(Error::Config(format!(
            "relu upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let mut out = upstream.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= E::zero() {
            *g = E::zero();
        }
    }
    Ok(out)
}

/// Inverted dropout in training mode: each element is dropped with
/// probability `rate` and survivors are scaled by 1/(1-rate), so inference
/// is the identity and no rescaling happens at eval time.
///
/// Returns the output and the applied mask (entries 0 or 1/(1-rate)); mask
/// generation consumes one uniform draw per element, in flat order.
pub fn dropout_train<E: Element>(
    input: &Tensor<E>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<E>, Vec<E>)> {
    check_rate(rate)?;
    let scale = E::from_f64(1.0 / (1.0 - rate));
    let mut mask = Vec::with_capacity(input.numel());
    let mut out = input.clone();
    for x in out.data_mut() {
        let keep = rng.random::<f64>() >= rate;
        let m = if keep { scale } else { E::zero() };
        mask.push(m);
        *x = *x * m;
    }
    Ok((out, mask))
}

/// Inference mode passes activations through untouched.
pub fn dropout_infer<E: Element>(input: &Tensor<E>, rate: f64) -> Result<Tensor<E>> {
    check_rate(rate)?;
    Ok(input.clone())
}

pub fn dropout_backward<E: Element>(mask: &[E], upstream: &Tensor<E>) -> Result<Tensor<E>> {
    if mask.len() != upstream.numel() {
        return Err(Error::Config(format!(
            "dropout mask has {} elements, upstream {}",
            mask.len(),
            upstream.numel()
        )));
    }
    let mut out = upstream.clone();
    for (g, &m) in out.data_mut().iter_mut().zip(mask) {
        *g = *g * m;
    }
    Ok(out)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}
