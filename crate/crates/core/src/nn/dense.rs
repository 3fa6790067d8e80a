//! Fully connected layer.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn dims2<E: Element>(t: &Tensor<E>, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        other => Err(Error::Config(format!("{what} must be rank 2, got {other:?}"))),
    }
}

/// input [N,D] * weight [D,K] + bias [K] -> [N,K].
pub fn dense_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let [n, d] = dims2(input, "dense input")?;
    let [wd, k] = dims2(weight, "dense weight")?;
    if wd != d {
        return Err(Error::Config(format!(
            "dense input has {d} features, weight expects {wd}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::Config(format!(
            "dense bias shape {:?} does not match {k} outputs",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, k]);
    unsafe {
        E::gemm(
            n, d, k,
            E::one(),
            input.data().as_ptr(), d as isize, 1,
            weight.data().as_ptr(), k as isize, 1,
            E::zero(),
            out.data_mut().as_mut_ptr(), k as isize, 1,
        );
    }
    let b = bias.data();
    for row in out.data_mut().chunks_mut(k) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
    Ok(out)
}

/// Gradients wrt (input, weight, bias) given upstream [N,K].
pub fn dense_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    upstream: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [n, d] = dims2(input, "dense input")?;
    let [_, k] = dims2(weight, "dense weight")?;
    if upstream.shape() != [n, k] {
        return Err(Error::Config(format!(
            "dense upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [n, k]
        )));
    }

    let mut gweight = Tensor::zeros(weight.shape());
    unsafe {
        // W' [D,K] = input^T [D,N] * upstream [N,K]
        E::gemm(
            d, n, k,
            E::one(),
            input.data().as_ptr(), 1, d as isize,
            upstream.data().as_ptr(), k as isize, 1,
            E::zero(),
            gweight.data_mut().as_mut_ptr(), k as isize, 1,
        );
    }

    let mut ginput = Tensor::zeros(input.shape());
    unsafe {
        // X' [N,D] = upstream [N,K] * W^T [K,D]
        E::gemm(
            n, k, d,
            E::one(),
            upstream.data().as_ptr(), k as isize, 1,
            weight.data().as_ptr(), 1, k as isize,
            E::zero(),
            ginput.data_mut().as_mut_ptr(), d as isize, 1,
        );
    }

    let mut gbias = Tensor::zeros(&[k]);
    let gb = gbias.data_mut();
    for row in upstream.data().chunks(k) {
        for (g, &u) in gb.iter_mut().zip(row) {
            *g = *g + u;
        }
    }

    Ok((ginput, gweight, gbias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_computation() {
        // [1,2] * [[1,2,3],[4,5,6]] + [0.5, 0, -1] = [9.5, 12, 14]
        let input = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let weight =
            Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bias = Tensor::<f64>::from_vec(&[3], vec![0.5, 0.0, -1.0]).unwrap();
        let out = dense_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[9.5, 12.0, 14.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_config_error() {
        let input = Tensor::<f32>::zeros(&[1, 3]);
        let weight = Tensor::<f32>::zeros(&[4, 2]);
        let bias = Tensor::<f32>::zeros(&[2]);
        let err = dense_forward(&input, &weight, &bias).unwrap_err();
        assert!(err.to_string().contains("configuration"));
    }

    #[test]
    fn bias_grad_sums_over_batch() {
        let input = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let weight = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let upstream = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (gi, gw, gb) = dense_backward(&input, &weight, &upstream).unwrap();
        assert_eq!(gb.data(), &[4.0, 6.0]);
        // identity input/weight: gradients pass straight through
        assert_eq!(gw.data(), upstream.data());
        assert_eq!(gi.data(), upstream.data());
    }
}
