//! Non-overlapping max pooling with remembered argmax positions.

use crate::error::{Error, Result};
use crate::nn::conv::dims4;
use crate::tensor::{Element, Tensor};

/// Pool [N,C,H,W] down by (ph, pw). H and W must divide evenly.
/// Returns the pooled tensor and, per output element, the flat index into
/// the input of the element that won. Ties go to the lowest flat index
/// (first maximum in scan order).
pub fn maxpool_forward<E: Element>(
    input: &Tensor<E>,
    ph: usize,
    pw: usize,
) -> Result<(Tensor<E>, Vec<u32>)> {
    let [n, c, h, w] = dims4(input, "pool input")?;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Config(format!(
            "pool window {ph}x{pw} does not tile input {h}x{w}"
        )));
    }
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let plane = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = plane + (oy * ph) * w + ox * pw;
                let mut best = src[best_idx];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = plane + (oy * ph + dy) * w + (ox * pw + dx);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                dst[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Route upstream gradients back to the winning positions.
pub fn maxpool_backward<E: Element>(
    input_shape: &[usize],
    argmax: &[u32],
    upstream: &Tensor<E>,
) -> Result<Tensor<E>> {
    if upstream.numel() != argmax.len() {
        return Err(Error::Config(format!(
            "pool upstream has {} elements, argmax has {}",
            upstream.numel(),
            argmax.len()
        )));
    }
    let mut out = Tensor::zeros(input_shape);
    let dst = out.data_mut();
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        let i = idx as usize;
        dst[i] = dst[i] + g;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_maximum() {
        let input = Tensor::<f32>::from_vec(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 4.0,
                3.0, 0.0, 1.0, 1.0,
                0.0, 0.0, 7.0, 8.0,
                0.0, 6.0, 9.0, 0.0,
            ],
        )
        .unwrap();
        let (out, arg) = maxpool_forward(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[3.0, 5.0, 6.0, 9.0]);
        assert_eq!(arg, vec![4, 2, 13, 14]);
    }

    #[test]
    fn tie_goes_to_lowest_flat_index() {
        let input = Tensor::<f32>::filled(&[1, 1, 2, 2], 1.5);
        let (out, arg) = maxpool_forward(&input, 2, 2).unwrap();
        assert_eq!(out.data(), &[1.5]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn uneven_window_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        assert!(maxpool_forward(&input, 2, 2).is_err());
    }

    #[test]
    fn backward_routes_to_winner_only() {
        let input = Tensor::<f32>::from_vec(
            &[1, 1, 2, 2],
            vec![1.0, 9.0, 3.0, 2.0],
        )
        .unwrap();
        let (_, arg) = maxpool_forward(&input, 2, 2).unwrap();
        let upstream = Tensor::<f32>::filled(&[1, 1, 1, 1], 2.5);
        let g = maxpool_backward(&[1, 1, 2, 2], &arg, &upstream).unwrap();
        assert_eq!(g.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
