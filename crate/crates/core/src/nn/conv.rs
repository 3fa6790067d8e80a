//! Valid (unpadded, stride-1) 2D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub(crate) fn dims4<E: Element>(t: &Tensor<E>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(Error::Config(format!("{what} must be rank 4, got {other:?}"))),
    }
}

fn check_geometry<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let [n, c, h, w] = dims4(input, "conv input")?;
    let [f, kc, kh, kw] = dims4(kernel, "conv kernel")?;
    if kc != c {
        return Err(Error::Config(format!(
            "conv kernel expects {kc} input channels, input has {c}"
        )));
    }
    if kh > h || kw > w {
        return Err(Error::Config(format!(
            "conv kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::Config(format!(
                "conv bias shape {:?} does not match {f} filters",
                b.shape()
            )));
        }
    }
    Ok((n, c, h, w, f, kh, kw, c * kh * kw))
}

/// Unfold `input` into a K x (N*OH*OW) matrix, K = C*KH*KW, column index
/// n*(OH*OW) + y*OW + x. Rows of length OW are contiguous copies.
fn im2col<E: Element>(input: &Tensor<E>, kh: usize, kw: usize) -> Vec<E> {
    let [n, c, h, w] = dims4(input, "conv input").unwrap();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let ohw = oh * ow;
    let cols_w = n * ohw;
    let mut cols = vec![E::zero(); c * kh * kw * cols_w];
    let src = input.data();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &src[(ni * c + ci) * h * w..][..h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (ci * kh + i) * kw + j;
                    let dst = &mut cols[row * cols_w + ni * ohw..][..ohw];
                    for y in 0..oh {
                        let s = &plane[(y + i) * w + j..][..ow];
                        dst[y * ow..][..ow].copy_from_slice(s);
                    }
                }
            }
        }
    }
    cols
}

/// Fold a K x (N*OH*OW) gradient matrix back onto input positions
/// (scatter-add, the adjoint of [`im2col`]).
fn col2im<E: Element>(
    cols: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Tensor<E> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let ohw = oh * ow;
    let cols_w = n * ohw;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &mut dst[(ni * c + ci) * h * w..][..h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (ci * kh + i) * kw + j;
                    let src = &cols[row * cols_w + ni * ohw..][..ohw];
                    for y in 0..oh {
                        let d = &mut plane[(y + i) * w + j..][..ow];
                        let s = &src[y * ow..][..ow];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv = *dv + *sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// input [N,C,H,W] * kernel [F,C,KH,KW] + bias [F] -> [N,F,H-KH+1,W-KW+1].
pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, _c, h, w, f, kh, kw, k_dim) = check_geometry(input, kernel, Some(bias))?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let ohw = oh * ow;
    let cols_w = n * ohw;

    let cols = im2col(input, kh, kw);
    let mut prod = vec![E::zero(); f * cols_w];
    unsafe {
        E::gemm(
            f, k_dim, cols_w,
            E::one(),
            kernel.data().as_ptr(), k_dim as isize, 1,
            cols.as_ptr(), cols_w as isize, 1,
            E::zero(),
            prod.as_mut_ptr(), cols_w as isize, 1,
        );
    }

    // prod is [F, N*OH*OW]; interleave to [N, F, OH, OW] and add bias.
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let dst = out.data_mut();
    let bias = bias.data();
    for ni in 0..n {
        for fi in 0..f {
            let b = bias[fi];
            let s = &prod[fi * cols_w + ni * ohw..][..ohw];
            let d = &mut dst[(ni * f + fi) * ohw..][..ohw];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv = *sv + b;
            }
        }
    }
    Ok(out)
}

/// Gradients wrt (input, kernel, bias) given upstream [N,F,OH,OW].
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    upstream: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w, f, kh, kw, k_dim) = check_geometry(input, kernel, None)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    if upstream.shape() != [n, f, oh, ow] {
        return Err(Error::Config(format!(
            "conv upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [n, f, oh, ow]
        )));
    }
    let ohw = oh * ow;
    let cols_w = n * ohw;

    // De-interleave upstream to [F, N*OH*OW] and take bias sums on the way.
    let mut up = vec![E::zero(); f * cols_w];
    let mut gbias = Tensor::zeros(&[f]);
    {
        let gb = gbias.data_mut();
        let src = upstream.data();
        for ni in 0..n {
            for fi in 0..f {
                let s = &src[(ni * f + fi) * ohw..][..ohw];
                up[fi * cols_w + ni * ohw..][..ohw].copy_from_slice(s);
                let mut acc = E::zero();
                for &v in s {
                    acc = acc + v;
                }
                gb[fi] = gb[fi] + acc;
            }
        }
    }

    let cols = im2col(input, kh, kw);

    // dKernel [F, K] = up [F, T] * cols^T [T, K]
    let mut gkernel = Tensor::zeros(kernel.shape());
    unsafe {
        E::gemm(
            f, cols_w, k_dim,
            E::one(),
            up.as_ptr(), cols_w as isize, 1,
            cols.as_ptr(), 1, cols_w as isize,
            E::zero(),
            gkernel.data_mut().as_mut_ptr(), k_dim as isize, 1,
        );
    }

    // dCols [K, T] = kernel^T [K, F] * up [F, T], then fold back.
    let mut gcols = vec![E::zero(); k_dim * cols_w];
    unsafe {
        E::gemm(
            k_dim, f, cols_w,
            E::one(),
            kernel.data().as_ptr(), 1, k_dim as isize,
            up.as_ptr(), cols_w as isize, 1,
            E::zero(),
            gcols.as_mut_ptr(), cols_w as isize, 1,
        );
    }
    let ginput = col2im(&gcols, n, c, h, w, kh, kw);

    Ok((ginput, gkernel, gbias))
}
