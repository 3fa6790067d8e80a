//! Softmax cross-entropy head.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn dims2<E: Element>(t: &Tensor<E>) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        other => Err(Error::Config(format!("logits must be rank 2, got {other:?}"))),
    }
}

fn check_labels(labels: &[u8], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction. The normalizing sum and divisions
/// run in f64 so row sums stay within 1e-6 of one even in f32.
pub fn softmax_probs<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c] = dims2(logits)?;
    let mut out = Tensor::zeros(&[n, c]);
    for (row_in, row_out) in logits.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let mut m = row_in[0];
        for &v in row_in {
            if v > m {
                m = v;
            }
        }
        let mut sum = 0.0f64;
        for (&v, o) in row_in.iter().zip(row_out.iter_mut()) {
            let e = (v - m).exp();
            *o = e;
            sum += e.as_f64();
        }
        for o in row_out.iter_mut() {
            *o = E::from_f64(o.as_f64() / sum);
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and the gradient wrt the logits,
/// (softmax - onehot) / N. The loss is accumulated in f64.
pub fn softmax_xent<E: Element>(logits: &Tensor<E>, labels: &[u8]) -> Result<(f64, Tensor<E>)> {
    let [n, c] = dims2(logits)?;
    check_labels(labels, n, c)?;
    let inv_n = E::from_f64(1.0 / n as f64);
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0f64;
    for ((row, &label), grow) in logits
        .data()
        .chunks(c)
        .zip(labels)
        .zip(grad.data_mut().chunks_mut(c))
    {
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = 0.0f64;
        for (&v, g) in row.iter().zip(grow.iter_mut()) {
            let e = (v - m).exp();
            *g = e;
            sum += e.as_f64();
        }
        // log p[label] = (logit - max) - ln(sum)
        loss -= (row[label as usize] - m).as_f64() - sum.ln();
        for g in grow.iter_mut() {
            *g = E::from_f64(g.as_f64() / sum) * inv_n;
        }
        grow[label as usize] = grow[label as usize] - inv_n;
    }
    Ok((loss / n as f64, grad))
}

/// Count rows whose argmax matches the label. Ties pick the lowest class
/// index, matching a strict greater-than scan.
pub fn count_correct<E: Element>(scores: &Tensor<E>, labels: &[u8]) -> Result<usize> {
    let [n, c] = dims2(scores)?;
    check_labels(labels, n, c)?;
    let mut correct = 0;
    for (row, &label) in scores.data().chunks(c).zip(labels) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(correct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c_loss() {
        let logits = Tensor::<f64>::zeros(&[4, 10]);
        let labels = [0u8, 3, 7, 9];
        let (loss, grad) = softmax_xent(&logits, &labels).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12, "loss {loss}");
        // gradient rows: (0.1 - onehot) / N
        for (i, row) in grad.data().chunks(10).enumerate() {
            for (j, &g) in row.iter().enumerate() {
                let expect = if j == labels[i] as usize { (0.1 - 1.0) / 4.0 } else { 0.1 / 4.0 };
                assert!((g - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probs_sum_to_one_after_large_shift() {
        // max subtraction keeps exp() in range even for huge logits
        let logits =
            Tensor::<f32>::from_vec(&[1, 3], vec![1000.0, 1001.0, 999.0]).unwrap();
        let p = softmax_probs(&logits).unwrap();
        let sum: f64 = p.data().iter().map(|&x| x as f64).sum();
        assert!(p.all_finite());
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let logits =
            Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let (_, grad) = softmax_xent(&logits, &[2, 0]).unwrap();
        for row in grad.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        let err = softmax_xent(&logits, &[3]).unwrap_err();
        assert!(err.to_string().contains("data error"));
    }

    #[test]
    fn argmax_tie_picks_lowest_index() {
        let scores = Tensor::<f32>::from_vec(&[1, 4], vec![0.4, 0.4, 0.1, 0.1]).unwrap();
        assert_eq!(count_correct(&scores, &[0]).unwrap(), 1);
        assert_eq!(count_correct(&scores, &[1]).unwrap(), 0);
    }
}
