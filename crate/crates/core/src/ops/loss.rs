//! Mean softmax cross-entropy over a batch of logits `(N, K, 1, 1)`.

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

fn check<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || s.n != labels.len() {
        return shape_err(format!("logits {s} with {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return shape_err(format!("label {bad} out of range for {} classes", s.c));
    }
    Ok(s.c)
}

fn softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn softmax_xent_fwd<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let k = check(logits, labels)?;
    if labels.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (n, &l) in labels.iter().enumerate() {
        let row = &logits.data()[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total = total + (lse - row[l]);
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// Gradient of the mean loss: `(softmax − onehot) / N`.
pub fn softmax_xent_bwd<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let k = check(logits, labels)?;
    let mut g = Tensor::zeros(logits.shape());
    let inv_n = T::lit(1.0 / labels.len().max(1) as f64);
    for (n, &l) in labels.iter().enumerate() {
        let p = softmax_row(&logits.data()[n * k..(n + 1) * k]);
        for (j, pj) in p.into_iter().enumerate() {
            let onehot = if j == l { T::one() } else { T::zero() };
            g.data_mut()[n * k + j] = (pj - onehot) * inv_n;
        }
    }
    Ok(g)
}

/// Index of the largest logit per sample.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_ln2() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        let l = softmax_xent_fwd(&x, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let g = softmax_xent_bwd(&x, &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        assert!(softmax_xent_fwd(&x, &[3]).is_err());
    }
}
