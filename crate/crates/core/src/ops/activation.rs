use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

pub fn relu_fwd<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    // NaN passes through so a poisoned batch still shows up in the loss.
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_bwd<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return shape_err(format!("relu grad {} vs input {}", grad_out.shape(), x.shape()));
    }
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_fwd(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::filled(x.shape(), 1.0);
        assert_eq!(relu_bwd(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
