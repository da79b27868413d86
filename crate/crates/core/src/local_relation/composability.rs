//! The three pairwise scoring functions and their partial derivatives.

use super::config::Variant;
use crate::tensor::Element;

#[inline]
pub fn composability<T: Element>(q: &[T], k: &[T], variant: Variant) -> T {
    debug_assert_eq!(q.len(), k.len());
    match variant {
        Variant::SquaredDifference => -q.iter().zip(k).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>(),
        Variant::AbsoluteDifference => -q.iter().zip(k).map(|(&a, &b)| (a - b).abs()).sum::<T>(),
        Variant::Multiplication => q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>(),
    }
}

/// Scalar (`d = 1`) form used by the hot loops.
#[inline(always)]
pub fn composability1<T: Element>(q: T, k: T, variant: Variant) -> T {
    match variant {
        Variant::SquaredDifference => -(q - k) * (q - k),
        Variant::AbsoluteDifference => -(q - k).abs(),
        Variant::Multiplication => q * k,
    }
}

/// `∂Φ/∂q_i` and `∂Φ/∂k_i` for one coordinate.
///
/// The absolute difference uses subgradient 0 at `q_i = k_i`.
#[inline(always)]
pub fn composability_partials<T: Element>(q: T, k: T, variant: Variant) -> (T, T) {
    match variant {
        Variant::SquaredDifference => {
            let d = (q - k) + (q - k);
            (-d, d)
        }
        Variant::AbsoluteDifference => {
            let diff = q - k;
            let sgn = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            (-sgn, sgn)
        }
        Variant::Multiplication => (k, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_difference_example() {
        assert_eq!(composability(&[2.0f64], &[3.0], Variant::SquaredDifference), -1.0);
    }

    #[test]
    fn multiplication_annihilator() {
        for k in [-3.0f64, 0.0, 7.5] {
            assert_eq!(composability(&[0.0], &[k], Variant::Multiplication), 0.0);
        }
    }

    #[test]
    fn absolute_difference_max_at_equality() {
        assert_eq!(composability(&[1.25f64], &[1.25], Variant::AbsoluteDifference), 0.0);
        assert!(composability(&[1.25f64], &[1.0], Variant::AbsoluteDifference) < 0.0);
        assert_eq!(composability_partials(1.0f64, 1.0, Variant::AbsoluteDifference), (0.0, 0.0));
    }

    #[test]
    fn vector_form_sums_per_dimension() {
        let q = [1.0f64, -2.0, 0.5];
        let k = [0.0f64, 1.0, 0.5];
        assert_eq!(composability(&q, &k, Variant::SquaredDifference), -(1.0 + 9.0));
        assert_eq!(composability(&q, &k, Variant::AbsoluteDifference), -(1.0 + 3.0));
        assert_eq!(composability(&q, &k, Variant::Multiplication), -2.0 + 0.25);
    }

    #[test]
    fn partials_match_finite_differences() {
        let h = 1e-6;
        for v in Variant::ALL {
            let (q, k) = (0.3f64, -0.7);
            let (dq, dk) = composability_partials(q, k, v);
            let fq = (composability1(q + h, k, v) - composability1(q - h, k, v)) / (2.0 * h);
            let fk = (composability1(q, k + h, v) - composability1(q, k - h, v)) / (2.0 * h);
            assert!((dq - fq).abs() < 1e-8 && (dk - fk).abs() < 1e-8, "{v}");
        }
    }
}
