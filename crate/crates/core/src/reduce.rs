//! Deterministic pairwise (tree) summation.

use std::ops::Add;

const LEAF: usize = 16;

/// Sum by recursive halving; the grouping depends only on the length, so the
/// result is independent of how the inputs were produced.
pub fn pairwise_sum<T>(xs: &[T]) -> T
where
    T: Copy + Add<Output = T> + Default,
{
    if xs.len() <= LEAF {
        let mut s = T::default();
        for &x in xs {
            s = s + x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64 as C64;

    #[test]
    fn matches_naive_and_is_accurate() {
        let xs: Vec<f64> = (0..10_000).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-12);
        let ones = vec![0.1f64; 1 << 20];
        assert!((pairwise_sum(&ones) - 0.1 * (1 << 20) as f64).abs() < 1e-9);
        let c: Vec<C64> = (0..100).map(|i| C64::new(i as f64, -(i as f64))).collect();
        assert_eq!(pairwise_sum(&c), C64::new(4950.0, -4950.0));
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
    }
}
