use crate::error::{Error, Result};
use crate::numerics::rng::SplitMix64;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// Xavier-uniform matrix: entries i.i.d. on `±sqrt(6 / (rows + cols))`,
/// drawn row-major as `(2u - 1) * bound` with `u = rng.next_f64()`.
pub fn xavier_uniform<S: Scalar>(rows: usize, cols: usize, rng: &mut SplitMix64) -> Result<Tensor<S>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("xavier_init needs non-zero dims, got {rows}x{cols}")));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of((2.0 * rng.next_f64() - 1.0) * bound))
        .collect();
    Tensor::new(rows, cols, data)
}

/// Seeded convenience form.
pub fn xavier_init<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Result<Tensor<S>> {
    xavier_uniform(rows, cols, &mut SplitMix64::new(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn within_bound_and_deterministic() {
        let a: Tensor<f32> = xavier_init(30, 10, 9).unwrap();
        let b: Tensor<f32> = xavier_init(30, 10, 9).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f32 / 40.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn empirical_mean_near_zero() {
        let t: Tensor<f64> = xavier_init(64, 64, 2024).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(xavier_init::<f32>(0, 3, 1).is_err());
        assert!(xavier_init::<f32>(3, 0, 1).is_err());
    }
}
