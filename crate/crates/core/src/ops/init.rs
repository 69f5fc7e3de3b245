//! Parameter initialization.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kaiming-uniform (fan-in, ReLU gain): `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_bound_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3], 36, &mut r1);
        let b: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3], 36, &mut r2);
        assert_eq!(a, b);
        let bound = (6.0f32 / 36.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
