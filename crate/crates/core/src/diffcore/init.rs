use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DiffError, Real, Tensor};

/// Tensor of i.i.d. normal draws; identical output for identical seeds.
pub fn gaussian_init<T: Real>(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Tensor<T>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_init_with(shape, mean, std, &mut rng)
}

/// Same as [`gaussian_init`] but draws from a caller-owned generator.
pub fn gaussian_init_with<T: Real, R: rand::Rng>(
    shape: &[usize],
    mean: f64,
    std: f64,
    rng: &mut R,
) -> Result<Tensor<T>, DiffError> {
    if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(DiffError::Domain(format!("gaussian init needs std > 0, got {std}")));
    }
    let normal = Normal::new(mean, std).map_err(|e| DiffError::Domain(e.to_string()))?;
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data)
}
