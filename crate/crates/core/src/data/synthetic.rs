use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian class clusters in `dim` dimensions, stored as `N×1×1×dim`.
///
/// Class `c` is centred at `(4/√2)·e_c`, so every pair of centres is exactly
/// 4 apart; samples add `spread · N(0, I)`. Any two classes are separated by
/// a hyperplane with margin 2, so the set is linearly separable with
/// overwhelming probability whenever `spread ≤ 0.25` (8σ from the plane).
/// Samples are laid out class by class.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 {
        return Err(Error::Input(
            "blobs need at least one class and sample".into(),
        ));
    }
    if dim < classes {
        return Err(Error::Input(format!(
            "dimension {dim} too small for {classes} orthogonal centres"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::Input(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 4.0 / 2f64.sqrt();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            for d in 0..dim {
                let centre = if d == c { scale } else { 0.0 };
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((centre + spread * z) as f32);
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![classes * per_class, 1, 1, dim], data)?;
    Dataset::new(images, labels, classes, Split::Train)
}
