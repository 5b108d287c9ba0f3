//! Shared fixtures for the benchmarks.

use pcn_core::geometry::{BBox, ScoredBox};
use pcn_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sizes agree")
}

/// `n` pedestrian-shaped boxes scattered over a `width × height` image.
pub fn random_boxes(rng: &mut ChaCha8Rng, n: usize, width: Real, height: Real) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| {
            let h = rng.random_range(20.0..height / 2.0);
            let w = 0.41 * h;
            let bbox = BBox::new(rng.random_range(0.0..width - w), rng.random_range(0.0..height - h), w, h).expect("positive size");
            ScoredBox { bbox, score: rng.random() }
        })
        .collect()
}
