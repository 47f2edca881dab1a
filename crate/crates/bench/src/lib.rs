//! Shared fixtures for the criterion benches.

use ema_core::detector::synth_scene;
use ema_core::{AdversarialPatch, SceneImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn bench_patch(size: usize) -> AdversarialPatch {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let px = ndarray::Array3::from_shape_fn((size, size, 3), |_| {
        rand::Rng::gen_range(&mut rng, 0.0..1.0)
    });
    AdversarialPatch::new(px).unwrap()
}

pub fn bench_scene(hw: usize, boxes: usize) -> SceneImage {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    synth_scene("bench", (hw, hw), boxes, &mut rng)
}
