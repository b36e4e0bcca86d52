//! Fixtures shared by the criterion benchmarks.

use anevrix_core::rng::{self, uniform_unit};
use anevrix_core::synth::{generate_subject, SynthConfig, SynthSubject};
use anevrix_core::unet::Tensor4;
use anevrix_core::{Affine4x4, Volume3D};

/// Channels-first tensor of uniform noise in [-1, 1).
pub fn noise_tensor(channels: usize, side: usize, seed: u64) -> Tensor4 {
    let mut r = rng::seeded(seed);
    let n = channels * side * side * side;
    let data = (0..n).map(|_| (2.0 * uniform_unit(&mut r) - 1.0) as f32).collect();
    Tensor4::new(channels, [side; 3], data).expect("sizes agree")
}

/// Binary mask with roughly `density` foreground voxels.
pub fn random_mask(side: usize, density: f64, seed: u64) -> Volume3D {
    let mut r = rng::seeded(seed);
    let voxels = (0..side * side * side)
        .map(|_| if uniform_unit(&mut r) < density { 1.0 } else { 0.0 })
        .collect();
    Volume3D::new([side; 3], [1.0; 3], Affine4x4::identity(), voxels).expect("sizes agree")
}

/// One default synthetic subject (128³, two vessels, planted lesions).
pub fn subject(seed: u64) -> SynthSubject {
    generate_subject(&SynthConfig::default(), "sub-bench", seed, None).expect("default config is valid")
}
