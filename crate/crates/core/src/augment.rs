//! Patch augmentations and the invertible geometric transforms used for
//! test-time augmentation.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, uniform_unit};
use crate::volume::{mean_std, Grid3};

pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.5);
pub const NOISE_RELATIVE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Lattice bijections of a cubic grid: quarter turns about an axis and
/// mirrors across one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeometricTransform {
    Identity,
    Rotate { quarter_turns: u8, axis: Axis },
    Flip(Axis),
}

impl GeometricTransform {
    pub const ROT90: Self = Self::Rotate { quarter_turns: 1, axis: Axis::Z };
    pub const ROT180: Self = Self::Rotate { quarter_turns: 2, axis: Axis::Z };
    pub const ROT270: Self = Self::Rotate { quarter_turns: 3, axis: Axis::Z };
    pub const FLIP_H: Self = Self::Flip(Axis::X);
    pub const FLIP_V: Self = Self::Flip(Axis::Y);

    /// Identity plus the five training-time geometric augmentations.
    pub const TTA_SET: [Self; 6] = [
        Self::Identity,
        Self::ROT90,
        Self::ROT180,
        Self::ROT270,
        Self::FLIP_H,
        Self::FLIP_V,
    ];

    pub fn inverse(self) -> Self {
        match self {
            Self::Rotate { quarter_turns, axis } => Self::Rotate {
                quarter_turns: (4 - quarter_turns % 4) % 4,
                axis,
            },
            other => other,
        }
    }

    /// Source index read by output voxel `(x, y, z)` on a cube of side `n`.
    #[inline]
    fn source(self, n: usize, [x, y, z]: [usize; 3]) -> [usize; 3] {
        let m = n - 1;
        match self {
            Self::Identity => [x, y, z],
            Self::Flip(Axis::X) => [m - x, y, z],
            Self::Flip(Axis::Y) => [x, m - y, z],
            Self::Flip(Axis::Z) => [x, y, m - z],
            Self::Rotate { quarter_turns, axis } => {
                // One quarter turn maps (u, v) -> (m - v, u) in the plane
                // orthogonal to `axis`; reading back inverts it k times.
                let (mut u, mut v) = match axis {
                    Axis::Z => (x, y),
                    Axis::X => (y, z),
                    Axis::Y => (z, x),
                };
                for _ in 0..quarter_turns % 4 {
                    (u, v) = (v, m - u);
                }
                match axis {
                    Axis::Z => [u, v, z],
                    Axis::X => [x, u, v],
                    Axis::Y => [v, y, u],
                }
            }
        }
    }

    pub fn apply(self, grid: &Grid3) -> Result<Grid3> {
        if !grid.is_cubic() {
            return Err(Error::Shape(format!("geometric transform needs a cubic grid, got {:?}", grid.shape)));
        }
        if self == Self::Identity {
            return Ok(grid.clone());
        }
        let n = grid.shape[0];
        let mut out = Vec::with_capacity(grid.len());
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let [sx, sy, sz] = self.source(n, [x, y, z]);
                    out.push(grid.get(sx, sy, sz));
                }
            }
        }
        Ok(Grid3 { shape: grid.shape, data: out })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Contrast,
    Gamma,
    GaussNoise,
}

impl AugmentationKind {
    pub const ALL: [Self; 8] = [
        Self::Rot90,
        Self::Rot180,
        Self::Rot270,
        Self::FlipH,
        Self::FlipV,
        Self::Contrast,
        Self::Gamma,
        Self::GaussNoise,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentationOp {
    Geometric(GeometricTransform),
    /// Multiplies intensities by `factor`.
    Contrast { factor: f64 },
    /// Min-max normalizes, raises to `gamma`, maps back.
    Gamma { gamma: f64 },
    /// Adds N(0, (relative_sigma * std(patch))^2) noise.
    GaussNoise { relative_sigma: f64 },
}

impl AugmentationOp {
    /// Draws the kind-specific parameters from their default ranges.
    pub fn random<R: RngCore + ?Sized>(kind: AugmentationKind, rng: &mut R) -> Self {
        let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
        match kind {
            AugmentationKind::Rot90 => Self::Geometric(GeometricTransform::ROT90),
            AugmentationKind::Rot180 => Self::Geometric(GeometricTransform::ROT180),
            AugmentationKind::Rot270 => Self::Geometric(GeometricTransform::ROT270),
            AugmentationKind::FlipH => Self::Geometric(GeometricTransform::FLIP_H),
            AugmentationKind::FlipV => Self::Geometric(GeometricTransform::FLIP_V),
            AugmentationKind::Contrast => Self::Contrast {
                factor: lerp(CONTRAST_RANGE, uniform_unit(rng)),
            },
            AugmentationKind::Gamma => Self::Gamma {
                gamma: lerp(GAMMA_RANGE, uniform_unit(rng)),
            },
            AugmentationKind::GaussNoise => Self::GaussNoise {
                relative_sigma: NOISE_RELATIVE_SIGMA,
            },
        }
    }
}

/// Applies one augmentation to a cubic patch. `rng` is only consumed by
/// the noise op.
pub fn augment<R: RngCore + ?Sized>(patch: &Grid3, op: AugmentationOp, rng: &mut R) -> Result<Grid3> {
    if !patch.is_cubic() {
        return Err(Error::Shape(format!("augment needs a cubic patch, got {:?}", patch.shape)));
    }
    let map = |f: &dyn Fn(f32) -> f32| Grid3 {
        shape: patch.shape,
        data: patch.data.iter().map(|&v| f(v)).collect(),
    };
    match op {
        AugmentationOp::Geometric(t) => t.apply(patch),
        AugmentationOp::Contrast { factor } => {
            if !(CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&factor) {
                return Err(Error::InvalidArgument(format!("contrast factor {factor} outside [0.8, 1.2]")));
            }
            Ok(map(&|v| (v as f64 * factor) as f32))
        }
        AugmentationOp::Gamma { gamma } => {
            if !(GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&gamma) {
                return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0.7, 1.5]")));
            }
            let lo = patch.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = patch.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let range = hi - lo;
            if !(range > 0.0) {
                return Ok(patch.clone());
            }
            Ok(map(&|v| (((v as f64 - lo) / range).powf(gamma) * range + lo) as f32))
        }
        AugmentationOp::GaussNoise { relative_sigma } => {
            let (_, std) = mean_std(&patch.data);
            let sigma = relative_sigma * std;
            let data = patch
                .data
                .iter()
                .map(|&v| (v as f64 + sigma * standard_normal(rng)) as f32)
                .collect();
            Ok(Grid3 { shape: patch.shape, data })
        }
    }
}
