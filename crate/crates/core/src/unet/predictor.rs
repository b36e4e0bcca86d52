use super::model::{check_weights, unet_forward, UNetConfig};
use super::weights::WeightsBundle;
use crate::augment::GeometricTransform;
use crate::error::{Error, Result};
use crate::sampler::{percentile, PatchSpec};
use crate::volume::{Grid3, Volume3D};

/// What a predictor sees for one patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchInput<'a> {
    /// Normalised intensities, already passed through `transform`.
    pub data: &'a Grid3,
    /// Where the untransformed patch sits, if it came from a volume.
    pub spec: Option<&'a PatchSpec>,
    pub transform: GeometricTransform,
}

impl<'a> PatchInput<'a> {
    pub fn plain(data: &'a Grid3) -> Self {
        Self {
            data,
            spec: None,
            transform: GeometricTransform::Identity,
        }
    }
}

/// Maps a patch to per-voxel probabilities of the same shape in `[0, 1]`.
pub trait PatchPredictor: Send + Sync {
    fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3>;

    fn name(&self) -> &str;
}

impl<P: PatchPredictor + ?Sized> PatchPredictor for Box<P> {
    fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3> {
        (**self).predict(input)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

#[derive(Debug, Clone)]
enum OracleSource {
    Patch(Grid3),
    Volume(Volume3D),
}

/// Returns the ground-truth lesion mask: 1 on lesion voxels, 0 elsewhere.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    source: OracleSource,
}

impl OraclePredictor {
    /// Fixed mask for a single patch.
    pub fn for_patch(mask: Grid3) -> Self {
        Self { source: OracleSource::Patch(mask) }
    }

    /// Reads the mask under each patch's spec from a whole-volume label.
    pub fn for_volume(mask: Volume3D) -> Self {
        Self { source: OracleSource::Volume(mask) }
    }
}

impl PatchPredictor for OraclePredictor {
    fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3> {
        let truth = match (&self.source, input.spec) {
            (OracleSource::Patch(mask), _) => mask.clone(),
            (OracleSource::Volume(mask), Some(spec)) => spec.extract(mask),
            (OracleSource::Volume(_), None) => {
                return Err(Error::InvalidArgument("volume oracle needs the patch spec".into()))
            }
        };
        if truth.shape != input.data.shape {
            return Err(Error::Shape(format!(
                "oracle mask {:?} vs patch {:?}",
                truth.shape, input.data.shape
            )));
        }
        let mut out = input.transform.apply(&truth)?;
        for v in &mut out.data {
            *v = if Volume3D::is_foreground(*v) { 1.0 } else { 0.0 };
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

/// Min-max normalised intensity on voxels strictly above a patch percentile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicPredictor {
    pub percentile: f64,
}

impl HeuristicPredictor {
    pub fn new(percentile: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&percentile) {
            return Err(Error::InvalidArgument(format!("percentile {percentile} outside [0, 100]")));
        }
        Ok(Self { percentile })
    }
}

impl PatchPredictor for HeuristicPredictor {
    fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3> {
        let data = &input.data.data;
        let mut out = Grid3::filled(input.data.shape, 0.0);
        let Some(threshold) = percentile(&mut data.clone(), self.percentile) else {
            return Ok(out);
        };
        let (lo, hi) = data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi <= lo {
            return Ok(out);
        }
        let range = (hi - lo) as f64;
        for (o, &v) in out.data.iter_mut().zip(data) {
            if v > threshold {
                *o = (((v - lo) as f64 / range) as f32).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "heuristic"
    }
}

/// The 3D UNet with a loaded weight bundle.
#[derive(Debug, Clone)]
pub struct UNetPredictor {
    config: UNetConfig,
    weights: WeightsBundle,
}

impl UNetPredictor {
    pub fn new(config: UNetConfig, weights: WeightsBundle) -> Result<Self> {
        check_weights(&config, &weights)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }
}

impl PatchPredictor for UNetPredictor {
    fn predict(&self, input: &PatchInput<'_>) -> Result<Grid3> {
        unet_forward(input.data, &self.config, &self.weights)
    }

    fn name(&self) -> &str {
        "unet"
    }
}
