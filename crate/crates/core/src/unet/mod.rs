//! Patch predictors, including an inference-only 3D UNet.

pub mod layers;
pub mod loss;
pub mod model;
pub mod predictor;
pub mod weights;

pub use layers::Tensor4;
pub use loss::{combo_loss, ComboParams};
pub use model::{count_parameters, unet_forward, UNetConfig, UpsampleMode};
pub use predictor::{HeuristicPredictor, OraclePredictor, PatchInput, PatchPredictor, UNetPredictor};
pub use weights::{LayerSpec, TensorEntry, WeightsBundle};
