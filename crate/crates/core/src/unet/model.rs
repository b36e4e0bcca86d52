use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm_inference, concat_channels, conv3d, maxpool2, relu, sigmoid, upsample2, upsample2_trilinear, Tensor4,
};
use super::weights::{LayerSpec, WeightsBundle};
use crate::error::{Error, Result};
use crate::volume::Grid3;

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Trilinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of encoder levels.
    pub depth: usize,
    /// Filters per encoder level, shallowest first.
    pub filters: Vec<usize>,
    pub in_channels: usize,
    pub kernel: usize,
    /// Bottleneck width; `None` means twice the deepest level.
    pub bottleneck_filters: Option<usize>,
    pub upsample: UpsampleMode,
    /// Kernel of the output convolution before the sigmoid.
    pub head_kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            filters: vec![16, 32, 64],
            in_channels: 1,
            kernel: 3,
            bottleneck_filters: None,
            upsample: UpsampleMode::Nearest,
            head_kernel: 1,
        }
    }
}

impl UNetConfig {
    pub fn with_filters(filters: Vec<usize>) -> Self {
        Self {
            depth: filters.len(),
            filters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument("UNet depth must be at least 1".into()));
        }
        if self.filters.len() != self.depth {
            return Err(Error::InvalidArgument(format!(
                "UNet has depth {} but {} filter counts",
                self.depth,
                self.filters.len()
            )));
        }
        if self.filters.iter().any(|&f| f == 0) || self.bottleneck_filters == Some(0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument("filter counts must be at least 1".into()));
        }
        if self.kernel % 2 == 0 || self.head_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck_filters
            .unwrap_or_else(|| 2 * self.filters.last().copied().unwrap_or(1))
    }

    /// Every parameterised layer in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut block = |prefix: String, c_in: usize, c_out: usize| {
            for (i, cin) in [c_in, c_out].into_iter().enumerate() {
                out.push(LayerSpec::Conv { name: format!("{prefix}.conv{i}"), c_in: cin, c_out, kernel: k });
                out.push(LayerSpec::BatchNorm { name: format!("{prefix}.bn{i}"), channels: c_out });
            }
        };
        let mut c = self.in_channels;
        for (l, &f) in self.filters.iter().enumerate() {
            block(format!("enc{l}"), c, f);
            c = f;
        }
        let b = self.bottleneck();
        block("bottleneck".into(), c, b);
        c = b;
        for l in (0..self.depth).rev() {
            let f = self.filters[l];
            block(format!("dec{l}"), c + f, f);
            c = f;
        }
        out.push(LayerSpec::Conv { name: "head".into(), c_in: c, c_out: 1, kernel: self.head_kernel });
        out
    }
}

/// Closed-form trainable parameter count (BN running statistics excluded).
pub fn count_layer_parameters(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv { c_in, c_out, kernel, .. } => c_out * c_in * kernel.pow(3) + c_out,
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
        })
        .sum()
}

pub fn count_parameters(config: &UNetConfig) -> usize {
    count_layer_parameters(&config.layers())
}

/// Checks every tensor the config needs is present with the right shape.
pub fn check_weights(config: &UNetConfig, weights: &WeightsBundle) -> Result<()> {
    config.validate()?;
    for layer in config.layers() {
        for (name, shape, _) in layer.tensors() {
            weights.tensor(&name, &shape)?;
        }
    }
    Ok(())
}

fn conv_bn_relu(x: &Tensor4, prefix: &str, i: usize, c_out: usize, k: usize, w: &WeightsBundle) -> Result<Tensor4> {
    let c_in = x.channels;
    let kernel = w.tensor(&format!("{prefix}.conv{i}.weight"), &[c_out, c_in, k, k, k])?;
    let bias = w.tensor(&format!("{prefix}.conv{i}.bias"), &[c_out])?;
    let mut y = conv3d(x, kernel, bias, c_out, k)?;
    let bn = |p: &str| w.tensor(&format!("{prefix}.bn{i}.{p}"), &[c_out]);
    batchnorm_inference(&mut y, bn("gamma")?, bn("beta")?, bn("running_mean")?, bn("running_var")?, BN_EPS)?;
    relu(&mut y);
    Ok(y)
}

fn double_conv(x: &Tensor4, prefix: &str, c_out: usize, k: usize, w: &WeightsBundle) -> Result<Tensor4> {
    let y = conv_bn_relu(x, prefix, 0, c_out, k, w)?;
    conv_bn_relu(&y, prefix, 1, c_out, k, w)
}

/// Runs the network on one single-channel patch. No normalisation is applied
/// to the input.
pub fn unet_forward(patch: &Grid3, config: &UNetConfig, weights: &WeightsBundle) -> Result<Grid3> {
    config.validate()?;
    if config.in_channels != 1 {
        return Err(Error::InvalidArgument("unet_forward takes single-channel patches".into()));
    }
    let div = 1usize << config.depth;
    if patch.shape.iter().any(|&d| d == 0 || d % div != 0) {
        return Err(Error::Shape(format!(
            "patch shape {:?} not divisible by 2^{}",
            patch.shape, config.depth
        )));
    }
    check_weights(config, weights)?;
    let k = config.kernel;

    let mut x = Tensor4::from_grid(patch);
    let mut skips = Vec::with_capacity(config.depth);
    for (l, &f) in config.filters.iter().enumerate() {
        let y = double_conv(&x, &format!("enc{l}"), f, k, weights)?;
        x = maxpool2(&y)?;
        skips.push(y);
    }
    x = double_conv(&x, "bottleneck", config.bottleneck(), k, weights)?;
    for l in (0..config.depth).rev() {
        let up = match config.upsample {
            UpsampleMode::Nearest => upsample2(&x),
            UpsampleMode::Trilinear => upsample2_trilinear(&x),
        };
        let skip = skips.pop().expect("one skip per level");
        let cat = concat_channels(&up, &skip)?;
        x = double_conv(&cat, &format!("dec{l}"), config.filters[l], k, weights)?;
    }
    let hk = config.head_kernel;
    let hw = weights.tensor("head.weight", &[1, x.channels, hk, hk, hk])?;
    let hb = weights.tensor("head.bias", &[1])?;
    let mut out = conv3d(&x, hw, hb, 1, hk)?;
    sigmoid(&mut out);
    out.into_grid()
}
