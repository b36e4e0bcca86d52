//! Named-tensor container: a text manifest plus a little-endian f32 blob.
//!
//! Manifest format, one record per line (`#` starts a comment):
//!
//! ```text
//! # anevrix-tensors v1
//! enc0.conv0.weight 8x1x3x3x3 0
//! enc0.conv0.bias 8 864
//! ```
//!
//! Fields are the tensor name (no whitespace), dims joined by `x`, and the
//! byte offset of the first element in the blob. Tensors must tile the blob
//! without gaps or overlap.

use std::fs;
use std::path::Path;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &str = "# anevrix-tensors v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsBundle {
    entries: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl WeightsBundle {
    /// Packs tensors back to back in the given order.
    pub fn from_tensors<I>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>,
    {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (name, shape, values) in tensors {
            let numel: usize = shape.iter().product();
            if values.len() != numel {
                return Err(Error::Weights(format!(
                    "{name}: shape {shape:?} needs {numel} values, got {}",
                    values.len()
                )));
            }
            entries.push(TensorEntry {
                name,
                shape,
                offset: data.len() * 4,
            });
            data.extend_from_slice(&values);
        }
        Self::from_parts(entries, data)
    }

    pub fn from_parts(entries: Vec<TensorEntry>, data: Vec<f32>) -> Result<Self> {
        let mut by_offset: Vec<&TensorEntry> = entries.iter().collect();
        by_offset.sort_by_key(|e| e.offset);
        let mut cursor = 0usize;
        for e in &by_offset {
            if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
                return Err(Error::Weights(format!("bad tensor name {:?}", e.name)));
            }
            if e.offset % 4 != 0 {
                return Err(Error::Weights(format!("{}: offset {} not 4-byte aligned", e.name, e.offset)));
            }
            if e.offset != cursor {
                return Err(Error::Weights(format!(
                    "{}: offset {} leaves a gap or overlap (expected {cursor})",
                    e.name, e.offset
                )));
            }
            cursor += 4 * e.numel();
        }
        if cursor != data.len() * 4 {
            return Err(Error::Weights(format!(
                "manifest covers {cursor} bytes but blob has {}",
                data.len() * 4
            )));
        }
        let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Weights(format!("duplicate tensor {}", w[0])));
        }
        Ok(Self { entries, data })
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn total_bytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entry(name)
            .map(|e| &self.data[e.offset / 4..e.offset / 4 + e.numel()])
    }

    /// Looks up `name` and checks its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(Error::Weights(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                e.shape
            )));
        }
        Ok(&self.data[e.offset / 4..e.offset / 4 + e.numel()])
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!("{} {} {}\n", e.name, dims.join("x"), e.offset));
        }
        out
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn parse(manifest: &str, blob: &[u8]) -> Result<Self> {
        if blob.len() % 4 != 0 {
            return Err(Error::Weights(format!("blob length {} is not a multiple of 4", blob.len())));
        }
        let mut entries = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Weights(format!("manifest line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad("expected `name dims offset`"));
            }
            let shape = fields[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad dims"))?;
            let offset = fields[2].parse::<usize>().map_err(|_| bad("bad offset"))?;
            entries.push(TensorEntry {
                name: fields[0].to_string(),
                shape,
                offset,
            });
        }
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_parts(entries, data)
    }

    pub fn save(&self, manifest_path: &Path, blob_path: &Path) -> Result<()> {
        fs::write(manifest_path, self.manifest_text()).map_err(|e| Error::io(manifest_path, e))?;
        fs::write(blob_path, self.blob_bytes()).map_err(|e| Error::io(blob_path, e))
    }

    pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
        Self::parse(&manifest, &blob)
    }

    /// Blob path conventionally paired with a manifest: `x.manifest` -> `x.bin`.
    pub fn blob_path_for(manifest_path: &Path) -> std::path::PathBuf {
        manifest_path.with_extension("bin")
    }
}

/// Layer description used to derive tensor names and shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { name: String, c_in: usize, c_out: usize, kernel: usize },
    BatchNorm { name: String, channels: usize },
}

impl LayerSpec {
    /// `(name, shape, trainable)` for every tensor the layer owns.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, bool)> {
        match self {
            LayerSpec::Conv { name, c_in, c_out, kernel } => vec![
                (format!("{name}.weight"), vec![*c_out, *c_in, *kernel, *kernel, *kernel], true),
                (format!("{name}.bias"), vec![*c_out], true),
            ],
            LayerSpec::BatchNorm { name, channels } => vec![
                (format!("{name}.gamma"), vec![*channels], true),
                (format!("{name}.beta"), vec![*channels], true),
                (format!("{name}.running_mean"), vec![*channels], false),
                (format!("{name}.running_var"), vec![*channels], false),
            ],
        }
    }
}

/// Bundle with every tensor zero except BN `gamma` and `running_var`, which are 1.
pub fn identity_init(layers: &[LayerSpec]) -> Result<WeightsBundle> {
    WeightsBundle::from_tensors(layers.iter().flat_map(|l| l.tensors()).map(|(name, shape, _)| {
        let n = shape.iter().product();
        let fill = if name.ends_with(".gamma") || name.ends_with(".running_var") { 1.0 } else { 0.0 };
        (name, shape, vec![fill; n])
    }))
}

/// All-zero bundle (BN variances included).
pub fn zero_init(layers: &[LayerSpec]) -> Result<WeightsBundle> {
    WeightsBundle::from_tensors(layers.iter().flat_map(|l| l.tensors()).map(|(name, shape, _)| {
        let n = shape.iter().product();
        (name, shape, vec![0.0; n])
    }))
}

/// Xavier-uniform conv weights, small uniform biases, unit BN statistics.
pub fn random_init(layers: &[LayerSpec], seed: u64) -> Result<WeightsBundle> {
    let mut r = rng::seeded(seed);
    let mut tensors = Vec::new();
    for layer in layers {
        let fan = match layer {
            LayerSpec::Conv { c_in, c_out, kernel, .. } => {
                let k3 = kernel * kernel * kernel;
                Some(((c_in * k3) as f64, (c_out * k3) as f64))
            }
            LayerSpec::BatchNorm { .. } => None,
        };
        for (name, shape, _) in layer.tensors() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".weight") {
                let (fan_in, fan_out) = fan.unwrap_or((1.0, 1.0));
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                uniform_vec(&mut r, n, bound)
            } else if name.ends_with(".bias") {
                uniform_vec(&mut r, n, 0.1)
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            tensors.push((name, shape, values));
        }
    }
    WeightsBundle::from_tensors(tensors)
}

fn uniform_vec<R: RngCore>(r: &mut R, n: usize, bound: f64) -> Vec<f32> {
    (0..n)
        .map(|_| ((rng::uniform_unit(r) * 2.0 - 1.0) * bound) as f32)
        .collect()
}
