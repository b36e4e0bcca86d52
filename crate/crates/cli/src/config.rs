//! Pipeline configuration: a TOML file, then `--set key=value` and
//! dedicated flags on top.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anevrix_core::evaluation::MatchConfig;
use anevrix_core::sampler::{SamplingConfig, DEFAULT_PATCH_SIDE};
use anevrix_core::sliding_window::RetentionConfig;
use anevrix_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PredictorChoice {
    /// Ground truth from the subject's label mask (or annotation spheres).
    Oracle,
    Heuristic(f64),
    /// Weights manifest; the blob sits next to it with a `.bin` extension.
    UNet(PathBuf),
}

impl FromStr for PredictorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "oracle" => Ok(PredictorChoice::Oracle),
            Some(("heuristic", p)) => p
                .parse::<f64>()
                .map(PredictorChoice::Heuristic)
                .map_err(|_| format!("predictor: bad percentile {p:?}")),
            Some(("unet", path)) if !path.is_empty() => Ok(PredictorChoice::UNet(PathBuf::from(path))),
            _ => Err(format!("predictor: expected oracle, heuristic:<percentile> or unet:<manifest>, got {s:?}")),
        }
    }
}

impl TryFrom<String> for PredictorChoice {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PredictorChoice> for String {
    fn from(p: PredictorChoice) -> String {
        p.to_string()
    }
}

impl fmt::Display for PredictorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorChoice::Oracle => write!(f, "oracle"),
            PredictorChoice::Heuristic(p) => write!(f, "heuristic:{p}"),
            PredictorChoice::UNet(p) => write!(f, "unet:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub patients: usize,
    pub controls: usize,
    pub shape: [usize; 3],
    pub spacing_mm: f64,
    pub min_lesions: usize,
    pub max_lesions: usize,
    pub min_diameter_mm: f64,
    pub max_diameter_mm: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let c = anevrix_core::synth::SynthConfig::default();
        Self {
            patients: 8,
            controls: 2,
            shape: c.shape,
            spacing_mm: c.spacing,
            min_lesions: c.lesions.0,
            max_lesions: c.lesions.1,
            min_diameter_mm: c.diameter_mm.0,
            max_diameter_mm: c.diameter_mm.1,
        }
    }
}

impl SynthSettings {
    pub fn to_core(&self) -> anevrix_core::synth::SynthConfig {
        anevrix_core::synth::SynthConfig {
            shape: self.shape,
            spacing: self.spacing_mm,
            lesions: (self.min_lesions, self.max_lesions),
            diameter_mm: (self.min_diameter_mm, self.max_diameter_mm),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    /// A single CSV shared by all scans, or a directory of
    /// `<subject>[_<session>]_landmarks.csv` files.
    pub landmarks: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub patch_side: usize,
    pub predictor: PredictorChoice,
    pub folds: usize,
    /// Weakening margin in mm; one voxel diagonal when absent.
    pub weaken_margin_mm: Option<f64>,
    /// Upper FP bound for the FROC area.
    pub fp_max: f64,
    pub confidence: f64,
    pub sampling: SamplingConfig,
    pub retention: RetentionConfig,
    pub unet: UNetConfig,
    pub matching: MatchConfig,
    pub synth: SynthSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            landmarks: None,
            annotations: None,
            output_dir: PathBuf::from("anevrix-out"),
            seed: 0,
            patch_side: DEFAULT_PATCH_SIDE,
            predictor: PredictorChoice::Oracle,
            folds: 5,
            weaken_margin_mm: None,
            fp_max: 5.0,
            confidence: 0.95,
            sampling: SamplingConfig::default(),
            retention: RetentionConfig::default(),
            unet: UNetConfig::default(),
            matching: MatchConfig::default(),
            synth: SynthSettings::default(),
        }
    }
}

/// Sets `a.b.c = value` inside a TOML table, creating tables on the way.
/// The value is parsed as TOML and falls back to a bare string.
fn set_path(root: &mut toml::Table, key: &str, raw: &str) -> CliResult<()> {
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("--set: bad key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("--set {key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Loads `path` (if any) and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("--set expects key=value, got {o:?}")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let source = path.map(|p| p.display().to_string()).unwrap_or_else(|| "config".into());
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("{source}: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        for (field, p) in [
            ("dataset_root", &self.dataset_root),
            ("landmarks", &self.landmarks),
            ("annotations", &self.annotations),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(invalid(format!("{field}: {} does not exist", p.display())));
                }
            }
        }
        if let PredictorChoice::UNet(p) = &self.predictor {
            if !p.exists() {
                return Err(invalid(format!("predictor: weights manifest {} does not exist", p.display())));
            }
        }
        if self.patch_side == 0 {
            return Err(invalid("patch_side must be positive"));
        }
        if self.folds < 2 {
            return Err(invalid(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(self.fp_max > 0.0) {
            return Err(invalid(format!("fp_max must be positive, got {}", self.fp_max)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(invalid(format!("confidence must lie in (0, 1), got {}", self.confidence)));
        }
        self.sampling.validate().map_err(|e| invalid(format!("sampling: {e}")))?;
        self.retention
            .validate(self.patch_side)
            .map_err(|e| invalid(format!("retention: {e}")))?;
        self.unet.validate().map_err(|e| invalid(format!("unet: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> CliResult<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| invalid(format!("{field} is required (config field or flag)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictor_strings_round_trip() {
        for s in ["oracle", "heuristic:97.5", "unet:w/model.txt"] {
            let p: PredictorChoice = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("unet:".parse::<PredictorChoice>().is_err());
        assert!("heuristic:x".parse::<PredictorChoice>().is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = PipelineConfig::load(
            None,
            &["seed=7".into(), "retention.stride=16".into(), "predictor=heuristic:90".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.retention.stride, 16);
        assert_eq!(cfg.predictor, PredictorChoice::Heuristic(90.0));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = PipelineConfig::load(None, &["sede=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn rendering_reloads_identically() {
        let mut cfg = PipelineConfig::default();
        cfg.unet.filters = vec![8, 16, 32];
        cfg.unet.bottleneck_filters = Some(40);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, cfg.to_toml()).unwrap();
        let back = PipelineConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
