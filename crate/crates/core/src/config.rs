//! Run configuration. Files are flat TOML documents whose keys mirror
//! [`TrainConfig`]; unknown keys are rejected.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edge::{validate_canny_thresholds, DetectorKind, EdgeDetector, CANNY_DEFAULT_HIGH, CANNY_DEFAULT_LOW};
use crate::eg::{DEFAULT_EMBED_DIM, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::models::{SamVariant, StudentConfig, StudentKind, TeacherConfig, TeacherKind, DEFAULT_CHANNELS, DEFAULT_HEADS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub detector: DetectorKind,
    pub canny_low: f64,
    pub canny_high: f64,
    pub use_sam_guiding: bool,
    pub use_eg: bool,
    pub seed: u64,
    pub teacher: TeacherKind,
    pub teacher_weights: Option<PathBuf>,
    pub sam_variant: SamVariant,
    pub student: StudentKind,
    pub student_weights: Option<PathBuf>,
    /// Pyramid widths of the built-in student.
    pub channels: [usize; 4],
    pub decoder_channels: usize,
    /// Deep-supervision heads `D`.
    pub heads: usize,
    /// Guidance embedding size `d`.
    pub d: usize,
    pub reduction: usize,
    /// One set of edge-guiding weights for both sides; needs equal widths.
    pub share_eg: bool,
    pub clip_norm: f64,
    pub precision: Precision,
    pub hflip: bool,
    pub vflip: bool,
    pub multi_scale: bool,
    pub prefetch: usize,
    /// Training roots, each `PATH` or `NAME=PATH`; merged into one set.
    pub data_dirs: Vec<String>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 16,
            image_size: 352,
            detector: DetectorKind::Sobel,
            canny_low: CANNY_DEFAULT_LOW,
            canny_high: CANNY_DEFAULT_HIGH,
            use_sam_guiding: true,
            use_eg: true,
            seed: 0,
            teacher: TeacherKind::Stub,
            teacher_weights: None,
            sam_variant: SamVariant::VitB,
            student: StudentKind::Tiny,
            student_weights: None,
            channels: DEFAULT_CHANNELS,
            decoder_channels: 32,
            heads: DEFAULT_HEADS,
            d: DEFAULT_EMBED_DIM,
            reduction: DEFAULT_REDUCTION,
            share_eg: false,
            clip_norm: 1.0,
            precision: Precision::F32,
            hflip: false,
            vflip: false,
            multi_scale: false,
            prefetch: 0,
            data_dirs: Vec::new(),
            val_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> Result<String> {
        let json = self.to_json()?;
        Ok(Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.epochs < 1 {
            return Err(config_err("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.image_size < crate::models::MAX_STRIDE {
            return Err(config_err(format!(
                "image_size must be at least {}, got {}",
                crate::models::MAX_STRIDE,
                self.image_size
            )));
        }
        if self.use_eg && !self.use_sam_guiding {
            return Err(config_err("use_eg requires use_sam_guiding"));
        }
        validate_canny_thresholds(self.canny_low, self.canny_high).map_err(|e| config_err(e.to_string()))?;
        if self.channels.contains(&0) || self.decoder_channels == 0 || self.d == 0 || self.reduction == 0 {
            return Err(config_err("channel widths, d and reduction must be positive"));
        }
        if !(1..=4).contains(&self.heads) {
            return Err(config_err(format!("heads must be in 1..=4, got {}", self.heads)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(config_err("clip_norm must be positive"));
        }
        for entry in &self.data_dirs {
            parse_named_root(entry)?;
        }
        Ok(())
    }

    pub fn detector(&self) -> EdgeDetector {
        EdgeDetector::from_kind(self.detector, self.canny_low, self.canny_high)
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            kind: self.teacher,
            seed: self.seed ^ 0x7EAC_4E00,
            weights: self.teacher_weights.clone(),
            sam_variant: self.sam_variant,
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            kind: self.student,
            channels: self.channels,
            decoder_channels: self.decoder_channels,
            heads: self.heads,
            seed: self.seed,
            weights: self.student_weights.clone(),
        }
    }

    pub fn data_roots(&self) -> Result<Vec<(String, PathBuf)>> {
        self.data_dirs.iter().map(|s| parse_named_root(s)).collect()
    }
}

/// `NAME=PATH`, or a bare `PATH` named after its last component.
pub fn parse_named_root(spec: &str) -> Result<(String, PathBuf)> {
    if spec.is_empty() {
        return Err(config_err("empty dataset root"));
    }
    if let Some((name, path)) = spec.split_once('=') {
        if name.is_empty() || path.is_empty() {
            return Err(config_err(format!("expected NAME=PATH, got `{spec}`")));
        }
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(spec);
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(spec)
        .to_string();
    Ok((name, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml("lr = 0.01\nlearning_rate = 3\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn file_overrides_defaults() {
        let cfg = TrainConfig::from_toml("epochs = 3\ndetector = \"canny\"\nstudent = \"pvt-b0-adapter\"\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.detector, DetectorKind::Canny);
        assert_eq!(cfg.student, StudentKind::PvtB0Adapter);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn rejections() {
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { use_sam_guiding: false, ..Default::default() },
            TrainConfig { canny_low: 0.5, canny_high: 0.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        let ablated = TrainConfig {
            use_sam_guiding: false,
            use_eg: false,
            ..Default::default()
        };
        ablated.validate().unwrap();
    }

    #[test]
    fn round_trips() {
        let cfg = TrainConfig {
            data_dirs: vec!["kvasir=/data/k".into()],
            teacher_weights: Some("/w/sam.safetensors".into()),
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.digest().unwrap(), cfg.clone().digest().unwrap());
        assert_ne!(cfg.digest().unwrap(), TrainConfig::default().digest().unwrap());
    }

    #[test]
    fn named_roots() {
        assert_eq!(parse_named_root("k=/a/b").unwrap(), ("k".into(), PathBuf::from("/a/b")));
        assert_eq!(parse_named_root("/a/Kvasir").unwrap().0, "Kvasir");
        assert!(parse_named_root("=x").is_err());
    }
}
