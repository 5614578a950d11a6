//! Run configuration (TOML). Every section is optional; command-line flags
//! override the file.
//!
//! ```toml
//! seed = 0
//! fps = 30.0
//! crop_size = 512
//!
//! [model]            # any network configuration field
//! variant = "mini0"
//! ppm_enabled = true
//!
//! [stages]
//! classifier = "oracle:annotations.jsonl"
//! detector = "fixed:0.8"
//! segmenter = "model:weights.tfw"
//!
//! [paths]
//! frames = "frames/"
//! out = "run/"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::model::TfNetConfig;

/// Backend selection for one pipeline stage: `oracle:<file>`, `model:<file>`
/// or `fixed:<fraction>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StageSpec {
    Oracle(PathBuf),
    Model(PathBuf),
    Fixed(f64),
}

impl FromStr for StageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("stage `{s}` must look like kind:value")))?;
        if value.is_empty() {
            return Err(Error::config(format!("stage `{s}` has an empty value")));
        }
        match kind {
            "oracle" => Ok(StageSpec::Oracle(value.into())),
            "model" => Ok(StageSpec::Model(value.into())),
            "fixed" => {
                let f: f64 = value
                    .parse()
                    .map_err(|_| Error::config(format!("fixed box fraction `{value}` is not a number")))?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config(format!("fixed box fraction must lie in (0, 1], got {f}")));
                }
                Ok(StageSpec::Fixed(f))
            }
            other => Err(Error::config(format!(
                "unknown stage kind `{other}` (expected oracle, model or fixed)"
            ))),
        }
    }
}

impl TryFrom<String> for StageSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StageSpec> for String {
    fn from(s: StageSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageSpec::Oracle(p) => write!(f, "oracle:{}", p.display()),
            StageSpec::Model(p) => write!(f, "model:{}", p.display()),
            StageSpec::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub classifier: Option<StageSpec>,
    pub detector: Option<StageSpec>,
    pub segmenter: Option<StageSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub frames: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub fps: f64,
    /// Side of the square crop fed to the segmenter.
    pub crop_size: usize,
    pub model: TfNetConfig,
    pub stages: Stages,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            fps: 30.0,
            crop_size: 512,
            model: TfNetConfig::default(),
            stages: Stages::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("run configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{}: not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.crop_size == 0 || self.crop_size % 32 != 0 {
            return Err(Error::config(format!(
                "crop_size {} is not a positive multiple of 32",
                self.crop_size
            )));
        }
        self.model.validate()?;
        if let Some(StageSpec::Fixed(_)) = &self.stages.classifier {
            return Err(Error::config("the classifier stage cannot be `fixed`"));
        }
        if let Some(StageSpec::Fixed(_)) = &self.stages.segmenter {
            return Err(Error::config("the segmenter stage cannot be `fixed`"));
        }
        if let Some(StageSpec::Model(_)) = &self.stages.detector {
            return Err(Error::config("no detector network is available; use oracle:<file> or fixed:<fraction>"));
        }
        Ok(())
    }
}
