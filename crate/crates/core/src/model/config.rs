use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width family of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mini0,
    Mini1,
    Mini2,
    Mini3,
    Mini4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Mini0,
        Variant::Mini1,
        Variant::Mini2,
        Variant::Mini3,
        Variant::Mini4,
    ];

    const BASE_WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];

    fn multiplier(self) -> f64 {
        match self {
            Variant::Mini0 => 1.0,
            Variant::Mini1 => 1.5,
            Variant::Mini2 => 2.0,
            Variant::Mini3 => 2.5,
            Variant::Mini4 => 3.0,
        }
    }

    /// Stem and stage widths: the mini0 table scaled and rounded to multiples of 8.
    pub fn widths(self) -> [usize; 5] {
        let m = self.multiplier();
        Self::BASE_WIDTHS.map(|w| (((w as f64 * m) / 8.0).round() as usize * 8).max(8))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mini0 => "mini0",
            Variant::Mini1 => "mini1",
            Variant::Mini2 => "mini2",
            Variant::Mini3 => "mini3",
            Variant::Mini4 => "mini4",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (expected mini0..mini4)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfNetConfig {
    pub variant: Variant,
    /// Encoder units per stage.
    pub stage_repetitions: [usize; 4],
    /// Stem width followed by the four stage widths.
    pub stage_widths: [usize; 5],
    pub ppm_scales: Vec<usize>,
    pub ppm_enabled: bool,
    pub skips_enabled: bool,
    /// Parallel kxk conv+BN branches per block during training.
    pub num_branches: usize,
    /// 1x1 conv+BN branch on 3x3 blocks.
    pub scale_branch: bool,
    /// BN-only identity branch wherever stride and widths allow it.
    pub identity_branch: bool,
    pub num_classes: usize,
    pub input_size: usize,
    pub bn_eps: f64,
}

impl Default for TfNetConfig {
    fn default() -> Self {
        TfNetConfig::mini(Variant::Mini0)
    }
}

impl TfNetConfig {
    pub fn mini(variant: Variant) -> Self {
        TfNetConfig {
            variant,
            stage_repetitions: [2, 3, 4, 3],
            stage_widths: variant.widths(),
            ppm_scales: vec![1, 2, 3, 6],
            ppm_enabled: true,
            skips_enabled: true,
            num_branches: 1,
            scale_branch: true,
            identity_branch: true,
            num_classes: 2,
            input_size: 512,
            bn_eps: 1e-5,
        }
    }

    /// Mini0 layout with custom widths, for small experiments.
    pub fn with_widths(widths: [usize; 5]) -> Self {
        TfNetConfig {
            stage_widths: widths,
            ..TfNetConfig::mini(Variant::Mini0)
        }
    }

    /// Channels produced by each pyramid-pooling branch.
    pub fn ppm_branch_width(&self) -> usize {
        (self.stage_widths[4] / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("stage widths must be positive"));
        }
        if self.stage_repetitions.iter().any(|&r| r == 0) {
            return Err(Error::config("stage repetitions must be positive"));
        }
        if self.ppm_enabled {
            if self.ppm_scales.is_empty() {
                return Err(Error::config("PPM enabled with no pooling scales"));
            }
            if self.ppm_scales.contains(&0) || self.ppm_scales.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(format!(
                    "PPM scales must be positive and strictly ascending, got {:?}",
                    self.ppm_scales
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.num_branches == 0 {
            return Err(Error::config("blocks need at least one kxk branch"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps must be positive"));
        }
        Ok(())
    }
}
