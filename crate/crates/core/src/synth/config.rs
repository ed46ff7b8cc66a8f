use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::losses::{DirectionPolicy, LossKind, MONITOR_DIRECTIONS};
use crate::optim::RestartConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Texture,
    StyleTransfer,
    TextureTagged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Gaussian noise around the exemplar's channel means.
    Noise,
    Content,
    Exemplar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Where the tag maps come from in tagged mode.
#[derive(Clone, Debug, PartialEq)]
pub enum TagSource {
    Files { source: PathBuf, target: PathBuf },
    /// Coordinates modulo `(period_x, period_y)` on both images.
    Periodic { period_x: usize, period_y: usize },
}

/// Settings of the optimization itself, independent of file I/O.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOptions {
    pub loss: LossKind,
    pub directions: DirectionPolicy,
    pub seed: u64,
    pub optim: RestartConfig,
    /// Record held-out losses after every restart.
    pub monitor: bool,
    pub monitor_dirs: usize,
    /// Number of conv layers used as statistics (from the first).
    pub n_layers: usize,
    /// 0-based layers that get spatial tags in tagged mode.
    pub tag_layers: Vec<usize>,
    pub noise_sigma: f64,
    /// Byte budget for caching sorted target projections.
    pub cache_bytes: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            loss: LossKind::Sw,
            directions: DirectionPolicy::PerFeature,
            seed: 0,
            optim: RestartConfig::default(),
            monitor: true,
            monitor_dirs: MONITOR_DIRECTIONS,
            n_layers: 12,
            tag_layers: vec![0, 1],
            noise_sigma: 0.1,
            cache_bytes: 768 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub mode: Mode,
    pub exemplar: PathBuf,
    pub content: Option<PathBuf>,
    pub tags: Option<TagSource>,
    /// `(height, width)`; defaults to the content size in style transfer
    /// and the exemplar size otherwise.
    pub size: Option<(usize, usize)>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub precision: Precision,
    pub init: Option<InitKind>,
    pub options: SynthesisOptions,
}

impl SynthesisConfig {
    pub fn new(mode: Mode, exemplar: impl Into<PathBuf>) -> Self {
        SynthesisConfig {
            mode,
            exemplar: exemplar.into(),
            content: None,
            tags: None,
            size: None,
            weights: None,
            out: None,
            log: None,
            precision: Precision::F32,
            init: None,
            options: SynthesisOptions::default(),
        }
    }

    pub fn init_kind(&self) -> InitKind {
        self.init.unwrap_or(match self.mode {
            Mode::StyleTransfer => InitKind::Content,
            _ => InitKind::Noise,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((h, w)) = self.size {
            if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
                return invalid_arg(format!("output size {h}x{w} must be divisible by 8 and at least 16x16"));
            }
        }
        match self.mode {
            Mode::StyleTransfer if self.content.is_none() => return invalid_arg("style transfer needs a content image"),
            Mode::TextureTagged if self.tags.is_none() => return invalid_arg("tagged mode needs both tag maps"),
            _ => {}
        }
        if self.init_kind() == InitKind::Content && self.content.is_none() {
            return invalid_arg("content initialization needs a content image");
        }
        let o = &self.options;
        if o.n_layers == 0 || o.n_layers > 12 {
            return invalid_arg("n_layers must be in 1..=12");
        }
        if let Some(&l) = o.tag_layers.iter().find(|&&l| l >= o.n_layers) {
            return invalid_arg(format!("tag layer {} is not among the {} used layers", l + 1, o.n_layers));
        }
        if o.monitor_dirs == 0 {
            return invalid_arg("monitor direction count must be positive");
        }
        if o.directions == DirectionPolicy::Fixed(0) {
            return invalid_arg("direction count must be positive");
        }
        if o.optim.restarts == 0 {
            return invalid_arg("at least one restart is required");
        }
        o.optim.lbfgs.validate()
    }
}
