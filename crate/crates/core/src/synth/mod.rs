//! Image-space optimization: texture synthesis, style transfer and
//! tag-constrained synthesis.

pub mod config;
pub mod engine;
pub mod image;
pub mod tagmap;

pub use config::{InitKind, Mode, Precision, SynthesisConfig, SynthesisOptions, TagSource};
pub use engine::{
    layer_tags, load_bundle, noise_init, optimize_image, run_config, style_transfer, synthesize_tagged,
    synthesize_texture, write_log, SynthesisResult, MONITOR_SEED,
};
pub use tagmap::{make_periodic_tagmap, validate_pair};
