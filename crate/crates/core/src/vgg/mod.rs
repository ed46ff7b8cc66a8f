//! VGG-19 feature extractor: weight bundle I/O, forward pass, and the
//! vector-Jacobian product back to the image.

pub mod bundle;
pub mod network;
pub mod synthetic;

pub use bundle::{
    load_weights, ChannelOrder, ConvWeights, Padding, PoolKind, Preprocessing, WeightBundle, FORMAT_VERSION,
    IMAGENET_MEANS, MAGIC, VGG19_LAYERS, VGG19_POOL_AFTER,
};
pub use network::{conv3x3_reference, pool_reference, preprocess, ActivationTape, Network};
pub use synthetic::{calibration_images, synthetic_vgg19, SYNTHETIC_SEED};
