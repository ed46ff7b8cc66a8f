//! Portable weight bundle (`SWTXW`) for the VGG-19 feature extractor.
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0   magic "SWTXW\0\0\x01"            8 bytes
//! 8   header length H                  u32
//! 12  UTF-8 JSON header                H bytes
//! ..  tensor payload (f32 values)      as declared by the header offsets
//! end CRC32 of the payload             u32
//! ```
//!
//! Tensor offsets in the header are relative to the start of the payload.
//! Conv weights are stored `[out, in, 3, 3]`, biases `[out]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"SWTXW\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;

/// The twelve conv layers used as texture statistics, with channel widths.
pub const VGG19_LAYERS: [(&str, usize, usize); 12] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
];

/// Layer indices followed by a 2x2 stride-2 pooling stage.
pub const VGG19_POOL_AFTER: [usize; 3] = [1, 3, 7];

/// ImageNet channel means on the 0-255 scale, RGB order.
pub const IMAGENET_MEANS: [f32; 3] = [123.68, 116.779, 103.939];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Average,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Mirror without repeating the edge pixel (`-1 -> 1`).
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Per-channel means in RGB order, 0-255 scale.
    pub channel_means: [f32; 3],
    pub channel_order: ChannelOrder,
    pub scale: f32,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing { channel_means: IMAGENET_MEANS, channel_order: ChannelOrder::Rgb, scale: 255.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]` row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    #[inline]
    pub fn weight(&self, out: usize, inp: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((out * self.in_channels + inp) * 3 + ky) * 3 + kx]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub format_version: u32,
    /// Free-text origin of the weights (source archive, normalization recipe).
    pub provenance: String,
    pub normalized: bool,
    pub layers: Vec<ConvWeights>,
    pub pool_after: Vec<usize>,
    pub pool_kind: PoolKind,
    pub padding: Padding,
    pub preprocessing: Preprocessing,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    provenance: String,
    normalized: bool,
    pool_kind: PoolKind,
    padding: Padding,
    pool_after: Vec<usize>,
    preprocessing: Preprocessing,
    layers: Vec<LayerHeader>,
    tensors: Vec<TensorEntry>,
}

fn format_err<T>(offset: u64, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, message: message.into() })
}

impl WeightBundle {
    /// Structural checks shared by every bundle: tensor sizes and channel
    /// chaining.
    pub fn validate_structure(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Architecture("bundle has no conv layers".into()));
        }
        if self.layers[0].in_channels != 3 {
            return Err(Error::Architecture(format!(
                "first layer takes {} channels, expected 3 (RGB)",
                self.layers[0].in_channels
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.out_channels * l.in_channels * 9 || l.bias.len() != l.out_channels {
                return Err(Error::Architecture(format!("layer {} has malformed tensors", l.name)));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::Architecture(format!(
                    "layer {} takes {} channels but {} produces {}",
                    l.name,
                    l.in_channels,
                    self.layers[i - 1].name,
                    self.layers[i - 1].out_channels
                )));
            }
        }
        if let Some(&p) = self.pool_after.iter().find(|&&p| p >= self.layers.len()) {
            return Err(Error::Architecture(format!("pooling after missing layer {p}")));
        }
        if self.pool_after.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Architecture("pool positions must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Checks the bundle is exactly the first twelve VGG-19 conv layers.
    pub fn validate_vgg19(&self) -> Result<()> {
        self.validate_structure()?;
        if self.layers.len() != VGG19_LAYERS.len() {
            return Err(Error::Architecture(format!("expected 12 conv layers, found {}", self.layers.len())));
        }
        for (l, (name, cin, cout)) in self.layers.iter().zip(VGG19_LAYERS) {
            if l.name != name || l.in_channels != cin || l.out_channels != cout {
                return Err(Error::Architecture(format!(
                    "layer {} ({} -> {}) where {} ({} -> {}) was expected",
                    l.name, l.in_channels, l.out_channels, name, cin, cout
                )));
            }
        }
        if self.pool_after != VGG19_POOL_AFTER {
            return Err(Error::Architecture(format!(
                "pooling after layers {:?}, expected {:?}",
                self.pool_after, VGG19_POOL_AFTER
            )));
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate_structure()?;
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for l in &self.layers {
            for (suffix, shape, len) in [
                ("weight", vec![l.out_channels, l.in_channels, 3, 3], l.weights.len()),
                ("bias", vec![l.out_channels], l.bias.len()),
            ] {
                let nbytes = 4 * len as u64;
                tensors.push(TensorEntry { name: format!("{}.{}", l.name, suffix), shape, offset, nbytes });
                offset += nbytes;
            }
        }
        let header = Header {
            format_version: self.format_version,
            provenance: self.provenance.clone(),
            normalized: self.normalized,
            pool_kind: self.pool_kind,
            padding: self.padding,
            pool_after: self.pool_after.clone(),
            preprocessing: self.preprocessing.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    name: l.name.clone(),
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: [3, 3],
                })
                .collect(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut payload = Vec::with_capacity(offset as usize);
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Parses a bundle and verifies magic, version, checksum and structure
    /// (but not that it is VGG-19; see [`load_weights`]).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[..8] != MAGIC {
            return format_err(0, "bad magic (not an SWTXW bundle)");
        }
        if bytes.len() < 12 {
            return format_err(8, "file ends inside the header length");
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + hlen;
        if bytes.len() < payload_start + 4 {
            return format_err(12, format!("header of {hlen} bytes runs past end of file"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| Error::Format { offset: 12, message: format!("header JSON: {e}") })?;
        if header.format_version != FORMAT_VERSION {
            return format_err(12, format!("unsupported format version {}", header.format_version));
        }
        let crc_at = bytes.len() - 4;
        let payload = &bytes[payload_start..crc_at];
        let stored = u32::from_le_bytes(bytes[crc_at..].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return format_err(
                crc_at as u64,
                format!("payload checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            );
        }
        let read = |entry: &TensorEntry, expect: &[usize]| -> Result<Vec<f32>> {
            if entry.shape != expect {
                return Err(Error::Architecture(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name, entry.shape, expect
                )));
            }
            let len: usize = expect.iter().product();
            let start = entry.offset as usize;
            if entry.nbytes != 4 * len as u64 || start + 4 * len > payload.len() {
                return format_err(
                    (payload_start + start) as u64,
                    format!("tensor {} lies outside the payload", entry.name),
                );
            }
            Ok(payload[start..start + 4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let find = |name: String| -> Result<&TensorEntry> {
            header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Architecture(format!("missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for lh in &header.layers {
            if lh.kernel != [3, 3] {
                return Err(Error::Architecture(format!("layer {} has a {:?} kernel", lh.name, lh.kernel)));
            }
            let (cin, cout) = (lh.in_channels, lh.out_channels);
            let weights = read(find(format!("{}.weight", lh.name))?, &[cout, cin, 3, 3])?;
            let bias = read(find(format!("{}.bias", lh.name))?, &[cout])?;
            layers.push(ConvWeights { name: lh.name.clone(), in_channels: cin, out_channels: cout, weights, bias });
        }
        let bundle = WeightBundle {
            format_version: header.format_version,
            provenance: header.provenance,
            normalized: header.normalized,
            layers,
            pool_after: header.pool_after,
            pool_kind: header.pool_kind,
            padding: header.padding,
            preprocessing: header.preprocessing,
        };
        bundle.validate_structure()?;
        Ok(bundle)
    }

    /// CRC32 of the tensor payload as written by [`WeightBundle::to_bytes`].
    pub fn payload_crc32(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Reads and validates a VGG-19 bundle.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let bytes = fs::read(path)?;
    let bundle = WeightBundle::from_bytes(&bytes)?;
    bundle.validate_vgg19()?;
    Ok(bundle)
}
