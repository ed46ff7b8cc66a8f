//! Per-layer feature matrices.

use crate::error::{invalid_arg, Result};
use crate::real::Real;

/// `M x N` post-activation features of one layer, row-major with
/// `m = y * width + x` and channels contiguous.
///
/// Viewed as a point cloud, the rows are the samples of the layer's
/// empirical feature distribution (uniform weight `1/M` each).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureLayer<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height * width == 0 || channels == 0 {
            return invalid_arg("feature layer must have at least one pixel and one channel");
        }
        if data.len() != height * width * channels {
            return invalid_arg(format!(
                "feature buffer holds {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            ));
        }
        Ok(FeatureLayer { height, width, channels, data })
    }

    /// Layer without spatial structure (one row of `n_pixels`).
    pub fn from_rows(n_pixels: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::new(1, n_pixels, channels, data)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureLayer { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn row(&self, m: usize) -> &[T] {
        &self.data[m * self.channels..(m + 1) * self.channels]
    }

    /// Largest Euclidean norm over the pixel feature vectors.
    pub fn max_row_norm(&self) -> f64 {
        self.data
            .chunks_exact(self.channels)
            .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Copy of the layer with its pixels reordered: row `m` of the result is
    /// row `perm[m]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_pixels());
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        FeatureLayer { data, ..*self }
    }

    pub fn cast<U: Real>(&self) -> FeatureLayer<U> {
        FeatureLayer {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Ordered per-layer features extracted from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub layers: Vec<FeatureLayer<T>>,
    pub names: Vec<String>,
}

impl<T: Real> FeatureStack<T> {
    pub fn new(layers: Vec<FeatureLayer<T>>, names: Vec<String>) -> Result<Self> {
        if layers.len() != names.len() {
            return invalid_arg("one name per layer required");
        }
        Ok(FeatureStack { layers, names })
    }

    /// Stack with generated names `layer0`, `layer1`, ...
    pub fn unnamed(layers: Vec<FeatureLayer<T>>) -> Self {
        let names = (0..layers.len()).map(|i| format!("layer{i}")).collect();
        FeatureStack { layers, names }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks layer count and per-layer channel counts against `other`.
    /// Pixel counts may differ.
    pub fn check_compatible(&self, other: &FeatureStack<T>) -> Result<()> {
        if self.len() != other.len() {
            return invalid_arg(format!(
                "stacks have {} and {} layers",
                self.len(),
                other.len()
            ));
        }
        for (l, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.channels != b.channels {
                return invalid_arg(format!(
                    "layer {} ({}) has {} features vs {}",
                    l, self.names[l], a.channels, b.channels
                ));
            }
        }
        Ok(())
    }
}
