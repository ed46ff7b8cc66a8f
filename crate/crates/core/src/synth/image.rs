//! RGB images in the `[0, 1]` display range and their PNG I/O.

use std::path::Path;

use crate::error::{invalid_arg, Result};

/// `H x W x 3` image, row-major, RGB interleaved, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid_arg("image must be non-empty");
        }
        if data.len() != height * width * 3 {
            return invalid_arg(format!("image buffer holds {} values, expected {}x{}x3", data.len(), height, width));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        ImageTensor { height, width, data }
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        m.map(|v| v / self.n_pixels() as f64)
    }

    /// Clamps to `[0, 1]`, returning how many values changed.
    pub fn clamp_unit(&mut self) -> usize {
        let mut changed = 0;
        for v in self.data.iter_mut() {
            let c = v.clamp(0.0, 1.0);
            if c != *v {
                changed += 1;
                *v = c;
            }
        }
        changed
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        ImageTensor::new(h as usize, w as usize, data)
    }

    /// 8-bit quantization after clamping to `[0, 1]`, ties rounded to even.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}
