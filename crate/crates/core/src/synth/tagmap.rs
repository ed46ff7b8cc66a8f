//! Spatial tag maps: one small integer id per pixel.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{invalid_arg, Result};
use crate::losses::check_tag_proportions;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagMap {
    pub height: usize,
    pub width: usize,
    /// Row-major ids.
    pub ids: Vec<u8>,
}

impl TagMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return invalid_arg(format!("tag map of {} ids cannot be {height}x{width}", ids.len()));
        }
        Ok(TagMap { height, width, ids })
    }

    pub fn uniform(height: usize, width: usize, id: u8) -> Self {
        TagMap { height, width, ids: vec![id; height * width] }
    }

    /// Reads an 8-bit grayscale PNG; the gray value is the id.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        TagMap::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.ids,
            self.width as u32,
            self.height as u32,
            image::ColorType::L8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    /// Nearest-neighbour downsampling by an integer factor: output pixel
    /// `(y, x)` takes the id at `(y*f + f/2, x*f + f/2)`.
    pub fn downsample_nearest(&self, factor: usize) -> Result<TagMap> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return invalid_arg(format!("cannot downsample {}x{} by {factor}", self.height, self.width));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let half = factor / 2;
        let ids = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.ids[(y * factor + half) * self.width + x * factor + half])
            .collect();
        TagMap::new(h, w, ids)
    }

    pub fn ids_u32(&self) -> Vec<u32> {
        self.ids.iter().map(|&v| v as u32).collect()
    }

    pub fn counts(&self) -> BTreeMap<u8, usize> {
        let mut c = BTreeMap::new();
        for &id in &self.ids {
            *c.entry(id).or_insert(0) += 1;
        }
        c
    }
}

/// Tag map whose id encodes `(x mod period_x, y mod period_y)`.
pub fn make_periodic_tagmap(height: usize, width: usize, period_x: usize, period_y: usize) -> Result<TagMap> {
    if period_x == 0 || period_y == 0 {
        return invalid_arg("periods must be at least 1");
    }
    if period_x * period_y > 256 {
        return invalid_arg(format!("{period_x}x{period_y} periods need {} ids, at most 256 fit", period_x * period_y));
    }
    let ids = (0..height)
        .flat_map(|y| (0..width).map(move |x| ((y % period_y) * period_x + x % period_x) as u8))
        .collect();
    TagMap::new(height, width, ids)
}

/// Exemplar (`source`) and output (`target`) maps must share ids with
/// matching proportions.
pub fn validate_pair(source: &TagMap, target: &TagMap) -> Result<()> {
    check_tag_proportions(&target.ids_u32(), &source.ids_u32())
}
