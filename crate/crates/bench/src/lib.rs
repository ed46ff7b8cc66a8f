//! Shared inputs for the benchmarks.

use swtex_core::ImageTensor;

/// Deterministic smooth-plus-hashed-noise test image.
pub fn test_image(height: usize, width: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(height * width * 3);
    let mut state = 0x2545_f491_4f6c_dd1du64;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let noise = (state >> 40) as f64 / (1u64 << 24) as f64;
                let wave = 0.5 + 0.3 * ((x as f64 * 0.3 + y as f64 * 0.11 + c as f64).sin());
                data.push(0.8 * wave + 0.2 * noise);
            }
        }
    }
    ImageTensor::new(height, width, data).expect("valid size")
}
