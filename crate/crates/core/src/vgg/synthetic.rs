//! Deterministic stand-in for the pretrained VGG-19 weights.
//!
//! Filters are drawn from an approximately normal He initialization, made
//! zero-mean, and then rescaled, layer by layer, so that every filter's mean
//! post-ReLU response over a fixed set of calibration images is 1 (the same
//! normalization recipe applied to the pretrained network). The calibration
//! images are procedural stand-ins for natural images: multi-octave value
//! noise, stripes, blocks and blobs.
//!
//! Everything is integer arithmetic, `+ - * /` and `sqrt` in a fixed order,
//! so the bundle is bit-identical on every IEEE-754 platform.

use std::sync::{Mutex, OnceLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::bundle::{
    ConvWeights, Padding, PoolKind, Preprocessing, WeightBundle, FORMAT_VERSION, VGG19_LAYERS, VGG19_POOL_AFTER,
};
use super::network::{conv3x3_reference, pool_reference, preprocess};
use crate::synth::image::ImageTensor;

pub const SYNTHETIC_SEED: u64 = 0x5754_5857;

const CALIBRATION_SIZE: usize = 64;
const CALIBRATION_IMAGES: u64 = 6;

/// Irwin-Hall approximation to a standard normal sample.
fn normalish(rng: &mut ChaCha8Rng) -> f64 {
    let mut s = 0.0;
    for _ in 0..12 {
        s += rng.next_u32() as f64 / 4_294_967_296.0;
    }
    s - 6.0
}

fn hash(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1]` at an integer lattice point.
fn lattice(key: u64, x: usize, y: usize) -> f64 {
    (hash(key.wrapping_mul(0x1_0000_0001) ^ ((y as u64) << 20 | x as u64)) % 4096) as f64 / 4095.0
}

/// Smoothly interpolated value noise on a wrapping lattice of `cell` pixels.
fn value_noise(key: u64, x: usize, y: usize, cell: usize, n: usize) -> f64 {
    let cells = n / cell;
    let (cx, cy) = (x / cell, y / cell);
    let fx = (x % cell) as f64 / cell as f64;
    let fy = (y % cell) as f64 / cell as f64;
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (x1, y1) = ((cx + 1) % cells, (cy + 1) % cells);
    let top = lattice(key, cx, cy) * (1.0 - sx) + lattice(key, x1, cy) * sx;
    let bottom = lattice(key, cx, y1) * (1.0 - sx) + lattice(key, x1, y1) * sx;
    top * (1.0 - sy) + bottom * sy
}

/// Octaves with amplitude proportional to scale, roughly a 1/f spectrum.
fn fractal(key: u64, x: usize, y: usize, n: usize) -> f64 {
    let (mut sum, mut norm) = (0.0, 0.0);
    let mut cell = n / 2;
    while cell >= 1 {
        sum += cell as f64 * value_noise(key.wrapping_add(cell as u64), x, y, cell, n);
        norm += cell as f64;
        cell /= 2;
    }
    sum / norm
}

fn calibration_pixel(k: u64, x: usize, y: usize, c: usize, n: usize) -> f64 {
    let fine = lattice(k * 8 + 7, x, y * 3 + c);
    match k {
        0 | 1 => {
            let luma = fractal(k * 8, x, y, n);
            let chroma = fractal(k * 8 + 1 + c as u64, x, y, n);
            let gain = if k == 0 { 1.0 } else { 2.0 };
            (0.5 + gain * (0.7 * luma + 0.3 * chroma - 0.5)).clamp(0.0, 1.0)
        }
        2 => {
            // oblique triangle-wave stripes
            let t = ((x + 2 * y + 5 * c) % 12) as f64 / 6.0;
            let tri = if t < 1.0 { t } else { 2.0 - t };
            0.15 + 0.6 * tri + 0.25 * fine
        }
        3 => 0.6 * lattice(k * 8 + c as u64, x / 8, y / 8) + 0.4 * fine,
        4 => {
            let mut blob: f64 = 0.0;
            for b in 0..12u64 {
                let bx = (hash(b * 3 + 100) % n as u64) as f64;
                let by = (hash(b * 3 + 101) % n as u64) as f64;
                let r = 3.0 + (hash(b * 3 + 102) % 8) as f64;
                let (dx, dy) = (x as f64 - bx, y as f64 - by);
                blob = blob.max(1.0 - (dx * dx + dy * dy) / (r * r));
            }
            let base = [0.2, 0.45, 0.7][c];
            base + (0.9 - base) * blob + 0.1 * (fine - 0.5)
        }
        _ => {
            let ramp = ((x + 2 * y + 11 * c) % (2 * n)) as f64 / (2 * n) as f64;
            0.7 * ramp + 0.3 * fine
        }
    }
}

/// Fixed calibration set: two fractal-noise images, stripes, blocks, blobs
/// and a ramp, each with fine hashed noise.
pub fn calibration_images() -> Vec<ImageTensor> {
    let n = CALIBRATION_SIZE;
    (0..CALIBRATION_IMAGES)
        .map(|k| {
            let mut data = Vec::with_capacity(n * n * 3);
            for y in 0..n {
                for x in 0..n {
                    for c in 0..3 {
                        data.push(calibration_pixel(k, x, y, c, n).clamp(0.0, 1.0));
                    }
                }
            }
            ImageTensor::new(n, n, data).expect("calibration image")
        })
        .collect()
}

type Activations = (Vec<f64>, usize, usize);

/// Per-channel sums of `max(y, 0)`, images combined in a fixed order.
fn positive_means(ys: &[Vec<f64>], cout: usize, pixels: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; cout];
    for y in ys {
        let mut part = vec![0.0f64; cout];
        for px in y.chunks_exact(cout) {
            for (s, v) in part.iter_mut().zip(px) {
                *s += v.max(0.0);
            }
        }
        for (s, p) in sum.iter_mut().zip(part) {
            *s += p;
        }
    }
    sum.iter().map(|s| s / pixels as f64).collect()
}

fn build(seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preprocessing = Preprocessing::default();
    let mut acts: Vec<Activations> = calibration_images()
        .iter()
        .map(|img| (preprocess::<f64>(img, &preprocessing).0, img.height, img.width))
        .collect();
    let mut layers = Vec::with_capacity(VGG19_LAYERS.len());
    for (l, &(name, cin, cout)) in VGG19_LAYERS.iter().enumerate() {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        let mut raw: Vec<f64> = (0..cout * cin * 9).map(|_| std * normalish(&mut rng)).collect();
        // zero-mean filters respond to local contrast rather than to the
        // (always positive) mean of the previous ReLU layer
        for f in raw.chunks_mut(cin * 9) {
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            for v in f.iter_mut() {
                *v -= mean;
            }
        }
        let weights: Vec<f32> = raw.iter().map(|&v| v as f32).collect();
        let bias: Vec<f32> = (0..cout).map(|_| (0.05 * normalish(&mut rng)) as f32).collect();
        let mut conv = ConvWeights { name: name.to_string(), in_channels: cin, out_channels: cout, weights, bias };

        let pixels: usize = acts.iter().map(|(_, h, w)| h * w).sum();
        let conv_all = |conv: &ConvWeights| -> Vec<Vec<f64>> {
            acts.par_iter().map(|(x, h, w)| conv3x3_reference(x, *h, *w, conv, Padding::Reflect)).collect()
        };
        let mut ys = conv_all(&conv);
        let mut m = positive_means(&ys, cout, pixels);
        if m.contains(&0.0) {
            // flip filters that are silent on the calibration set
            for (o, &v) in m.iter().enumerate() {
                if v == 0.0 {
                    for wv in &mut conv.weights[o * cin * 9..(o + 1) * cin * 9] {
                        *wv = -*wv;
                    }
                    conv.bias[o] = conv.bias[o].abs();
                }
            }
            ys = conv_all(&conv);
            m = positive_means(&ys, cout, pixels);
        }
        let scale: Vec<f64> = m.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect();
        for (o, &s) in scale.iter().enumerate() {
            for wv in &mut conv.weights[o * cin * 9..(o + 1) * cin * 9] {
                *wv = (*wv as f64 * s) as f32;
            }
            conv.bias[o] = (conv.bias[o] as f64 * s) as f32;
        }
        if l + 1 < VGG19_LAYERS.len() {
            // rescaling commutes with the ReLU, so the next layer's input
            // comes from the responses already computed
            acts = ys
                .into_iter()
                .zip(&acts)
                .map(|(mut y, &(_, h, w))| {
                    for px in y.chunks_exact_mut(cout) {
                        for (v, s) in px.iter_mut().zip(&scale) {
                            *v = (*v * s).max(0.0);
                        }
                    }
                    if VGG19_POOL_AFTER.contains(&l) {
                        (pool_reference(&y, h, w, cout, PoolKind::Average), h / 2, w / 2)
                    } else {
                        (y, h, w)
                    }
                })
                .collect();
        }
        layers.push(conv);
    }
    WeightBundle {
        format_version: FORMAT_VERSION,
        provenance: format!(
            "synthetic He-initialized VGG-19 (seed {seed:#x}), zero-mean filters, per-filter mean post-ReLU \
             activation normalized to 1 on {CALIBRATION_IMAGES} procedural {CALIBRATION_SIZE}x{CALIBRATION_SIZE} images"
        ),
        normalized: true,
        layers,
        pool_after: VGG19_POOL_AFTER.to_vec(),
        pool_kind: PoolKind::Average,
        padding: Padding::Reflect,
        preprocessing,
    }
}

/// Builds the synthetic normalized VGG-19 bundle for `seed`. Bundles are
/// memoized per process since calibration takes a few seconds.
pub fn synthetic_vgg19(seed: u64) -> WeightBundle {
    static CACHE: OnceLock<Mutex<Vec<(u64, WeightBundle)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    if let Some((_, b)) = guard.iter().find(|(s, _)| *s == seed) {
        return b.clone();
    }
    let b = build(seed);
    guard.push((seed, b.clone()));
    b
}
