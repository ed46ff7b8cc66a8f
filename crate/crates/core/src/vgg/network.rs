//! Differentiable conv/ReLU/pool pipeline in working precision `T`.
//!
//! Activations are `H x W x C` row-major (channels contiguous), which is
//! exactly the `M x N` layout of [`FeatureLayer`]. A 3x3 convolution is an
//! im2col gather followed by one GEMM per tile of output rows; the input
//! gradient is the transposed GEMM followed by a scatter through the same
//! padding map, so mirrored border contributions accumulate on the pixels
//! they were read from.

use rayon::prelude::*;

use super::bundle::{ChannelOrder, ConvWeights, Padding, PoolKind, Preprocessing, WeightBundle};
use crate::error::{invalid_arg, Result};
use crate::features::{FeatureLayer, FeatureStack};
use crate::real::{gemm, MatRef, Real};
use crate::synth::image::ImageTensor;

/// Output pixels per im2col tile.
const TILE_PIXELS: usize = 2048;

#[inline]
pub(crate) fn pad_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Reflect => {
            let r = if i < 0 { -i } else { 2 * n - 2 - i };
            Some(r.clamp(0, n - 1) as usize)
        }
    }
}

struct Conv<T> {
    cin: usize,
    cout: usize,
    /// `(9 * cin) x cout`, row index `(ky * 3 + kx) * cin + ci`.
    w: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    fn from_weights(cw: &ConvWeights) -> Self {
        let (cin, cout) = (cw.in_channels, cw.out_channels);
        let mut w = vec![T::zero(); 9 * cin * cout];
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        w[((ky * 3 + kx) * cin + ci) * cout + co] = T::of(cw.weight(co, ci, ky, kx) as f64);
                    }
                }
            }
        }
        Conv { cin, cout, w, bias: cw.bias.iter().map(|&b| T::of(b as f64)).collect() }
    }
}

/// Buffers retained by a forward pass for the reverse pass.
#[derive(Clone, Debug)]
pub struct ActivationTape<T> {
    pub height: usize,
    pub width: usize,
    /// Pre-activation (conv output) per layer; the ReLU gate is `pre > 0`.
    pub pre: Vec<FeatureLayer<T>>,
    /// Post-activation features per layer.
    pub post: Vec<FeatureLayer<T>>,
    /// Per input value: was it clamped into `[0, 1]` during preprocessing.
    pub clamped: Vec<bool>,
    pub clamped_count: usize,
}

/// Conv feature extractor built from a [`WeightBundle`].
pub struct Network<T> {
    convs: Vec<Conv<T>>,
    names: Vec<String>,
    pool_after: Vec<bool>,
    pool_kind: PoolKind,
    padding: Padding,
    preprocessing: Preprocessing,
    relu: bool,
}

/// Maps an image to the network input: clamp to `[0,1]`, scale, subtract
/// channel means, reorder channels. Returns the tensor, the clamp mask and
/// the number of clamped values.
pub fn preprocess<T: Real>(image: &ImageTensor, pre: &Preprocessing) -> (Vec<T>, Vec<bool>, usize) {
    let mut out = vec![T::zero(); image.data.len()];
    let mut mask = vec![false; image.data.len()];
    let mut count = 0;
    for (p, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            let v = px[c];
            let cl = v.clamp(0.0, 1.0);
            if cl != v || v.is_nan() {
                mask[p * 3 + c] = true;
                count += 1;
            }
            let cl = if v.is_nan() { 0.0 } else { cl };
            let dst = match pre.channel_order {
                ChannelOrder::Rgb => c,
                ChannelOrder::Bgr => 2 - c,
            };
            out[p * 3 + dst] = T::of(pre.scale as f64 * cl - pre.channel_means[c] as f64);
        }
    }
    if count > 0 {
        log::debug!("preprocess clamped {count} out-of-range values");
    }
    (out, mask, count)
}

impl<T: Real> Network<T> {
    pub fn new(bundle: &WeightBundle) -> Result<Self> {
        bundle.validate_structure()?;
        let n = bundle.layers.len();
        let mut pool_after = vec![false; n];
        for &p in &bundle.pool_after {
            pool_after[p] = true;
        }
        Ok(Network {
            convs: bundle.layers.iter().map(Conv::from_weights).collect(),
            names: bundle.layer_names(),
            pool_after,
            pool_kind: bundle.pool_kind,
            padding: bundle.padding,
            preprocessing: bundle.preprocessing.clone(),
            relu: true,
        })
    }

    /// Test hook: skips every ReLU so the network is linear in its input
    /// (up to the biases).
    #[doc(hidden)]
    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn n_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.cout).collect()
    }

    /// Number of pooling stages applied before layer `l`.
    pub fn pools_before(&self, l: usize) -> usize {
        self.pool_after[..l].iter().filter(|&&p| p).count()
    }

    /// Checks an input size for the first `n_layers` layers: divisible by
    /// `2^p` and at least `2^(p+1)`, `p` the number of pools crossed.
    pub fn check_size(&self, height: usize, width: usize, n_layers: usize) -> Result<()> {
        if n_layers == 0 || n_layers > self.n_layers() {
            return invalid_arg(format!("n_layers must be in 1..={}", self.n_layers()));
        }
        let div = 1usize << self.pools_before(n_layers - 1);
        if height % div != 0 || width % div != 0 || height < 2 * div || width < 2 * div {
            return invalid_arg(format!(
                "image {height}x{width} must be divisible by {div} and at least {}x{} (resize upstream)",
                2 * div,
                2 * div
            ));
        }
        Ok(())
    }

    /// Pixel counts per layer for an input of the given size.
    pub fn layer_pixels(&self, height: usize, width: usize, n_layers: usize) -> Vec<usize> {
        (0..n_layers).map(|l| (height * width) >> (2 * self.pools_before(l))).collect()
    }

    pub fn preprocess(&self, image: &ImageTensor) -> (Vec<T>, Vec<bool>, usize) {
        preprocess(image, &self.preprocessing)
    }

    /// Full pass: preprocessing then the first `n_layers` layers.
    pub fn forward(&self, image: &ImageTensor, n_layers: usize) -> Result<(FeatureStack<T>, ActivationTape<T>)> {
        let (input, mask, count) = self.preprocess(image);
        let (stack, mut tape) = self.forward_input(&input, image.height, image.width, n_layers)?;
        tape.clamped = mask;
        tape.clamped_count = count;
        Ok((stack, tape))
    }

    /// Forward pass on an already preprocessed `H x W x 3` tensor.
    pub fn forward_input(
        &self,
        input: &[T],
        height: usize,
        width: usize,
        n_layers: usize,
    ) -> Result<(FeatureStack<T>, ActivationTape<T>)> {
        self.check_size(height, width, n_layers)?;
        if input.len() != height * width * 3 {
            return invalid_arg("input tensor size does not match its dimensions");
        }
        let (mut h, mut w) = (height, width);
        let mut pre_layers: Vec<FeatureLayer<T>> = Vec::with_capacity(n_layers);
        let mut post_layers: Vec<FeatureLayer<T>> = Vec::with_capacity(n_layers);
        let mut pooled: Option<Vec<T>> = None;
        for l in 0..n_layers {
            let conv = &self.convs[l];
            let x: &[T] = match (&pooled, l) {
                (_, 0) => input,
                (Some(p), _) => p,
                (None, _) => &post_layers[l - 1].data,
            };
            let mut pre = vec![T::zero(); h * w * conv.cout];
            conv_forward(conv, x, h, w, self.padding, &mut pre);
            let post: Vec<T> = if self.relu { pre.iter().map(|&v| v.max(T::zero())).collect() } else { pre.clone() };
            pre_layers.push(FeatureLayer::new(h, w, conv.cout, pre)?);
            post_layers.push(FeatureLayer::new(h, w, conv.cout, post)?);
            pooled = None;
            if l + 1 < n_layers && self.pool_after[l] {
                pooled = Some(pool_forward(&post_layers[l].data, h, w, conv.cout, self.pool_kind));
                h /= 2;
                w /= 2;
            }
        }
        let names = self.names[..n_layers].to_vec();
        let stack = FeatureStack::new(post_layers.clone(), names)?;
        let tape = ActivationTape {
            height,
            width,
            pre: pre_layers,
            post: post_layers,
            clamped: Vec::new(),
            clamped_count: 0,
        };
        Ok((stack, tape))
    }

    /// Vector-Jacobian product from per-layer feature gradients to the
    /// preprocessed input. An empty gradient vector stands for zeros.
    pub fn backward(&self, tape: &ActivationTape<T>, per_layer_grads: &[Vec<T>]) -> Result<Vec<T>> {
        let n = tape.pre.len();
        if per_layer_grads.len() != n {
            return invalid_arg(format!("{} gradients for {} layers", per_layer_grads.len(), n));
        }
        for (l, (g, pre)) in per_layer_grads.iter().zip(&tape.pre).enumerate() {
            if !g.is_empty() && g.len() != pre.data.len() {
                return invalid_arg(format!(
                    "gradient for layer {l} has {} values, layer has {}",
                    g.len(),
                    pre.data.len()
                ));
            }
        }
        let mut upstream: Option<Vec<T>> = None;
        for l in (0..n).rev() {
            let pre = &tape.pre[l];
            let (h, w, c) = (pre.height, pre.width, pre.channels);
            let mut g = if per_layer_grads[l].is_empty() { vec![T::zero(); h * w * c] } else { per_layer_grads[l].clone() };
            if let Some(up) = upstream.take() {
                if l + 1 < n && self.pool_after[l] {
                    pool_backward(&up, &tape.post[l].data, h, w, c, self.pool_kind, &mut g);
                } else {
                    for (a, b) in g.iter_mut().zip(&up) {
                        *a += *b;
                    }
                }
            }
            if self.relu {
                for (gv, pv) in g.iter_mut().zip(&pre.data) {
                    if *pv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let conv = &self.convs[l];
            let mut din = vec![T::zero(); h * w * conv.cin];
            conv_backward(conv, &g, h, w, self.padding, &mut din);
            upstream = Some(din);
        }
        Ok(upstream.unwrap_or_default())
    }

    /// Gradient with respect to the `[0, 1]` RGB image (zero where the
    /// input was clamped).
    pub fn image_gradient(&self, tape: &ActivationTape<T>, per_layer_grads: &[Vec<T>]) -> Result<Vec<f64>> {
        let din = self.backward(tape, per_layer_grads)?;
        let scale = self.preprocessing.scale as f64;
        let mut out = vec![0.0; din.len()];
        for p in 0..din.len() / 3 {
            for c in 0..3 {
                let src = match self.preprocessing.channel_order {
                    ChannelOrder::Rgb => c,
                    ChannelOrder::Bgr => 2 - c,
                };
                let i = p * 3 + c;
                if !tape.clamped.get(i).copied().unwrap_or(false) {
                    out[i] = scale * din[p * 3 + src].as_f64();
                }
            }
        }
        Ok(out)
    }
}

fn im2col<T: Real>(input: &[T], h: usize, w: usize, cin: usize, y0: usize, rows: usize, padding: Padding, col: &mut [T]) {
    let k = 9 * cin;
    for py in 0..rows {
        let y = (y0 + py) as isize;
        for x in 0..w {
            let dst_row = &mut col[(py * w + x) * k..(py * w + x + 1) * k];
            for ky in 0..3 {
                let sy = pad_index(y + ky as isize - 1, h, padding);
                for kx in 0..3 {
                    let sx = pad_index(x as isize + kx as isize - 1, w, padding);
                    let dst = &mut dst_row[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin];
                    match (sy, sx) {
                        (Some(sy), Some(sx)) => {
                            let s = (sy * w + sx) * cin;
                            dst.copy_from_slice(&input[s..s + cin]);
                        }
                        _ => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(dcol: &[T], h: usize, w: usize, cin: usize, y0: usize, rows: usize, padding: Padding, din: &mut [T]) {
    let k = 9 * cin;
    for py in 0..rows {
        let y = (y0 + py) as isize;
        for x in 0..w {
            let src_row = &dcol[(py * w + x) * k..(py * w + x + 1) * k];
            for ky in 0..3 {
                let Some(sy) = pad_index(y + ky as isize - 1, h, padding) else { continue };
                for kx in 0..3 {
                    let Some(sx) = pad_index(x as isize + kx as isize - 1, w, padding) else { continue };
                    let d = (sy * w + sx) * cin;
                    let s = &src_row[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin];
                    for (a, b) in din[d..d + cin].iter_mut().zip(s) {
                        *a += *b;
                    }
                }
            }
        }
    }
}

fn tile_rows(w: usize) -> usize {
    (TILE_PIXELS / w).max(1)
}

fn conv_forward<T: Real>(conv: &Conv<T>, input: &[T], h: usize, w: usize, padding: Padding, out: &mut [T]) {
    let (cin, cout) = (conv.cin, conv.cout);
    let k = 9 * cin;
    let tr = tile_rows(w);
    out.par_chunks_mut(tr * w * cout).enumerate().for_each(|(t, tile)| {
        let rows = tile.len() / (w * cout);
        let mut col = vec![T::zero(); rows * w * k];
        im2col(input, h, w, cin, t * tr, rows, padding, &mut col);
        gemm(T::one(), MatRef::new(&col, rows * w, k), MatRef::new(&conv.w, k, cout), T::zero(), tile);
        for px in tile.chunks_exact_mut(cout) {
            for (v, b) in px.iter_mut().zip(&conv.bias) {
                *v += *b;
            }
        }
    });
}

fn conv_backward<T: Real>(conv: &Conv<T>, dout: &[T], h: usize, w: usize, padding: Padding, din: &mut [T]) {
    let (cin, cout) = (conv.cin, conv.cout);
    let k = 9 * cin;
    let tr = tile_rows(w);
    let tiles: Vec<(usize, &[T])> = dout.chunks(tr * w * cout).enumerate().collect();
    // dcol tiles are computed in parallel batches and scattered in tile order
    let batch = rayon::current_num_threads().max(1);
    for group in tiles.chunks(batch) {
        let dcols: Vec<(usize, usize, Vec<T>)> = group
            .par_iter()
            .map(|&(t, tile)| {
                let rows = tile.len() / (w * cout);
                let mut dcol = vec![T::zero(); rows * w * k];
                gemm(T::one(), MatRef::new(tile, rows * w, cout), MatRef::new(&conv.w, k, cout).t(), T::zero(), &mut dcol);
                (t * tr, rows, dcol)
            })
            .collect();
        for (y0, rows, dcol) in dcols {
            col2im_add(&dcol, h, w, cin, y0, rows, padding, din);
        }
    }
}

fn pool_forward<T: Real>(x: &[T], h: usize, w: usize, c: usize, kind: PoolKind) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); h2 * w2 * c];
    let quarter = T::of(0.25);
    for y in 0..h2 {
        for xx in 0..w2 {
            let o = (y * w2 + xx) * c;
            let i00 = ((2 * y) * w + 2 * xx) * c;
            let i01 = i00 + c;
            let i10 = i00 + w * c;
            let i11 = i10 + c;
            for ch in 0..c {
                let (a, b, cc, d) = (x[i00 + ch], x[i01 + ch], x[i10 + ch], x[i11 + ch]);
                out[o + ch] = match kind {
                    PoolKind::Average => quarter * (a + b + cc + d),
                    PoolKind::Max => a.max(b).max(cc).max(d),
                };
            }
        }
    }
    out
}

/// Adds the pooling VJP of `dout` into `dx`. Max pooling routes each
/// gradient to the first maximal input in raster order.
fn pool_backward<T: Real>(dout: &[T], x: &[T], h: usize, w: usize, c: usize, kind: PoolKind, dx: &mut [T]) {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for y in 0..h2 {
        for xx in 0..w2 {
            let o = (y * w2 + xx) * c;
            let i00 = ((2 * y) * w + 2 * xx) * c;
            let idx = [i00, i00 + c, i00 + w * c, i00 + w * c + c];
            for ch in 0..c {
                let g = dout[o + ch];
                match kind {
                    PoolKind::Average => {
                        for &i in &idx {
                            dx[i + ch] += quarter * g;
                        }
                    }
                    PoolKind::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if x[i + ch] > x[best + ch] {
                                best = i;
                            }
                        }
                        dx[best + ch] += g;
                    }
                }
            }
        }
    }
}

/// Straightforward 3x3 convolution in `f64` directly on `[out, in, 3, 3]`
/// weights, independent of the im2col/GEMM path. Used for weight
/// calibration and as a test oracle.
pub fn conv3x3_reference(input: &[f64], h: usize, w: usize, cw: &ConvWeights, padding: Padding) -> Vec<f64> {
    let (cin, cout) = (cw.in_channels, cw.out_channels);
    // [ky][kx][ci][co] so the innermost loop runs over contiguous outputs
    let mut wt = vec![0.0f64; 9 * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    wt[((ky * 3 + kx) * cin + ci) * cout + co] = cw.weight(co, ci, ky, kx) as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f64; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let acc = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (a, b) in acc.iter_mut().zip(&cw.bias) {
                *a = *b as f64;
            }
            for ky in 0..3 {
                let Some(sy) = pad_index(y as isize + ky as isize - 1, h, padding) else { continue };
                for kx in 0..3 {
                    let Some(sx) = pad_index(x as isize + kx as isize - 1, w, padding) else { continue };
                    let src = &input[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    for (ci, &v) in src.iter().enumerate() {
                        let wrow = &wt[((ky * 3 + kx) * cin + ci) * cout..((ky * 3 + kx) * cin + ci + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 pooling in `f64` (reference path).
pub fn pool_reference(x: &[f64], h: usize, w: usize, c: usize, kind: PoolKind) -> Vec<f64> {
    pool_forward(x, h, w, c, kind)
}

#[cfg(test)]
mod tests {
    use super::super::bundle::FORMAT_VERSION;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conv(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvWeights {
        ConvWeights {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            weights: (0..cout * cin * 9).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            bias: (0..cout).map(|_| rng.random_range(-0.2f32..0.2)).collect(),
        }
    }

    fn small_bundle(pool: PoolKind, padding: Padding) -> WeightBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        WeightBundle {
            format_version: FORMAT_VERSION,
            provenance: "test".into(),
            normalized: false,
            layers: vec![
                random_conv("c1", 3, 4, &mut rng),
                random_conv("c2", 4, 5, &mut rng),
                random_conv("c3", 5, 3, &mut rng),
            ],
            pool_after: vec![1],
            pool_kind: pool,
            padding,
            preprocessing: Preprocessing { channel_means: [0.0; 3], channel_order: ChannelOrder::Rgb, scale: 1.0 },
        }
    }

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn reflect_and_zero_padding_indices() {
        assert_eq!(pad_index(-1, 5, Padding::Reflect), Some(1));
        assert_eq!(pad_index(5, 5, Padding::Reflect), Some(3));
        assert_eq!(pad_index(2, 5, Padding::Reflect), Some(2));
        assert_eq!(pad_index(-1, 5, Padding::Zero), None);
    }

    #[test]
    fn delta_kernel_copies_channel() {
        let mut weights = vec![0.0f32; 27];
        // out 0 <- in channel 1, centre tap
        weights[(1 * 3 + 1) * 3 + 1] = 1.0;
        let bundle = WeightBundle {
            format_version: FORMAT_VERSION,
            provenance: "delta".into(),
            normalized: false,
            layers: vec![ConvWeights { name: "d".into(), in_channels: 3, out_channels: 1, weights, bias: vec![0.0] }],
            pool_after: vec![],
            pool_kind: PoolKind::Average,
            padding: Padding::Reflect,
            preprocessing: Preprocessing { channel_means: [0.0; 3], channel_order: ChannelOrder::Rgb, scale: 1.0 },
        };
        let net = Network::<f64>::new(&bundle).unwrap().without_relu();
        let input = random_input(6 * 4 * 3, 1);
        let (stack, _) = net.forward_input(&input, 6, 4, 1).unwrap();
        for p in 0..24 {
            assert_eq!(stack.layers[0].data[p], input[p * 3 + 1]);
        }
    }

    #[test]
    fn relu_of_negative_preactivations_is_zero() {
        let bundle = WeightBundle {
            format_version: FORMAT_VERSION,
            provenance: "neg".into(),
            normalized: false,
            layers: vec![ConvWeights { name: "n".into(), in_channels: 3, out_channels: 2, weights: vec![0.0; 54], bias: vec![-1.0, -0.5] }],
            pool_after: vec![],
            pool_kind: PoolKind::Average,
            padding: Padding::Reflect,
            preprocessing: Preprocessing::default(),
        };
        let net = Network::<f32>::new(&bundle).unwrap();
        let img = ImageTensor::filled(4, 4, [0.3, 0.6, 0.9]);
        let (stack, _) = net.forward(&img, 1).unwrap();
        assert!(stack.layers[0].data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gemm_path_matches_reference_conv() {
        for padding in [Padding::Reflect, Padding::Zero] {
            let b = small_bundle(PoolKind::Average, padding);
            let net = Network::<f64>::new(&b).unwrap().without_relu();
            let input = random_input(7 * 5 * 3, 2);
            let (stack, _) = net.forward_input(&input, 7, 5, 1).unwrap();
            let want = conv3x3_reference(&input, 7, 5, &b.layers[0], padding);
            for (a, b) in stack.layers[0].data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_law_and_size_checks() {
        let b = small_bundle(PoolKind::Average, Padding::Reflect);
        let net = Network::<f32>::new(&b).unwrap();
        let input = vec![0.0f32; 8 * 6 * 3];
        let (stack, _) = net.forward_input(&input, 8, 6, 3).unwrap();
        assert_eq!(stack.layers[0].n_pixels(), 48);
        assert_eq!(stack.layers[2].n_pixels(), 12);
        assert_eq!(net.layer_pixels(8, 6, 3), vec![48, 48, 12]);
        assert!(net.forward_input(&vec![0.0f32; 7 * 6 * 3], 7, 6, 3).is_err());
        // a single layer crosses no pooling stage
        assert!(net.forward_input(&vec![0.0f32; 7 * 6 * 3], 7, 6, 1).is_ok());
    }

    fn linear_part(net: &Network<f64>, x: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
        // forward(x) - forward(0) removes the bias contribution
        let (a, _) = net.forward_input(x, h, w, 3).unwrap();
        let (z, _) = net.forward_input(&vec![0.0; x.len()], h, w, 3).unwrap();
        a.layers.iter().zip(&z.layers).map(|(a, z)| a.data.iter().zip(&z.data).map(|(p, q)| p - q).collect()).collect()
    }

    #[test]
    fn conv_pool_chain_is_linear_without_relu() {
        for pool in [PoolKind::Average] {
            let b = small_bundle(pool, Padding::Reflect);
            let net = Network::<f64>::new(&b).unwrap().without_relu();
            let x = random_input(8 * 8 * 3, 3);
            let ax: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
            let l1 = linear_part(&net, &x, 8, 8);
            let l2 = linear_part(&net, &ax, 8, 8);
            for (p, q) in l1.iter().flatten().zip(l2.iter().flatten()) {
                assert!((2.5 * p - q).abs() < 1e-10 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn adjoint_identity_per_configuration() {
        for (pool, padding) in [
            (PoolKind::Average, Padding::Reflect),
            (PoolKind::Average, Padding::Zero),
            (PoolKind::Max, Padding::Reflect),
        ] {
            let b = small_bundle(pool, padding);
            let net = Network::<f64>::new(&b).unwrap().without_relu();
            let (h, w) = (8, 6);
            let u = random_input(h * w * 3, 5);
            // for max pooling, linearize around u itself (argmax fixed)
            let (_, tape) = net.forward_input(&u, h, w, 3).unwrap();
            let lin = linear_part(&net, &u, h, w);
            let v: Vec<Vec<f64>> = lin.iter().enumerate().map(|(i, l)| random_input(l.len(), 10 + i as u64)).collect();
            let lhs: f64 = lin.iter().flatten().zip(v.iter().flatten()).map(|(a, b)| a * b).sum();
            let back = net.backward(&tape, &v).unwrap();
            let rhs: f64 = u.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "{pool:?}/{padding:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_gradients_give_zero_image_gradient() {
        let b = small_bundle(PoolKind::Average, Padding::Reflect);
        let net = Network::<f64>::new(&b).unwrap();
        let img = ImageTensor::filled(8, 8, [0.2, 0.4, 0.6]);
        let (_, tape) = net.forward(&img, 3).unwrap();
        let g = net.image_gradient(&tape, &[vec![], vec![], vec![]]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(net.backward(&tape, &[vec![]]).is_err());
        assert!(net.backward(&tape, &[vec![0.0; 3], vec![], vec![]]).is_err());
    }

    #[test]
    fn single_layer_gradient_is_gated_back_projection() {
        let mut weights = vec![0.0f32; 27];
        weights[(0 * 3 + 1) * 3 + 1] = 1.0; // out 0 <- in 0 centre
        let bundle = WeightBundle {
            format_version: FORMAT_VERSION,
            provenance: "delta".into(),
            normalized: false,
            layers: vec![ConvWeights { name: "d".into(), in_channels: 3, out_channels: 1, weights, bias: vec![0.0] }],
            pool_after: vec![],
            pool_kind: PoolKind::Average,
            padding: Padding::Reflect,
            preprocessing: Preprocessing { channel_means: [0.0; 3], channel_order: ChannelOrder::Rgb, scale: 1.0 },
        };
        let net = Network::<f64>::new(&bundle).unwrap();
        let input = random_input(4 * 4 * 3, 8);
        let (_, tape) = net.forward_input(&input, 4, 4, 1).unwrap();
        let g = random_input(16, 9);
        let back = net.backward(&tape, &[g.clone()]).unwrap();
        for p in 0..16 {
            let gate = if input[p * 3] > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(back[p * 3], gate * g[p]);
            assert_eq!(back[p * 3 + 1], 0.0);
            assert_eq!(back[p * 3 + 2], 0.0);
        }
    }

    #[test]
    fn preprocess_conventions() {
        let pre = Preprocessing::default();
        let zero = ImageTensor::filled(2, 2, [0.0; 3]);
        let (t, _, n) = preprocess::<f64>(&zero, &pre);
        assert_eq!(n, 0);
        for px in t.chunks(3) {
            for c in 0..3 {
                assert!((px[c] + pre.channel_means[c] as f64).abs() < 1e-9);
            }
        }
        let means = pre.channel_means.map(|m| m as f64 / 255.0);
        let (t, _, _) = preprocess::<f64>(&ImageTensor::filled(2, 2, means), &pre);
        assert!(t.iter().all(|v| v.abs() < 1e-9));
        let bgr = Preprocessing { channel_order: ChannelOrder::Bgr, ..pre.clone() };
        let (t, _, _) = preprocess::<f64>(&ImageTensor::filled(1, 1, [1.0, 0.0, 0.0]), &bgr);
        assert!((t[2] - (255.0 - pre.channel_means[0] as f64)).abs() < 1e-4);
        let (_, mask, n) = preprocess::<f64>(&ImageTensor::filled(1, 2, [1.5, 0.5, -0.1]), &pre);
        assert_eq!(n, 4);
        assert_eq!(mask, vec![true, false, true, true, false, true]);
    }
}
