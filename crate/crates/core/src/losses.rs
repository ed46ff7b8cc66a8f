//! Image-level textural losses over feature stacks.
//!
//! * Sliced Wasserstein: per layer, the mean over projection directions of
//!   the sorted-list 1D transport cost; summed over layers, unweighted.
//! * Gram: per layer, `(1/N^2) ||G - G_target||_F^2` with
//!   `G = F^T F / M`; summed over layers.
//!
//! Both are invariant to pixel permutations. Reductions over directions and
//! layers happen in index order so results do not depend on thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::features::{FeatureLayer, FeatureStack};
use crate::real::{gemm, MatRef, Real};
use crate::sliced_ot::{build_tagging, quantile_indices, sample_directions, stable_order_by_key, DirectionSet, DEFAULT_TAG_SAFETY};

/// Number of directions projected per batch; bounds scratch memory.
const DIRECTION_CHUNK: usize = 64;

/// Held-out direction count for monitoring.
pub const MONITOR_DIRECTIONS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sw,
    Gram,
}

/// How many random directions each layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionPolicy {
    /// As many directions as the layer has features.
    PerFeature,
    Fixed(usize),
}

impl DirectionPolicy {
    pub fn count(&self, n_features: usize) -> usize {
        match *self {
            DirectionPolicy::PerFeature => n_features,
            DirectionPolicy::Fixed(d) => d,
        }
    }
}

/// Result of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_layer: Vec<f64>,
    pub wall_time: f64,
    pub n_directions_used: Vec<usize>,
    pub seed: u64,
}

impl LossReport {
    fn from_layers(per_layer: Vec<f64>, start: Instant, n_directions_used: Vec<usize>, seed: u64) -> Self {
        LossReport {
            total: per_layer.iter().sum(),
            per_layer,
            wall_time: start.elapsed().as_secs_f64(),
            n_directions_used,
            seed,
        }
    }

    pub fn to_record(&self, step: usize, kind: RecordKind) -> LossRecord {
        LossRecord {
            step,
            loss_total: self.total,
            loss_per_layer: self.per_layer.clone(),
            kind,
            seed: self.seed,
            wall_time_s: self.wall_time,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Sw,
    Gram,
    MonitorSw,
    MonitorGram,
}

/// One line of the JSON-lines loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_per_layer: Vec<f64>,
    pub kind: RecordKind,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl LossRecord {
    pub fn to_json_line(&self) -> String {
        // a struct of numbers and enums always serializes
        serde_json::to_string(self).expect("loss record serializes")
    }
}

/// Mixes a run seed with a stream index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one direction set per layer; layer `l` uses seed `mix_seed(seed, l)`.
pub fn draw_directions(channels: &[usize], policy: DirectionPolicy, seed: u64) -> Result<Vec<DirectionSet>> {
    channels
        .iter()
        .enumerate()
        .map(|(l, &n)| sample_directions(n, policy.count(n), mix_seed(seed, l as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Gram baseline

/// Symmetric `N x N` empirical second moment of a layer, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    pub n_features: usize,
    pub entries: Vec<T>,
}

impl<T: Real> GramMatrix<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n_features + j]
    }
}

pub fn gram_matrix<T: Real>(layer: &FeatureLayer<T>) -> Result<GramMatrix<T>> {
    let m = layer.n_pixels();
    let n = layer.channels;
    if m == 0 || n == 0 {
        return invalid_arg("gram matrix of an empty layer");
    }
    let f = MatRef::new(&layer.data, m, n);
    let mut entries = vec![T::zero(); n * n];
    gemm(T::of(1.0 / m as f64), f.t(), f, T::zero(), &mut entries);
    for i in 0..n {
        for j in 0..i {
            entries[i * n + j] = entries[j * n + i];
        }
    }
    Ok(GramMatrix { n_features: n, entries })
}

/// Target-side Gram matrices, computed once per exemplar.
pub struct GramTarget<T> {
    grams: Vec<GramMatrix<T>>,
}

impl<T: Real> GramTarget<T> {
    pub fn new(target: &FeatureStack<T>) -> Result<Self> {
        Ok(GramTarget { grams: target.layers.iter().map(gram_matrix).collect::<Result<_>>()? })
    }

    /// Per-layer losses; when `grads` is given, it receives `dL/dF` per layer.
    pub fn evaluate(&self, stack: &FeatureStack<T>, mut grads: Option<&mut Vec<Vec<T>>>) -> Result<Vec<f64>> {
        if stack.len() != self.grams.len() {
            return invalid_arg(format!("stack has {} layers, target {}", stack.len(), self.grams.len()));
        }
        if let Some(g) = grads.as_deref_mut() {
            g.resize(stack.len(), Vec::new());
        }
        let mut losses = Vec::with_capacity(stack.len());
        for (l, (layer, target)) in stack.layers.iter().zip(&self.grams).enumerate() {
            let n = layer.channels;
            if n != target.n_features {
                return invalid_arg(format!("layer {l}: {n} features vs target {}", target.n_features));
            }
            let g = gram_matrix(layer)?;
            let diff: Vec<T> = g.entries.iter().zip(&target.entries).map(|(a, b)| *a - *b).collect();
            let nn = (n * n) as f64;
            losses.push(diff.iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>() / nn);
            if let Some(grads) = grads.as_deref_mut() {
                let m = layer.n_pixels();
                let out = &mut grads[l];
                out.clear();
                out.resize(m * n, T::zero());
                gemm(
                    T::of(4.0 / (nn * m as f64)),
                    MatRef::new(&layer.data, m, n),
                    MatRef::new(&diff, n, n),
                    T::zero(),
                    out,
                );
            }
        }
        Ok(losses)
    }
}

pub fn gram_loss<T: Real>(stack: &FeatureStack<T>, target: &FeatureStack<T>) -> Result<LossReport> {
    let start = Instant::now();
    stack.check_compatible(target)?;
    let per_layer = GramTarget::new(target)?.evaluate(stack, None)?;
    Ok(LossReport::from_layers(per_layer, start, vec![0; stack.len()], 0))
}

/// Gradient of [`gram_loss`] with respect to every feature of `stack`:
/// `dL/dF_m = 4 / (N^2 M) * (G - G_target) F_m`.
pub fn gram_loss_grad<T: Real>(stack: &FeatureStack<T>, target: &FeatureStack<T>) -> Result<(LossReport, Vec<Vec<T>>)> {
    let start = Instant::now();
    stack.check_compatible(target)?;
    let mut grads = Vec::new();
    let per_layer = GramTarget::new(target)?.evaluate(stack, Some(&mut grads))?;
    Ok((LossReport::from_layers(per_layer, start, vec![0; stack.len()], 0), grads))
}

// ---------------------------------------------------------------------------
// Spatial tags

/// Spatial tags of one layer for the optimized image and the exemplar.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTags {
    pub output: Vec<u32>,
    pub target: Vec<u32>,
}

/// Largest allowed gap between per-tag pixel proportions of two tag maps.
pub const TAG_PROPORTION_TOLERANCE: f64 = 0.01;

fn tag_counts(tags: &[u32]) -> BTreeMap<u32, usize> {
    let mut c = BTreeMap::new();
    for &t in tags {
        *c.entry(t).or_insert(0) += 1;
    }
    c
}

/// Fails unless both tag lists use the same ids with per-id proportions
/// within [`TAG_PROPORTION_TOLERANCE`].
pub fn check_tag_proportions(output: &[u32], target: &[u32]) -> Result<()> {
    if output.is_empty() || target.is_empty() {
        return invalid_arg("empty tag list");
    }
    let co = tag_counts(output);
    let ct = tag_counts(target);
    let mut problems = Vec::new();
    for id in co.keys().chain(ct.keys()).collect::<std::collections::BTreeSet<_>>() {
        let po = co.get(id).copied().unwrap_or(0) as f64 / output.len() as f64;
        let pt = ct.get(id).copied().unwrap_or(0) as f64 / target.len() as f64;
        if po == 0.0 || pt == 0.0 {
            problems.push(format!("tag {id}: output {:.2}% vs exemplar {:.2}% (missing on one side)", po * 100.0, pt * 100.0));
        } else if (po - pt).abs() > TAG_PROPORTION_TOLERANCE {
            problems.push(format!("tag {id}: output {:.2}% vs exemplar {:.2}%", po * 100.0, pt * 100.0));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::TagMismatch(problems.join("; ")))
    }
}

impl LayerTags {
    pub fn new(output: Vec<u32>, target: Vec<u32>) -> Result<Self> {
        check_tag_proportions(&output, &target)?;
        Ok(LayerTags { output, target })
    }

    /// Maps each sorted output position to a sorted target position,
    /// resampling each tag group separately (groups appear in ascending id
    /// order after sorting augmented projections).
    fn resample_map(&self) -> Result<Vec<u32>> {
        let co = tag_counts(&self.output);
        let ct = tag_counts(&self.target);
        let mut map = Vec::with_capacity(self.output.len());
        let mut target_start = 0usize;
        for (id, &n_out) in &co {
            let n_tgt = ct[id];
            map.extend(quantile_indices(n_tgt, n_out)?.into_iter().map(|i| (target_start + i) as u32));
            target_start += n_tgt;
        }
        Ok(map)
    }
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein

/// Computes a stable sort order of one projected slice, grouping by tag
/// offset when tags are present.
fn slice_order<T: Real>(values: &[T], tags: Option<(&[u32], &BTreeMap<u32, f64>)>, order: &mut Vec<u32>) {
    match tags {
        None => stable_order_by_key(values.len(), |i| values[i].order_key(), T::KEY_BITS, order),
        Some((ids, offsets)) => {
            stable_order_by_key(values.len(), |i| (values[i].as_f64() + offsets[&ids[i]]).order_key(), 64, order)
        }
    }
}

fn check_clustered(order: &[u32], ids: &[u32]) -> Result<()> {
    if order.windows(2).all(|w| ids[w[0] as usize] <= ids[w[1] as usize]) {
        Ok(())
    } else {
        Err(Error::InvalidState("tag offsets did not separate the sorted projections into tag groups".into()))
    }
}

struct TaggedLayer {
    tags: LayerTags,
    target_bound: f64,
}

struct TargetLayer<T> {
    dirs: DirectionSet,
    /// `N x D` row-major directions in working precision.
    dirs_t: Vec<T>,
    target: FeatureLayer<T>,
    /// Per direction, sorted target projections (`D x M_target`), if cached.
    sorted: Option<Vec<T>>,
    out_pixels: usize,
    /// Sorted output position -> sorted target position.
    resample: Vec<u32>,
    tagged: Option<TaggedLayer>,
}

impl<T: Real> TargetLayer<T> {
    fn offsets(&self, ids: &[u32], bound: f64) -> Result<BTreeMap<u32, f64>> {
        Ok(build_tagging(ids, bound, DEFAULT_TAG_SAFETY)?.offsets)
    }

    /// Sorted target projections for directions `[d0, d1)`, `(d1-d0) x M_t`.
    fn target_block(&self, d0: usize, d1: usize) -> Result<Vec<T>> {
        let mt = self.target.n_pixels();
        if let Some(sorted) = &self.sorted {
            return Ok(sorted[d0 * mt..d1 * mt].to_vec());
        }
        let w = d1 - d0;
        let n = self.target.channels;
        let v = self.dirs.block::<T>(d0, d1);
        let mut proj = vec![T::zero(); w * mt];
        gemm(T::one(), MatRef::new(&v, n, w).t(), MatRef::new(&self.target.data, mt, n).t(), T::zero(), &mut proj);
        let offsets = match &self.tagged {
            Some(t) => Some(self.offsets(&t.tags.target, t.target_bound)?),
            None => None,
        };
        let rows: Vec<Result<Vec<T>>> = proj
            .par_chunks(mt)
            .map(|row| {
                let mut order = Vec::with_capacity(mt);
                let tags = self.tagged.as_ref().map(|t| (t.tags.target.as_slice(), offsets.as_ref().unwrap()));
                slice_order(row, tags, &mut order);
                if let Some(t) = &self.tagged {
                    check_clustered(&order, &t.tags.target)?;
                }
                Ok(order.iter().map(|&i| row[i as usize]).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(w * mt);
        for r in rows {
            out.extend(r?);
        }
        Ok(out)
    }

    fn evaluate(&self, layer: &FeatureLayer<T>, grad: Option<&mut Vec<T>>) -> Result<f64> {
        let m = layer.n_pixels();
        let n = layer.channels;
        if n != self.dirs.n_features {
            return invalid_arg(format!("layer has {n} features, directions {}", self.dirs.n_features));
        }
        if m != self.out_pixels {
            return invalid_arg(format!("layer has {m} pixels, target prepared for {}", self.out_pixels));
        }
        let d_total = self.dirs.n_directions;
        let mt = self.target.n_pixels();
        let offsets = match &self.tagged {
            Some(t) => {
                let bound = layer.max_row_norm().max(t.target_bound);
                Some(self.offsets(&t.tags.output, bound)?)
            }
            None => None,
        };
        let grad_scale = 2.0 / (m as f64 * d_total as f64);
        let mut grad = grad.map(|g| {
            g.clear();
            g.resize(m * n, T::zero());
            g
        });
        let mut loss = 0.0;
        for d0 in (0..d_total).step_by(DIRECTION_CHUNK) {
            let d1 = (d0 + DIRECTION_CHUNK).min(d_total);
            let w = d1 - d0;
            let v = &self.dirs_t;
            let vblock: Vec<T> = (0..n).flat_map(|i| v[i * d_total + d0..i * d_total + d1].iter().copied()).collect();
            let mut proj = vec![T::zero(); w * m];
            gemm(T::one(), MatRef::new(&vblock, n, w).t(), MatRef::new(&layer.data, m, n).t(), T::zero(), &mut proj);
            let target = self.target_block(d0, d1)?;
            let want_grad = grad.is_some();
            let results: Vec<Result<f64>> = proj
                .par_chunks_mut(m)
                .zip(target.par_chunks(mt))
                .map(|(row, tgt)| {
                    let mut order = Vec::with_capacity(m);
                    let tags = self.tagged.as_ref().map(|t| (t.tags.output.as_slice(), offsets.as_ref().unwrap()));
                    slice_order(row, tags, &mut order);
                    if let Some(t) = &self.tagged {
                        check_clustered(&order, &t.tags.output)?;
                    }
                    let mut sum = 0.0;
                    let mut diffs = Vec::with_capacity(if want_grad { m } else { 0 });
                    for (i, &src) in order.iter().enumerate() {
                        let diff = row[src as usize] - tgt[self.resample[i] as usize];
                        let df = diff.as_f64();
                        sum += df * df;
                        if want_grad {
                            diffs.push(diff);
                        }
                    }
                    if want_grad {
                        // overwrite the projection row with dL/dproj
                        let s = T::of(grad_scale);
                        for (i, &src) in order.iter().enumerate() {
                            row[src as usize] = s * diffs[i];
                        }
                    }
                    Ok(sum / m as f64)
                })
                .collect();
            for r in results {
                loss += r?;
            }
            if let Some(g) = grad.as_deref_mut() {
                // dF (M x N) += dP^T (M x w) * Vblock^T (w x N)
                gemm(T::one(), MatRef::new(&proj, w, m).t(), MatRef::new(&vblock, n, w).t(), T::one(), g);
            }
        }
        Ok(loss / d_total as f64)
    }
}

/// Whether target projections are sorted once up front or per evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetCache {
    /// Cache if the sorted slices fit in this many bytes.
    UpTo(usize),
    Never,
}

/// Sliced Wasserstein objective against a fixed exemplar and fixed
/// directions. Sorted target slices are cached so repeated evaluations
/// (one L-BFGS restart) only sort the output side.
pub struct SlicedTarget<T> {
    layers: Vec<TargetLayer<T>>,
    seed: u64,
}

impl<T: Real> SlicedTarget<T> {
    /// `out_pixels[l]` is the pixel count of the optimized image at layer `l`;
    /// target slices are quantile-resampled to it. `tags[l]` enables spatial
    /// tags on layer `l`.
    pub fn new(
        target: &FeatureStack<T>,
        dirs: Vec<DirectionSet>,
        out_pixels: &[usize],
        tags: &[Option<LayerTags>],
        cache: TargetCache,
        seed: u64,
    ) -> Result<Self> {
        let l = target.len();
        if dirs.len() != l || out_pixels.len() != l || (!tags.is_empty() && tags.len() != l) {
            return invalid_arg("one direction set, output size and tag entry per layer required");
        }
        let mut layers = Vec::with_capacity(l);
        for (i, (tl, d)) in target.layers.iter().zip(dirs).enumerate() {
            if d.n_features != tl.channels {
                return invalid_arg(format!("layer {i}: {} features but directions over {}", tl.channels, d.n_features));
            }
            let tag = tags.get(i).cloned().flatten();
            let resample = match &tag {
                Some(t) => {
                    if t.output.len() != out_pixels[i] || t.target.len() != tl.n_pixels() {
                        return invalid_arg(format!("layer {i}: tag list sizes do not match pixel counts"));
                    }
                    t.resample_map()?
                }
                None => quantile_indices(tl.n_pixels(), out_pixels[i])?.into_iter().map(|v| v as u32).collect(),
            };
            let dirs_t = d.block::<T>(0, d.n_directions);
            layers.push(TargetLayer {
                dirs_t,
                dirs: d,
                target: tl.clone(),
                sorted: None,
                out_pixels: out_pixels[i],
                resample,
                tagged: tag.map(|tags| TaggedLayer { target_bound: tl.max_row_norm(), tags }),
            });
        }
        let bytes: usize =
            layers.iter().map(|t| t.dirs.n_directions * t.target.n_pixels() * std::mem::size_of::<T>()).sum();
        if let TargetCache::UpTo(limit) = cache {
            if bytes <= limit {
                for t in layers.iter_mut() {
                    t.sorted = Some(t.target_block(0, t.dirs.n_directions)?);
                }
            }
        }
        Ok(SlicedTarget { layers, seed })
    }

    pub fn n_directions(&self) -> Vec<usize> {
        self.layers.iter().map(|t| t.dirs.n_directions).collect()
    }

    pub fn directions(&self, layer: usize) -> &DirectionSet {
        &self.layers[layer].dirs
    }

    /// Per-layer losses; fills `grads` with `dL/dF` per layer when given.
    pub fn evaluate(&self, stack: &FeatureStack<T>, mut grads: Option<&mut Vec<Vec<T>>>) -> Result<Vec<f64>> {
        if stack.len() != self.layers.len() {
            return invalid_arg(format!("stack has {} layers, target {}", stack.len(), self.layers.len()));
        }
        if let Some(g) = grads.as_deref_mut() {
            g.resize(stack.len(), Vec::new());
        }
        let mut out = Vec::with_capacity(stack.len());
        for (l, (layer, t)) in stack.layers.iter().zip(&self.layers).enumerate() {
            let g = grads.as_deref_mut().map(|g| &mut g[l]);
            out.push(t.evaluate(layer, g)?);
        }
        Ok(out)
    }

    pub fn report(&self, stack: &FeatureStack<T>) -> Result<LossReport> {
        let start = Instant::now();
        let per_layer = self.evaluate(stack, None)?;
        Ok(LossReport::from_layers(per_layer, start, self.n_directions(), self.seed))
    }
}

fn output_pixels<T: Real>(stack: &FeatureStack<T>) -> Vec<usize> {
    stack.layers.iter().map(|l| l.n_pixels()).collect()
}

fn channels<T: Real>(stack: &FeatureStack<T>) -> Vec<usize> {
    stack.layers.iter().map(|l| l.channels).collect()
}

/// Sliced Wasserstein loss with freshly drawn directions.
pub fn sw_loss<T: Real>(
    stack: &FeatureStack<T>,
    target: &FeatureStack<T>,
    policy: DirectionPolicy,
    seed: u64,
) -> Result<LossReport> {
    let start = Instant::now();
    stack.check_compatible(target)?;
    let dirs = draw_directions(&channels(stack), policy, seed)?;
    let st = SlicedTarget::new(target, dirs, &output_pixels(stack), &[], TargetCache::Never, seed)?;
    let per_layer = st.evaluate(stack, None)?;
    Ok(LossReport::from_layers(per_layer, start, st.n_directions(), seed))
}

/// [`sw_loss`] together with `dL/dF` for every layer of `stack`.
pub fn sw_loss_grad<T: Real>(
    stack: &FeatureStack<T>,
    target: &FeatureStack<T>,
    policy: DirectionPolicy,
    seed: u64,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    let start = Instant::now();
    stack.check_compatible(target)?;
    let dirs = draw_directions(&channels(stack), policy, seed)?;
    let st = SlicedTarget::new(target, dirs, &output_pixels(stack), &[], TargetCache::Never, seed)?;
    let mut grads = Vec::new();
    let per_layer = st.evaluate(stack, Some(&mut grads))?;
    Ok((LossReport::from_layers(per_layer, start, st.n_directions(), seed), grads))
}

/// Reporting-only Sliced Wasserstein estimate on a fixed held-out direction
/// set per layer (typically [`MONITOR_DIRECTIONS`] each).
pub fn monitor_loss<T: Real>(
    stack: &FeatureStack<T>,
    target: &FeatureStack<T>,
    fixed_directions: &[DirectionSet],
    seed: u64,
) -> Result<LossReport> {
    let start = Instant::now();
    stack.check_compatible(target)?;
    let st = SlicedTarget::new(target, fixed_directions.to_vec(), &output_pixels(stack), &[], TargetCache::Never, seed)?;
    let per_layer = st.evaluate(stack, None)?;
    Ok(LossReport::from_layers(per_layer, start, st.n_directions(), seed))
}
