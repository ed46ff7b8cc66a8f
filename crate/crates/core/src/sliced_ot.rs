//! Sliced 1D optimal transport kernels.
//!
//! Features are projected on random unit directions; in 1D the optimal
//! transport plan for the squared cost pairs the sorted lists, so the
//! per-direction loss is the mean squared difference of sorted projections.
//!
//! Ties are broken by original index (a stable sort), which fixes the
//! subgradient returned at tied points.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid_arg, Error, Result};
use crate::features::FeatureLayer;
use crate::real::{gemm, MatRef, Real};

/// `n_features x n_directions` matrix whose columns are projection
/// directions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    pub n_features: usize,
    pub n_directions: usize,
    pub columns: Vec<f64>,
    pub seed: u64,
    /// Set by [`augment_directions`]: the last coordinate is the tag axis.
    pub augmented: bool,
}

impl DirectionSet {
    /// Builds a set from explicit columns (each of length `n_features`).
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = cols.first() else {
            return invalid_arg("at least one direction required");
        };
        let n = first.len();
        if n == 0 || cols.iter().any(|c| c.len() != n) {
            return invalid_arg("directions must share a non-zero dimension");
        }
        let d = cols.len();
        let mut columns = vec![0.0; n * d];
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                columns[i * d + j] = *v;
            }
        }
        Ok(DirectionSet { n_features: n, n_directions: d, columns, seed: 0, augmented: false })
    }

    #[inline]
    pub fn get(&self, feature: usize, direction: usize) -> f64 {
        self.columns[feature * self.n_directions + direction]
    }

    pub fn column(&self, direction: usize) -> Vec<f64> {
        (0..self.n_features).map(|i| self.get(i, direction)).collect()
    }

    /// Euclidean norm of a column over its first `n` coordinates.
    pub fn column_norm(&self, direction: usize, n: usize) -> f64 {
        (0..n).map(|i| self.get(i, direction).powi(2)).sum::<f64>().sqrt()
    }

    /// Sub-matrix of directions `[start, end)` converted to `T`, row-major
    /// `n_features x (end - start)`.
    pub fn block<T: Real>(&self, start: usize, end: usize) -> Vec<T> {
        let w = end - start;
        let mut out = Vec::with_capacity(self.n_features * w);
        for i in 0..self.n_features {
            let row = &self.columns[i * self.n_directions..(i + 1) * self.n_directions];
            out.extend(row[start..end].iter().map(|v| T::of(*v)));
        }
        out
    }
}

/// Draws `n_directions` i.i.d. directions uniform on the unit sphere of
/// `R^n_features` (normalized standard normal samples).
pub fn sample_directions(n_features: usize, n_directions: usize, seed: u64) -> Result<DirectionSet> {
    if n_features == 0 || n_directions == 0 {
        return invalid_arg("sample_directions needs n_features >= 1 and n_directions >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![0.0; n_features * n_directions];
    let mut v = vec![0.0f64; n_features];
    for d in 0..n_directions {
        loop {
            for x in v.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // a zero draw has probability zero but would not normalize
            if norm > 1e-12 {
                for (i, x) in v.iter().enumerate() {
                    columns[i * n_directions + d] = x / norm;
                }
                break;
            }
        }
    }
    Ok(DirectionSet { n_features, n_directions, columns, seed, augmented: false })
}

/// Projects every pixel feature on every direction: `M x D` row-major,
/// entry `(m, d) = <F_m, V_d>`.
pub fn project<T: Real>(features: &FeatureLayer<T>, dirs: &DirectionSet) -> Result<Vec<T>> {
    if features.channels != dirs.n_features {
        return invalid_arg(format!(
            "features have {} channels but directions have {} coordinates",
            features.channels, dirs.n_features
        ));
    }
    let m = features.n_pixels();
    let d = dirs.n_directions;
    let v = dirs.block::<T>(0, d);
    let mut out = vec![T::zero(); m * d];
    gemm(
        T::one(),
        MatRef::new(&features.data, m, features.channels),
        MatRef::new(&v, dirs.n_features, d),
        T::zero(),
        &mut out,
    );
    Ok(out)
}

/// Indices that stably sort `values` (ties keep their original order).
pub fn stable_order<T: Real>(values: &[T]) -> Vec<u32> {
    let mut out = Vec::with_capacity(values.len());
    stable_order_by_key(values.len(), |i| values[i].order_key(), T::KEY_BITS, &mut out);
    out
}

/// Stable argsort on monotone `u64` keys with at most `key_bits` significant
/// bits, written into `out`.
pub(crate) fn stable_order_by_key(len: usize, key: impl Fn(usize) -> u64, key_bits: u32, out: &mut Vec<u32>) {
    out.clear();
    // LSD radix sort is stable, so ties keep index order
    if key_bits <= 32 {
        let mut keyed: Vec<(u32, u32)> = (0..len).map(|i| (key(i) as u32, i as u32)).collect();
        radsort::sort_by_key(&mut keyed, |p| p.0);
        out.extend(keyed.into_iter().map(|(_, i)| i));
    } else {
        let mut keyed: Vec<(u64, u32)> = (0..len).map(|i| (key(i), i as u32)).collect();
        radsort::sort_by_key(&mut keyed, |p| p.0);
        out.extend(keyed.into_iter().map(|(_, i)| i));
    }
}

/// One direction's projected values together with their stable sort.
#[derive(Clone, Debug)]
pub struct ProjectionSlice<T> {
    pub values: Vec<T>,
    pub sorted_values: Vec<T>,
    /// `sort_permutation[i]` is the sorted position (rank) of `values[i]`.
    pub sort_permutation: Vec<usize>,
}

impl<T: Real> ProjectionSlice<T> {
    pub fn new(values: Vec<T>) -> Self {
        let order = stable_order(&values);
        let sorted_values = order.iter().map(|&i| values[i as usize]).collect();
        let mut sort_permutation = vec![0; values.len()];
        for (rank, &i) in order.iter().enumerate() {
            sort_permutation[i as usize] = rank;
        }
        ProjectionSlice { values, sorted_values, sort_permutation }
    }
}

fn check_same_size(a: usize, b: usize) -> Result<()> {
    if a != b {
        return invalid_arg(format!(
            "1D slices have {a} and {b} samples; resample the target first"
        ));
    }
    if a == 0 {
        return invalid_arg("1D slices are empty");
    }
    Ok(())
}

/// `(1/M) * || sort(S) - sort(S_target) ||^2`.
pub fn sw1d_loss<T: Real>(s: &[T], s_target: &[T]) -> Result<f64> {
    check_same_size(s.len(), s_target.len())?;
    let a = ProjectionSlice::new(s.to_vec());
    let b = ProjectionSlice::new(s_target.to_vec());
    let sum: f64 = a
        .sorted_values
        .iter()
        .zip(&b.sorted_values)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / s.len() as f64)
}

/// Gradient of [`sw1d_loss`] with respect to `s`, in the original order of
/// `s`: `(2/M) * (sort(S)[r(i)] - sort(S_target)[r(i)])`.
pub fn sw1d_grad<T: Real>(s: &[T], s_target: &[T]) -> Result<Vec<T>> {
    check_same_size(s.len(), s_target.len())?;
    let a = ProjectionSlice::new(s.to_vec());
    let mut target_sorted = s_target.to_vec();
    target_sorted.sort_unstable_by_key(|v| v.order_key());
    let scale = T::of(2.0 / s.len() as f64);
    Ok(a
        .sort_permutation
        .iter()
        .map(|&r| scale * (a.sorted_values[r] - target_sorted[r]))
        .collect())
}

/// Positions into a sorted list of length `len` that sample its empirical
/// quantile function at the midpoints `(i + 0.5) / new_size`.
///
/// Uses the left-continuous inverse `Q(u) = sorted[ceil(u * len) - 1]`. When
/// `new_size = n * len` every entry is repeated exactly `n` times.
pub fn quantile_indices(len: usize, new_size: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return invalid_arg("cannot resample an empty list");
    }
    if new_size == 0 {
        return invalid_arg("resampled size must be positive");
    }
    let (len, n) = (len as u128, new_size as u128);
    Ok((0..n)
        .map(|i| {
            // ceil((2i + 1) * len / (2n)) - 1, in exact integer arithmetic
            let num = (2 * i + 1) * len;
            let den = 2 * n;
            (num.div_ceil(den) - 1) as usize
        })
        .collect())
}

/// Resamples a sorted list to `new_size` entries through its empirical
/// quantile function (integer ratios repeat each entry).
pub fn quantile_resample<T: Copy>(sorted_target: &[T], new_size: usize) -> Result<Vec<T>> {
    Ok(quantile_indices(sorted_target.len(), new_size)?
        .into_iter()
        .map(|i| sorted_target[i])
        .collect())
}

/// Default multiple of the feature-norm bound used as tag spacing.
pub const DEFAULT_TAG_SAFETY: f64 = 4.0;
/// Floor on the feature-norm bound so all-zero features still get distinct
/// offsets.
pub const TAG_BOUND_FLOOR: f64 = 1e-3;

/// Spatial tags of one layer and the offsets they map to in the appended
/// feature coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTagging {
    pub tag_ids: Vec<u32>,
    pub offsets: BTreeMap<u32, f64>,
    pub spacing: f64,
    /// Bound on the pixel feature norms this spacing was built for.
    pub bound: f64,
}

impl LayerTagging {
    #[inline]
    pub fn offset(&self, tag: u32) -> f64 {
        self.offsets[&tag]
    }
}

/// Offsets `rank(tag) * spacing` over the distinct ids in ascending order,
/// with `spacing = safety * max(bound, 1e-3)`.
///
/// Any projection of a feature with norm `<= bound` on a unit direction lies
/// in `[-bound, bound]`, so `spacing > 2 * bound` makes sorted augmented
/// projections group by tag.
pub fn build_tagging(tag_ids: &[u32], feature_norm_bound: f64, safety: f64) -> Result<LayerTagging> {
    if !(feature_norm_bound >= 0.0) || !feature_norm_bound.is_finite() {
        return invalid_arg(format!("feature norm bound must be finite and >= 0, got {feature_norm_bound}"));
    }
    if !(safety > 2.0) {
        return invalid_arg(format!("tag safety factor must exceed 2, got {safety}"));
    }
    let bound = feature_norm_bound.max(TAG_BOUND_FLOOR);
    let spacing = safety * bound;
    let mut offsets = BTreeMap::new();
    for &t in tag_ids {
        offsets.insert(t, 0.0);
    }
    for (rank, v) in offsets.values_mut().enumerate() {
        *v = rank as f64 * spacing;
    }
    Ok(LayerTagging { tag_ids: tag_ids.to_vec(), offsets, spacing, bound })
}

/// Appends each pixel's tag offset as an extra feature channel.
pub fn augment_with_tags<T: Real>(features: &FeatureLayer<T>, tagging: &LayerTagging) -> Result<FeatureLayer<T>> {
    if tagging.tag_ids.len() != features.n_pixels() {
        return invalid_arg(format!(
            "{} tags for {} pixels",
            tagging.tag_ids.len(),
            features.n_pixels()
        ));
    }
    let norm = features.max_row_norm();
    if !(tagging.spacing > 2.0 * tagging.bound) || norm > tagging.bound {
        return Err(Error::InvalidState(format!(
            "tag spacing {} does not separate features of norm {} (recorded bound {})",
            tagging.spacing, norm, tagging.bound
        )));
    }
    let n = features.channels;
    let mut data = Vec::with_capacity(features.n_pixels() * (n + 1));
    for (m, &tag) in tagging.tag_ids.iter().enumerate() {
        data.extend_from_slice(features.row(m));
        data.push(T::of(tagging.offset(tag)));
    }
    FeatureLayer::new(features.height, features.width, n + 1, data)
}

/// Appends a unit coordinate (not renormalized) to every direction, so the
/// projection of a tagged feature is `<F, V> + offset`.
pub fn augment_directions(dirs: &DirectionSet) -> DirectionSet {
    let n = dirs.n_features;
    let d = dirs.n_directions;
    let mut columns = Vec::with_capacity((n + 1) * d);
    columns.extend_from_slice(&dirs.columns);
    columns.extend(std::iter::repeat_n(1.0, d));
    DirectionSet { n_features: n + 1, n_directions: d, columns, seed: dirs.seed, augmented: true }
}
