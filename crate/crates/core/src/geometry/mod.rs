//! Non-differentiable point-cloud kernels.
//!
//! Everything here is a pure function of its inputs (and an explicit seed or
//! RNG), so it is safe to call from several threads at once.

mod io;
mod morton;
mod normalize;
mod pipeline;
mod sampling;
mod voxel;

pub use io::{parse_cloud, read_cloud, write_cloud, format_cloud};
pub use morton::{morton_code, morton_rank, morton_rank_with_bits, quantize, MORTON_BITS};
pub use normalize::{normalize, NormalizationMode, NormalizationSpec};
pub use pipeline::{preprocess, random_downsample, Aabb, AppendTarget, PipelineConfig};
pub use sampling::{farthest_point_sample, farthest_point_sample_from, knn_group, knn_indices};
pub use voxel::voxel_downsample;

use crate::error::{invalid, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// A variable-length set of 3D points with optional per-point RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>) -> Self {
        Self { positions, colors: None }
    }

    pub fn with_colors(positions: Vec<Point3>, colors: Vec<Point3>) -> Result<Self> {
        let cloud = Self { positions, colors: Some(colors) };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_colors(&self) -> bool {
        self.colors.is_some()
    }

    /// Per-point feature width: 3 for xyz, 6 for xyz + rgb.
    pub fn feature_dim(&self) -> usize {
        if self.has_colors() {
            6
        } else {
            3
        }
    }

    /// Checks color alignment and channel range.
    pub fn validate(&self) -> Result<()> {
        if let Some(colors) = &self.colors {
            if colors.len() != self.positions.len() {
                return Err(invalid(format!(
                    "{} colors for {} positions",
                    colors.len(),
                    self.positions.len()
                )));
            }
            if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(invalid("color channel outside [0, 1]"));
            }
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        Ok(())
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn mean(&self) -> Point3 {
        let mut acc = [0.0; 3];
        for p in &self.positions {
            for a in 0..3 {
                acc[a] += p[a];
            }
        }
        let n = self.len().max(1) as f64;
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }
}

/// Patches of `k` points grouped around each of `n` centroids.
///
/// Positions are stored relative to their centroid; colors are copied as-is.
/// All per-point vectors are laid out patch-major (`patch * k + j`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centroids: Vec<Point3>,
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<Point3>>,
    pub source_indices: Vec<usize>,
    pub k: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centroids.len()
    }

    pub fn feature_dim(&self) -> usize {
        if self.colors.is_some() {
            6
        } else {
            3
        }
    }

    /// Reorders patches by `order` (a permutation of patch indices).
    pub fn permuted(&self, order: &[usize]) -> PatchSet {
        let k = self.k;
        let gather = |v: &Vec<Point3>| -> Vec<Point3> {
            order
                .iter()
                .flat_map(|&p| v[p * k..(p + 1) * k].iter().copied())
                .collect()
        };
        PatchSet {
            centroids: order.iter().map(|&p| self.centroids[p]).collect(),
            positions: gather(&self.positions),
            colors: self.colors.as_ref().map(gather),
            source_indices: order
                .iter()
                .flat_map(|&p| self.source_indices[p * k..(p + 1) * k].iter().copied())
                .collect(),
            k,
        }
    }

    /// Row-major per-point features (`xyz` or `xyz rgb`), patch-major order.
    pub fn features(&self) -> Vec<f64> {
        let f = self.feature_dim();
        let mut out = Vec::with_capacity(self.positions.len() * f);
        for (i, p) in self.positions.iter().enumerate() {
            out.extend_from_slice(p);
            if let Some(c) = &self.colors {
                out.extend_from_slice(&c[i]);
            }
        }
        out
    }
}

/// FPS centroids, kNN patches, then Morton ordering of the patches.
///
/// Uses `min(n, m)` centroids so small clouds yield fewer (never duplicated)
/// patches; the caller pads at the token level.
pub fn patchify(cloud: &PointCloud, n: usize, k: usize, seed: u64) -> Result<PatchSet> {
    if cloud.is_empty() {
        return Err(crate::Error::DegenerateInput("empty point cloud".into()));
    }
    if k == 0 || k > cloud.len() {
        return Err(invalid(format!("k = {k} for a cloud of {} points", cloud.len())));
    }
    let n_eff = n.min(cloud.len());
    let centers = farthest_point_sample(cloud, n_eff, seed)?;
    let patches = knn_group(cloud, &centers, k)?;
    let order = morton_rank(&patches.centroids);
    Ok(patches.permuted(&order))
}
