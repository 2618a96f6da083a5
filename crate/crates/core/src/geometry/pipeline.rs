//! Observation preprocessing: crop, append target points, voxel grid,
//! random downsample, normalize.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, voxel_downsample, NormalizationSpec, Point3, PointCloud};
use crate::error::{invalid, Error, Result};

/// Axis-aligned box, bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Marks a goal location with points sampled uniformly in a cube around it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendTarget {
    pub center: Point3,
    /// Cube side length.
    pub side: f64,
    #[serde(default = "default_append_count")]
    pub count: usize,
    /// Color for the appended points when the cloud carries colors.
    #[serde(default)]
    pub color: Point3,
}

fn default_append_count() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub crop: Option<Aabb>,
    #[serde(default)]
    pub append_target: Option<AppendTarget>,
    #[serde(default)]
    pub voxel_size: Option<f64>,
    #[serde(default)]
    pub max_points: Option<usize>,
    #[serde(default = "NormalizationSpec::none")]
    pub normalization: NormalizationSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crop: None,
            append_target: None,
            voxel_size: None,
            max_points: None,
            normalization: NormalizationSpec::none(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.crop {
            if (0..3).any(|a| !(b.min[a] <= b.max[a])) {
                return Err(invalid("crop box min exceeds max"));
            }
        }
        if let Some(t) = &self.append_target {
            if !(t.side > 0.0) {
                return Err(invalid("append cube side must be positive"));
            }
            if t.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(invalid("append color outside [0, 1]"));
            }
        }
        if let Some(v) = self.voxel_size {
            if !(v > 0.0) {
                return Err(invalid("voxel size must be positive"));
            }
        }
        if self.max_points == Some(0) {
            return Err(invalid("max_points must be at least 1"));
        }
        self.normalization.validate()
    }
}

/// Keeps at most `max` points, chosen without replacement and kept in their
/// original relative order.
pub fn random_downsample<R: Rng + ?Sized>(cloud: &PointCloud, max: usize, rng: &mut R) -> PointCloud {
    if cloud.len() <= max {
        return cloud.clone();
    }
    let mut keep = index::sample(rng, cloud.len(), max).into_vec();
    keep.sort_unstable();
    cloud.select(&keep)
}

pub fn preprocess<R: Rng + ?Sized>(cloud: &PointCloud, config: &PipelineConfig, rng: &mut R) -> Result<PointCloud> {
    config.validate()?;
    let mut out = match &config.crop {
        Some(b) => {
            let keep: Vec<usize> = (0..cloud.len()).filter(|&i| b.contains(cloud.positions[i])).collect();
            cloud.select(&keep)
        }
        None => cloud.clone(),
    };
    if out.is_empty() {
        return Err(Error::DegenerateInput("no points left after cropping".into()));
    }
    if let Some(t) = &config.append_target {
        let h = t.side / 2.0;
        for _ in 0..t.count {
            let p = [
                t.center[0] + rng.random_range(-h..=h),
                t.center[1] + rng.random_range(-h..=h),
                t.center[2] + rng.random_range(-h..=h),
            ];
            out.positions.push(p);
            if let Some(c) = &mut out.colors {
                c.push(t.color);
            }
        }
    }
    if let Some(v) = config.voxel_size {
        out = voxel_downsample(&out, v)?;
    }
    if let Some(max) = config.max_points {
        out = random_downsample(&out, max, rng);
    }
    normalize(&out, &config.normalization)
}
