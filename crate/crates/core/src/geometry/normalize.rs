use serde::{Deserialize, Serialize};

use super::{Point3, PointCloud};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Subtract a fixed center, divide by a fixed scale.
    Static,
    /// Subtract the cloud mean, divide by the largest absolute coordinate.
    PerCloud,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    #[serde(default)]
    pub center: Point3,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl NormalizationSpec {
    pub fn none() -> Self {
        Self { mode: NormalizationMode::None, center: [0.0; 3], scale: 1.0 }
    }

    pub fn fixed(center: Point3, scale: f64) -> Self {
        Self { mode: NormalizationMode::Static, center, scale }
    }

    pub fn per_cloud() -> Self {
        Self { mode: NormalizationMode::PerCloud, center: [0.0; 3], scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(invalid(format!("normalization scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

pub fn normalize(cloud: &PointCloud, spec: &NormalizationSpec) -> Result<PointCloud> {
    spec.validate()?;
    let (center, scale) = match spec.mode {
        NormalizationMode::None => return Ok(cloud.clone()),
        NormalizationMode::Static => (spec.center, spec.scale),
        NormalizationMode::PerCloud => {
            if cloud.is_empty() {
                return Err(Error::DegenerateInput("cannot normalize an empty cloud".into()));
            }
            let mean = cloud.mean();
            let max_abs = cloud
                .positions
                .iter()
                .flat_map(|p| (0..3).map(move |a| (p[a] - mean[a]).abs()))
                .fold(0.0, f64::max);
            if max_abs <= 0.0 {
                return Err(Error::DegenerateInput("all points coincide".into()));
            }
            (mean, max_abs)
        }
    };
    let positions = cloud
        .positions
        .iter()
        .map(|p| {
            [
                (p[0] - center[0]) / scale,
                (p[1] - center[1]) / scale,
                (p[2] - center[2]) / scale,
            ]
        })
        .collect();
    Ok(PointCloud { positions, colors: cloud.colors.clone() })
}
