use std::collections::HashMap;

use super::{Point3, PointCloud};
use crate::error::{invalid, Result};

/// One point per occupied voxel: the mean of its members (colors included),
/// emitted in order of each voxel's first occurrence.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(invalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Point3, Point3, usize)> = Vec::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = [
            (p[0] / voxel_size).floor() as i64,
            (p[1] / voxel_size).floor() as i64,
            (p[2] / voxel_size).floor() as i64,
        ];
        let slot = *slots.entry(key).or_insert_with(|| {
            sums.push(([0.0; 3], [0.0; 3], 0));
            sums.len() - 1
        });
        let entry = &mut sums[slot];
        for a in 0..3 {
            entry.0[a] += p[a];
        }
        if let Some(c) = &cloud.colors {
            for a in 0..3 {
                entry.1[a] += c[i][a];
            }
        }
        entry.2 += 1;
    }
    let mean = |s: Point3, n: usize| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64];
    let positions = sums.iter().map(|(p, _, n)| mean(*p, *n)).collect();
    let colors = cloud
        .colors
        .as_ref()
        .map(|_| sums.iter().map(|(_, c, n)| mean(*c, *n)).collect());
    Ok(PointCloud { positions, colors })
}
