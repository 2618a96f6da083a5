use rand::Rng;

use super::{dist2, sub, PatchSet, PointCloud};
use crate::error::{invalid, Result};
use crate::rng;

/// Farthest point sampling with a seeded start index.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    let m = cloud.len();
    if m == 0 {
        return Err(invalid("farthest point sampling on an empty cloud"));
    }
    let start = rng::seeded(seed).random_range(0..m);
    farthest_point_sample_from(cloud, n, start)
}

/// Farthest point sampling starting from `start`.
///
/// Each subsequent pick maximizes the minimum distance to all previous picks;
/// ties go to the lowest index.
pub fn farthest_point_sample_from(cloud: &PointCloud, n: usize, start: usize) -> Result<Vec<usize>> {
    let m = cloud.len();
    if n == 0 || n > m {
        return Err(invalid(format!("cannot sample {n} centroids from {m} points")));
    }
    if start >= m {
        return Err(invalid(format!("start index {start} out of range for {m} points")));
    }
    let pts = &cloud.positions;
    let mut min_d = vec![f64::INFINITY; m];
    let mut picked = Vec::with_capacity(n);
    let mut current = start;
    for _ in 0..n {
        picked.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let anchor = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = &mut min_d[i];
            if *d == f64::NEG_INFINITY {
                continue;
            }
            let nd = dist2(*p, anchor);
            if nd < *d {
                *d = nd;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// Indices of the `k` points nearest to `center`, ordered by (distance, index).
pub fn knn_indices(cloud: &PointCloud, center: [f64; 3], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = cloud
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(*p, center), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(cand.len());
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Groups the `k` nearest neighbours of each centroid into a patch.
pub fn knn_group(cloud: &PointCloud, centroid_indices: &[usize], k: usize) -> Result<PatchSet> {
    let m = cloud.len();
    if k == 0 || k > m {
        return Err(invalid(format!("k = {k} for a cloud of {m} points")));
    }
    if let Some(&bad) = centroid_indices.iter().find(|&&c| c >= m) {
        return Err(invalid(format!("centroid index {bad} out of range for {m} points")));
    }
    let n = centroid_indices.len();
    let mut centroids = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n * k);
    let mut source_indices = Vec::with_capacity(n * k);
    for &c in centroid_indices {
        let center = cloud.positions[c];
        centroids.push(center);
        for i in knn_indices(cloud, center, k) {
            positions.push(sub(cloud.positions[i], center));
            source_indices.push(i);
        }
    }
    let colors = cloud
        .colors
        .as_ref()
        .map(|cols| source_indices.iter().map(|&i| cols[i]).collect());
    Ok(PatchSet { centroids, positions, colors, source_indices, k })
}
