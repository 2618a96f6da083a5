//! Brute-force oracles for the geometry kernels.

use std::collections::BTreeMap;

use pprl::geometry::{
    farthest_point_sample_from, knn_indices, morton_rank_with_bits, voxel_downsample, Point3, PointCloud,
};
use pprl::losses::{chamfer, PatchPair, PatchPoints};
use pprl::rng::{seeded, StdRng};
use rand::Rng;

use super::Outcome;

fn d2(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Recomputes every candidate's distance to the whole picked set each round.
pub fn fps_oracle(pts: &[Point3], n: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < n {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| d2(*p, pts[j])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        picked.push(best.unwrap());
    }
    picked
}

/// Full sort by (distance, index).
pub fn knn_oracle(pts: &[Point3], center: Point3, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| d2(pts[a], center).partial_cmp(&d2(pts[b], center)).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Bit-by-bit interleave of bounding-box quantized coordinates.
pub fn morton_oracle(pts: &[Point3], bits: u32) -> Vec<usize> {
    let cells = 2f64.powi(bits as i32);
    let top = (1u64 << bits) - 1;
    let lo: Vec<f64> = (0..3).map(|a| pts.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..3).map(|a| pts.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let code = |p: &Point3| -> u64 {
        let q: Vec<u64> = (0..3)
            .map(|a| {
                if hi[a] > lo[a] {
                    (((p[a] - lo[a]) / (hi[a] - lo[a]) * cells).floor() as u64).min(top)
                } else {
                    0
                }
            })
            .collect();
        let mut c = 0u64;
        for b in (0..bits).rev() {
            for qa in &q {
                c = (c << 1) | ((qa >> b) & 1);
            }
        }
        c
    };
    let codes: Vec<u64> = pts.iter().map(code).collect();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by_key(|&i| (codes[i], i));
    order
}

/// Groups by cell key, then emits cells sorted by first member index.
pub fn voxel_oracle(cloud: &PointCloud, size: f64) -> PointCloud {
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = [0, 1, 2].map(|a| (p[a] / size).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = cells.into_values().collect();
    groups.sort_by_key(|g| g[0]);
    let avg = |src: &[Point3], g: &[usize]| -> Point3 {
        let mut s = [0.0; 3];
        for &i in g {
            for a in 0..3 {
                s[a] += src[i][a];
            }
        }
        s.map(|v| v / g.len() as f64)
    };
    PointCloud {
        positions: groups.iter().map(|g| avg(&cloud.positions, g)).collect(),
        colors: cloud.colors.as_ref().map(|c| groups.iter().map(|g| avg(c, g)).collect()),
    }
}

/// Double loop over both directions.
pub fn chamfer_oracle(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |x: &[Point3], y: &[Point3]| -> f64 {
        x.iter().map(|p| y.iter().map(|q| d2(*p, *q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    one(a, b) + one(b, a)
}

fn random_points(rng: &mut StdRng, m: usize) -> Vec<Point3> {
    let scale = rng.random_range(0.1..10.0);
    (0..m)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0) * scale))
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn close_clouds(a: &PointCloud, b: &PointCloud) -> bool {
    let pts = |x: &[Point3], y: &[Point3]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (0..3).all(|i| rel(p[i], q[i]) <= 1e-12 || (p[i] - q[i]).abs() <= 1e-15))
    };
    pts(&a.positions, &b.positions)
        && match (&a.colors, &b.colors) {
            (Some(x), Some(y)) => pts(x, y),
            (None, None) => true,
            _ => false,
        }
}

/// Runs every kernel against its oracle on `instances` random inputs.
pub fn run(instances: usize, seed: u64) -> Outcome {
    let mut rng = seeded(seed);
    let mut failures = Vec::new();
    for case in 0..instances {
        let m = rng.random_range(1..=512);
        let pts = random_points(&mut rng, m);
        let cloud = PointCloud::new(pts.clone());

        let n = rng.random_range(1..=m.min(64));
        let start = rng.random_range(0..m);
        if farthest_point_sample_from(&cloud, n, start).unwrap() != fps_oracle(&pts, n, start) {
            failures.push(format!("fps case {case}"));
        }

        let k = rng.random_range(1..=m.min(48));
        let center = pts[rng.random_range(0..m)];
        if knn_indices(&cloud, center, k) != knn_oracle(&pts, center, k) {
            failures.push(format!("knn case {case}"));
        }

        let bits = rng.random_range(1..=10);
        if morton_rank_with_bits(&pts, bits) != morton_oracle(&pts, bits) {
            failures.push(format!("morton case {case}"));
        }

        let colored = if rng.random_bool(0.5) {
            let cols = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            PointCloud::with_colors(pts.clone(), cols).unwrap()
        } else {
            cloud.clone()
        };
        let size = rng.random_range(0.05..2.0);
        if !close_clouds(&voxel_downsample(&colored, size).unwrap(), &voxel_oracle(&colored, size)) {
            failures.push(format!("voxel case {case}"));
        }

        let m2 = rng.random_range(1..=512);
        let other = random_points(&mut rng, m2);
        let pair = PatchPair {
            predicted: PatchPoints { positions: pts.clone(), colors: None },
            ground_truth: PatchPoints { positions: other.clone(), colors: None },
        };
        if rel(chamfer(&pair).unwrap(), chamfer_oracle(&pts, &other)) > 1e-12 {
            failures.push(format!("chamfer case {case}"));
        }
    }
    Outcome::from_failures(format!("{instances} instances x 5 kernels"), failures)
}
