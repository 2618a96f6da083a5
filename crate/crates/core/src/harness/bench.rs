use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{farthest_point_sample, knn_indices, morton_rank, voxel_downsample, PointCloud};
use crate::losses::{chamfer, PatchPair, PatchPoints};
use crate::rng::seeded;

pub const BENCH_REPEATS: usize = 7;
/// Centroids for `fps` and neighbours for `knn`.
const FIXED_N: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Fps,
    Knn,
    Morton,
    Chamfer,
    Voxel,
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fps" => Kernel::Fps,
            "knn" => Kernel::Knn,
            "morton" => Kernel::Morton,
            "chamfer" => Kernel::Chamfer,
            "voxel" => Kernel::Voxel,
            other => return Err(invalid(format!("unknown kernel '{other}' (fps | knn | morton | chamfer | voxel)"))),
        })
    }
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Fps => "fps",
            Kernel::Knn => "knn",
            Kernel::Morton => "morton",
            Kernel::Chamfer => "chamfer",
            Kernel::Voxel => "voxel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub size: usize,
    pub median_ms: f64,
}

fn run_once(kernel: Kernel, cloud: &PointCloud) -> Result<()> {
    let m = cloud.len();
    match kernel {
        Kernel::Fps => {
            farthest_point_sample(cloud, FIXED_N.min(m), 0)?;
        }
        Kernel::Knn => {
            knn_indices(cloud, cloud.positions[0], FIXED_N.min(m));
        }
        Kernel::Morton => {
            morton_rank(&cloud.positions);
        }
        Kernel::Chamfer => {
            let half = m.div_ceil(2);
            let pair = PatchPair {
                predicted: PatchPoints { positions: cloud.positions[..half].to_vec(), colors: None },
                ground_truth: PatchPoints { positions: cloud.positions[m - half..].to_vec(), colors: None },
            };
            chamfer(&pair)?;
        }
        Kernel::Voxel => {
            voxel_downsample(cloud, 0.05)?;
        }
    }
    Ok(())
}

/// Median-of-7 wall time per size on uniform random clouds.
pub fn bench(kernel: Kernel, sizes: &[usize]) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() {
        return Err(invalid("no sizes given"));
    }
    if sizes.contains(&0) {
        return Err(invalid("sizes must be positive"));
    }
    let mut rng = seeded(0);
    sizes
        .iter()
        .map(|&size| {
            let cloud = PointCloud::new((0..size).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
            let mut times: Vec<f64> = (0..BENCH_REPEATS)
                .map(|_| {
                    let t = Instant::now();
                    run_once(kernel, &cloud)?;
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<_>>()?;
            times.sort_by(f64::total_cmp);
            Ok(BenchRow { kernel, size, median_ms: times[BENCH_REPEATS / 2] })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("kernel,size,median_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6}\n", r.kernel.name(), r.size, r.median_ms));
    }
    s
}
