//! Z-order (Morton) ranking of centroids.

use super::Point3;

/// Quantization bits per axis.
pub const MORTON_BITS: u32 = 10;

/// Spreads the low `bits` bits of `v` so consecutive bits land 3 apart.
#[inline]
fn spread3(v: u32, bits: u32) -> u64 {
    let mut x = (v as u64) & ((1u64 << bits) - 1);
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

/// Interleaves quantized coordinates with x as the most significant bit of
/// each triple.
pub fn morton_code(q: [u32; 3], bits: u32) -> u64 {
    debug_assert!(bits <= 21);
    (spread3(q[0], bits) << 2) | (spread3(q[1], bits) << 1) | spread3(q[2], bits)
}

/// Quantizes points onto a `2^bits` grid spanning their bounding box.
pub fn quantize(points: &[Point3], bits: u32) -> Vec<[u32; 3]> {
    let cells = (1u64 << bits) as f64;
    let max_q = (1u32 << bits) - 1;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    points
        .iter()
        .map(|p| {
            let mut q = [0u32; 3];
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                if extent > 0.0 {
                    let t = ((p[a] - lo[a]) / extent * cells).floor();
                    q[a] = (t.max(0.0) as u32).min(max_q);
                }
            }
            q
        })
        .collect()
}

/// Permutation sorting `centroids` by ascending Morton code (stable).
pub fn morton_rank(centroids: &[Point3]) -> Vec<usize> {
    morton_rank_with_bits(centroids, MORTON_BITS)
}

pub fn morton_rank_with_bits(centroids: &[Point3], bits: u32) -> Vec<usize> {
    let codes: Vec<u64> = quantize(centroids, bits)
        .into_iter()
        .map(|q| morton_code(q, bits))
        .collect();
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by_key(|&i| codes[i]);
    order
}
