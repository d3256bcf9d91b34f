//! Uniform hash grid for exact radius and radius-bounded k-nearest queries.

use std::collections::HashMap;

use nalgebra::Vector3;

pub type VoxelKey = (i64, i64, i64);

pub fn voxel_key(p: &Vector3<f64>, cell: f64) -> VoxelKey {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
}

/// Points bucketed by a cubic cell; queries with radius `<= cell` only need the
/// 27 surrounding cells.
pub struct HashGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    buckets: HashMap<VoxelKey, Vec<usize>>,
}

impl<'a> HashGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut buckets: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Self { points, cell, buckets }
    }

    /// Indices within `radius` (inclusive) of `q`, sorted by `(distance, index)`.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        self.for_each_within(q, radius, |d, i| out.push((d, i)));
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    /// The `k` nearest indices within `radius`, nearest first, ties by index.
    pub fn knn_within(&self, q: &Vector3<f64>, radius: f64, k: usize) -> Vec<(f64, usize)> {
        let mut v = self.within(q, radius);
        v.truncate(k);
        v
    }

    /// Calls `f(distance, index)` for every point within `radius`, in no
    /// particular order.
    pub fn for_each_within(&self, q: &Vector3<f64>, radius: f64, mut f: impl FnMut(f64, usize)) {
        let reach = (radius / self.cell).ceil() as i64;
        let (kx, ky, kz) = voxel_key(q, self.cell);
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i] - q).norm_squared();
                        if d2 <= r2 {
                            f(d2.sqrt(), i);
                        }
                    }
                }
            }
        }
    }
}
