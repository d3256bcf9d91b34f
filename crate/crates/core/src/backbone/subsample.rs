use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::spatial::{voxel_key, VoxelKey};

/// Grid-subsampled points with the fine→coarse parent map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subsampled {
    pub points: Vec<Vector3<f64>>,
    /// `parent[i]` is the representative of input point `i`.
    pub parent: Vec<usize>,
}

impl Subsampled {
    /// Children of each representative in CSR form: `(order, offsets)` such that
    /// `order[offsets[c]..offsets[c+1]]` are the fine indices of coarse point `c`,
    /// ascending.
    pub fn children(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.points.len();
        let mut counts = vec![0usize; n + 1];
        for &p in &self.parent {
            counts[p + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; self.parent.len()];
        for (i, &p) in self.parent.iter().enumerate() {
            order[fill[p]] = i;
            fill[p] += 1;
        }
        (order, offsets)
    }
}

/// Buckets points by `floor(p / voxel)` and keeps one representative per
/// occupied voxel at the bucket barycenter. Representatives are ordered by the
/// first input point that landed in their voxel.
pub fn grid_subsample(points: &[Vector3<f64>], voxel: f64) -> Result<Subsampled> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel}")));
    }
    let mut slot: HashMap<VoxelKey, usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    let mut parent = Vec::with_capacity(points.len());
    for p in points {
        let next = sums.len();
        let s = *slot.entry(voxel_key(p, voxel)).or_insert(next);
        if s == next {
            sums.push((Vector3::zeros(), 0));
        }
        sums[s].0 += p;
        sums[s].1 += 1;
        parent.push(s);
    }
    let points = sums.into_iter().map(|(sum, n)| sum / n as f64).collect();
    Ok(Subsampled { points, parent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_in_one_voxel_merge_at_midpoint() {
        let pts = vec![Vector3::new(0.01, 0.02, 0.03), Vector3::new(0.05, 0.06, 0.07)];
        let s = grid_subsample(&pts, 0.1).unwrap();
        assert_eq!(s.points.len(), 1);
        assert!((s.points[0] - Vector3::new(0.03, 0.04, 0.05)).norm() < 1e-15);
        assert_eq!(s.parent, vec![0, 0]);
    }

    #[test]
    fn separated_points_are_kept() {
        let pts = vec![Vector3::new(0.05, 0.05, 0.05), Vector3::new(0.25, 0.05, 0.05), Vector3::new(0.05, 0.45, 0.05)];
        let s = grid_subsample(&pts, 0.1).unwrap();
        assert_eq!(s.points, pts);
        assert_eq!(s.parent, vec![0, 1, 2]);
    }

    #[test]
    fn empty_and_bad_voxel() {
        assert!(grid_subsample(&[], 0.1).unwrap().points.is_empty());
        assert!(grid_subsample(&[Vector3::zeros()], 0.0).is_err());
    }

    #[test]
    fn children_csr() {
        let s = Subsampled { points: vec![Vector3::zeros(); 2], parent: vec![1, 0, 1, 1] };
        let (order, offsets) = s.children();
        assert_eq!(offsets, vec![0, 1, 4]);
        assert_eq!(order, vec![1, 0, 2, 3]);
    }
}
