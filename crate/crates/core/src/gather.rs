//! Cross-modal neighbor gathering between pixel grids and point sets.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::rgbd::{CameraIntrinsics, DepthImage};
use crate::spatial::HashGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Points gather pixels.
    V2G,
    /// Pixels gather points.
    G2V,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatherSpec {
    pub direction: Direction,
    pub k: usize,
    pub radius: f64,
}

impl GatherSpec {
    pub fn new(direction: Direction, k: usize, radius: f64) -> Result<Self> {
        if k == 0 || !(radius > 0.0) {
            return Err(Error::InvalidInput(format!("gather needs k >= 1 and radius > 0, got k={k}, radius={radius}")));
        }
        Ok(Self { direction, k, radius })
    }

    fn expect(&self, direction: Direction) -> Result<()> {
        if self.direction != direction {
            return Err(Error::Usage(format!("gather spec is {:?}, called as {:?}", self.direction, direction)));
        }
        Ok(())
    }
}

/// `k` slots per query into the other modality's feature rows, nearest first.
/// `None` is a pad slot that reads as the zero feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherResult {
    pub k: usize,
    pub slots: Arc<Vec<Option<usize>>>,
    /// 3D distance of each filled slot to its query, `INFINITY` for pads.
    pub distances: Vec<f64>,
}

impl GatherResult {
    fn from_lists(k: usize, lists: Vec<Vec<(f64, usize)>>) -> Self {
        let mut slots = Vec::with_capacity(lists.len() * k);
        let mut distances = Vec::with_capacity(lists.len() * k);
        for list in lists {
            debug_assert!(list.len() <= k);
            for j in 0..k {
                match list.get(j) {
                    Some(&(d, i)) => {
                        slots.push(Some(i));
                        distances.push(d);
                    }
                    None => {
                        slots.push(None);
                        distances.push(f64::INFINITY);
                    }
                }
            }
        }
        Self { k, slots: Arc::new(slots), distances }
    }

    pub fn num_queries(&self) -> usize {
        self.slots.len() / self.k
    }

    pub fn query_slots(&self, q: usize) -> &[Option<usize>] {
        &self.slots[q * self.k..(q + 1) * self.k]
    }

    pub fn valid_count(&self, q: usize) -> usize {
        self.query_slots(q).iter().filter(|s| s.is_some()).count()
    }

    pub fn pad_mask(&self, q: usize) -> Vec<bool> {
        self.query_slots(q).iter().map(|s| s.is_none()).collect()
    }

    /// 1 for queries with at least one filled slot, 0 otherwise.
    pub fn query_mask(&self) -> Arc<Vec<f64>> {
        Arc::new((0..self.num_queries()).map(|q| if self.valid_count(q) > 0 { 1.0 } else { 0.0 }).collect())
    }

    /// Segment offsets of the `k`-slot groups.
    pub fn offsets(&self) -> Arc<Vec<usize>> {
        Arc::new((0..=self.num_queries()).map(|q| q * self.k).collect())
    }
}

/// A downsampled pixel grid with the 3D point of each cell, taken from the
/// depth at its stride-center source pixel.
#[derive(Debug, Clone)]
pub struct PixelGrid {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub intr: CameraIntrinsics,
    /// `None` where the source pixel has zero depth.
    pub points: Vec<Option<Vector3<f64>>>,
}

impl PixelGrid {
    pub fn new(depth: &DepthImage, intr: &CameraIntrinsics, stride: usize) -> Result<Self> {
        if depth.width() != intr.width || depth.height() != intr.height {
            return Err(Error::InvalidInput(format!(
                "depth is {}x{}, intrinsics say {}x{}",
                depth.width(),
                depth.height(),
                intr.width,
                intr.height
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("stride must be positive".into()));
        }
        let (h, w) = (intr.height.div_ceil(stride), intr.width.div_ceil(stride));
        let mut points = Vec::with_capacity(h * w);
        for gy in 0..h {
            for gx in 0..w {
                let (u, v) = Self::center(stride, gx, gy, intr);
                let z = depth.get(u, v);
                points.push((z > 0.0).then(|| intr.unproject(u as f64, v as f64, z)));
            }
        }
        Ok(Self { h, w, stride, intr: *intr, points })
    }

    fn center(stride: usize, gx: usize, gy: usize, intr: &CameraIntrinsics) -> (usize, usize) {
        ((gx * stride + stride / 2).min(intr.width - 1), (gy * stride + stride / 2).min(intr.height - 1))
    }

    /// Full-resolution source pixel `(u, v)` of grid cell `(gx, gy)`.
    pub fn source_pixel(&self, gx: usize, gy: usize) -> (usize, usize) {
        Self::center(self.stride, gx, gy, &self.intr)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Loose grid cell range `[lo, hi]` around source pixel coordinates
    /// `[a, b]`; callers re-check each cell's source pixel.
    fn cell_range(&self, a: f64, b: f64, n: usize) -> Option<(usize, usize)> {
        if !(a <= b) || n == 0 {
            return None;
        }
        let s = self.stride as f64;
        let c0 = (self.stride / 2) as f64;
        let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64) as usize;
        Some((clamp(((a - c0) / s).floor()), clamp(((b - c0) / s).ceil() + 1.0)))
    }
}

fn sort_truncate(mut list: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    list.truncate(k);
    list
}

/// For every query point: candidate grid cells inside the bounding box of the
/// projected radius ball, filtered to valid depth and 3D distance `<= radius`,
/// the `k` nearest kept and the rest padded.
pub fn gather_v2g(query_points: &[Vector3<f64>], grid: &PixelGrid, spec: &GatherSpec) -> Result<GatherResult> {
    spec.expect(Direction::V2G)?;
    let intr = &grid.intr;
    let r = spec.radius;
    let lists = query_points
        .iter()
        .map(|q| {
            if !(q.z > 0.0) {
                return Vec::new();
            }
            let full = (0.0, (intr.width - 1) as f64, 0.0, (intr.height - 1) as f64);
            let (u0, u1, v0, v1) = if q.z - r <= 0.0 {
                full
            } else {
                // u is monotone in x for fixed z and in 1/z for fixed x, so
                // the extremes over the ball's bounding box are at its corners
                let (mut u0, mut u1, mut v0, mut v1) =
                    (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                for z in [q.z - r, q.z + r] {
                    for x in [q.x - r, q.x + r] {
                        let u = intr.fx * x / z + intr.cx;
                        u0 = u0.min(u);
                        u1 = u1.max(u);
                    }
                    for y in [q.y - r, q.y + r] {
                        let v = intr.fy * y / z + intr.cy;
                        v0 = v0.min(v);
                        v1 = v1.max(v);
                    }
                }
                (u0, u1, v0, v1)
            };
            let (Some((gx0, gx1)), Some((gy0, gy1))) =
                (grid.cell_range(u0, u1, grid.w), grid.cell_range(v0, v1, grid.h))
            else {
                return Vec::new();
            };
            let mut cands = Vec::new();
            for gy in gy0..=gy1 {
                for gx in gx0..=gx1 {
                    let (su, sv) = grid.source_pixel(gx, gy);
                    if (su as f64) < u0 || (su as f64) > u1 || (sv as f64) < v0 || (sv as f64) > v1 {
                        continue;
                    }
                    let idx = gy * grid.w + gx;
                    if let Some(p) = grid.points[idx] {
                        let d = (p - q).norm();
                        if d <= r {
                            cands.push((d, idx));
                        }
                    }
                }
            }
            sort_truncate(cands, spec.k)
        })
        .collect();
    Ok(GatherResult::from_lists(spec.k, lists))
}

/// For every query grid cell: inverse-project it, then keep the `k` nearest
/// level points within the radius. Cells with zero depth get all pads.
pub fn gather_g2v(
    query_cells: &[usize],
    grid: &PixelGrid,
    level_points: &[Vector3<f64>],
    spec: &GatherSpec,
) -> Result<GatherResult> {
    spec.expect(Direction::G2V)?;
    let hash = HashGrid::new(level_points, spec.radius);
    let mut lists = Vec::with_capacity(query_cells.len());
    for &c in query_cells {
        let p = grid
            .points
            .get(c)
            .ok_or_else(|| Error::InvalidInput(format!("query cell {c} outside a grid of {}", grid.len())))?;
        lists.push(match p {
            Some(p) => hash.knn_within(p, spec.radius, spec.k),
            None => Vec::new(),
        });
    }
    Ok(GatherResult::from_lists(spec.k, lists))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(n: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, (n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0, n, n).unwrap()
    }

    fn flat(n: usize, z: f64) -> DepthImage {
        DepthImage::new(n, n, vec![z; n * n]).unwrap()
    }

    #[test]
    fn v2g_counts_in_ball_pixels() {
        // a flat wall at z = 1 seen with f = 20: neighboring pixels are 0.05 m
        // apart. A ball of radius 0.06 centered on a pixel center covers that
        // pixel and its four edge neighbors, diagonals are 0.0707 away.
        let i = intr(21);
        let grid = PixelGrid::new(&flat(21, 1.0), &i, 1).unwrap();
        let q = i.unproject(10.0, 10.0, 1.0);
        let spec = GatherSpec::new(Direction::V2G, 16, 0.06).unwrap();
        let g = gather_v2g(&[q], &grid, &spec).unwrap();
        assert_eq!(g.valid_count(0), 5);
        assert_eq!(g.query_slots(0)[0], Some(10 * 21 + 10));
        assert_eq!(g.pad_mask(0).iter().filter(|&&p| p).count(), 11);
        let d = &g.distances[..5];
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn v2g_behind_camera_is_all_pads() {
        let i = intr(9);
        let grid = PixelGrid::new(&flat(9, 1.0), &i, 1).unwrap();
        let spec = GatherSpec::new(Direction::V2G, 4, 0.5).unwrap();
        let g = gather_v2g(&[Vector3::new(0.0, 0.0, -1.0)], &grid, &spec).unwrap();
        assert_eq!(g.valid_count(0), 0);
        assert_eq!(g.query_mask()[0], 0.0);
    }

    #[test]
    fn v2g_ball_boundary() {
        let i = intr(9);
        let grid = PixelGrid::new(&flat(9, 1.0), &i, 1).unwrap();
        let p = grid.points[4 * 9 + 4].unwrap();
        let r = 0.1;
        let q = p + Vector3::new(0.0, 0.0, -1.01 * r);
        let spec = GatherSpec::new(Direction::V2G, 4, r).unwrap();
        assert_eq!(gather_v2g(&[q], &grid, &spec).unwrap().valid_count(0), 0);
        let q = p + Vector3::new(0.0, 0.0, -0.99 * r);
        assert_eq!(gather_v2g(&[q], &grid, &spec).unwrap().valid_count(0), 1);
    }

    #[test]
    fn v2g_skips_zero_depth_and_matches_brute_force() {
        let n = 24;
        let i = intr(n);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..n * n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.8..1.4) }).collect();
        let depth = DepthImage::new(n, n, data).unwrap();
        for stride in [1, 2, 4] {
            let grid = PixelGrid::new(&depth, &i, stride).unwrap();
            let spec = GatherSpec::new(Direction::V2G, 8, 0.15).unwrap();
            let queries: Vec<_> = (0..50)
                .map(|_| Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(0.7..1.5)))
                .collect();
            let g = gather_v2g(&queries, &grid, &spec).unwrap();
            for (qi, q) in queries.iter().enumerate() {
                let mut all: Vec<(f64, usize)> = grid
                    .points
                    .iter()
                    .enumerate()
                    .filter_map(|(idx, p)| p.map(|p| ((p - q).norm(), idx)))
                    .filter(|(d, _)| *d <= spec.radius)
                    .collect();
                all = sort_truncate(all, spec.k);
                let want: Vec<_> = all.iter().map(|&(_, i)| Some(i)).chain(std::iter::repeat(None)).take(8).collect();
                assert_eq!(g.query_slots(qi), want.as_slice(), "stride {stride} query {qi}");
            }
        }
    }

    #[test]
    fn g2v_coincident_point_and_empty() {
        let i = intr(9);
        let grid = PixelGrid::new(&flat(9, 1.0), &i, 1).unwrap();
        let p = grid.points[40].unwrap();
        let spec = GatherSpec::new(Direction::G2V, 1, 0.1).unwrap();
        let g = gather_g2v(&[40], &grid, &[Vector3::new(5.0, 5.0, 5.0), p], &spec).unwrap();
        assert_eq!(g.query_slots(0), &[Some(1)]);
        let g = gather_g2v(&[40], &grid, &[Vector3::new(5.0, 5.0, 5.0)], &spec).unwrap();
        assert_eq!(g.valid_count(0), 0);
    }

    #[test]
    fn g2v_zero_depth_is_all_pads() {
        let i = intr(5);
        let mut d = flat(5, 1.0);
        d.set(2, 2, 0.0);
        let grid = PixelGrid::new(&d, &i, 1).unwrap();
        let spec = GatherSpec::new(Direction::G2V, 2, 10.0).unwrap();
        let g = gather_g2v(&[12], &grid, &[Vector3::new(0.0, 0.0, 1.0)], &spec).unwrap();
        assert_eq!(g.valid_count(0), 0);
    }

    #[test]
    fn g2v_matches_exhaustive_sort() {
        let i = intr(9);
        let grid = PixelGrid::new(&flat(9, 1.0), &i, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let pts: Vec<_> = (0..50)
            .map(|_| Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.8..1.2)))
            .collect();
        let spec = GatherSpec::new(Direction::G2V, 4, 1.0).unwrap();
        let cells: Vec<usize> = (0..81).collect();
        let g = gather_g2v(&cells, &grid, &pts, &spec).unwrap();
        for &c in &cells {
            let q = grid.points[c].unwrap();
            let mut order: Vec<usize> = (0..50).collect();
            order.sort_by(|&a, &b| (pts[a] - q).norm().total_cmp(&(pts[b] - q).norm()).then(a.cmp(&b)));
            let want: Vec<_> = order[..4].iter().map(|&i| Some(i)).collect();
            assert_eq!(g.query_slots(c), want.as_slice());
        }
    }

    #[test]
    fn wrong_direction_is_rejected() {
        let i = intr(5);
        let grid = PixelGrid::new(&flat(5, 1.0), &i, 1).unwrap();
        let spec = GatherSpec::new(Direction::G2V, 2, 1.0).unwrap();
        assert!(gather_v2g(&[Vector3::new(0.0, 0.0, 1.0)], &grid, &spec).is_err());
        assert!(GatherSpec::new(Direction::G2V, 0, 1.0).is_err());
    }
}
