//! Lowe-ratio correspondences with top-k weight selection per side.

use std::collections::HashSet;
use std::io::Write;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

/// Which cloud's keypoint was the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub src_idx: usize,
    pub tgt_idx: usize,
    pub src: Vector3<f64>,
    pub tgt: Vector3<f64>,
    pub w: f64,
    pub r: f64,
    pub side: Side,
    /// Second-nearest neighbor of the query in the other cloud.
    pub second: usize,
}

/// Source-side block followed by the target-side block, each sorted by
/// descending weight then index.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub k: usize,
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|c| c.w).collect()
    }

    /// `src_idx,tgt_idx,w,r` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["src_idx", "tgt_idx", "w", "r"])?;
        for c in &self.entries {
            wtr.write_record([c.src_idx.to_string(), c.tgt_idx.to_string(), c.w.to_string(), c.r.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("correspondence csv", e))?;
        Ok(())
    }
}

/// Result of one ratio test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub r: f64,
    pub nearest: usize,
    pub second: usize,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ratio of the nearest to the second-nearest feature distance, with
/// `r = 1` when the second distance is zero. Ties go to the lower index.
pub fn lowe_ratio(query: &[f64], targets: &Tensor) -> Result<Ratio> {
    if targets.rows < 2 {
        return Err(Error::InvalidInput(format!("ratio test needs 2 targets, got {}", targets.rows)));
    }
    if targets.cols != query.len() {
        return Err(Error::InvalidInput(format!("feature width {} vs {}", query.len(), targets.cols)));
    }
    let (mut d1, mut i1, mut d2, mut i2) = (f64::INFINITY, 0, f64::INFINITY, 1);
    for t in 0..targets.rows {
        let d = sq_dist(query, targets.row(t));
        if d < d1 {
            (d2, i2) = (d1, i1);
            (d1, i1) = (d, t);
        } else if d < d2 {
            (d2, i2) = (d, t);
        }
    }
    let r = if d2 == 0.0 { 1.0 } else { (d1 / d2).sqrt() };
    Ok(Ratio { r, nearest: i1, second: i2 })
}

fn ratios(queries: &Tensor, targets: &Tensor) -> Result<Vec<Ratio>> {
    (0..queries.rows).map(|q| lowe_ratio(queries.row(q), targets)).collect()
}

/// Ranks by descending weight, ties by query index.
fn ranked(r: &[Ratio]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[a].r.total_cmp(&r[b].r).then(a.cmp(&b)));
    order
}

/// Top-`k` source queries against the target and top-`k` target queries
/// against the source. A target-side pair identical to a selected source-side
/// pair is skipped in favor of the next candidate, so both blocks hold `k`
/// entries.
pub fn build_correspondences(
    src_feat: &Tensor,
    src_pts: &[Vector3<f64>],
    tgt_feat: &Tensor,
    tgt_pts: &[Vector3<f64>],
    k: usize,
) -> Result<CorrespondenceSet> {
    if src_feat.rows != src_pts.len() || tgt_feat.rows != tgt_pts.len() {
        return Err(Error::InvalidInput("one feature row per keypoint required".into()));
    }
    let need = k.max(2);
    if k == 0 || src_pts.len() < need || tgt_pts.len() < need {
        return Err(Error::InvalidInput(format!(
            "need at least {need} keypoints per side for k={k}, got {} and {}",
            src_pts.len(),
            tgt_pts.len()
        )));
    }
    let fwd = ratios(src_feat, tgt_feat)?;
    let bwd = ratios(tgt_feat, src_feat)?;
    let mut entries = Vec::with_capacity(2 * k);
    let mut chosen = HashSet::new();
    for i in ranked(&fwd).into_iter().take(k) {
        let m = fwd[i];
        chosen.insert((i, m.nearest));
        entries.push(Correspondence {
            src_idx: i,
            tgt_idx: m.nearest,
            src: src_pts[i],
            tgt: tgt_pts[m.nearest],
            w: 1.0 - m.r,
            r: m.r,
            side: Side::Source,
            second: m.second,
        });
    }
    let order = ranked(&bwd);
    let fresh: Vec<usize> = order.iter().copied().filter(|&j| !chosen.contains(&(bwd[j].nearest, j))).collect();
    let picks: Vec<usize> =
        if fresh.len() >= k { fresh.into_iter().take(k).collect() } else { order.into_iter().take(k).collect() };
    for j in picks {
        let m = bwd[j];
        entries.push(Correspondence {
            src_idx: m.nearest,
            tgt_idx: j,
            src: src_pts[m.nearest],
            tgt: tgt_pts[j],
            w: 1.0 - m.r,
            r: m.r,
            side: Side::Target,
            second: m.second,
        });
    }
    Ok(CorrespondenceSet { k, entries })
}

/// Recomputes the selected weights `1 - d1/d2` on the tape from the feature
/// nodes, so gradients reach the features. Entries whose second distance is
/// zero keep weight 0. Returns a `2k × 1` node.
pub fn weights_on_tape(tape: &mut Tape, src_feat: Var, tgt_feat: Var, set: &CorrespondenceSet) -> Var {
    let n = set.entries.len();
    let mut q_src = Vec::with_capacity(n);
    let mut q_tgt = Vec::with_capacity(n);
    let mut first_src = Vec::with_capacity(n);
    let mut first_tgt = Vec::with_capacity(n);
    let mut second_src = Vec::with_capacity(n);
    let mut second_tgt = Vec::with_capacity(n);
    for c in &set.entries {
        let (q, f, s) = match c.side {
            Side::Source => ((Some(c.src_idx), None), (None, Some(c.tgt_idx)), (None, Some(c.second))),
            Side::Target => ((None, Some(c.tgt_idx)), (Some(c.src_idx), None), (Some(c.second), None)),
        };
        q_src.push(q.0);
        q_tgt.push(q.1);
        first_src.push(f.0);
        first_tgt.push(f.1);
        second_src.push(s.0);
        second_tgt.push(s.1);
    }
    // each row reads from exactly one of the two feature sets
    let mut pick = |a: Vec<Option<usize>>, b: Vec<Option<usize>>| {
        let x = tape.gather_rows(src_feat, Arc::new(a));
        let y = tape.gather_rows(tgt_feat, Arc::new(b));
        tape.add(x, y)
    };
    let q = pick(q_src, q_tgt);
    let f1 = pick(first_src, first_tgt);
    let f2 = pick(second_src, second_tgt);
    let mut dist = |a: Var, b: Var| {
        let d = tape.sub(a, b);
        let d = tape.square(d);
        let d = tape.sum_rows(d);
        tape.sqrt(d)
    };
    let d1 = dist(q, f1);
    let d2 = dist(q, f2);
    let keep: Vec<f64> = tape.value(d2).data.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect();
    let guard = tape.constant(Tensor::new(n, 1, keep.iter().map(|k| 1.0 - k).collect()));
    let den = tape.add(d2, guard);
    let r = tape.div(d1, den);
    let w = tape.affine(r, -1.0, 1.0);
    tape.row_scale(w, Arc::new(keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        let t = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0], [5.0, 5.0]]);
        let r = lowe_ratio(&[0.0, 0.0], &t).unwrap();
        assert_eq!((r.r, r.nearest, r.second), (0.5, 0, 1));
        let r = lowe_ratio(&[1.0, 0.0], &t).unwrap();
        assert_eq!((r.r, r.nearest), (0.0, 0));
        let tie = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]);
        let r = lowe_ratio(&[0.0, 0.0], &tie).unwrap();
        assert_eq!((r.r, r.nearest, r.second), (1.0, 0, 1));
        let dup = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(lowe_ratio(&[1.0, 0.0], &dup).unwrap().r, 1.0);
        assert!(lowe_ratio(&[0.0, 0.0], &Tensor::from_rows(&[[1.0, 0.0]])).is_err());
    }

    #[test]
    fn identical_clouds_self_match() {
        let n = 10;
        let feats = Tensor::new(n, 2, (0..n).flat_map(|i| [i as f64, (i * i) as f64]).collect());
        let pts: Vec<_> = (0..n).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        let c = build_correspondences(&feats, &pts, &feats, &pts, 3).unwrap();
        assert_eq!(c.len(), 6);
        for e in &c.entries {
            assert_eq!(e.src_idx, e.tgt_idx);
            assert_eq!(e.w, 1.0);
        }
        let firsts: Vec<_> = c.entries.iter().map(|e| e.src_idx).collect();
        assert_eq!(firsts, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn too_few_keypoints() {
        let f = Tensor::zeros(1, 2);
        let p = vec![Vector3::zeros()];
        assert!(build_correspondences(&f, &p, &f, &p, 1).is_err());
    }

    #[test]
    fn tape_weights_match_selection() {
        let s = Tensor::from_rows(&[[0.0, 0.1], [1.0, 0.3], [0.4, 2.0], [3.0, 1.0]]);
        let t = Tensor::from_rows(&[[0.1, 0.0], [1.2, 0.2], [0.5, 1.6], [2.0, 2.5]]);
        let ps: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = build_correspondences(&s, &ps, &t, &ps, 2).unwrap();
        let mut tape = Tape::new();
        let sv = tape.variable(s);
        let tv = tape.variable(t);
        let w = weights_on_tape(&mut tape, sv, tv, &c);
        for (a, b) in tape.value(w).data.iter().zip(c.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
