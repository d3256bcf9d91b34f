//! Weighted Procrustes and subset-sampling RANSAC scored by the weighted
//! alignment error.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::CorrespondenceSet;
use crate::rgbd::RigidTransform;

/// One weighted pair: `src ≈ T(tgt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPair {
    pub src: Vector3<f64>,
    pub tgt: Vector3<f64>,
    pub w: f64,
}

impl From<&CorrespondenceSet> for Vec<WeightedPair> {
    fn from(set: &CorrespondenceSet) -> Self {
        set.entries.iter().map(|c| WeightedPair { src: c.src, tgt: c.tgt, w: c.w }).collect()
    }
}

/// `Σ w ‖src − T(tgt)‖² / n`.
pub fn alignment_error(pairs: &[WeightedPair], t: &RigidTransform) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("alignment error of an empty set".into()));
    }
    let sum: f64 = pairs.iter().map(|p| p.w * (p.src - t.apply(&p.tgt)).norm_squared()).sum();
    Ok(sum / pairs.len() as f64)
}

/// Weighted least-squares rigid transform mapping `tgt` onto `src`.
pub fn weighted_procrustes(pairs: &[WeightedPair]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateFit(format!("{} pairs, need 3", pairs.len())));
    }
    if pairs.iter().any(|p| !(p.w >= 0.0) || !p.w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = pairs.iter().map(|p| p.w).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateFit("total weight is zero".into()));
    }
    let cs = pairs.iter().fold(Vector3::zeros(), |a, p| a + p.w * p.src) / total;
    let ct = pairs.iter().fold(Vector3::zeros(), |a, p| a + p.w * p.tgt) / total;
    let h: Matrix3<f64> = pairs.iter().fold(Matrix3::zeros(), |a, p| a + p.w * (p.tgt - ct) * (p.src - cs).transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let scale = s.max().max(f64::MIN_POSITIVE);
    // rank < 2 leaves the rotation about the spread axis undetermined
    if s.iter().filter(|&&x| x > 1e-12 * scale.max(1.0)).count() < 2 || s.max() <= 0.0 {
        return Err(Error::DegenerateFit("cross-covariance has rank < 2".into()));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let t = cs - r * ct;
    RigidTransform::new(crate::rgbd::project_to_rotation(&r), t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Hypothesis count.
    pub t: usize,
    /// Subset size.
    pub l: usize,
    pub seed: u64,
}

impl RansacConfig {
    pub fn test(seed: u64) -> Self {
        Self { t: 100, l: 20, seed }
    }

    pub fn train(seed: u64) -> Self {
        Self { t: 10, l: 80, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub transform: RigidTransform,
    pub error: f64,
    /// Index of the winning hypothesis.
    pub hypothesis: usize,
    /// Hypotheses that produced a fit.
    pub valid_hypotheses: usize,
    pub t: usize,
    pub l: usize,
    pub seed: u64,
}

/// Indices of hypothesis `h`'s subset. The stream depends only on
/// `(seed, h)`, so hypotheses can be drawn in any order.
pub fn subset_indices(seed: u64, h: usize, n: usize, l: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h as u64);
    let mut idx = sample(&mut rng, n, l).into_vec();
    idx.sort_unstable();
    idx
}

fn hypothesis(pairs: &[WeightedPair], cfg: &RansacConfig, h: usize) -> Option<(RigidTransform, f64)> {
    let subset: Vec<WeightedPair> =
        subset_indices(cfg.seed, h, pairs.len(), cfg.l).into_iter().map(|i| pairs[i]).collect();
    let t = weighted_procrustes(&subset).ok()?;
    let e = alignment_error(pairs, &t).ok()?;
    Some((t, e))
}

fn check(pairs: &[WeightedPair], cfg: &RansacConfig) -> Result<()> {
    if cfg.t == 0 || cfg.l < 3 || pairs.len() < cfg.l {
        return Err(Error::InvalidInput(format!(
            "ransac needs |C| >= l >= 3 and t >= 1, got |C|={}, l={}, t={}",
            pairs.len(),
            cfg.l,
            cfg.t
        )));
    }
    Ok(())
}

fn pick(cfg: &RansacConfig, results: Vec<Option<(RigidTransform, f64)>>) -> Result<FitResult> {
    let valid = results.iter().filter(|r| r.is_some()).count();
    let (h, (transform, error)) = results
        .into_iter()
        .enumerate()
        .filter_map(|(h, r)| r.map(|r| (h, r)))
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .ok_or(Error::FitFailure(cfg.t))?;
    Ok(FitResult { transform, error, hypothesis: h, valid_hypotheses: valid, t: cfg.t, l: cfg.l, seed: cfg.seed })
}

/// Fits every hypothesis subset, scores on the full set, keeps the minimum
/// (lowest hypothesis index on ties). Degenerate subsets are skipped.
pub fn ransac_fit(pairs: &[WeightedPair], cfg: &RansacConfig) -> Result<FitResult> {
    check(pairs, cfg)?;
    pick(cfg, (0..cfg.t).map(|h| hypothesis(pairs, cfg, h)).collect())
}

/// Same result as [`ransac_fit`], hypotheses evaluated on the rayon pool.
pub fn ransac_fit_parallel(pairs: &[WeightedPair], cfg: &RansacConfig) -> Result<FitResult> {
    check(pairs, cfg)?;
    pick(cfg, (0..cfg.t).into_par_iter().map(|h| hypothesis(pairs, cfg, h)).collect())
}
