//! End-to-end registration of one pair.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{pair_seed, PairRecord};
use super::metrics::PairMetrics;
use super::report::{aggregate, write_csv, AggregateReport, PairResult};
use crate::backbone::WeightsBundle;
use crate::error::{Error, Result};
use crate::matching::{build_correspondences, CorrespondenceSet};
use crate::network::{extract_features, FrameFeatures, FramePrep, PipelineConfig};
use crate::rgbd::RigidTransform;
use crate::robust::{ransac_fit, ransac_fit_parallel, FitResult, RansacConfig, WeightedPair};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterConfig {
    pub pipeline: PipelineConfig,
    /// Correspondences kept per side.
    pub k: usize,
    pub ransac_t: usize,
    pub ransac_l: usize,
    pub seed: u64,
    pub parallel_ransac: bool,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            k: 200,
            ransac_t: 100,
            ransac_l: 20,
            seed: 0,
            parallel_ransac: false,
        }
    }
}

impl RegisterConfig {
    pub fn ransac(&self, seed: u64) -> RansacConfig {
        RansacConfig { t: self.ransac_t, l: self.ransac_l, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub src_keypoints: usize,
    pub tgt_keypoints: usize,
    pub correspondences: usize,
    pub mean_weight: f64,
    pub fit_error: f64,
    pub winning_hypothesis: usize,
    pub valid_hypotheses: usize,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: RigidTransform,
    pub metrics: Option<PairMetrics>,
    pub diagnostics: Diagnostics,
    pub correspondences: CorrespondenceSet,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(&'static str, f64)>,
}

/// Features, correspondences and the robust fit for two prepared frames,
/// recorded on `tape`.
pub struct Matched {
    pub src: FrameFeatures,
    pub tgt: FrameFeatures,
    pub set: CorrespondenceSet,
    pub fit: FitResult,
}

fn timed<T>(timings: &mut Vec<(&'static str, f64)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.push((stage, start.elapsed().as_secs_f64()));
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn match_and_fit(
    tape: &mut Tape,
    weights: &WeightsBundle,
    pipeline: &PipelineConfig,
    src: &FramePrep,
    tgt: &FramePrep,
    k: usize,
    ransac: &RansacConfig,
    parallel: bool,
    timings: &mut Vec<(&'static str, f64)>,
) -> Result<Matched> {
    let (fs, ft) = timed(timings, "features", || {
        Ok((extract_features(tape, weights, pipeline, src)?, extract_features(tape, weights, pipeline, tgt)?))
    })?;
    let set = timed(timings, "matching", || {
        build_correspondences(tape.value(fs.features), &src.cloud.points, tape.value(ft.features), &tgt.cloud.points, k)
    })?;
    let fit = timed(timings, "ransac", || {
        let pairs: Vec<WeightedPair> = (&set).into();
        if parallel {
            ransac_fit_parallel(&pairs, ransac)
        } else {
            ransac_fit(&pairs, ransac)
        }
    })?;
    Ok(Matched { src: fs, tgt: ft, set, fit })
}

/// Unprojects both frames, extracts fused features, matches, fits and, when
/// the pair has a ground truth, scores the estimate.
pub fn run_register(pair: &PairRecord, weights: &WeightsBundle, config: &RegisterConfig) -> Result<Registration> {
    pair.validate().map_err(|e| e.in_stage("input"))?;
    weights.validate(&config.pipeline.network).map_err(|e| e.in_stage("weights"))?;
    let mut timings = Vec::new();
    let (src, tgt) = timed(&mut timings, "prepare", || {
        Ok((
            FramePrep::new(&pair.src_color, &pair.src_depth, &pair.intr, &config.pipeline)?,
            FramePrep::new(&pair.tgt_color, &pair.tgt_depth, &pair.intr, &config.pipeline)?,
        ))
    })?;
    let mut tape = Tape::new();
    let m = match_and_fit(
        &mut tape,
        weights,
        &config.pipeline,
        &src,
        &tgt,
        config.k,
        &config.ransac(config.seed),
        config.parallel_ransac,
        &mut timings,
    )?;
    let transform = m.fit.transform;
    let metrics = match &pair.gt {
        Some(gt) => Some(timed(&mut timings, "metrics", || PairMetrics::compute(&tgt.cloud.points, &transform, gt))?),
        None => None,
    };
    if !m.fit.error.is_finite() {
        return Err(Error::NonFinite("alignment error".into()).in_stage("ransac"));
    }
    let weights_sum: f64 = m.set.weights().iter().sum();
    Ok(Registration {
        transform,
        metrics,
        diagnostics: Diagnostics {
            src_keypoints: src.num_keypoints(),
            tgt_keypoints: tgt.num_keypoints(),
            correspondences: m.set.len(),
            mean_weight: weights_sum / m.set.len() as f64,
            fit_error: m.fit.error,
            winning_hypothesis: m.fit.hypothesis,
            valid_hypotheses: m.fit.valid_hypotheses,
        },
        correspondences: m.set,
        timings,
    })
}

/// One pair of a multi-pair run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    /// RANSAC seed used for this pair.
    pub seed: u64,
    /// Row-major 4x4 estimate mapping target points into the source frame.
    pub transform: [[f64; 4]; 4],
    pub metrics: Option<PairMetrics>,
    pub diagnostics: Diagnostics,
}

/// Everything `register` writes. Contains no timings, so equal inputs give
/// byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RegisterConfig,
    pub pairs: Vec<PairEntry>,
    /// Present when at least one pair has a ground truth.
    pub aggregate: Option<AggregateReport>,
}

impl RunReport {
    pub fn results(&self) -> Vec<PairResult> {
        self.pairs.iter().filter_map(|p| p.metrics.as_ref().map(|m| PairResult::new(p.id.clone(), m))).collect()
    }

    /// Writes the JSON report and, when there are metrics, the per-pair CSV
    /// next to it (same stem, `.csv`).
    pub fn write(&self, json_path: &Path) -> Result<()> {
        let results = self.results();
        if !results.is_empty() {
            write_csv(&results, &json_path.with_extension("csv"))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Registers every pair with its own seed derived from the run seed and the
/// pair id, so results do not depend on order. `on_pair` sees each result.
pub fn register_pairs(
    pairs: &[(String, PairRecord)],
    weights: &WeightsBundle,
    config: &RegisterConfig,
    mut on_pair: impl FnMut(&str, &Registration),
) -> Result<RunReport> {
    let mut entries = Vec::with_capacity(pairs.len());
    for (id, pair) in pairs {
        let cfg = RegisterConfig { seed: pair_seed(config.seed, id), ..config.clone() };
        let reg = run_register(pair, weights, &cfg).map_err(|e| Error::Pair { id: id.clone(), source: Box::new(e) })?;
        on_pair(id, &reg);
        let m = reg.transform.to_matrix4();
        entries.push(PairEntry {
            id: id.clone(),
            seed: cfg.seed,
            transform: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            metrics: reg.metrics,
            diagnostics: reg.diagnostics,
        });
    }
    let mut report = RunReport { config: config.clone(), pairs: entries, aggregate: None };
    let results = report.results();
    if !results.is_empty() {
        report.aggregate = Some(aggregate(&results)?);
    }
    Ok(report)
}
