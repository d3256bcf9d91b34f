//! Toy unsupervised training: render loss plus weighted alignment error,
//! gradients accumulated over a group of pairs, plain SGD.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{pair_seed, PairRecord};
use super::register::match_and_fit;
use crate::backbone::WeightsBundle;
use crate::error::{Error, Result};
use crate::grad::{sgd_step, GradientMap, WEIGHT_DECAY};
use crate::matching::weights_on_tape;
use crate::network::{FramePrep, PipelineConfig};
use crate::render::{
    geometric_loss, photometric_loss, render_inputs, soft_render, total_loss, LossBreakdown, LossConfig,
};
use crate::robust::RansacConfig;
use crate::tape::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pipeline: PipelineConfig,
    pub loss: LossConfig,
    pub k: usize,
    pub ransac_t: usize,
    pub ransac_l: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Pairs per SGD step.
    pub accumulate: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::training(),
            loss: LossConfig::default(),
            k: 200,
            ransac_t: 10,
            ransac_l: 80,
            lr: 1e-4,
            weight_decay: WEIGHT_DECAY,
            epochs: 12,
            accumulate: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub pair: usize,
    pub l_geo: f64,
    pub l_vis: f64,
    pub e: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: WeightsBundle,
    pub curve: Vec<IterationRecord>,
}

/// Loss of one prepared pair and its parameter gradients.
///
/// The target cloud is placed in the source camera by the robust estimate
/// `T*` and rendered against the source frame. `T*` is a constant, so the
/// render terms carry no parameter gradient; the alignment term reaches the
/// features through the correspondence weights.
pub fn pair_loss(
    weights: &WeightsBundle,
    src: &FramePrep,
    tgt: &FramePrep,
    src_frame: &PairRecord,
    config: &TrainConfig,
    ransac_seed: u64,
) -> Result<(LossBreakdown, GradientMap)> {
    let mut tape = Tape::new();
    let ransac = RansacConfig { t: config.ransac_t, l: config.ransac_l, seed: ransac_seed };
    let mut timings = Vec::new();
    let m = match_and_fit(&mut tape, weights, &config.pipeline, src, tgt, config.k, &ransac, false, &mut timings)?;
    let t_star = m.fit.transform;

    let w = weights_on_tape(&mut tape, m.src.features, m.tgt.features, &m.set);
    let n = m.set.len();
    let resid: Vec<f64> = m.set.entries.iter().map(|c| (c.src - t_star.apply(&c.tgt)).norm_squared()).collect();
    let resid = tape.constant(Tensor::new(n, 1, resid));
    let e = tape.mul(w, resid);
    let e = tape.sum(e);
    let e = tape.affine(e, 1.0 / n as f64, 0.0);

    let placed: Vec<_> = tgt.cloud.points.iter().map(|p| t_star.apply(p)).collect();
    let colors = tgt.cloud.colors.as_deref().unwrap_or(&[]);
    let (pos, col) = render_inputs(&mut tape, &placed, colors, &config.loss);
    let frame = soft_render(&mut tape, pos, col, &src.intr, &config.loss);
    let l_geo = geometric_loss(&mut tape, &frame, &src_frame.src_depth, config.loss.eps);
    let l_vis = photometric_loss(&mut tape, &frame, &src_frame.src_color, config.loss.eps);
    let total = total_loss(&mut tape, l_geo, l_vis, e, config.loss.lambda);

    let breakdown = LossBreakdown::new(tape.scalar(l_geo), tape.scalar(l_vis), tape.scalar(e), config.loss.lambda);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {breakdown:?}")));
    }
    let grads = tape.backward(total)?.into_params();
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradients at loss {breakdown:?}")));
    }
    Ok((breakdown, grads))
}

/// Runs `epochs` passes over `pairs`; every `accumulate` pairs the mean
/// gradient is applied with one SGD step. `progress` sees every iteration.
pub fn train_toy(
    pairs: &[PairRecord],
    init: WeightsBundle,
    config: &TrainConfig,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<TrainOutput> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("training needs at least one pair".into()));
    }
    if config.accumulate == 0 {
        return Err(Error::Config("accumulate must be at least 1".into()));
    }
    init.validate(&config.pipeline.network)?;
    let preps = pairs
        .iter()
        .map(|p| {
            p.validate()?;
            Ok((
                FramePrep::new(&p.src_color, &p.src_depth, &p.intr, &config.pipeline)?,
                FramePrep::new(&p.tgt_color, &p.tgt_depth, &p.intr, &config.pipeline)?,
            ))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("prepare"))?;
    let mut weights = init;
    let mut acc = GradientMap::default();
    let mut pending = 0;
    let mut curve = Vec::new();
    let total_iters = config.epochs * pairs.len();
    for epoch in 0..config.epochs {
        for (i, (src, tgt)) in preps.iter().enumerate() {
            let seed = pair_seed(config.seed, &format!("{epoch}/{i}"));
            let (loss, grads) =
                pair_loss(&weights, src, tgt, &pairs[i], config, seed).map_err(|e| e.in_stage("train"))?;
            let rec = IterationRecord {
                iteration: curve.len(),
                epoch,
                pair: i,
                l_geo: loss.l_geo,
                l_vis: loss.l_vis,
                e: loss.e,
                total: loss.total,
            };
            progress(&rec);
            curve.push(rec);
            acc.merge(&grads);
            pending += 1;
            if pending == config.accumulate || curve.len() == total_iters {
                acc.scale(1.0 / pending as f64);
                sgd_step(&mut weights, &acc, config.lr, config.weight_decay)?;
                acc = GradientMap::default();
                pending = 0;
            }
        }
    }
    Ok(TrainOutput { weights, curve })
}

/// Mean total loss of each epoch.
pub fn epoch_means(curve: &[IterationRecord]) -> Vec<f64> {
    let epochs = curve.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = curve.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

pub fn write_loss_csv(curve: &[IterationRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv_to(curve, file)
}

pub fn write_loss_csv_to<W: Write>(curve: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("loss csv", e))?;
    Ok(())
}
