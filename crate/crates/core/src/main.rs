#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pointmbf::backbone::WeightsBundle;
use pointmbf::eval::report::format_aggregate;
use pointmbf::eval::train::write_loss_csv;
use pointmbf::eval::{
    aggregate, generate_synthetic_pair, list_pairs, pair_seed, register_pairs, train_toy, PairRecord, RegisterConfig,
    RunReport, SynthConfig, TrainConfig,
};
use pointmbf::gradcheck::{run_gradcheck, EPSILON, SEEDS};
use pointmbf::{Error, Result};

#[derive(Parser)]
#[command(name = "pmbf", version, about = "RGB-D registration with bidirectional fusion")]
struct Cli {
    /// JSON file with `synth`, `register` and `train` sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pairs.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        /// Maximum rotation in degrees between the two views.
        #[arg(long)]
        difficulty: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register every pair in a directory.
    Register {
        #[arg(long)]
        pairs: PathBuf,
        /// Weights file; seeded random weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        ransac_t: Option<usize>,
        #[arg(long)]
        ransac_l: Option<usize>,
        /// Score RANSAC hypotheses on all threads.
        #[arg(long)]
        parallel_ransac: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of pairs.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Starting weights; seeded random weights when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Per-iteration loss CSV; defaults to the output path with `.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Check a single op (e.g. `linear`, `fusion_block`, `renderer`).
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = SEEDS)]
        seeds: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = EPSILON)]
        epsilon: f64,
    },
    /// Print the aggregate table of a registration report.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthSection {
    seed: u64,
    count: usize,
    difficulty: f64,
    #[serde(flatten)]
    render: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { seed: 0, count: 10, difficulty: 10.0, render: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    synth: SynthSection,
    register: RegisterConfig,
    train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_pairs(dir: &Path) -> Result<Vec<(String, PairRecord)>> {
    list_pairs(dir)?
        .into_iter()
        .map(|(id, path)| {
            let pair = PairRecord::load(&path).map_err(|e| Error::Pair { id: id.clone(), source: Box::new(e) })?;
            Ok((id, pair))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { seed, count, difficulty, width, height, out } => {
            let s = &mut cfg.synth;
            s.seed = seed.unwrap_or(s.seed);
            s.count = count.unwrap_or(s.count);
            s.difficulty = difficulty.unwrap_or(s.difficulty);
            s.render.width = width.unwrap_or(s.render.width);
            s.render.height = height.unwrap_or(s.render.height);
            if !(s.difficulty >= 0.0) {
                return Err(Error::InvalidInput("difficulty must be non-negative".into()));
            }
            fs::create_dir_all(&out).map_err(|e| Error::InvalidInput(format!("{}: {e}", out.display())))?;
            for i in 0..s.count {
                let id = format!("{i:03}");
                let pair = generate_synthetic_pair(pair_seed(s.seed, &id), s.difficulty, &s.render);
                pair.save(&out.join(format!("pair_{id}")))?;
            }
            eprintln!("wrote {} pairs to {}", s.count, out.display());
        }
        Command::Register { pairs, weights, seed, k, ransac_t, ransac_l, parallel_ransac, out } => {
            let r = &mut cfg.register;
            r.seed = seed.unwrap_or(r.seed);
            r.k = k.unwrap_or(r.k);
            r.ransac_t = ransac_t.unwrap_or(r.ransac_t);
            r.ransac_l = ransac_l.unwrap_or(r.ransac_l);
            r.parallel_ransac |= parallel_ransac;
            r.pipeline.validate()?;
            let w = match &weights {
                Some(path) => WeightsBundle::load_for(path, &r.pipeline.network)?,
                None => WeightsBundle::init(&r.pipeline.network, r.seed),
            };
            let pairs = load_pairs(&pairs)?;
            let report = register_pairs(&pairs, &w, r, |id, reg| {
                let stages: Vec<String> = reg.timings.iter().map(|(s, t)| format!("{s} {:.3}s", t)).collect();
                eprintln!("pair {id}: {}", stages.join(", "));
            })?;
            report.write(&out)?;
            if let Some(agg) = &report.aggregate {
                eprint!("{}", format_aggregate(agg));
            }
        }
        Command::Train { pairs, epochs, lr, seed, init, loss_csv, out } => {
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.lr = lr.unwrap_or(t.lr);
            t.seed = seed.unwrap_or(t.seed);
            t.pipeline.validate()?;
            if !(t.lr >= 0.0) {
                return Err(Error::InvalidInput("learning rate must be non-negative".into()));
            }
            let w = match &init {
                Some(path) => WeightsBundle::load_for(path, &t.pipeline.network)?,
                None => WeightsBundle::init(&t.pipeline.network, t.seed),
            };
            let pairs: Vec<PairRecord> = load_pairs(&pairs)?.into_iter().map(|(_, p)| p).collect();
            eprintln!(
                "optimizer: SGD with weight decay {} (replaces Adam), lr {}, {} pairs per step",
                t.weight_decay, t.lr, t.accumulate
            );
            let result = train_toy(&pairs, w, t, |r| {
                eprintln!(
                    "iter {:4} epoch {:3} pair {:3}: L {:.6} (geo {:.6}, vis {:.6}, E {:.6})",
                    r.iteration, r.epoch, r.pair, r.total, r.l_geo, r.l_vis, r.e
                )
            })?;
            result.weights.save(&out)?;
            let csv = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            write_loss_csv(&result.curve, &csv)?;
            eprintln!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Gradcheck { op, seeds, epsilon } => {
            let report = run_gradcheck(op.as_deref(), seeds, epsilon)?;
            for t in &report.targets {
                println!("{}", t.line());
            }
            if !report.passed() {
                return Err(Error::CheckFailed("gradient check".into()));
            }
        }
        Command::Eval { report } => {
            let run = RunReport::read(&report)?;
            let agg = aggregate(&run.results())?;
            if run.aggregate.as_ref().is_some_and(|a| *a != agg) {
                return Err(Error::InvalidInput("stored aggregate does not match the per-pair metrics".into()));
            }
            print!("{}", format_aggregate(&agg));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
