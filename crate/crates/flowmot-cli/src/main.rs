//! Command-line entry point: simulate | train-flow | track | evaluate |
//! compare | ablate. Every command exits nonzero on failure with a single
//! machine-parsable `error[CODE]: message` line on stderr.

use clap::{Parser, Subcommand};
use flowmot::config::ExperimentConfig;
use flowmot::derive_seed;
use flowmot::error::{Error, Result};
use flowmot::experiment::{
    cmd_ablate, cmd_compare, cmd_evaluate, cmd_simulate, cmd_track, cmd_train_flow, AblateConfig,
    CompareConfig, ProviderKind,
};
use flowmot::flow::FlowConfig;
use flowmot::metrics::EvalFilter;
use flowmot::track::{TrackerParams, TwoStageParams};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "flowmot",
    about = "Tracking-by-detection with a learned association cost, end to end on a built-in simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic sequences from the [scenario] sections of a config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every scenario seed via per-name derivation.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the flow (or the factorized baseline) on sequence directories.
    TrainFlow {
        /// Directory containing sequence subdirectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train without scene conditioning.
        #[arg(long)]
        no_scene_conditioning: bool,
        /// Train the factorized baseline instead of the joint flow.
        #[arg(long)]
        factorized: bool,
        /// Measure distance deltas against the last raw reading instead of
        /// the filtered state.
        #[arg(long)]
        raw_last_distance: bool,
    },
    /// Track every sequence in a data directory with one provider.
    Track {
        #[arg(long)]
        data: PathBuf,
        /// One of: iou | euclidean | factorized | flow | flow-gt.
        #[arg(long)]
        provider: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Normalize over negated costs (likelihood-proportional mode).
        #[arg(long)]
        negate_before_softmax: bool,
        /// Enable the two-stage (low-confidence recovery) association.
        #[arg(long)]
        two_stage: bool,
    },
    /// Evaluate prediction directories against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the provider-comparison grid over presets and seeds.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the comparison grid plus tracker-knob ablation sweeps.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_experiment(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig {
            settings: Default::default(),
            flow: flowmot::experiment::desk_flow_config(0),
            tracker: TrackerParams::default(),
            scenarios: Vec::new(),
        }),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let mut scenarios = cfg.scenarios;
            if scenarios.is_empty() {
                return Err(Error::InvalidInput(
                    "config has no [scenario] sections".into(),
                ));
            }
            if let Some(s) = seed {
                for (name, sc) in scenarios.iter_mut() {
                    sc.seed = derive_seed(s, name);
                }
            }
            let names = cmd_simulate(&scenarios, &out)?;
            println!("wrote {} sequences to {}", names.len(), out.display());
        }
        Command::TrainFlow {
            data,
            config,
            out,
            seed,
            no_scene_conditioning,
            factorized,
            raw_last_distance,
        } => {
            let cfg = load_experiment(&config)?;
            let mut flow: FlowConfig = cfg.flow;
            if let Some(s) = seed {
                flow.seed = s;
            }
            if no_scene_conditioning {
                flow.scene_conditioning = false;
            }
            if factorized {
                let seqs = flowmot::experiment::load_sequence_dirs(&data)?;
                let (model, val) = flowmot::experiment::train_factorized_model(
                    &seqs,
                    &flow,
                    &cfg.tracker.kalman,
                    raw_last_distance,
                )?;
                model.save(&out)?;
                println!("factorized checkpoint at {} (val NLL {val:.4})", out.display());
            } else {
                let trained =
                    cmd_train_flow(&data, &flow, &cfg.tracker.kalman, raw_last_distance, &out)?;
                println!(
                    "flow checkpoint at {} (best val NLL {:.4})",
                    out.display(),
                    trained.result.best_val_nll
                );
            }
        }
        Command::Track {
            data,
            provider,
            checkpoint,
            config,
            out,
            negate_before_softmax,
            two_stage,
        } => {
            let kind = ProviderKind::parse(&provider).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown provider `{provider}` (iou|euclidean|factorized|flow|flow-gt)"
                ))
            })?;
            let cfg = load_experiment(&config)?;
            let mut params = cfg.tracker;
            if negate_before_softmax {
                params.negate_before_softmax = true;
            }
            if two_stage && params.two_stage.is_none() {
                params.two_stage = Some(TwoStageParams::default());
            }
            cmd_track(&data, kind, checkpoint.as_deref(), &params, &out)?;
            println!("tracked {} with {}", data.display(), kind.name());
        }
        Command::Evaluate {
            gt,
            pred,
            out,
            config,
        } => {
            let cfg = load_experiment(&config)?;
            let filter = EvalFilter {
                max_distance: cfg.settings.max_gt_distance,
                ..EvalFilter::default()
            };
            let aggregate = cmd_evaluate(&gt, &pred, &cfg.settings.aloe_bins, &filter, &out)?;
            println!(
                "aggregate IDF1 {}  IDSW {}  MOTA {}",
                aggregate
                    .idf1()
                    .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
                aggregate.tracking.idsw,
                aggregate
                    .mota()
                    .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
            );
        }
        Command::Compare { config, out, seed } => {
            let cfg = load_experiment(&config)?;
            let mut compare_config = if config.is_some() {
                CompareConfig::from_experiment(&cfg)?
            } else {
                CompareConfig::desk_default()
            };
            if let Some(s) = seed {
                compare_config.base_seed = s;
            }
            let outcome = cmd_compare(&compare_config, &out)?;
            print!("{}", outcome.table);
        }
        Command::Ablate { config, out, seed } => {
            let cfg = load_experiment(&config)?;
            let mut base = if config.is_some() {
                CompareConfig::from_experiment(&cfg)?
            } else {
                AblateConfig::desk_default().base
            };
            if let Some(s) = seed {
                base.base_seed = s;
            }
            let ablate_config = AblateConfig {
                base,
                ..AblateConfig::desk_default()
            };
            let outcome = cmd_ablate(&ablate_config, &out)?;
            print!("{}", outcome.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
