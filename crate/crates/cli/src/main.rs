mod commands;
mod config;
mod dataset;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anevrix_core::phases::StratAxis;
use clap::{Args, Parser, Subcommand};

use crate::commands::PatchExport;
use crate::config::{PipelineConfig, PredictorChoice};
use crate::error::{invalid, CliResult};

/// Aneurysm detection pipeline: dataset indexing, weak labels, patch
/// sampling, sliding-window inference, evaluation and risk stratification.
#[derive(Debug, Parser)]
#[command(name = "anevrix", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,

    /// Override any config field, e.g. `--set retention.stride=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long = "out", short = 'o', global = true)]
    output_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[arg(long, global = true)]
    landmarks: Option<PathBuf>,

    #[arg(long, global = true)]
    annotations: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// oracle, heuristic:<percentile> or unet:<weights manifest>.
    #[arg(long, global = true)]
    predictor: Option<PredictorChoice>,

    #[arg(long, global = true)]
    patch_side: Option<usize>,

    /// Worker threads (0 = all cores).
    #[arg(long, short = 'j', env = "ANEVRIX_JOBS", global = true)]
    jobs: Option<usize>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[arg(long, short = 'v', action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List scans, labels and ages found under the dataset root.
    Index,
    /// Assign subjects to cross-validation folds.
    Split {
        #[arg(long)]
        k: Option<usize>,
        /// Reuse an existing `subject_id,fold` CSV instead of drawing folds.
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Convert voxel-wise label masks into spherical annotations.
    Weaken {
        #[arg(long)]
        margin_mm: Option<f64>,
        /// Also write the rasterized spheres as NIfTI masks.
        #[arg(long)]
        write_masks: bool,
    },
    /// Draw positive and negative training patches.
    Sample {
        #[arg(long, value_enum, default_value_t = PatchExport::None)]
        export: PatchExport,
    },
    /// Sliding-window detection over every scan.
    Infer {
        /// Also write the aggregated probability maps.
        #[arg(long)]
        save_probability: bool,
    },
    /// Match candidates to annotations; outcomes, FROC and summary stats.
    Evaluate {
        #[arg(long)]
        candidates: PathBuf,
        /// `subject,session` list of evaluated scans (e.g. `scans.csv` from
        /// `infer`), so that scans without candidates still count.
        #[arg(long)]
        scans: Option<PathBuf>,
    },
    /// FROC curves for one or more candidate sets, with a paired test when
    /// there are two.
    Froc {
        /// `name=path` or a path; repeat for several models.
        #[arg(long = "candidates", required = true)]
        candidates: Vec<String>,
        #[arg(long)]
        scans: Option<PathBuf>,
    },
    /// Partial PHASES scores and stratified sensitivity.
    Phases {
        #[arg(long)]
        candidates: PathBuf,
        /// Defaults to `participants.tsv` under the dataset root.
        #[arg(long)]
        participants: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "risk,location,size")]
        axes: Vec<StratAxis>,
    },
    /// Write a synthetic angiography dataset.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        controls: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Index => "index",
            Command::Split { .. } => "split",
            Command::Weaken { .. } => "weaken",
            Command::Sample { .. } => "sample",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Froc { .. } => "froc",
            Command::Phases { .. } => "phases",
            Command::Synth { .. } => "synth",
        }
    }
}

fn effective_config(g: &GlobalArgs, command: &Command) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(v) = &g.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &g.dataset {
        cfg.dataset_root = Some(v.clone());
    }
    if let Some(v) = &g.landmarks {
        cfg.landmarks = Some(v.clone());
    }
    if let Some(v) = &g.annotations {
        cfg.annotations = Some(v.clone());
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = &g.predictor {
        cfg.predictor = v.clone();
    }
    if let Some(v) = g.patch_side {
        cfg.patch_side = v;
    }
    match command {
        Command::Split { k: Some(k), .. } => cfg.folds = *k,
        Command::Weaken { margin_mm: Some(m), .. } => {
            if !(*m >= 0.0) {
                return Err(invalid(format!("--margin-mm must be >= 0, got {m}")));
            }
            cfg.weaken_margin_mm = Some(*m);
        }
        Command::Synth { patients, controls } => {
            if let Some(p) = patients {
                cfg.synth.patients = *p;
            }
            if let Some(c) = controls {
                cfg.synth.controls = *c;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = effective_config(&cli.global, &cli.command)?;
    if cli.global.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let jobs = cli.global.jobs.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| invalid(format!("--jobs {jobs}: {e}")))?;
    let log = match &cli.command {
        Command::Index => commands::index(&cfg)?,
        Command::Split { import, .. } => commands::split(&cfg, import.as_deref())?,
        Command::Weaken { write_masks, .. } => commands::weaken(&cfg, *write_masks)?,
        Command::Sample { export } => commands::sample(&cfg, *export)?,
        Command::Infer { save_probability } => commands::infer(&cfg, *save_probability)?,
        Command::Evaluate { candidates, scans } => commands::evaluate(&cfg, candidates, scans.as_deref())?,
        Command::Froc { candidates, scans } => commands::froc_cmd(&cfg, candidates, scans.as_deref())?,
        Command::Phases {
            candidates,
            participants,
            axes,
        } => commands::phases(&cfg, candidates, participants.as_deref(), axes)?,
        Command::Synth { .. } => commands::synth(&cfg)?,
    };
    let manifest = log.finish(cli.command.name(), &cfg, rayon::current_num_threads(), &cfg.output_dir)?;
    log::info!("manifest: {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
