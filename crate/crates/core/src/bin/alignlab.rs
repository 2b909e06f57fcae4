use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alignlab::config::RunConfig;
use alignlab::data::Manifest;
use alignlab::eval::score_run;
use alignlab::pipeline::read_decodes;
use alignlab::train::StageSchedule;
use alignlab::workflow::{self, Experiment, CONFIG_ECHO};
use alignlab::{Error, Result};

/// Speech encoder + projector + decoder LM recognition lab.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config; the built-in toy recipe when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the paper-scale optimizer and batch-cap values instead of the toy recipe.
    #[arg(long)]
    paper_hparams: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write manifests, the feature store and the pretrained-weight cache.
    PrepareData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overwrite a non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Train, resuming from the newest checkpoint in the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// `staged` or `all-unfrozen`.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Greedy-decode the test sets with a run's final checkpoint.
    Decode {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to the config echoed into the run directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a run's decodes, or one decode file against one manifest.
    Score {
        #[arg(long, required_unless_present = "decodes")]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        decodes: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Tabulate scored runs into report.md and report.tsv.
    Report {
        /// Where the report is written.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "CER by test set")]
        title: String,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run a canned comparison: projector-compare, encoder-compare or schedule-compare.
    Experiment {
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Start over in a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.paper_hparams {
        cfg.use_paper_hparams();
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn run_config(run_dir: &Path, config: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load(&config.map_or_else(|| run_dir.join(CONFIG_ECHO), Path::to_path_buf))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { cfg, force } => {
            let cfg = resolve(&cfg)?;
            print!("{}", workflow::prepare_data(&cfg, force)?);
        }
        Command::Train { cfg, run_dir, schedule } => {
            let mut cfg = resolve(&cfg)?;
            if let Some(name) = schedule {
                cfg.stages = StageSchedule::by_name(&name, &cfg.stages)?;
            }
            let out = workflow::train(&cfg, &run_dir, None)?;
            for e in &out.epochs {
                println!("stage {} epoch {}: loss {:.4} ({} updates)", e.stage, e.epoch, e.mean_loss, e.updates);
            }
            let ckpt = out
                .final_checkpoint
                .ok_or_else(|| Error::Contract("training stopped before the schedule finished".into()))?;
            println!("final checkpoint {}", ckpt.display());
        }
        Command::Decode { run_dir, config } => {
            let cfg = run_config(&run_dir, config.as_deref())?;
            for path in workflow::decode(&cfg, &run_dir)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Score {
            run_dir,
            config,
            decodes,
            manifest,
        } => {
            if let (Some(decodes), Some(manifest)) = (decodes, manifest) {
                let norm = match &config {
                    Some(path) => RunConfig::load(path)?.eval.normalization,
                    None => RunConfig::default().eval.normalization,
                };
                let s = score_run(&read_decodes(&decodes)?, &Manifest::load(&manifest)?, &norm)?;
                println!("CER {:.2}% over {} characters", 100.0 * s.cer()?, s.counts.ref_len);
            } else if let Some(run_dir) = run_dir {
                let cfg = run_config(&run_dir, config.as_deref())?;
                let label = run_dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                print!("{}", workflow::score(&cfg, &run_dir, &label)?.counts_tsv());
            }
        }
        Command::Report { run_dir, title, runs } => {
            let norm = RunConfig::load(&runs[0].join(CONFIG_ECHO))
                .map(|c| c.eval.normalization)
                .unwrap_or_default();
            let report = workflow::report(&runs, &run_dir, &title, &norm)?;
            print!("{}", report.to_markdown(&norm));
        }
        Command::Experiment {
            name,
            cfg,
            run_dir,
            force,
        } => {
            let exp: Experiment = name.parse()?;
            let cfg = resolve(&cfg)?;
            let out = workflow::run_experiment(exp, &cfg, &run_dir, force)?;
            print!("{}{}", out.report.to_markdown(&cfg.eval.normalization), out.summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
