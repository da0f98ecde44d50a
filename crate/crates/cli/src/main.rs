//! `lfvid`: light field video synthesis pipelines from the command line.

mod commands;
mod scene;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lfvid::config::{ProviderKind, RunConfig};
use log::info;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage or configuration error (unknown flag, bad value, bad config file)
  3  missing input (file, directory, checkpoint or scene recipe not found)
  4  depth/flow provider failure
  5  any other runtime failure";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_PROVIDER: u8 = 4;
pub const EXIT_RUNTIME: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "lfvid", version, about = "Light field video synthesis from monocular video", after_help = EXIT_HELP)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LFVID_OUT", default_value = "lfvid-out")]
    pub out: PathBuf,
    /// Depth and flow source.
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderArg>,
    #[arg(long, global = true)]
    pub lambda_photo: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_geo: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_temp: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_occ: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_bins: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_tv: Option<f64>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProviderArg {
    Oracle,
    Files,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic layered scene with its ground truth.
    GenScene(commands::GenScene),
    /// Fit a layered representation to one frame by direct optimization.
    Fit(commands::Fit),
    /// Self-supervised training of the synthesis backbone.
    Train(commands::Train),
    /// Supervised training of the refinement stage on a frozen backbone.
    TrainRefine(commands::TrainRefine),
    /// Run a trained pipeline over a video.
    Synthesize(commands::Synthesize),
    /// Score predicted light fields against a scene's ground truth.
    Eval(commands::Eval),
    /// Ablation table over the loss and model toggles.
    Ablate(commands::Ablate),
    /// EPI slope response to scaled disparity.
    BaselineSweep(commands::BaselineSweep),
    /// Shift-and-sum refocus of a light field.
    Refocus(commands::Refocus),
    /// Extract an epipolar plane image and fit its slope.
    Epi(commands::Epi),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenScene(_) => "gen-scene",
            Command::Fit(_) => "fit",
            Command::Train(_) => "train",
            Command::TrainRefine(_) => "train-refine",
            Command::Synthesize(_) => "synthesize",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::BaselineSweep(_) => "baseline-sweep",
            Command::Refocus(_) => "refocus",
            Command::Epi(_) => "epi",
        }
    }
}

/// Marks a failure inside a depth or flow provider.
#[derive(Debug)]
pub struct ProviderFailed;

impl std::fmt::Display for ProviderFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("provider failed")
    }
}

/// Bad command-line input caught after parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Everything a subcommand needs besides its own flags.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn out_dir(&self, sub: &str) -> Result<PathBuf> {
        let dir = if sub.is_empty() { self.out.clone() } else { self.out.join(sub) };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(p) = common.provider {
        config.provider.kind = match p {
            ProviderArg::Oracle => ProviderKind::Oracle,
            ProviderArg::Files => ProviderKind::Files,
        };
    }
    let w = &mut config.weights;
    let overrides = [
        (common.lambda_photo, &mut w.photo),
        (common.lambda_geo, &mut w.geo),
        (common.lambda_temp, &mut w.temp),
        (common.lambda_occ, &mut w.occ),
        (common.lambda_bins, &mut w.bins),
        (common.lambda_tv, &mut w.tv),
    ];
    for (value, slot) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli.common)?;
    let name = cli.command.name();
    info!("{name}: resolved config\n{}", config.to_text().trim_end());
    let run = Run { config, out: cli.common.out.clone() };
    let log_path = run.out_dir("")?.join(format!("{name}.conf"));
    lfvid::io::write_atomic(&log_path, run.config.to_text().as_bytes())?;
    match cli.command {
        Command::GenScene(a) => a.run(&run),
        Command::Fit(a) => a.run(&run),
        Command::Train(a) => a.run(&run),
        Command::TrainRefine(a) => a.run(&run),
        Command::Synthesize(a) => a.run(&run),
        Command::Eval(a) => a.run(&run),
        Command::Ablate(a) => a.run(&run),
        Command::BaselineSweep(a) => a.run(&run),
        Command::Refocus(a) => a.run(&run),
        Command::Epi(a) => a.run(&run),
    }
}

fn is_missing(path: &Path) -> bool {
    !path.exists()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ProviderFailed>().is_some() {
        return EXIT_PROVIDER;
    }
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<lfvid::Error>() {
            return match e {
                lfvid::Error::Provider(_) => EXIT_PROVIDER,
                lfvid::Error::MissingFile(_) | lfvid::Error::MissingArtifact(_) => EXIT_MISSING,
                lfvid::Error::Io { path, .. } if is_missing(path) => EXIT_MISSING,
                lfvid::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = format!("{err:#}").replace('\n', " ");
            eprintln!("lfvid: error: {line}");
            ExitCode::from(exit_code(&err))
        }
    }
}
