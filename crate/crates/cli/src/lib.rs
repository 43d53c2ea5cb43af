//! The `dse` command-line tool.
//!
//! Every command takes `--config PATH`, `--seed N` and `--out DIR`, writes its
//! outputs plus a `run.json` record into the output directory, and exits with
//! 0 on success, 1 on usage or configuration errors and 2 on runtime errors.
//! Passing a `run.json` back as `--config` repeats the run.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use dse_core::error::DseError;

pub mod commands;
pub mod config;

use config::{parse_config, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<DseError> for CliError {
    fn from(e: DseError) -> Self {
        let config = match &e {
            DseError::Config(_) => true,
            DseError::Stage { source, .. } => matches!(**source, DseError::Config(_)),
            _ => false,
        };
        if config {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dse", version, about = "Brownian-bridge SAR to EO translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration or a previous run.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "dse-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Apply gamma speckle to a clean SAR tile.
    SimulateSpeckle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        looks: Option<f64>,
    },
    /// Despeckle a tile, or every scene of a corpus.
    Despeckle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Train a learned latent codec on corpus EO tiles.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the translation predictor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Translate SAR tile(s) into a synthetic EO tile.
    Translate {
        #[command(flatten)]
        common: Common,
        /// One or more co-registered (VV, VH) tiles.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Draw K translations and their per-pixel variance map.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// PSNR/SSIM of translations against EO on the test split.
    EvalTranslation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Water segmentation metrics: predicted masks, or a modality comparison.
    EvalSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of predicted masks named like the corpus masks.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Merge report.csv tables from earlier runs.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

/// Everything a command needs: resolved config and output directory.
pub struct Ctx {
    pub command: &'static str,
    pub config: RunConfig,
    pub out: PathBuf,
}

/// What a command reports back for `run.json`.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<String>,
    pub results: Value,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    outputs: &'a [String],
    results: &'a Value,
}

fn load_config(common: &Common, command: &str) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text, command)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn set_vec<T>(slot: &mut Vec<T>, flag: Vec<T>) {
    if !flag.is_empty() {
        *slot = flag;
    }
}

fn prepare(command: Command) -> Result<Ctx, CliError> {
    let (name, common, cfg) = match command {
        Command::GenData { common, n } => {
            let mut cfg = load_config(&common, "gen-data")?;
            if let Some(n) = n {
                cfg.n_scenes = n;
            }
            ("gen-data", common, cfg)
        }
        Command::SimulateSpeckle { common, input, looks } => {
            let mut cfg = load_config(&common, "simulate-speckle")?;
            set_vec(&mut cfg.paths.input, input.into_iter().collect());
            if let Some(l) = looks {
                cfg.speckle.looks = l;
            }
            ("simulate-speckle", common, cfg)
        }
        Command::Despeckle {
            common,
            input,
            data,
            denoiser,
        } => {
            let mut cfg = load_config(&common, "despeckle")?;
            set_vec(&mut cfg.paths.input, input.into_iter().collect());
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.denoiser, denoiser);
            ("despeckle", common, cfg)
        }
        Command::TrainCodec { common, data } => {
            let mut cfg = load_config(&common, "train-codec")?;
            set(&mut cfg.paths.data, data);
            ("train-codec", common, cfg)
        }
        Command::Train {
            common,
            data,
            codec,
            denoiser,
        } => {
            let mut cfg = load_config(&common, "train")?;
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.codec, codec);
            set(&mut cfg.paths.denoiser, denoiser);
            ("train", common, cfg)
        }
        Command::Translate {
            common,
            input,
            model,
            denoiser,
        } => {
            let mut cfg = load_config(&common, "translate")?;
            set_vec(&mut cfg.paths.input, input);
            set(&mut cfg.paths.model, model);
            set(&mut cfg.paths.denoiser, denoiser);
            ("translate", common, cfg)
        }
        Command::Ensemble {
            common,
            input,
            model,
            denoiser,
            k,
        } => {
            let mut cfg = load_config(&common, "ensemble")?;
            set_vec(&mut cfg.paths.input, input);
            set(&mut cfg.paths.model, model);
            set(&mut cfg.paths.denoiser, denoiser);
            if let Some(k) = k {
                cfg.ensemble.k = k;
            }
            ("ensemble", common, cfg)
        }
        Command::EvalTranslation {
            common,
            data,
            model,
            denoiser,
        } => {
            let mut cfg = load_config(&common, "eval-translation")?;
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.model, model);
            set(&mut cfg.paths.denoiser, denoiser);
            ("eval-translation", common, cfg)
        }
        Command::EvalSeg {
            common,
            data,
            pred,
            model,
            denoiser,
        } => {
            let mut cfg = load_config(&common, "eval-seg")?;
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.pred, pred);
            set(&mut cfg.paths.model, model);
            set(&mut cfg.paths.denoiser, denoiser);
            ("eval-seg", common, cfg)
        }
        Command::Report { common, runs } => {
            let mut cfg = load_config(&common, "report")?;
            set_vec(&mut cfg.paths.runs, runs);
            ("report", common, cfg)
        }
    };
    let mut cfg = cfg;
    cfg.paths.resolve()?;
    Ok(Ctx {
        command: name,
        config: cfg,
        out: common.out,
    })
}

fn write_record(ctx: &Ctx, outcome: &Outcome) -> Result<(), CliError> {
    let mut outputs = outcome.outputs.clone();
    outputs.sort();
    let record = RunRecord {
        command: ctx.command,
        version: env!("CARGO_PKG_VERSION"),
        seed: ctx.config.seed,
        config: &ctx.config,
        outputs: &outputs,
        results: &outcome.results,
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(ctx.out.join("run.json"), text + "\n")?;
    Ok(())
}

/// Runs one command from parsed context.
pub fn execute(ctx: &Ctx) -> Result<Outcome, CliError> {
    std::fs::create_dir_all(&ctx.out)?;
    let outcome = match ctx.command {
        "gen-data" => commands::gen_data(ctx),
        "simulate-speckle" => commands::simulate_speckle(ctx),
        "despeckle" => commands::despeckle(ctx),
        "train-codec" => commands::train_codec(ctx),
        "train" => commands::train(ctx),
        "translate" => commands::translate(ctx),
        "ensemble" => commands::ensemble(ctx),
        "eval-translation" => commands::eval_translation(ctx),
        "eval-seg" => commands::eval_seg(ctx),
        "report" => commands::report(ctx),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }?;
    write_record(ctx, &outcome)?;
    Ok(outcome)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = prepare(cli.command).and_then(|ctx| execute(&ctx));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("dse: {e}");
            e.exit_code()
        }
    }
}

/// Output path helper that also records the file name.
pub(crate) fn output(ctx: &Ctx, outputs: &mut Vec<String>, name: impl Into<String>) -> PathBuf {
    let name = name.into();
    let p = ctx.out.join(&name);
    outputs.push(name);
    p
}

pub(crate) fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or paths.{flag} in the config)")))
}
