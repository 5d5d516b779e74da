//! The `o2na` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
//! I/O error, 3 numeric failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] o2na_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn core_exit_code(e: &o2na_core::Error) -> i32 {
    use o2na_core::Error as E;
    match e {
        E::Config(_) => 1,
        E::Numeric(_) => 3,
        E::Sample { source, .. } => core_exit_code(source),
        _ => 2,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "o2na",
    version,
    about = "Controllable non-autoregressive video captioning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration layering shared by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (train and held-out splits).
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<String>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the captioner (and optionally the autoregressive baseline).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory written by `synth`.
        #[arg(long, value_name = "DIR")]
        data: Option<String>,
        /// Run directory for the checkpoint, vocabulary and loss log.
        #[arg(long, value_name = "DIR")]
        out: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also train the autoregressive baseline.
        #[arg(long)]
        ar: bool,
    },
    /// Caption videos with optional object control.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: Option<String>,
        #[arg(long, value_name = "DIR")]
        data: Option<String>,
        /// Which corpus split to caption.
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Comma-separated object words every caption must be about.
        #[arg(long, value_delimiter = ',', value_name = "WORDS")]
        objects: Option<Vec<String>>,
        /// Pins the forced object words in place during refinement.
        #[arg(long, requires = "objects")]
        lock_objects: bool,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Decode at the k most probable lengths and keep the best.
        #[arg(long, value_name = "K", conflicts_with = "length")]
        npd: Option<usize>,
        /// Rank length candidates with the autoregressive baseline.
        #[arg(long, requires = "npd")]
        teacher: bool,
        /// Caption at most this many videos.
        #[arg(long)]
        limit: Option<usize>,
        /// Captions as JSON lines (video_id, hypothesis, references).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Per-video decoding trace as JSON.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Score captions against references.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSON lines of video_id, hypothesis, references.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Run directory; supplies the vocabulary size for vocabulary usage.
        #[arg(long, value_name = "DIR")]
        run: Option<String>,
        /// Corpus directory; supplies training captions for novelty.
        #[arg(long, value_name = "DIR")]
        data: Option<String>,
        /// Count unique captions or unique words.
        #[arg(long, default_value = "caption", value_parser = ["caption", "word"])]
        unique: String,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Time autoregressive and non-autoregressive decoding per caption length.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained run; untrained matched-size models are timed otherwise.
        #[arg(long, value_name = "DIR")]
        run: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "5,15,25")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Resolves the effective configuration: defaults, then `base` (a trained
/// run's embedded configuration), then the file, `--set` values and flags.
pub fn resolve(
    args: &ConfigArgs,
    base: Option<&str>,
    flags: &[(&str, Option<String>)],
) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(text) = base {
        c.apply_text(text, "checkpoint")?;
    }
    if let Some(path) = &args.config {
        c.apply_file(path)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

pub fn run_cli(cli: Cli) -> CliResult<()> {
    use commands as c;
    match cli.command {
        Command::Synth {
            cfg,
            out,
            videos,
            holdout,
            noise,
        } => {
            let rc = resolve(
                &cfg,
                None,
                &[
                    ("data_dir", out),
                    ("videos", opt(&videos)),
                    ("holdout", opt(&holdout)),
                    ("noise", opt(&noise)),
                ],
            )?;
            c::synth(&rc)
        }
        Command::Train {
            cfg,
            data,
            out,
            epochs,
            ar,
        } => {
            let rc = resolve(
                &cfg,
                None,
                &[
                    ("data_dir", data),
                    ("run_dir", out),
                    ("epochs", opt(&epochs)),
                    ("train_ar", ar.then(|| "true".to_string())),
                ],
            )?;
            c::train(&rc)
        }
        Command::Generate {
            cfg,
            run,
            data,
            split,
            objects,
            lock_objects,
            length,
            iterations,
            gamma,
            npd,
            teacher,
            limit,
            out,
            trace,
        } => {
            let flags = [
                ("run_dir", run),
                ("data_dir", data),
                ("length", opt(&length)),
                ("iterations", opt(&iterations)),
                ("gamma", opt(&gamma)),
                ("npd", opt(&npd)),
                ("lock_objects", lock_objects.then(|| "true".to_string())),
            ];
            let user = resolve(&cfg, None, &flags)?;
            let loaded = c::load_run(&user.run_dir)?;
            let rc = resolve(&cfg, Some(&loaded.config.to_text()), &flags)?;
            rc.check_against(&loaded.config)?;
            c::generate(
                &rc,
                &loaded,
                &c::GenerateOptions {
                    split,
                    objects,
                    teacher,
                    limit,
                    out,
                    trace,
                },
            )
        }
        Command::Eval {
            cfg,
            input,
            run,
            data,
            unique,
            out,
        } => {
            let flags = [("run_dir", run.clone()), ("data_dir", data.clone())];
            let mut rc = resolve(&cfg, None, &flags)?;
            let loaded = match &run {
                Some(dir) => {
                    let l = c::load_run(dir)?;
                    rc = resolve(&cfg, Some(&l.config.to_text()), &flags)?;
                    Some(l)
                }
                None => None,
            };
            let word = unique == "word";
            c::eval(
                &rc,
                &input,
                loaded.as_ref(),
                data.is_some(),
                word,
                out.as_deref(),
            )
        }
        Command::Bench {
            cfg,
            run,
            lengths,
            repeats,
            iterations,
        } => {
            let flags = [("run_dir", run.clone()), ("iterations", opt(&iterations))];
            let user = resolve(&cfg, None, &flags)?;
            let (rc, loaded) = match &run {
                Some(_) => {
                    let l = c::load_run(&user.run_dir)?;
                    let rc = resolve(&cfg, Some(&l.config.to_text()), &flags)?;
                    rc.check_against(&l.config)?;
                    (rc, Some(l))
                }
                None => (user, None),
            };
            c::bench(&rc, loaded.as_ref(), &lengths, repeats)
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
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
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
