use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gsmile_core::pipeline::{import_report, render_heatmap, report_json, HeatmapFormat};
use gsmile_core::{GroundTruth, PipelineError, ResponseCache, RunConfig, Session};
use log::info;

/// Word-level attribution for black-box generative models.
#[derive(Parser, Debug)]
#[command(name = "gsmile", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of perturbations J.
    #[arg(long, short = 'J', global = true, value_name = "N")]
    perturbations: Option<usize>,
    /// Overrides the kernel width.
    #[arg(long, global = true, value_name = "X")]
    sigma: Option<f64>,
    /// Overrides the significance level.
    #[arg(long, global = true, value_name = "X")]
    alpha: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Heatmap format for `render`.
    #[arg(long, global = true, value_name = "html|ansi", default_value = "html")]
    format: HeatmapFormat,
    /// Response cache directory. Defaults to $GSMILE_CACHE_DIR, then the
    /// user cache directory.
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Query the model for every prompt, bypassing the cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attribute the model output to prompt words and write the report.
    Explain,
    /// Explain, then score the attribution against known relevant words.
    Evaluate {
        /// Relevant words, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        truth: Vec<String>,
    },
    /// Compare top-k words with and without a trailing sentinel token.
    Stability {
        #[arg(long, default_value = "***")]
        sentinel: String,
    },
    /// Repeat the explanation and report the coefficient spread.
    Consistency {
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Use seed + i for run i instead of a fixed seed.
        #[arg(long)]
        reseed: bool,
    },
    /// Render a heatmap from a saved report, or from a fresh run.
    Render {
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
}

/// Problems with the run configuration or its referenced files.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(common: &Common) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        return Err(ConfigError("--config is required".into()).into());
    };
    let mut config = RunConfig::from_json_file(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(j) = common.perturbations {
        config.perturbations = j;
    }
    if let Some(sigma) = common.sigma {
        config.sigma = Some(sigma);
    }
    if let Some(alpha) = common.alpha {
        config.alpha = alpha;
    }
    config.validate()?;
    Ok(config)
}

fn cache_dir(common: &Common) -> Option<PathBuf> {
    if common.no_cache {
        return None;
    }
    if let Some(dir) = &common.cache_dir {
        return Some(dir.clone());
    }
    if let Some(dir) = std::env::var_os("GSMILE_CACHE_DIR").filter(|d| !d.is_empty()) {
        return Some(PathBuf::from(dir));
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME").filter(|d| !d.is_empty()) {
        return Some(Path::new(&dir).join("gsmile"));
    }
    std::env::var_os("HOME").map(|home| Path::new(&home).join(".cache").join("gsmile"))
}

fn session(config: &RunConfig, common: &Common) -> Result<Session> {
    let session = Session::from_config(config).map_err(|e| match e {
        PipelineError::Embed(inner) => anyhow::Error::new(ConfigError(format!(
            "cannot load embeddings {}: {inner}",
            config.embeddings.display()
        ))),
        other => other.into(),
    })?;
    Ok(match cache_dir(common) {
        Some(dir) => {
            info!("response cache: {}", dir.display());
            let cache = ResponseCache::open_dir(&dir)
                .with_context(|| format!("cannot open cache in {}", dir.display()))?;
            session.with_cache(cache)
        }
        None => session,
    })
}

fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    text
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Explain => {
            let config = load_config(common)?;
            let result = session(&config, common)?.explain(&config)?;
            eprintln!("top tokens: {}", result.top_tokens(result.tokens.len().min(5)).join(", "));
            emit(common, &report_json(&result))
        }
        Command::Evaluate { truth } => {
            let config = load_config(common)?;
            let tokens = gsmile_core::perturb::tokenize(&config.prompt)?;
            let relevant: Vec<&str> = truth.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            let truth = GroundTruth::from_tokens(tokens.tokens(), &relevant);
            if truth.positives() == 0 {
                bail!(ConfigError(format!("none of {relevant:?} occurs in the prompt")));
            }
            let (report, _) = session(&config, common)?.evaluate(&config, &truth)?;
            emit(common, &json(&report))
        }
        Command::Stability { sentinel } => {
            let config = load_config(common)?;
            let report = session(&config, common)?.stability_probe(&config, sentinel)?;
            emit(common, &json(&report))
        }
        Command::Consistency { runs, reseed } => {
            let config = load_config(common)?;
            let report = session(&config, common)?.consistency_probe(&config, *runs, *reseed)?;
            emit(common, &json(&report))
        }
        Command::Render { report } => {
            let result = match report {
                Some(path) => import_report(path)?,
                None => {
                    let config = load_config(common)?;
                    session(&config, common)?.explain(&config)?
                }
            };
            emit(common, &render_heatmap(&result, common.format))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        match cause.downcast_ref::<PipelineError>() {
            Some(PipelineError::Config(_)) => return 2,
            Some(PipelineError::Adapter(_)) => return 3,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
