//! `hyperdiv` command-line driver.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use hyperdiv::diversity::{layer_diversity, weight_energy, EnergyReport};
use hyperdiv::encoder::{build_encoder, Encoder, Tap};
use hyperdiv::evaluation::{evaluate_probe, extract_taps};
use hyperdiv::experiments::{
    emit_plots, measurement_sample, run_sweep, stats_csv, EnergySource, ExperimentConfig, PlotKind, RecordSet,
    RECORDS_FILE,
};
use hyperdiv::ssl::train;
use hyperdiv::Error;

const OUT_ENV: &str = "HYPERDIV_OUT";
const DEFAULT_OUT: &str = "hyperdiv-out";

#[derive(Parser, Debug)]
#[command(
    name = "hyperdiv",
    version,
    about = "Feature-diversity lab for self-supervised encoders"
)]
struct Cli {
    /// More log output on stderr (repeat for trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `--set ssl.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [default: output.dir, then $HYPERDIV_OUT, then ./hyperdiv-out].
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one encoder; writes encoder.hdv, stats.csv and periodic checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Hyperspherical energy of a checkpoint's taps; writes diversity.csv.
    Diversity {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint (.hdv with its .json sidecar).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tap to measure; repeatable [default: all four].
        #[arg(long)]
        tap: Vec<Tap>,
        /// Energy exponent; repeatable [default: diversity.s].
        #[arg(long)]
        s: Vec<f64>,
        /// features or weights [default: diversity.source].
        #[arg(long)]
        source: Option<EnergySource>,
        /// Held-out images to sample [default: diversity.samples, capped at the test split].
        #[arg(long)]
        n: Option<usize>,
        /// Sample seed [default: diversity.seed].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear probe on a frozen checkpoint; writes probe.csv.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint (.hdv with its .json sidecar).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured grid; writes records.csv and per-cell stats.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Concurrent cells [default: sweep.jobs]; 1 runs serially.
        #[arg(long)]
        jobs: Option<usize>,
        /// Keep existing records and skip cells that already have them.
        #[arg(long)]
        resume: bool,
    },
    /// Render SVG figures from a records CSV into <out>/plots.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Records CSV [default: <out>/records.csv].
        #[arg(long)]
        records: Option<PathBuf>,
        /// epoch_curves, size_scan or algo_scatter; repeatable [default: all].
        #[arg(long)]
        kind: Vec<PlotKind>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownTap(_) | Error::NoWeights(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Errors reading user-supplied inputs are usage errors.
fn input<T>(r: hyperdiv::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::usage(e.to_string()))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    input(match &common.config {
        Some(path) => ExperimentConfig::load(path, &common.set),
        None => ExperimentConfig::parse("", &common.set),
    })
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).map_err(|e| {
        Failure::from(Error::File {
            path: dir.clone(),
            source: e,
        })
    })?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| {
        Failure::from(Error::File {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn cmd_train(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(common, &cfg)?;
    let data = input(cfg.data.load())?;
    let spec = cfg.encoder.spec(cfg.data.image_side())?;
    let mut encoder = build_encoder(&spec, cfg.encoder.seed)?;
    info!(
        "training {} on {} images, {} epochs, {} parameters",
        cfg.ssl.algorithm,
        data.train.len(),
        cfg.ssl.epochs,
        encoder.num_params()
    );
    let ckpt_dir = out.join("checkpoints");
    if cfg.ssl.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| {
            Failure::from(Error::File {
                path: ckpt_dir.clone(),
                source: e,
            })
        })?;
    }
    let outcome = train(&mut encoder, &data.train, &cfg.ssl, Some(&ckpt_dir))?;
    for s in &outcome.stats {
        info!("epoch {:>4}  loss {:.6}", s.epoch, s.loss);
    }
    write(
        &out.join("stats.csv"),
        &stats_csv(&outcome.stats, cfg.output.record_wall_time)?,
    )?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    encoder.save(&out.join("encoder.hdv"))?;
    info!("wrote {}", out.join("encoder.hdv").display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Encoder, Failure> {
    input(Encoder::load(path))
}

#[allow(clippy::too_many_arguments)]
fn cmd_diversity(
    common: &Common,
    checkpoint: &Path,
    taps: &[Tap],
    s_values: &[f64],
    source: Option<EnergySource>,
    n: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(common, &cfg)?;
    let encoder = load_checkpoint(checkpoint)?;
    let taps = if taps.is_empty() {
        Tap::ALL.to_vec()
    } else {
        taps.to_vec()
    };
    let s_values = if s_values.is_empty() {
        cfg.diversity.s.clone()
    } else {
        s_values.to_vec()
    };
    if let Some(bad) = s_values.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Failure::usage(format!("--s must be finite and ≥ 0, got {bad}")));
    }
    let source = source.unwrap_or(cfg.diversity.source);

    let mut reports: Vec<EnergyReport> = Vec::new();
    match source {
        EnergySource::Features => {
            let data = input(cfg.data.load())?;
            let m = match n {
                Some(n) if n > data.test.len() => {
                    return Err(Failure::usage(format!(
                        "--n {n} exceeds the {} held-out images",
                        data.test.len()
                    )))
                }
                Some(0) => return Err(Failure::usage("--n must be ≥ 1")),
                Some(n) => n,
                None => cfg.diversity.samples,
            };
            let sample = measurement_sample(&data.test, m, seed.unwrap_or(cfg.diversity.seed));
            let feats = extract_taps(&encoder, &sample)?;
            for &s in &s_values {
                reports.extend(
                    layer_diversity(&feats, s)?
                        .into_iter()
                        .filter(|r| taps.iter().any(|t| t.name() == r.layer)),
                );
            }
        }
        EnergySource::Weights => {
            for &s in &s_values {
                for &t in &taps {
                    reports.push(weight_energy(&encoder, t, s)?);
                }
            }
        }
    }
    let mut text = format!("{}\n", EnergyReport::CSV_HEADER);
    for r in &reports {
        text.push_str(&r.to_csv_row());
        text.push('\n');
        if r.duplicate_warning {
            log::warn!("{} s={}: coinciding vectors", r.layer, r.s);
        }
    }
    write(&out.join("diversity.csv"), &text)?;
    info!(
        "wrote {} rows to {}",
        reports.len(),
        out.join("diversity.csv").display()
    );
    Ok(())
}

fn cmd_probe(common: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(common, &cfg)?;
    let encoder = load_checkpoint(checkpoint)?;
    let data = input(cfg.data.load())?;
    let r = evaluate_probe(&encoder, &data.train, &data.test, &cfg.probe)?;
    info!(
        "{} probe: test error {:.4}, train error {:.4}",
        cfg.probe.tap, r.test_error, r.train_error
    );
    let text = format!(
        "tap,test_error,train_error,epochs,num_classes\n{},{},{},{},{}\n",
        cfg.probe.tap, r.test_error, r.train_error, r.epochs, r.num_classes
    );
    write(&out.join("probe.csv"), &text)
}

fn cmd_sweep(common: &Common, jobs: Option<usize>, resume: bool) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(j) = jobs {
        cfg.sweep.jobs = j;
    }
    input(cfg.validate())?;
    let out = out_dir(common, &cfg)?;
    let outcome = run_sweep(&cfg, &out, resume)?;
    info!(
        "{} cells trained, {} skipped, {} failed; {} records in {}",
        outcome.trained,
        outcome.skipped,
        outcome.failures.len(),
        outcome.records.len(),
        outcome.records_path.display()
    );
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("{} cells failed; see failures.csv", outcome.failures.len()),
        })
    }
}

fn cmd_plot(common: &Common, records: Option<&Path>, kinds: &[PlotKind]) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(common, &cfg)?;
    let path = records.map(Path::to_path_buf).unwrap_or_else(|| out.join(RECORDS_FILE));
    let text = fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let set = if text.trim().is_empty() {
        None
    } else {
        Some(input(RecordSet::from_csv(&text))?)
    };
    let set = match set {
        Some(s) if !s.is_empty() => s,
        _ => return Err(Failure::usage(format!("no records in {}", path.display()))),
    };
    let kinds = if kinds.is_empty() {
        PlotKind::ALL.to_vec()
    } else {
        kinds.to_vec()
    };
    let plot_dir = out.join("plots");
    for kind in kinds {
        for p in emit_plots(&set, kind, &plot_dir)? {
            info!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.quiet {
        "warn"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    let result = match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Diversity {
            common,
            checkpoint,
            tap,
            s,
            source,
            n,
            seed,
        } => cmd_diversity(common, checkpoint, tap, s, *source, *n, *seed),
        Command::Probe { common, checkpoint } => cmd_probe(common, checkpoint),
        Command::Sweep { common, jobs, resume } => cmd_sweep(common, *jobs, *resume),
        Command::Plot { common, records, kind } => cmd_plot(common, records.as_deref(), kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
