use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetSplits, LabeledImageSet};
use crate::diversity::{layer_diversity, weight_energy, EnergyReport};
use crate::encoder::{build_encoder, Encoder, Tap};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_probe, extract_taps};
use crate::ssl::{train_observed, Control, EpochStats};

use super::config::{Cell, EnergySource, ExperimentConfig, StopSignal};
use super::records::{write_atomic, ExperimentRecord, RecordSet};

pub const RECORDS_FILE: &str = "records.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const STATS_DIR: &str = "stats";

/// Outcome of the early-stopping rule over a measurement history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    /// Index of the measurement after which training stops, if any.
    pub stop_at: Option<usize>,
    /// Index of the lowest value up to the stop point, ties to the earliest.
    pub best: usize,
}

/// Stops once `patience` consecutive measurements fail to improve the best
/// value so far by at least `min_delta`. Indices are 0-based.
pub fn early_stop(history: &[f64], patience: usize, min_delta: f64) -> Result<EarlyStop> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("early stop needs a non-empty history".into()));
    }
    let mut best_value = history[0];
    let mut stale = 0;
    let mut stop_at = None;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v <= best_value - min_delta {
            best_value = v;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                stop_at = Some(i);
                break;
            }
        }
    }
    let seen = &history[..=stop_at.unwrap_or(history.len() - 1)];
    let mut best = 0;
    for (i, &v) in seen.iter().enumerate() {
        if v < seen[best] {
            best = i;
        }
    }
    Ok(EarlyStop { stop_at, best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub fingerprint: String,
    pub label: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: RecordSet,
    pub records_path: PathBuf,
    /// Cells trained in this run.
    pub trained: usize,
    /// Cells skipped because their records already existed.
    pub skipped: usize,
    pub failures: Vec<CellFailure>,
    /// Per-epoch training stats of the cells trained in this run.
    pub histories: BTreeMap<String, Vec<EpochStats>>,
}

fn label(cell: &Cell) -> String {
    let c = &cell.config;
    format!(
        "{} {} w{} {} seed {}",
        c.ssl.algorithm, c.encoder.depth, c.encoder.width, c.encoder.norm, c.encoder.seed
    )
}

/// Held-out images used for every diversity measurement of a sweep.
pub fn measurement_sample(test: &LabeledImageSet, samples: usize, seed: u64) -> LabeledImageSet {
    let m = if samples > test.len() {
        warn!(
            "diversity.samples = {samples} exceeds the {} test images; using all of them",
            test.len()
        );
        test.len()
    } else {
        samples
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, test.len(), m).into_vec();
    idx.sort_unstable();
    test.subset(&idx)
}

/// Diversity reports laid out `[s][tap]`.
pub fn measure_diversity(
    encoder: &Encoder,
    sample: &LabeledImageSet,
    s_values: &[f64],
    source: EnergySource,
) -> Result<Vec<EnergyReport>> {
    let mut out = Vec::with_capacity(s_values.len() * Tap::ALL.len());
    match source {
        EnergySource::Features => {
            let taps = extract_taps(encoder, sample)?;
            for &s in s_values {
                out.extend(layer_diversity(&taps, s)?);
            }
        }
        EnergySource::Weights => {
            for &s in s_values {
                for tap in Tap::ALL {
                    out.push(weight_energy(encoder, tap, s)?);
                }
            }
        }
    }
    Ok(out)
}

struct CellRun {
    records: Vec<ExperimentRecord>,
    stats: Vec<EpochStats>,
}

fn run_cell(cell: &Cell, data: &DatasetSplits, sample: &LabeledImageSet) -> Result<CellRun> {
    let cfg = &cell.config;
    let start = Instant::now();
    let spec = cfg.encoder.spec(cfg.data.image_side())?;
    let mut encoder = build_encoder(&spec, cfg.encoder.seed)?;
    let s_values = &cfg.diversity.s;

    let measure = |enc: &Encoder, epoch: usize| -> Result<ExperimentRecord> {
        let reports = measure_diversity(enc, sample, s_values, cfg.diversity.source)?;
        let probe = evaluate_probe(enc, &data.train, &data.test, &cfg.probe)?;
        let dup_warn: Vec<Tap> = Tap::ALL
            .iter()
            .copied()
            .filter(|t| reports.iter().any(|r| r.duplicate_warning && r.layer == t.name()))
            .collect();
        Ok(ExperimentRecord {
            fingerprint: cell.fingerprint.clone(),
            algorithm: cfg.ssl.algorithm,
            depth: cfg.encoder.depth.clone(),
            width: cfg.encoder.width,
            norm: cfg.encoder.norm,
            seed: cfg.encoder.seed,
            epoch,
            params: enc.num_params(),
            test_error: probe.test_error,
            diversity: reports.iter().map(|r| r.diversity).collect(),
            dup_warn,
            wall_s: cfg.output.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        })
    };

    let mut records = Vec::new();
    let mut signal = Vec::new();
    let sw = &cfg.sweep;
    let mut stopped = false;
    if cell.measure_epochs.first() == Some(&0) {
        let r = measure(&encoder, 0)?;
        if sw.stop_signal == StopSignal::ProbeError {
            signal.push(r.test_error);
        }
        records.push(r);
    }
    let outcome = if cell.measure_epochs.iter().any(|&e| e > 0) {
        let mut observer = |st: &EpochStats, enc: &Encoder| -> Result<Control> {
            if !cell.measure_epochs.contains(&st.epoch) {
                return Ok(Control::Continue);
            }
            let r = measure(enc, st.epoch)?;
            signal.push(match sw.stop_signal {
                StopSignal::ProbeError => r.test_error,
                StopSignal::TrainLoss => st.loss,
            });
            records.push(r);
            if sw.early_stop && early_stop(&signal, sw.patience, sw.min_delta)?.stop_at.is_some() {
                stopped = true;
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        };
        Some(train_observed(
            &mut encoder,
            &data.train,
            &cfg.ssl,
            None,
            &mut observer,
        )?)
    } else {
        None
    };
    if stopped {
        info!(
            "{}: early stop after epoch {}",
            label(cell),
            records.last().map_or(0, |r| r.epoch)
        );
    }
    Ok(CellRun {
        records,
        stats: outcome.map(|o| o.stats).unwrap_or_default(),
    })
}

/// Per-epoch training stats as CSV; `wall_s` is included only on request.
pub fn stats_csv(stats: &[EpochStats], with_wall_time: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if with_wall_time {
        w.write_record(["epoch", "loss", "wall_s"])?;
    } else {
        w.write_record(["epoch", "loss"])?;
    }
    for s in stats {
        let mut row = vec![s.epoch.to_string(), s.loss.to_string()];
        if with_wall_time {
            row.push(s.wall_s.to_string());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Trains and measures every grid cell of `cfg`, writing `records.csv`,
/// per-cell training stats and, when cells fail, `failures.csv` under
/// `out_dir`.
///
/// With `resume`, records already in `out_dir` are kept and cells whose
/// fingerprint they contain are skipped. A failing cell is logged and
/// reported without stopping the others.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<SweepOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join(STATS_DIR)).map_err(|e| Error::file(out_dir, e))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut existing = RecordSet::new(cfg.diversity.s.clone());
    if resume && records_path.exists() {
        existing = RecordSet::load(&records_path)?;
        if existing.s() != cfg.diversity.s.as_slice() {
            return Err(Error::Config(format!(
                "{} holds exponents {:?}, config asks for {:?}",
                records_path.display(),
                existing.s(),
                cfg.diversity.s
            )));
        }
    }

    let cells = cfg.cells();
    let done = existing.fingerprints();
    let pending: Vec<&Cell> = cells
        .iter()
        .filter(|c| !done.contains(c.fingerprint.as_str()))
        .collect();
    let skipped = cells.len() - pending.len();
    info!("{} cells pending, {skipped} already recorded", pending.len());

    let data = if pending.is_empty() {
        None
    } else {
        Some(cfg.data.load()?)
    };
    let store = Mutex::new(existing);
    let results: Vec<(usize, Result<CellRun>)> = match &data {
        None => Vec::new(),
        Some(data) => {
            let sample = measurement_sample(&data.test, cfg.diversity.samples, cfg.diversity.seed);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.sweep.jobs)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| {
                pending
                    .par_iter()
                    .enumerate()
                    .map(|(i, cell)| {
                        info!("cell {}: {}", cell.fingerprint, label(cell));
                        let run = panic::catch_unwind(AssertUnwindSafe(|| run_cell(cell, data, &sample)))
                            .unwrap_or_else(|p| {
                                Err(Error::InvalidArgument(format!("cell panicked: {}", panic_message(p))))
                            });
                        if let Ok(r) = &run {
                            let stats_path = out_dir.join(STATS_DIR).join(format!("{}.csv", cell.fingerprint));
                            let saved = stats_csv(&r.stats, cfg.output.record_wall_time)
                                .and_then(|text| write_atomic(&stats_path, text.as_bytes()))
                                .and_then(|_| {
                                    let mut set = store.lock().expect("record store");
                                    set.extend(r.records.iter().cloned())?;
                                    set.save(&records_path)
                                });
                            if let Err(e) = saved {
                                return (i, Err(e));
                            }
                        }
                        (i, run)
                    })
                    .collect()
            })
        }
    };

    let mut failures = Vec::new();
    let mut histories = BTreeMap::new();
    let mut trained = 0;
    for (i, run) in results {
        let cell = pending[i];
        match run {
            Ok(r) => {
                trained += 1;
                histories.insert(cell.fingerprint.clone(), r.stats);
            }
            Err(e) => {
                warn!("cell {} ({}) failed: {e}", cell.fingerprint, label(cell));
                failures.push(CellFailure {
                    fingerprint: cell.fingerprint.clone(),
                    label: label(cell),
                    message: e.to_string(),
                });
            }
        }
    }
    let records = store.into_inner().expect("record store");
    records.save(&records_path)?;
    let failures_path = out_dir.join(FAILURES_FILE);
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|e| Error::file(&failures_path, e))?;
        }
    } else {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fingerprint", "cell", "error"])?;
        for f in &failures {
            w.write_record([&f.fingerprint, &f.label, &f.message])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&failures_path, &bytes)?;
    }
    Ok(SweepOutcome {
        records,
        records_path,
        trained,
        skipped,
        failures,
        histories,
    })
}
