//! Implementations of the CLI verbs: generate, train, evaluate, modes,
//! sweep-range.
//!
//! Seeds run in parallel worker threads (one model per worker); results are
//! aggregated in seed order after a join barrier, so outputs are
//! byte-identical across reruns regardless of scheduling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{dmd_fit, dmd_modes, dmdf_fit, DmdModel};
use crate::data::{save_csv, TimeSeries};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ModelKind};
use crate::harness::metrics::{evaluate_dmd, evaluate_koopman, EvalMetrics, MetricsReport};
use crate::model::{init_model, KoopmanModel};
use crate::spectral::{DynamicMode, KoopmanSpectrum, ModeSpec, SpectralConstraint};
use crate::training::{split_series, train, TrainHistory, DEFAULT_SPLIT_FRACTIONS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<KoopmanSpectrum>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_run: Option<usize>,
}

impl SeedOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub model_kind: ModelKind,
    pub seed_offset: u64,
    pub n_seeds: usize,
    pub outcomes: Vec<SeedOutcome>,
    pub metrics: MetricsReport,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.outcomes.iter().all(|o| o.is_ok())
    }
}

/// Trained artifacts kept in memory until the (single-threaded) write
/// phase.
enum Artifact {
    Koopman(Box<KoopmanModel>, TrainHistory),
    Dmd(Box<DmdModel>),
}

struct SeedResult {
    outcome: SeedOutcome,
    artifact: Option<Artifact>,
}

fn fail_outcome(seed: u64, error: String) -> SeedResult {
    SeedResult {
        outcome: SeedOutcome {
            seed,
            status: "failed".into(),
            error: Some(error),
            test_mse: None,
            frequency_mae: None,
            spectrum: None,
            best_epoch: None,
            epochs_run: None,
        },
        artifact: None,
    }
}

/// Train (or fit) and evaluate one seed. Pure with respect to the
/// filesystem.
fn run_seed(config: &ExperimentConfig, seed: u64) -> SeedResult {
    let series = match config.resolve_series(seed) {
        Ok(s) => s,
        Err(e) => return fail_outcome(seed, e.to_string()),
    };
    let true_freqs = config.known_frequencies();

    match config.model.kind {
        ModelKind::Dmd => {
            let train_split = match split_series(&series, DEFAULT_SPLIT_FRACTIONS) {
                Ok((t, _, _)) => t,
                Err(e) => return fail_outcome(seed, e.to_string()),
            };
            let model = match dmd_fit(&train_split) {
                Ok(m) => m,
                Err(e) => return fail_outcome(seed, e.to_string()),
            };
            let metrics = match evaluate_dmd(&model, &series, true_freqs.as_deref()) {
                Ok(m) => m,
                Err(e) => return fail_outcome(seed, e.to_string()),
            };
            SeedResult {
                outcome: SeedOutcome {
                    seed,
                    status: "ok".into(),
                    error: None,
                    test_mse: Some(metrics.test_mse),
                    frequency_mae: metrics.frequency_mae,
                    spectrum: None,
                    best_epoch: None,
                    epochs_run: None,
                },
                artifact: Some(Artifact::Dmd(Box::new(model))),
            }
        }
        ModelKind::Dmdf => {
            if series.measurement_dim() != config.model.koopman_dim {
                return fail_outcome(
                    seed,
                    format!(
                        "dmdf requires K = M: K={} but series has M={}",
                        config.model.koopman_dim,
                        series.measurement_dim()
                    ),
                );
            }
            let mut train_cfg = config.training.clone();
            train_cfg.rng_seed = seed;
            match dmdf_fit(&series, config.constraint.clone(), &train_cfg, seed) {
                Ok((model, history)) => finish_koopman(config, seed, series, model, history),
                Err(abort) => fail_outcome(seed, abort.to_string()),
            }
        }
        ModelKind::Koopman => {
            let model = match init_model(
                series.measurement_dim(),
                config.model.koopman_dim,
                &config.model.hidden_sizes,
                config.constraint.clone(),
                config.model.time_mode,
                seed,
            ) {
                Ok(m) => m,
                Err(e) => return fail_outcome(seed, e.to_string()),
            };
            let mut train_cfg = config.training.clone();
            train_cfg.rng_seed = seed;
            match train(model, &series, &train_cfg) {
                Ok((model, history)) => finish_koopman(config, seed, series, model, history),
                Err(abort) => fail_outcome(seed, abort.to_string()),
            }
        }
    }
}

fn finish_koopman(
    config: &ExperimentConfig,
    seed: u64,
    series: TimeSeries,
    model: KoopmanModel,
    history: TrainHistory,
) -> SeedResult {
    let true_freqs = config.known_frequencies();
    let metrics = match evaluate_koopman(&model, &series, true_freqs.as_deref()) {
        Ok(m) => m,
        Err(e) => return fail_outcome(seed, e.to_string()),
    };
    SeedResult {
        outcome: SeedOutcome {
            seed,
            status: "ok".into(),
            error: None,
            test_mse: Some(metrics.test_mse),
            frequency_mae: metrics.frequency_mae,
            spectrum: metrics.spectrum.clone(),
            best_epoch: history.best_epoch,
            epochs_run: Some(history.epochs.len()),
        },
        artifact: Some(Artifact::Koopman(Box::new(model), history)),
    }
}

/// Run all seeds on parallel worker threads; results return in seed order.
fn run_seeds(config: &ExperimentConfig, seeds: &[u64]) -> Vec<SeedResult> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seeds.len().max(1));
    if workers <= 1 || seeds.len() == 1 {
        return seeds.iter().map(|&s| run_seed(config, s)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<SeedResult>> = Vec::new();
    slots.resize_with(seeds.len(), || None);
    let slots = std::sync::Mutex::new(slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= seeds.len() {
                    break;
                }
                let result = run_seed(config, seeds[idx]);
                slots.lock().unwrap()[idx] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every seed slot filled"))
        .collect()
}

fn seed_range(config: &ExperimentConfig, n_seeds: Option<usize>, seed_offset: u64) -> Vec<u64> {
    let n = n_seeds.unwrap_or(config.n_seeds);
    (seed_offset..seed_offset + n as u64).collect()
}

fn report_from(
    config: &ExperimentConfig,
    seed_offset: u64,
    results: &[SeedResult],
) -> RunReport {
    let evals: Vec<EvalMetrics> = results
        .iter()
        .filter_map(|r| {
            r.outcome.test_mse.map(|mse| EvalMetrics {
                test_mse: mse,
                frequency_mae: r.outcome.frequency_mae,
                spectrum: r.outcome.spectrum.clone(),
                n_test: 0,
                anchor_time: 0.0,
            })
        })
        .collect();
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: config.run_name(),
        model_kind: config.model.kind,
        seed_offset,
        n_seeds: results.len(),
        outcomes: results.iter().map(|r| r.outcome.clone()).collect(),
        metrics: MetricsReport::from_evals(&evals),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Write dataset CSVs: one per seed for generator-backed configs, a single
/// normalized copy for CSV-backed ones.
pub fn cmd_generate(
    config: &ExperimentConfig,
    out_dir: &Path,
    n_seeds: Option<usize>,
    seed_offset: u64,
) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let name = config.run_name();
    let mut written = Vec::new();
    if config.dataset.generator.is_some() {
        for seed in seed_range(config, n_seeds, seed_offset) {
            let series = config.resolve_series(seed)?;
            let path = out_dir.join(format!("{name}_seed{seed}.csv"));
            save_csv(&series, &path)?;
            written.push(path);
        }
    } else {
        let series = config.resolve_series(seed_offset)?;
        let path = out_dir.join(format!("{name}.csv"));
        save_csv(&series, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Train every seed, write per-seed checkpoints and history CSVs, and an
/// aggregate report. Training failures are recorded per seed, not fatal.
pub fn cmd_train(
    config: &ExperimentConfig,
    out_dir: &Path,
    n_seeds: Option<usize>,
    seed_offset: u64,
) -> Result<RunReport> {
    ensure_dir(out_dir)?;
    let started = Instant::now();
    let seeds = seed_range(config, n_seeds, seed_offset);
    let results = run_seeds(config, &seeds);
    let name = config.run_name();
    for result in &results {
        let seed = result.outcome.seed;
        match &result.artifact {
            Some(Artifact::Koopman(model, history)) => {
                model.save(&out_dir.join(format!("{name}_seed{seed}_checkpoint.json")))?;
                let csv_path = out_dir.join(format!("{name}_seed{seed}_history.csv"));
                std::fs::write(&csv_path, history.to_csv())
                    .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
            }
            Some(Artifact::Dmd(model)) => {
                model.save(&out_dir.join(format!("{name}_seed{seed}_checkpoint.json")))?;
            }
            None => {}
        }
    }
    let report = report_from(config, seed_offset, &results);
    write_json(&report, &out_dir.join(format!("{name}_report.json")))?;
    println!(
        "train {}: {}/{} seeds ok, mse mean {:.6} +/- {:.6}, wall-clock {:.1}s",
        name,
        report.metrics.n_ok,
        report.n_seeds,
        report.metrics.mse_mean,
        report.metrics.mse_stderr,
        started.elapsed().as_secs_f64()
    );
    Ok(report)
}

/// A checkpoint file is either a spectral-model checkpoint or a DMD
/// operator; distinguished by its fields.
enum LoadedCheckpoint {
    Koopman(Box<KoopmanModel>),
    Dmd(Box<DmdModel>),
}

fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config(format!("{}: not a JSON object", path.display())))?;
    if obj.contains_key("params") {
        Ok(LoadedCheckpoint::Koopman(Box::new(KoopmanModel::load(
            path,
        )?)))
    } else if obj.contains_key("a") {
        Ok(LoadedCheckpoint::Dmd(Box::new(DmdModel::load(path)?)))
    } else {
        Err(Error::Config(format!(
            "{}: unrecognized checkpoint layout",
            path.display()
        )))
    }
}

/// Re-evaluate a checkpoint against a dataset (config-resolved, or an
/// explicit CSV override). Evaluation is pure: reports are regenerable
/// from checkpoints alone.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    data_csv: Option<&Path>,
    seed: u64,
    out_dir: &Path,
) -> Result<(PathBuf, EvalMetrics)> {
    ensure_dir(out_dir)?;
    let series = match data_csv {
        Some(path) => crate::data::load_csv(path)?,
        None => config.resolve_series(seed)?,
    };
    let true_freqs = config.known_frequencies();
    let metrics = match load_checkpoint(checkpoint)? {
        LoadedCheckpoint::Koopman(model) => {
            evaluate_koopman(&model, &series, true_freqs.as_deref())?
        }
        LoadedCheckpoint::Dmd(model) => evaluate_dmd(&model, &series, true_freqs.as_deref())?,
    };
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let path = out_dir.join(format!("{stem}_metrics.json"));
    #[derive(Serialize)]
    struct MetricsFile<'a> {
        schema_version: u32,
        checkpoint: String,
        dataset: String,
        seed: u64,
        #[serde(flatten)]
        metrics: &'a EvalMetrics,
    }
    write_json(
        &MetricsFile {
            schema_version: REPORT_SCHEMA_VERSION,
            checkpoint: checkpoint.display().to_string(),
            dataset: series.name.clone(),
            seed,
            metrics: &metrics,
        },
        &path,
    )?;
    println!(
        "evaluate {}: test mse {:.6} over {} points",
        stem, metrics.test_mse, metrics.n_test
    );
    Ok((path, metrics))
}

fn modes_csv(modes: &[DynamicMode]) -> String {
    let m = modes.first().map(|x| x.components.len()).unwrap_or(0);
    let mut out = String::from("mode_index,r,omega");
    for j in 1..=m {
        out.push_str(&format!(",component_{j}"));
    }
    out.push('\n');
    for (i, mode) in modes.iter().enumerate() {
        out.push_str(&format!("{},{},{}", i, mode.rate, mode.frequency));
        for c in &mode.components {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

/// Export dynamic modes (decoded left eigenvectors) of a checkpoint as CSV.
pub fn cmd_modes(checkpoint: &Path, out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let modes = match load_checkpoint(checkpoint)? {
        LoadedCheckpoint::Koopman(model) => model.dynamic_modes()?,
        LoadedCheckpoint::Dmd(model) => dmd_modes(&model)?,
    };
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let path = out_dir.join(format!("{stem}_modes.csv"));
    std::fs::write(&path, modes_csv(&modes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("modes {}: {} modes written", stem, modes.len());
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub width_label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub name: String,
    pub center_frequency: f64,
    pub rows: Vec<SweepRow>,
}

/// Constraint for one range width centered on the true frequency: width 0
/// pins the frequency, infinite width frees it, otherwise a sigmoid range
/// of the given width.
fn width_constraint(base: &SpectralConstraint, center: f64, width: f64) -> SpectralConstraint {
    let mut constraint = base.clone();
    let spec = if width == 0.0 {
        ModeSpec::Fixed { value: center }
    } else if width.is_infinite() {
        ModeSpec::Free { init: 0.0 }
    } else {
        ModeSpec::Range {
            start: center - width / 2.0,
            end: center + width / 2.0,
            init: 0.0,
        }
    };
    constraint.freq[0] = spec;
    constraint
}

pub fn format_width(width: f64) -> String {
    if width.is_infinite() {
        "inf".to_string()
    } else {
        format!("{width}")
    }
}

/// Train the configured model once per range width (each with the full
/// seed set), centered on the known true frequency; emit a width -> MSE
/// table.
pub fn cmd_sweep_range(
    config: &ExperimentConfig,
    widths: &[f64],
    out_dir: &Path,
    n_seeds: Option<usize>,
    seed_offset: u64,
) -> Result<SweepReport> {
    ensure_dir(out_dir)?;
    if config.model.kind == ModelKind::Dmd {
        return Err(Error::Config(
            "sweep-range needs a trainable spectral model, not plain DMD".into(),
        ));
    }
    let center = config
        .known_frequencies()
        .and_then(|f| f.first().copied())
        .ok_or_else(|| {
            Error::Config(
                "sweep-range requires a known true frequency (config field 'true_frequencies' \
                 or a generator with a closed-form spectrum)"
                    .into(),
            )
        })?;
    let started = Instant::now();
    let seeds = seed_range(config, n_seeds, seed_offset);
    let mut rows = Vec::with_capacity(widths.len());
    for &width in widths {
        let mut sub = config.clone();
        sub.constraint = width_constraint(&config.constraint, center, width);
        sub.constraint.validate(config.model.koopman_dim)?;
        let results = run_seeds(&sub, &seeds);
        let report = report_from(&sub, seed_offset, &results);
        rows.push(SweepRow {
            width_label: format_width(width),
            width: width.is_finite().then_some(width),
            metrics: report.metrics,
        });
    }
    let name = config.run_name();
    let report = SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: name.clone(),
        center_frequency: center,
        rows,
    };

    let mut csv = String::from("width,mse_mean,mse_stderr,mse_median,n_ok\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.width_label,
            row.metrics.mse_mean,
            row.metrics.mse_stderr,
            row.metrics.mse_median,
            row.metrics.n_ok
        ));
    }
    let csv_path = out_dir.join(format!("{name}_sweep.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    write_json(&report, &out_dir.join(format!("{name}_sweep_report.json")))?;
    println!(
        "sweep-range {}: {} widths x {} seeds, wall-clock {:.1}s",
        name,
        report.rows.len(),
        seeds.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(report)
}
