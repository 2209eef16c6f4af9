// Scratch benchmark for tuning the acceptance configs. Not part of the
// deliverable test suite.

use std::collections::BTreeMap;
use std::time::Instant;

use koopcast::data::{generate, GeneratorConfig, Sampling, SystemKind};
use koopcast::harness::{cmd_train, DatasetSpec, ExperimentConfig, ModelKind, ModelSpec};
use koopcast::spectral::{ModeSpec, SpectralConstraint, TimeMode};
use koopcast::training::TrainConfig;

fn vdp_true_frequency() -> f64 {
    // Long integration, count upward zero crossings of y1 on the limit cycle.
    let cfg = GeneratorConfig {
        system: SystemKind::Vanderpol,
        params: BTreeMap::new(),
        t_end: 400.0,
        n_samples: 40000,
        sampling: Sampling::Regular,
        noise_std: 0.0,
        rng_seed: 0,
        initial_state: None,
    };
    let series = generate(&cfg).unwrap();
    let mut crossings = Vec::new();
    for i in 1..series.len() {
        let (a, b) = (series.values[(i - 1, 0)], series.values[(i, 0)]);
        if a < 0.0 && b >= 0.0 {
            let frac = -a / (b - a);
            crossings.push(series.times[i - 1] + frac * (series.times[i] - series.times[i - 1]));
        }
    }
    // Skip the first few transient cycles.
    let times = &crossings[3..];
    let period = (times.last().unwrap() - times[0]) / (times.len() - 1) as f64;
    2.0 * std::f64::consts::PI / period
}

fn vdp_config(constraint: SpectralConstraint, max_epochs: usize, patience: usize) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: 1,
        name: None,
        dataset: DatasetSpec {
            generator: Some(GeneratorConfig {
                system: SystemKind::Vanderpol,
                params: BTreeMap::new(),
                t_end: 50.0,
                n_samples: 500,
                sampling: Sampling::Regular,
                noise_std: 0.0,
                rng_seed: 0,
                initial_state: None,
            }),
            csv_path: None,
        },
        true_frequencies: None,
        model: ModelSpec {
            kind: ModelKind::Koopman,
            koopman_dim: 2,
            hidden_sizes: vec![4],
            time_mode: TimeMode::Continuous,
        },
        constraint,
        training: TrainConfig {
            max_epochs,
            patience,
            ..TrainConfig::default()
        },
        n_seeds: 10,
        output_dir: None,
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "freq".into());
    match which.as_str() {
        "freq" => {
            let w = vdp_true_frequency();
            println!("vdp true angular frequency: {w:.12}");
        }
        "speed" => {
            // One seed, few epochs, to measure per-epoch cost.
            let config = vdp_config(SpectralConstraint::conservative(2), 20, 1000);
            let dir = std::env::temp_dir().join("koopcast_speed");
            let t0 = Instant::now();
            let report = cmd_train(&config, &dir, Some(1), 0).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            println!(
                "20 epochs in {dt:.2}s -> {:.1} ms/epoch; mse {:?}",
                dt / 20.0 * 1000.0,
                report.metrics.mse_mean
            );
        }
        "orderings" => {
            let w_true = vdp_true_frequency();
            println!("vdp true angular frequency: {w_true:.6}");
            let epochs: usize = std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(1000);
            let patience: usize = std::env::args()
                .nth(3)
                .and_then(|s| s.parse().ok())
                .unwrap_or(150);
            let seeds: usize = std::env::args()
                .nth(4)
                .and_then(|s| s.parse().ok())
                .unwrap_or(10);
            let dir = std::env::temp_dir().join("koopcast_orderings");

            let oursf = SpectralConstraint {
                decay: vec![ModeSpec::Fixed { value: 0.0 }],
                freq: vec![ModeSpec::Fixed { value: w_true }],
            };
            let ours = SpectralConstraint::conservative(2);
            let unconstrained = SpectralConstraint::all_free(2);

            for (label, constraint) in [
                ("OursF", oursf),
                ("Ours", ours),
                ("Unconstrained", unconstrained),
            ] {
                let t0 = Instant::now();
                let config = vdp_config(constraint, epochs, patience);
                let report = cmd_train(&config, &dir, Some(seeds), 0).unwrap();
                let mut mses = report.metrics.per_seed_mse.clone();
                mses.sort_by(|a, b| a.partial_cmp(b).unwrap());
                println!(
                    "{label:14} median {:.4} mean {:.4}+/-{:.4} ok {}/{} wall {:.0}s per-seed {:?}",
                    median(&mses),
                    report.metrics.mse_mean,
                    report.metrics.mse_stderr,
                    report.metrics.n_ok,
                    seeds,
                    t0.elapsed().as_secs_f64(),
                    mses.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
                );
            }
        }
        "backcast" => {
            let epochs: usize = std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(1000);
            let seeds: usize = std::env::args()
                .nth(3)
                .and_then(|s| s.parse().ok())
                .unwrap_or(10);
            let dir = std::env::temp_dir().join("koopcast_backcast");
            for (label, nu_start) in [("with backcast", -10i64), ("no backcast", 0i64)] {
                let mut config = vdp_config(SpectralConstraint::conservative(2), epochs, 150);
                config.training.nu_start = nu_start;
                let t0 = Instant::now();
                let report = cmd_train(&config, &dir, Some(seeds), 0).unwrap();
                let mut mses = report.metrics.per_seed_mse.clone();
                mses.sort_by(|a, b| a.partial_cmp(b).unwrap());
                println!(
                    "{label:14} median {:.4} mean {:.4} wall {:.0}s per-seed {:?}",
                    median(&mses),
                    report.metrics.mse_mean,
                    t0.elapsed().as_secs_f64(),
                    mses.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
                );
            }
        }
        "freqrec" => {
            // Criterion 7 shape: free-omega conservative model on the
            // noiseless linear oscillator; how close does omega get?
            let seeds: usize = std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(5);
            let mut config = vdp_config(SpectralConstraint::conservative(2), 1500, 200);
            config.dataset.generator = Some(GeneratorConfig {
                system: SystemKind::LinearTest,
                params: BTreeMap::from([("omega".to_string(), 1.0)]),
                t_end: 50.0,
                n_samples: 500,
                sampling: Sampling::Regular,
                noise_std: 0.0,
                rng_seed: 0,
                initial_state: None,
            });
            let dir = std::env::temp_dir().join("koopcast_freqrec");
            let t0 = Instant::now();
            let report = cmd_train(&config, &dir, Some(seeds), 0).unwrap();
            for o in &report.outcomes {
                println!(
                    "seed {} mse {:?} freq_mae {:?} spectrum {:?}",
                    o.seed, o.test_mse, o.frequency_mae, o.spectrum
                );
            }
            println!("wall {:.0}s", t0.elapsed().as_secs_f64());
        }
        "sweep" => {
            let w_true = vdp_true_frequency();
            let epochs: usize = std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(1000);
            let seeds: usize = std::env::args()
                .nth(3)
                .and_then(|s| s.parse().ok())
                .unwrap_or(10);
            let mut config = vdp_config(SpectralConstraint::conservative(2), epochs, 150);
            config.true_frequencies = Some(vec![w_true]);
            let dir = std::env::temp_dir().join("koopcast_sweep");
            let t0 = Instant::now();
            let report = koopcast::harness::cmd_sweep_range(
                &config,
                &[0.0, 0.01, 0.1, f64::INFINITY],
                &dir,
                Some(seeds),
                0,
            )
            .unwrap();
            for row in &report.rows {
                println!(
                    "width {:6} mean {:.4} +/- {:.4} median {:.4} ok {}",
                    row.width_label,
                    row.metrics.mse_mean,
                    row.metrics.mse_stderr,
                    row.metrics.mse_median,
                    row.metrics.n_ok
                );
            }
            println!("wall {:.0}s", t0.elapsed().as_secs_f64());
        }
        other => eprintln!("unknown scratch mode {other}"),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
