//! Synthetic benchmark generation via RK4 integration, irregular sampling,
//! noise injection, and CSV ingestion of external series.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Irregularly sampled measurement sequence: strictly increasing times and
/// an N x M value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Mat,
    pub name: String,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Mat, name: impl Into<String>) -> Result<Self> {
        let series = TimeSeries {
            times,
            values,
            name: name.into(),
        };
        series.validate()?;
        Ok(series)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.rows() {
            return Err(Error::DegenerateData(format!(
                "{} timestamps for {} rows",
                self.times.len(),
                self.values.rows()
            )));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::DegenerateData(format!(
                    "timestamps not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if !self.values.all_finite() || self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::DegenerateData("non-finite entries".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn measurement_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.values.row_slice(n)
    }

    /// Contiguous sub-series with original timestamps.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeries {
        let m = self.measurement_dim();
        let values = Mat::from_fn(end - start, m, |i, j| self.values[(start + i, j)]);
        TimeSeries {
            times: self.times[start..end].to_vec(),
            values,
            name: self.name.clone(),
        }
    }

    /// Per-dimension mean and standard deviation (population), with a small
    /// floor on the deviation so constant dimensions stay usable.
    pub fn mean_std(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let m = self.measurement_dim();
        let mut mean = vec![0.0; m];
        for i in 0..self.len() {
            for (j, mu) in mean.iter_mut().enumerate() {
                *mu += self.values[(i, j)];
            }
        }
        for mu in &mut mean {
            *mu /= n;
        }
        let mut std = vec![0.0; m];
        for i in 0..self.len() {
            for j in 0..m {
                let d = self.values[(i, j)] - mean[j];
                std[j] += d * d;
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-8 {
                *s = 1.0;
            }
        }
        (mean, std)
    }

    /// Smallest gap between consecutive timestamps.
    pub fn min_gap(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    Vanderpol,
    TwoFrequency,
    LinearTest,
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::Vanderpol => "vanderpol",
            SystemKind::TwoFrequency => "two_frequency",
            SystemKind::LinearTest => "linear_test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Regular,
    /// Regular grid with interior points perturbed by uniform jitter of up
    /// to `jitter` times the grid spacing, then sorted.
    Irregular { jitter: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub system: SystemKind,
    /// System-specific parameters; missing keys fall back to defaults.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub t_end: f64,
    pub n_samples: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
}

impl GeneratorConfig {
    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be >= 2".into()));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if let Sampling::Irregular { jitter } = self.sampling {
            if !(0.0..=0.9).contains(&jitter) {
                return Err(Error::Config(format!(
                    "jitter fraction {jitter} outside [0, 0.9]"
                )));
            }
        }
        Ok(())
    }

    /// True angular frequencies of the generator, where they are known in
    /// closed form (used for frequency-error metrics).
    pub fn known_frequencies(&self) -> Option<Vec<f64>> {
        match self.system {
            SystemKind::LinearTest => Some(vec![self.param("omega", 1.0)]),
            SystemKind::TwoFrequency => Some(vec![2.0]),
            _ => None,
        }
    }
}

/// Classical fourth-order Runge-Kutta update.
pub fn rk4_step(f: &dyn Fn(&[f64], f64) -> Vec<f64>, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("rk4 step must be positive, got {h}")));
    }
    let k1 = f(x, t);
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect();
    let k2 = f(&x2, t + 0.5 * h);
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect();
    let k3 = f(&x3, t + 0.5 * h);
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
    let k4 = f(&x4, t + h);
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration { t });
    }
    Ok(next)
}

struct System {
    field: Box<dyn Fn(&[f64], f64) -> Vec<f64>>,
    initial: Vec<f64>,
    dim: usize,
}

fn build_system(config: &GeneratorConfig) -> System {
    match config.system {
        SystemKind::Pendulum => {
            let g_over_l = config.param("g_over_l", 1.0);
            System {
                field: Box::new(move |x, _| vec![x[1], -g_over_l * x[0].sin()]),
                initial: vec![0.8 * std::f64::consts::PI, 0.0],
                dim: 2,
            }
        }
        SystemKind::Vanderpol | SystemKind::TwoFrequency => {
            let mu = config.param("mu", 1.0);
            System {
                field: Box::new(move |x, _| vec![x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0]]),
                initial: vec![2.0, 0.0],
                dim: 2,
            }
        }
        SystemKind::LinearTest => {
            // Exactly linear dx/dt = A x with spectrum r +/- i*omega.
            let r = config.param("r", 0.0);
            let omega = config.param("omega", 1.0);
            System {
                field: Box::new(move |x, _| {
                    vec![r * x[0] + omega * x[1], -omega * x[0] + r * x[1]]
                }),
                initial: vec![1.0, 0.0],
                dim: 2,
            }
        }
    }
}

fn sample_times(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = config.n_samples;
    let dt = config.t_end / (n - 1) as f64;
    let mut times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    if let Sampling::Irregular { jitter } = config.sampling {
        // Interior points only: keeps the span [0, t_end] and the initial
        // condition anchored at t = 0.
        for t in times.iter_mut().take(n - 1).skip(1) {
            let u: f64 = rng.gen_range(-1.0..1.0);
            *t += u * jitter * dt;
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::DegenerateData(
                    "jittered timestamps collided; choose a smaller jitter".into(),
                ));
            }
        }
    }
    Ok(times)
}

/// Integrate the configured system on a fine internal grid (step at most a
/// twentieth of the smallest sampling gap), sample at the requested times,
/// and add measurement noise.
pub fn generate(config: &GeneratorConfig) -> Result<TimeSeries> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let times = sample_times(config, &mut rng)?;
    let system = build_system(config);
    let mut state = match &config.initial_state {
        Some(x0) => {
            if x0.len() != system.dim {
                return Err(Error::Config(format!(
                    "initial state has {} entries, system {} needs {}",
                    x0.len(),
                    config.system.name(),
                    system.dim
                )));
            }
            x0.clone()
        }
        None => system.initial.clone(),
    };

    let min_gap = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let h_max = min_gap / 20.0;

    let mut values = Mat::zeros(times.len(), system.dim);
    let mut t_cur = times[0];
    for i in 0..times.len() {
        if i > 0 {
            let gap = times[i] - t_cur;
            let n_sub = (gap / h_max).ceil().max(1.0) as usize;
            let h = gap / n_sub as f64;
            for _ in 0..n_sub {
                state = rk4_step(&system.field, &state, t_cur, h)?;
                t_cur += h;
            }
            t_cur = times[i];
        }
        for j in 0..system.dim {
            values[(i, j)] = state[j];
        }
    }

    if config.system == SystemKind::TwoFrequency {
        let amplitude = config.param("amplitude", 1.0);
        for (i, &t) in times.iter().enumerate() {
            for j in 0..system.dim {
                values[(i, j)] += amplitude * (2.0 * t).sin();
            }
        }
    }

    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std)
            .map_err(|e| Error::Config(format!("bad noise configuration: {e}")))?;
        for i in 0..values.rows() {
            for j in 0..values.cols() {
                values[(i, j)] += normal.sample(&mut rng);
            }
        }
    }

    TimeSeries::new(times, values, config.system.name())
}

/// Write `t,y1,...,yM` rows with shortest round-trip decimal formatting.
pub fn save_csv(series: &TimeSeries, path: &Path) -> Result<()> {
    let m = series.measurement_dim();
    let mut out = String::from("t");
    for j in 1..=m {
        out.push_str(&format!(",y{j}"));
    }
    out.push('\n');
    for i in 0..series.len() {
        out.push_str(&format!("{}", series.times[i]));
        for j in 0..m {
            out.push_str(&format!(",{}", series.values[(i, j)]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a CSV written by [`save_csv`] (or user-supplied with the same
/// header). Rows may arrive unsorted; duplicate timestamps are rejected
/// with the offending line number.
pub fn load_csv(path: &Path) -> Result<TimeSeries> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.is_empty() || cols[0] != "t" || cols.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header 't,y1,...,yM', got '{header}'"),
        });
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("y{}", j + 1) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column 'y{}', got '{c}'", j + 1),
            });
        }
    }
    let m = cols.len() - 1;

    // (time, row values, 1-based source line).
    let mut rows: Vec<(f64, Vec<f64>, usize)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != m + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", m + 1, fields.len()),
            });
        }
        let mut parsed = Vec::with_capacity(m + 1);
        for f in &fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("not a number: '{f}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value: '{f}'"),
                });
            }
            parsed.push(v);
        }
        rows.push((parsed[0], parsed[1..].to_vec(), line_no));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in rows.windows(2) {
        if w[1].0 == w[0].0 {
            return Err(Error::Parse {
                line: w[1].2,
                msg: format!("duplicate timestamp {}", w[1].0),
            });
        }
    }
    let times: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let values = Mat::from_fn(rows.len(), m, |i, j| rows[i].1[j]);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    TimeSeries::new(times, values, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(system: SystemKind) -> GeneratorConfig {
        GeneratorConfig {
            system,
            params: BTreeMap::new(),
            t_end: 50.0,
            n_samples: 500,
            sampling: Sampling::Regular,
            noise_std: 0.0,
            rng_seed: 0,
            initial_state: None,
        }
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let f = |_: &[f64], _: f64| vec![0.0, 0.0];
        let x = rk4_step(&f, &[1.0, -2.0], 0.0, 0.5).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn rk4_exponential_decay_single_step() {
        let f = |x: &[f64], _: f64| vec![-x[0]];
        let x = rk4_step(&f, &[1.0], 0.0, 0.1).unwrap();
        // One RK4 step reproduces exp(-0.1) to O(h^5).
        assert!((x[0] - 0.9048375).abs() < 1e-9);
        assert!((x[0] - (-0.1_f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_harmonic_oscillator_period() {
        let f = |x: &[f64], _: f64| vec![x[1], -x[0]];
        let period = std::f64::consts::TAU;
        let n = (period / 0.01).round() as usize;
        let h = period / n as f64;
        let mut x = vec![1.0, 0.0];
        let mut t = 0.0;
        for _ in 0..n {
            x = rk4_step(&f, &x, t, h).unwrap();
            t += h;
        }
        assert!((x[0] - 1.0).abs() < 1e-6 && x[1].abs() < 1e-6);
    }

    #[test]
    fn rk4_global_error_is_fourth_order() {
        let f = |x: &[f64], _: f64| vec![-x[0]];
        let endpoint_error = |h: f64| {
            let n = (1.0 / h).round() as usize;
            let mut x = vec![1.0];
            let mut t = 0.0;
            for _ in 0..n {
                x = rk4_step(&f, &x, t, h).unwrap();
                t += h;
            }
            (x[0] - (-1.0_f64).exp()).abs()
        };
        let ratio = endpoint_error(0.02) / endpoint_error(0.01);
        assert!(
            (12.0..=20.0).contains(&ratio),
            "halving h changed error by {ratio}"
        );
    }

    #[test]
    fn pendulum_small_amplitude_period() {
        let mut cfg = config(SystemKind::Pendulum);
        cfg.t_end = 60.0;
        cfg.n_samples = 3000;
        cfg.initial_state = Some(vec![0.1, 0.0]);
        let series = generate(&cfg).unwrap();
        // Upward zero crossings of theta estimate the dominant period.
        let mut crossings = Vec::new();
        for i in 1..series.len() {
            let (a, b) = (series.values[(i - 1, 0)], series.values[(i, 0)]);
            if a < 0.0 && b >= 0.0 {
                // Linear interpolation of the crossing time.
                let frac = -a / (b - a);
                crossings
                    .push(series.times[i - 1] + frac * (series.times[i] - series.times[i - 1]));
            }
        }
        assert!(crossings.len() >= 3);
        let period =
            (crossings.last().unwrap() - crossings[0]) / (crossings.len() - 1) as f64;
        let expected = std::f64::consts::TAU; // small-angle: 2*pi/sqrt(g/l)
        assert!(
            (period - expected).abs() / expected < 0.01,
            "period {period} vs {expected}"
        );
    }

    #[test]
    fn irregular_sampling_gaps_positive_and_unequal() {
        let mut cfg = config(SystemKind::Pendulum);
        cfg.sampling = Sampling::Irregular { jitter: 0.3 };
        cfg.n_samples = 200;
        let series = generate(&cfg).unwrap();
        let gaps: Vec<f64> = series.times.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&g| g > 0.0));
        let distinct = gaps
            .windows(2)
            .filter(|w| (w[0] - w[1]).abs() > 1e-12)
            .count();
        assert!(distinct > gaps.len() / 2);
    }

    #[test]
    fn vanderpol_enters_bounded_band() {
        let series = generate(&config(SystemKind::Vanderpol)).unwrap();
        let n = series.len();
        let max_abs = |range: std::ops::Range<usize>| {
            range.fold(0.0_f64, |acc, i| {
                acc.max(series.values[(i, 0)].abs())
                    .max(series.values[(i, 1)].abs())
            })
        };
        let first = max_abs(0..n / 2);
        let last = max_abs(n / 2..n);
        assert!(last < 1.5 * first, "last-half max {last} vs first-half {first}");
    }

    #[test]
    fn two_frequency_adds_sine() {
        let base = generate(&config(SystemKind::Vanderpol)).unwrap();
        let two = generate(&config(SystemKind::TwoFrequency)).unwrap();
        for i in 0..base.len() {
            let s = (2.0 * base.times[i]).sin();
            for j in 0..2 {
                assert!((two.values[(i, j)] - base.values[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_test_matches_closed_form() {
        let mut cfg = config(SystemKind::LinearTest);
        cfg.params.insert("r".into(), -0.1);
        cfg.params.insert("omega".into(), 1.5);
        cfg.t_end = 10.0;
        cfg.n_samples = 100;
        let series = generate(&cfg).unwrap();
        for i in 0..series.len() {
            let t = series.times[i];
            let scale = (-0.1 * t).exp();
            let expect0 = scale * (1.5 * t).cos();
            let expect1 = -scale * (1.5 * t).sin();
            assert!((series.values[(i, 0)] - expect0).abs() < 1e-8);
            assert!((series.values[(i, 1)] - expect1).abs() < 1e-8);
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let mut cfg = config(SystemKind::Vanderpol);
        cfg.noise_std = 0.01;
        cfg.sampling = Sampling::Irregular { jitter: 0.5 };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.rng_seed = 1;
        let c = generate(&cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_series_satisfy_invariants() {
        for system in [
            SystemKind::Pendulum,
            SystemKind::Vanderpol,
            SystemKind::TwoFrequency,
            SystemKind::LinearTest,
        ] {
            let mut cfg = config(system);
            cfg.n_samples = 50;
            cfg.t_end = 5.0;
            cfg.noise_std = 0.05;
            cfg.sampling = Sampling::Irregular { jitter: 0.4 };
            let series = generate(&cfg).unwrap();
            series.validate().unwrap();
            assert_eq!(series.len(), 50);
            assert_eq!(series.measurement_dim(), 2);
        }
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(SystemKind::Pendulum);
        cfg.n_samples = 40;
        cfg.t_end = 4.0;
        cfg.noise_std = 0.3;
        let series = generate(&cfg).unwrap();
        let path = dir.path().join("series.csv");
        save_csv(&series, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(series.times, loaded.times);
        for (a, b) in series.values.data().iter().zip(loaded.values.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_duplicate_timestamp_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.csv");
        std::fs::write(&path, "t,y1\n0.0,1.0\n1.0,2.0\n1.0,3.0\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_shape_from_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.csv");
        std::fs::write(&path, "t,y1,y2\n0,1,2\n1,3,4\n2,5,6\n").unwrap();
        let series = load_csv(&path).unwrap();
        assert_eq!(series.len(), 3);
        assert_eq!(series.measurement_dim(), 2);
        assert_eq!(series.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_unsorted_rows_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unsorted.csv");
        std::fs::write(&path, "t,y1\n2.0,20.0\n0.0,0.0\n1.0,10.0\n").unwrap();
        let series = load_csv(&path).unwrap();
        assert_eq!(series.times, vec![0.0, 1.0, 2.0]);
        assert_eq!(series.values.column(0), vec![0.0, 10.0, 20.0]);
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,y1\n0.0,1.0\nnot_a_number,2.0\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
