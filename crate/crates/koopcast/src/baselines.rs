//! Linear Koopman baselines: exact DMD (least-squares one-step operator in
//! measurement space) and DMDF (the constrained spectral model with frozen
//! identity encoder/decoder).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::linalg::{CMat, Mat};
use crate::model::{init_linear_identity_model, KoopmanModel};
use crate::spectral::{DynamicMode, SpectralConstraint, TimeMode};
use crate::training::{train, TrainAbort, TrainConfig, TrainHistory};

/// Relative gap deviation tolerated before a series stops counting as
/// regularly sampled.
const REGULARITY_TOL: f64 = 1e-6;

/// Singular values below this fraction of the largest are treated as zero
/// in the pseudoinverse.
const SV_CUTOFF: f64 = 1e-10;

/// Discrete one-step linear operator fitted at a reference step `dt`, with
/// its eigenvalues (stored as modulus/angle, conjugation-closed) and
/// eigenvectors.
///
/// Eigenvalues are ordered canonically: conjugate pairs first (positive
/// angle before negative, pairs sorted by modulus descending), then real
/// eigenvalues descending. `pair_count` pairs occupy the first
/// `2 * pair_count` slots.
#[derive(Debug, Clone)]
pub struct DmdModel {
    pub a: Mat,
    pub eig_modulus: Vec<f64>,
    pub eig_angle: Vec<f64>,
    pub eigenvectors: CMat,
    pub pair_count: usize,
    pub dt: f64,
}

impl DmdModel {
    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    /// One discrete step: `A y`.
    pub fn step(&self, y: &[f64]) -> Vec<f64> {
        self.a.matmul(&Mat::col(y)).data().to_vec()
    }

    pub fn eigenvalue(&self, i: usize) -> Complex64 {
        Complex64::from_polar(self.eig_modulus[i], self.eig_angle[i])
    }
}

fn check_regular(series: &TimeSeries) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::DegenerateData("series too short for DMD".into()));
    }
    let gaps: Vec<f64> = series.times.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    for g in &gaps {
        if (g - mean).abs() > REGULARITY_TOL * mean {
            return Err(Error::DegenerateData(format!(
                "DMD requires regular sampling: gap {g} deviates from mean {mean}"
            )));
        }
    }
    Ok(mean)
}

/// Least-squares fit of `A` minimizing `sum_n ||A y_n - y_{n+1}||^2` via a
/// pseudoinverse with singular-value cutoff, then eigendecomposition of the
/// fitted operator.
pub fn dmd_fit(series: &TimeSeries) -> Result<DmdModel> {
    let dt = check_regular(series)?;
    let n = series.len();
    let m = series.measurement_dim();
    if n < m + 1 {
        return Err(Error::DegenerateData(format!(
            "DMD needs at least M+1 = {} snapshots, got {n}",
            m + 1
        )));
    }
    // X holds snapshots 0..n-1, X' snapshots 1..n (columns).
    let x = nalgebra::DMatrix::from_fn(m, n - 1, |i, j| series.values[(j, i)]);
    let x_next = nalgebra::DMatrix::from_fn(m, n - 1, |i, j| series.values[(j + 1, i)]);
    let svd = x.svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    if sigma_max <= 0.0 {
        return Err(Error::Fit(
            "snapshot matrix is identically zero; nothing to fit".into(),
        ));
    }
    let pinv = svd
        .pseudo_inverse(SV_CUTOFF * sigma_max)
        .map_err(|e| Error::Fit(format!("pseudoinverse failed: {e}")))?;
    let a_na = x_next * pinv;
    let a = Mat::from_fn(m, m, |i, j| a_na[(i, j)]);
    let (eigs, eigenvectors, pair_count) = eig_decomp(&a)?;
    Ok(DmdModel {
        a,
        eig_modulus: eigs.iter().map(|l| l.norm()).collect(),
        eig_angle: eigs.iter().map(|l| l.arg()).collect(),
        eigenvectors,
        pair_count,
        dt,
    })
}

/// Map the discrete spectrum to continuous time on the principal branch:
/// `r = ln|mu| / dt`, `w = arg(mu) / dt`. Angles beyond pi alias onto the
/// principal branch and are reported as-is.
pub fn continuous_spectrum(model: &DmdModel) -> Result<Vec<(f64, f64)>> {
    model
        .eig_modulus
        .iter()
        .zip(&model.eig_angle)
        .map(|(&modulus, &angle)| {
            if modulus == 0.0 {
                return Err(Error::Domain(
                    "zero eigenvalue has no continuous-time counterpart".into(),
                ));
            }
            Ok((modulus.ln() / model.dt, angle / model.dt))
        })
        .collect()
}

/// Left eigenvector rows of the fitted operator in the same real pair
/// layout as the model's dynamic modes: a conjugate pair contributes
/// `2 Re(row)` and `-2 Im(row)`, a real eigenvalue contributes its real
/// row. Each mode carries its continuous-time `(r, w)`.
pub fn dmd_modes(model: &DmdModel) -> Result<Vec<DynamicMode>> {
    let m = model.dim();
    let spectrum = continuous_spectrum(model)?;
    // Rows of V^{-1}: column j of V^{-1} solves V x = e_j.
    let mut v_inv = CMat::zeros(m, m);
    for j in 0..m {
        let mut e = vec![Complex64::new(0.0, 0.0); m];
        e[j] = Complex64::new(1.0, 0.0);
        let col = model.eigenvectors.solve(&e)?;
        for i in 0..m {
            v_inv[(i, j)] = col[i];
        }
    }
    let mut modes = Vec::with_capacity(m);
    for idx in 0..m {
        let (r, w) = spectrum[idx];
        let row: Vec<Complex64> = (0..m).map(|j| v_inv[(idx, j)]).collect();
        if idx < 2 * model.pair_count {
            if idx % 2 == 0 {
                modes.push(DynamicMode {
                    rate: r,
                    frequency: w,
                    components: row.iter().map(|c| 2.0 * c.re).collect(),
                });
            } else {
                // Conjugate row: -2 Im of the positive-angle row equals
                // +2 Im of this one; w is already the signed angle.
                modes.push(DynamicMode {
                    rate: r,
                    frequency: w,
                    components: row.iter().map(|c| 2.0 * c.im).collect(),
                });
            }
        } else {
            modes.push(DynamicMode {
                rate: r,
                frequency: w,
                components: row.iter().map(|c| c.re).collect(),
            });
        }
    }
    Ok(modes)
}

/// DMD with decay/frequency constraints: the constrained spectral pipeline
/// with frozen identity encoder/decoder (K = M) and no standardization, so
/// only the basis and the free spectral entries train.
pub fn dmdf_fit(
    series: &TimeSeries,
    constraint: SpectralConstraint,
    config: &TrainConfig,
    rng_seed: u64,
) -> std::result::Result<(KoopmanModel, TrainHistory), Box<TrainAbort>> {
    let m = series.measurement_dim();
    let model = init_linear_identity_model(m, constraint, TimeMode::Continuous, rng_seed)
        .map_err(|error| {
            Box::new(TrainAbort {
                error,
                history: TrainHistory::default(),
            })
        })?;
    let config = TrainConfig {
        standardize: false,
        ..config.clone()
    };
    train(model, series, &config)
}

/// Eigendecomposition of a small real matrix: eigenvalues from the real
/// Schur form, eigenvectors recovered by shifted inverse iteration with the
/// complex solver. Returns eigenvalues in canonical conjugate order, the
/// eigenvector matrix (columns aligned with the eigenvalues), and the
/// number of conjugate pairs.
pub(crate) fn eig_decomp(a: &Mat) -> Result<(Vec<Complex64>, CMat, usize)> {
    let m = a.rows();
    let na = nalgebra::DMatrix::from_fn(m, m, |i, j| a[(i, j)]);
    let raw: Vec<Complex64> = na.complex_eigenvalues().iter().copied().collect();
    let scale = a.max_abs().max(1e-300);
    let im_tol = 1e-9 * scale;

    let mut positive: Vec<Complex64> = raw.iter().filter(|l| l.im > im_tol).copied().collect();
    let mut reals: Vec<f64> = raw
        .iter()
        .filter(|l| l.im.abs() <= im_tol)
        .map(|l| l.re)
        .collect();
    if positive.len() * 2 + reals.len() != m {
        return Err(Error::Fit(
            "complex eigenvalues could not be grouped into conjugate pairs".into(),
        ));
    }
    positive.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap()
            .then(a.arg().partial_cmp(&b.arg()).unwrap())
    });
    reals.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut ordered = Vec::with_capacity(m);
    for l in &positive {
        ordered.push(*l);
        ordered.push(l.conj());
    }
    for r in &reals {
        ordered.push(Complex64::new(*r, 0.0));
    }

    let mut vectors = CMat::zeros(m, m);
    let mut col = 0;
    for (idx, l) in positive.iter().enumerate() {
        let v = inverse_iteration(a, *l, idx as u64)?;
        for i in 0..m {
            vectors[(i, col)] = v[i];
            vectors[(i, col + 1)] = v[i].conj();
        }
        col += 2;
    }
    for (idx, r) in reals.iter().enumerate() {
        let v = inverse_iteration(a, Complex64::new(*r, 0.0), (positive.len() + idx) as u64)?;
        for i in 0..m {
            vectors[(i, col)] = v[i];
        }
        col += 1;
    }
    Ok((ordered, vectors, positive.len()))
}

/// Shifted inverse iteration: repeatedly solve `(A - shift I) w = v` and
/// normalize until `||A v - lambda v||` falls below the convergence
/// threshold. The shift is perturbed off the eigenvalue (and retried with
/// larger offsets if the solve is too singular); `salt` decorrelates the
/// start vectors of repeated eigenvalues.
fn inverse_iteration(a: &Mat, lambda: Complex64, salt: u64) -> Result<Vec<Complex64>> {
    let m = a.rows();
    let scale = a.max_abs().max(1.0);
    let threshold = 1e-10 * scale;

    'attempts: for attempt in 0..5u32 {
        let eps = scale * 1e-8 * 10f64.powi(attempt as i32);
        let shift = lambda + Complex64::new(eps, 0.5 * eps);
        let b = CMat::from_fn(m, m, |i, j| {
            let base = Complex64::new(a[(i, j)], 0.0);
            if i == j {
                base - shift
            } else {
                base
            }
        });
        // Deterministic pseudo-random start vector.
        let mut state = salt
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(attempt as u64 + 1)
            | 1;
        let mut rand = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut v: Vec<Complex64> = (0..m).map(|_| Complex64::new(rand(), rand())).collect();
        normalize(&mut v);

        for _ in 0..100 {
            let w = match b.solve(&v) {
                Ok(w) => w,
                Err(_) => continue 'attempts,
            };
            v = w;
            normalize(&mut v);
            // Residual ||A v - lambda v||_inf.
            let mut residual = 0.0_f64;
            for i in 0..m {
                let mut av = Complex64::new(0.0, 0.0);
                for j in 0..m {
                    av += Complex64::new(a[(i, j)], 0.0) * v[j];
                }
                residual = residual.max((av - lambda * v[i]).norm());
            }
            if residual <= threshold {
                // Canonical phase: the largest-modulus entry becomes real
                // positive.
                let pivot = v
                    .iter()
                    .copied()
                    .max_by(|x, y| x.norm().partial_cmp(&y.norm()).unwrap())
                    .unwrap();
                for x in &mut v {
                    *x /= pivot;
                }
                normalize(&mut v);
                return Ok(v);
            }
        }
    }
    Err(Error::Fit(format!(
        "eigenvector iteration did not converge for eigenvalue {lambda}"
    )))
}

fn normalize(v: &mut [Complex64]) {
    let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DmdCheckpoint {
    schema_version: u32,
    dim: usize,
    a: Vec<f64>,
    dt: f64,
    eig_modulus: Vec<f64>,
    eig_angle: Vec<f64>,
}

impl DmdModel {
    pub fn to_checkpoint(&self) -> DmdCheckpoint {
        DmdCheckpoint {
            schema_version: crate::model::CHECKPOINT_SCHEMA_VERSION,
            dim: self.dim(),
            a: self.a.data().to_vec(),
            dt: self.dt,
            eig_modulus: self.eig_modulus.clone(),
            eig_angle: self.eig_angle.clone(),
        }
    }

    /// Rebuild from a checkpoint; the eigendecomposition is recomputed from
    /// the stored operator (deterministically).
    pub fn from_checkpoint(ckpt: &DmdCheckpoint) -> Result<DmdModel> {
        let a = Mat::from_vec(ckpt.dim, ckpt.dim, ckpt.a.clone());
        let (eigs, eigenvectors, pair_count) = eig_decomp(&a)?;
        Ok(DmdModel {
            a,
            eig_modulus: eigs.iter().map(|l| l.norm()).collect(),
            eig_angle: eigs.iter().map(|l| l.arg()).collect(),
            eigenvectors,
            pair_count,
            dt: ckpt.dt,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<DmdModel> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: DmdCheckpoint = serde_json::from_str(&text)?;
        DmdModel::from_checkpoint(&ckpt)
    }
}
