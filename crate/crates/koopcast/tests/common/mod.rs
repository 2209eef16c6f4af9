//! Shared oracles for the acceptance suite. The complex-arithmetic
//! propagation reference and the complex solver here are deliberately
//! independent of the library's own linear algebra.

use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::Rng;

use koopcast::linalg::Mat;
use koopcast::spectral::{EigenBasis, KoopmanSpectrum};

/// Gaussian elimination with partial pivoting over complex numbers,
/// written from scratch for the oracle.
pub fn oracle_complex_solve(a: &[Vec<Complex64>], b: &[Complex64]) -> Vec<Complex64> {
    let n = b.len();
    let mut m: Vec<Vec<Complex64>> = a.to_vec();
    let mut x = b.to_vec();
    for k in 0..n {
        let pivot_row = (k..n)
            .max_by(|&i, &j| m[i][k].norm().partial_cmp(&m[j][k].norm()).unwrap())
            .unwrap();
        m.swap(k, pivot_row);
        x.swap(k, pivot_row);
        let pivot = m[k][k];
        assert!(pivot.norm() > 0.0, "oracle matrix singular");
        for i in (k + 1)..n {
            let factor = m[i][k] / pivot;
            for j in k..n {
                let sub = factor * m[k][j];
                m[i][j] -= sub;
            }
            let sub = factor * x[k];
            x[i] -= sub;
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= m[i][j] * x[j];
        }
        x[i] = s / m[i][i];
    }
    x
}

/// `Re(V exp(tau Lambda) V^{-1} g)` with V assembled from the conjugate
/// eigenvector pairs `u_k +/- i z_k` and `Lambda` from `r_k +/- i w_k`
/// (continuous time).
pub fn oracle_propagate(
    basis: &EigenBasis,
    spectrum: &KoopmanSpectrum,
    tau: f64,
    g: &[f64],
) -> Vec<f64> {
    let k = basis.koopman_dim();
    let mut v = vec![vec![Complex64::new(0.0, 0.0); k]; k];
    let mut factors = Vec::with_capacity(k);
    for pair in 0..spectrum.freqs.len() {
        for (i, row) in v.iter_mut().enumerate() {
            row[2 * pair] = Complex64::new(basis.u[(i, pair)], basis.z[(i, pair)]);
            row[2 * pair + 1] = Complex64::new(basis.u[(i, pair)], -basis.z[(i, pair)]);
        }
        let l = Complex64::new(spectrum.rates[pair], spectrum.freqs[pair]);
        factors.push((l * tau).exp());
        factors.push((l.conj() * tau).exp());
    }
    if k % 2 == 1 {
        for (i, row) in v.iter_mut().enumerate() {
            row[k - 1] = Complex64::new(basis.u[(i, basis.u.cols() - 1)], 0.0);
        }
        factors.push(Complex64::new(
            (spectrum.rates.last().unwrap() * tau).exp(),
            0.0,
        ));
    }
    let gc: Vec<Complex64> = g.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut coeffs = oracle_complex_solve(&v, &gc);
    for (c, f) in coeffs.iter_mut().zip(&factors) {
        *c *= f;
    }
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| v[i][j] * coeffs[j])
                .sum::<Complex64>()
                .re
        })
        .collect()
}

/// Random well-conditioned basis, spectrum, and embedding vector.
pub fn random_instance(rng: &mut StdRng, k: usize) -> (EigenBasis, KoopmanSpectrum, Vec<f64>) {
    let w_init = Mat::from_fn(k, k, |i, j| {
        let noise: f64 = rng.gen_range(-0.3..0.3);
        if i == j {
            1.0 + noise
        } else {
            noise
        }
    });
    let u = Mat::from_fn(k, k.div_ceil(2), |i, p| w_init[(i, 2 * p)]);
    let z = Mat::from_fn(k, k / 2, |i, p| w_init[(i, 2 * p + 1)]);
    let spectrum = KoopmanSpectrum {
        rates: (0..k.div_ceil(2))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
        freqs: (0..k / 2)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect(),
    };
    let g: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
    (EigenBasis { u, z }, spectrum, g)
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Path of a file in the workspace-level `configs/` directory.
pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}
