//! Eigen-structured Koopman operator: constrained eigenvalue
//! parameterization, real-block analytic propagation for continuous and
//! discrete time, and dynamic-mode extraction.
//!
//! Complex conjugate eigenvalue pairs `r_k +/- i w_k` with conjugate
//! eigenvector pairs `u_k +/- i z_k` are realized entirely in real
//! arithmetic: the assembled basis W interleaves `[u_1, z_1, u_2, z_2, ...]`
//! and the propagator becomes block-diagonal with 2x2 rotation-scaling
//! blocks `exp(tau r) [[cos(tau w), sin(tau w)], [-sin(tau w), cos(tau w)]]`
//! (for odd K a trailing 1x1 block `exp(tau r)` covers the obligatory real
//! eigenvalue). The block sign convention is validated against an explicit
//! complex-arithmetic oracle in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Var};
use crate::linalg::{lu_factor, Mat};

/// How one decay rate or frequency is produced from (at most) one raw
/// trainable scalar. All transforms are total and keep their constraint by
/// construction, so constrained entries can never drift during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeSpec {
    /// Pinned to a known value; never a parameter.
    Fixed { value: f64 },
    /// Unconstrained trainable value (identity transform).
    Free { init: f64 },
    /// `-exp(raw)`: always negative (damped dynamics).
    ForcedNegative { init: f64 },
    /// `exp(raw)`: always positive (diverging dynamics).
    ForcedPositive { init: f64 },
    /// `start + (end - start) * sigmoid(raw)`: always strictly inside the
    /// interval.
    Range { start: f64, end: f64, init: f64 },
}

impl ModeSpec {
    pub fn is_fixed(&self) -> bool {
        matches!(self, ModeSpec::Fixed { .. })
    }

    /// Initial raw parameter value, or `None` for `Fixed`.
    pub fn raw_init(&self) -> Option<f64> {
        match self {
            ModeSpec::Fixed { .. } => None,
            ModeSpec::Free { init }
            | ModeSpec::ForcedNegative { init }
            | ModeSpec::ForcedPositive { init }
            | ModeSpec::Range { init, .. } => Some(*init),
        }
    }
}

/// Per-mode declaration of how each decay rate and frequency is fixed,
/// free, sign-constrained, or range-constrained.
///
/// For Koopman dimension K there are `ceil(K/2)` decay specs and
/// `floor(K/2)` frequency specs; when K is odd the trailing decay spec
/// belongs to the obligatory real eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstraint {
    pub decay: Vec<ModeSpec>,
    pub freq: Vec<ModeSpec>,
}

impl SpectralConstraint {
    /// Validate counts and value domains for Koopman dimension `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.decay.len() != k.div_ceil(2) || self.freq.len() != k / 2 {
            return Err(Error::Config(format!(
                "constraint sized for K={}: need {} decay and {} frequency specs, got {} and {}",
                k,
                k.div_ceil(2),
                k / 2,
                self.decay.len(),
                self.freq.len()
            )));
        }
        for spec in self.decay.iter().chain(self.freq.iter()) {
            if let ModeSpec::Range { start, end, .. } = spec {
                if start >= end {
                    return Err(Error::Config(format!(
                        "range constraint requires start < end, got [{start}, {end}]"
                    )));
                }
            }
        }
        for spec in &self.freq {
            if let ModeSpec::Fixed { value } = spec {
                if !(0.0..std::f64::consts::TAU).contains(value) {
                    return Err(Error::Config(format!(
                        "fixed frequency {value} outside [0, 2*pi)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn koopman_dim(&self) -> usize {
        self.decay.len() + self.freq.len()
    }

    /// All specs in staging order: decay specs first, then frequency specs.
    pub fn all_specs(&self) -> impl Iterator<Item = &ModeSpec> {
        self.decay.iter().chain(self.freq.iter())
    }

    /// Number of raw trainable scalars (non-fixed specs).
    pub fn num_free(&self) -> usize {
        self.all_specs().filter(|s| !s.is_fixed()).count()
    }

    /// A fully unconstrained spectrum for dimension `k` (all entries free,
    /// raw init zero).
    pub fn all_free(k: usize) -> Self {
        SpectralConstraint {
            decay: vec![ModeSpec::Free { init: 0.0 }; k.div_ceil(2)],
            freq: vec![ModeSpec::Free { init: 0.0 }; k / 2],
        }
    }

    /// Conservation setting: every decay rate fixed to zero, frequencies
    /// free.
    pub fn conservative(k: usize) -> Self {
        SpectralConstraint {
            decay: vec![ModeSpec::Fixed { value: 0.0 }; k.div_ceil(2)],
            freq: vec![ModeSpec::Free { init: 0.0 }; k / 2],
        }
    }
}

/// Whether eigenvalues are interpreted as continuous-time exponents or
/// discrete-time multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    #[default]
    Continuous,
    Discrete,
}

/// Realized spectrum values. In continuous mode `rates` are the real parts
/// of the eigenvalues; in discrete mode they are the moduli.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanSpectrum {
    pub rates: Vec<f64>,
    pub freqs: Vec<f64>,
}

impl KoopmanSpectrum {
    pub fn koopman_dim(&self) -> usize {
        self.rates.len() + self.freqs.len()
    }
}

/// Real eigenbasis: `u` columns are the real parts of eigenvectors,
/// `z` columns the imaginary parts (K x ceil(K/2) and K x floor(K/2)).
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    pub u: Mat,
    pub z: Mat,
}

impl EigenBasis {
    pub fn koopman_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.u.rows();
        if self.z.rows() != k || self.u.cols() != k.div_ceil(2) || self.z.cols() != k / 2 {
            return Err(Error::Config(format!(
                "eigenbasis dimensions inconsistent: U {} Z {} for K={}",
                self.u.shape_string(),
                self.z.shape_string(),
                k
            )));
        }
        Ok(())
    }

    /// Interleave columns as `[u_1, z_1, u_2, z_2, ...]`; for odd K the
    /// final column is the last `u` alone.
    pub fn assemble(&self) -> Mat {
        let k = self.koopman_dim();
        let mut w = Mat::zeros(k, k);
        for i in 0..k {
            for p in 0..self.u.cols() {
                w[(i, 2 * p)] = self.u[(i, p)];
            }
            for p in 0..self.z.cols() {
                w[(i, 2 * p + 1)] = self.z[(i, p)];
            }
        }
        w
    }
}

/// Realized spectrum as tape nodes: one scalar node per decay rate and
/// frequency, differentiable with respect to the raw parameters.
#[derive(Debug, Clone)]
pub struct SpectrumVars {
    pub rates: Vec<Var>,
    pub freqs: Vec<Var>,
}

impl SpectrumVars {
    pub fn num_pairs(&self) -> usize {
        self.freqs.len()
    }

    pub fn has_trailing_real(&self) -> bool {
        self.rates.len() > self.freqs.len()
    }

    pub fn koopman_dim(&self) -> usize {
        self.rates.len() + self.freqs.len()
    }

    pub fn values(&self, tape: &Tape) -> KoopmanSpectrum {
        KoopmanSpectrum {
            rates: self
                .rates
                .iter()
                .map(|v| tape.value(*v).as_scalar())
                .collect(),
            freqs: self
                .freqs
                .iter()
                .map(|v| tape.value(*v).as_scalar())
                .collect(),
        }
    }
}

/// Apply each spec's transform to its raw parameter node. `raw_params`
/// holds one scalar node per non-fixed spec, in declaration order (decay
/// specs then frequency specs).
pub fn realize_spectrum(
    tape: &mut Tape,
    constraint: &SpectralConstraint,
    raw_params: &[Var],
) -> Result<SpectrumVars> {
    if raw_params.len() != constraint.num_free() {
        return Err(Error::Config(format!(
            "expected {} raw spectral parameters, got {}",
            constraint.num_free(),
            raw_params.len()
        )));
    }
    let mut raw_iter = raw_params.iter();
    let mut realize_one = |tape: &mut Tape, spec: &ModeSpec| -> Result<Var> {
        Ok(match spec {
            ModeSpec::Fixed { value } => tape.constant_scalar(*value),
            ModeSpec::Free { .. } => *raw_iter.next().expect("raw param count checked"),
            ModeSpec::ForcedNegative { .. } => {
                let raw = *raw_iter.next().expect("raw param count checked");
                let e = tape.exp(raw)?;
                let neg1 = tape.constant_scalar(-1.0);
                tape.mul(neg1, e)?
            }
            ModeSpec::ForcedPositive { .. } => {
                let raw = *raw_iter.next().expect("raw param count checked");
                tape.exp(raw)?
            }
            ModeSpec::Range { start, end, .. } => {
                let raw = *raw_iter.next().expect("raw param count checked");
                let s = tape.sigmoid(raw)?;
                let width = tape.constant_scalar(end - start);
                let scaled = tape.mul(width, s)?;
                let base = tape.constant_scalar(*start);
                tape.add(base, scaled)?
            }
        })
    };
    let mut rates = Vec::with_capacity(constraint.decay.len());
    for spec in &constraint.decay {
        rates.push(realize_one(tape, spec)?);
    }
    let mut freqs = Vec::with_capacity(constraint.freq.len());
    for spec in &constraint.freq {
        freqs.push(realize_one(tape, spec)?);
    }
    Ok(SpectrumVars { rates, freqs })
}

/// Plain (non-differentiable) realization of the spectrum from raw values.
pub fn realize_spectrum_values(
    constraint: &SpectralConstraint,
    raw_params: &[f64],
) -> Result<KoopmanSpectrum> {
    let mut tape = Tape::new();
    let raw_vars: Vec<Var> = raw_params
        .iter()
        .map(|&x| tape.constant_scalar(x))
        .collect();
    let sv = realize_spectrum(&mut tape, constraint, &raw_vars)?;
    Ok(sv.values(&tape))
}

/// Assemble the real basis W on the tape from U and Z nodes by multiplying
/// with constant column-selection matrices, which keeps entry placement
/// exact and differentiable.
pub fn assemble_basis(tape: &mut Tape, u: Var, z: Var) -> Result<Var> {
    let k = tape.value(u).rows();
    let (n_u, n_z) = (tape.value(u).cols(), tape.value(z).cols());
    if tape.value(z).rows() != k || n_u != k.div_ceil(2) || n_z != k / 2 {
        return Err(Error::ShapeMismatch {
            op: "assemble_basis",
            lhs: tape.value(u).shape_string(),
            rhs: tape.value(z).shape_string(),
        });
    }
    let select_u = Mat::from_fn(n_u, k, |p, j| if j == 2 * p { 1.0 } else { 0.0 });
    let select_z = Mat::from_fn(n_z, k, |p, j| if j == 2 * p + 1 { 1.0 } else { 0.0 });
    let su = tape.constant(select_u);
    let sz = tape.constant(select_z);
    let wu = tape.matmul(u, su)?;
    let wz = tape.matmul(z, sz)?;
    tape.add(wu, wz)
}

/// Constant mask with ones on the pair's diagonal positions.
fn pair_diag_mask(k: usize, pair: usize) -> Mat {
    let mut m = Mat::zeros(k, k);
    m[(2 * pair, 2 * pair)] = 1.0;
    m[(2 * pair + 1, 2 * pair + 1)] = 1.0;
    m
}

/// Constant mask with the pair's rotation off-diagonal signs.
fn pair_rot_mask(k: usize, pair: usize) -> Mat {
    let mut m = Mat::zeros(k, k);
    m[(2 * pair, 2 * pair + 1)] = 1.0;
    m[(2 * pair + 1, 2 * pair)] = -1.0;
    m
}

/// `r^tau` as a tape node. Integer exponents use repeated squaring (valid
/// for any sign of r); non-integer exponents require r > 0 and use
/// `exp(tau ln r)` so the cost stays constant in tau.
fn power_node(tape: &mut Tape, base: Var, tau: f64) -> Result<Var> {
    if tau.fract() == 0.0 && tau.abs() <= 1e6 {
        let mut n = tau.abs() as u64;
        if n == 0 {
            return Ok(tape.constant_scalar(1.0));
        }
        let mut result: Option<Var> = None;
        let mut sq = base;
        loop {
            if n & 1 == 1 {
                result = Some(match result {
                    None => sq,
                    Some(acc) => tape.mul(acc, sq)?,
                });
            }
            n >>= 1;
            if n == 0 {
                break;
            }
            sq = tape.mul(sq, sq)?;
        }
        let pow = result.expect("n > 0");
        if tau < 0.0 {
            tape.reciprocal(pow)
        } else {
            Ok(pow)
        }
    } else {
        if tape.value(base).as_scalar() <= 0.0 {
            return Err(Error::Domain(format!(
                "discrete propagation with non-integer tau={tau} requires positive modulus, got {}",
                tape.value(base).as_scalar()
            )));
        }
        let ln_r = tape.ln(base)?;
        let tau_c = tape.constant_scalar(tau);
        let exponent = tape.mul(tau_c, ln_r)?;
        tape.exp(exponent)
    }
}

fn block_matrix(
    tape: &mut Tape,
    spectrum: &SpectrumVars,
    tau: f64,
    mode: TimeMode,
) -> Result<Var> {
    let k = spectrum.koopman_dim();
    let tau_c = tape.constant_scalar(tau);
    let mut acc: Option<Var> = None;
    let push = |tape: &mut Tape, term: Var, acc: &mut Option<Var>| -> Result<()> {
        *acc = Some(match acc.take() {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
        Ok(())
    };
    for pair in 0..spectrum.num_pairs() {
        let scale = match mode {
            TimeMode::Continuous => {
                let tr = tape.mul(spectrum.rates[pair], tau_c)?;
                tape.exp(tr)?
            }
            TimeMode::Discrete => power_node(tape, spectrum.rates[pair], tau)?,
        };
        let tw = tape.mul(spectrum.freqs[pair], tau_c)?;
        let c = tape.cos(tw)?;
        let s = tape.sin(tw)?;
        let sc = tape.mul(scale, c)?;
        let ss = tape.mul(scale, s)?;
        let diag = tape.constant(pair_diag_mask(k, pair));
        let rot = tape.constant(pair_rot_mask(k, pair));
        let td = tape.mul(sc, diag)?;
        let tr = tape.mul(ss, rot)?;
        push(tape, td, &mut acc)?;
        push(tape, tr, &mut acc)?;
    }
    if spectrum.has_trailing_real() {
        let last = *spectrum.rates.last().expect("trailing rate");
        let scale = match mode {
            TimeMode::Continuous => {
                let tr = tape.mul(last, tau_c)?;
                tape.exp(tr)?
            }
            TimeMode::Discrete => power_node(tape, last, tau)?,
        };
        let mut mask = Mat::zeros(k, k);
        mask[(k - 1, k - 1)] = 1.0;
        let mask = tape.constant(mask);
        let term = tape.mul(scale, mask)?;
        push(tape, term, &mut acc)?;
    }
    acc.ok_or_else(|| Error::Config("empty spectrum".into()))
}

/// Continuous-time block propagator `exp(tau * Lambda)` realized as a real
/// K x K block-diagonal matrix node.
pub fn block_exponential(tape: &mut Tape, spectrum: &SpectrumVars, tau: f64) -> Result<Var> {
    block_matrix(tape, spectrum, tau, TimeMode::Continuous)
}

/// Discrete-time block propagator `Lambda^tau` (modulus/angle form).
pub fn discrete_block(tape: &mut Tape, spectrum: &SpectrumVars, tau: f64) -> Result<Var> {
    block_matrix(tape, spectrum, tau, TimeMode::Discrete)
}

/// Propagate a Koopman embedding by time `tau`:
/// `W * block(tau) * W^{-1} g`, evaluated as a linear solve followed by two
/// matrix-vector products. Cost is independent of `tau`.
pub fn propagate(
    tape: &mut Tape,
    basis: Var,
    spectrum: &SpectrumVars,
    tau: f64,
    g: Var,
    mode: TimeMode,
) -> Result<Var> {
    let h = tape.solve_linear(basis, g)?;
    propagate_solved(tape, basis, h, spectrum, tau, mode)
}

/// Propagate with the basis coordinates `h = W^{-1} g` already computed
/// (reused across many forecast horizons from the same anchor point).
pub fn propagate_solved(
    tape: &mut Tape,
    basis: Var,
    solved: Var,
    spectrum: &SpectrumVars,
    tau: f64,
    mode: TimeMode,
) -> Result<Var> {
    let block = block_matrix(tape, spectrum, tau, mode)?;
    let rotated = tape.matvec(block, solved)?;
    tape.matvec(basis, rotated)
}

/// Plain-value propagation for evaluation paths.
pub fn propagate_values(
    basis: &Mat,
    spectrum: &KoopmanSpectrum,
    tau: f64,
    g: &[f64],
    mode: TimeMode,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = tape.constant(basis.clone());
    let gv = tape.constant(Mat::col(g));
    let rates: Vec<Var> = spectrum
        .rates
        .iter()
        .map(|&r| tape.constant_scalar(r))
        .collect();
    let freqs: Vec<Var> = spectrum
        .freqs
        .iter()
        .map(|&w| tape.constant_scalar(w))
        .collect();
    let sv = SpectrumVars { rates, freqs };
    let out = propagate(&mut tape, w, &sv, tau, gv, mode)?;
    Ok(tape.value(out).data().to_vec())
}

/// The K x K propagator matrix `W block(tau) W^{-1}` as plain values.
pub fn propagator_matrix(
    basis: &Mat,
    spectrum: &KoopmanSpectrum,
    tau: f64,
    mode: TimeMode,
) -> Result<Mat> {
    let k = basis.rows();
    let mut out = Mat::zeros(k, k);
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        let col = propagate_values(basis, spectrum, tau, &e, mode)?;
        for i in 0..k {
            out[(i, j)] = col[i];
        }
    }
    Ok(out)
}

/// One dynamic mode: a decoded left-eigenvector row with its associated
/// decay rate and frequency.
#[derive(Debug, Clone)]
pub struct DynamicMode {
    pub rate: f64,
    pub frequency: f64,
    pub components: Vec<f64>,
}

/// Decode each row of `W^{-1}` through the decoder; one mode per Koopman
/// coordinate. Rows `2k, 2k+1` carry the pair's `(r_k, w_k)`; the odd
/// trailing row carries the real eigenvalue with frequency zero.
pub fn dynamic_modes(
    basis: &EigenBasis,
    spectrum: &KoopmanSpectrum,
    mut decode: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<DynamicMode>> {
    basis.validate()?;
    let k = basis.koopman_dim();
    let w = basis.assemble();
    let w_inv = lu_factor(&w)?.inverse();
    let mut modes = Vec::with_capacity(k);
    for row in 0..k {
        let coords = w_inv.row_slice(row);
        let components = decode(coords)?;
        let (rate, frequency) = if row / 2 < spectrum.freqs.len() {
            (spectrum.rates[row / 2], spectrum.freqs[row / 2])
        } else {
            (*spectrum.rates.last().expect("trailing rate"), 0.0)
        };
        modes.push(DynamicMode {
            rate,
            frequency,
            components,
        });
    }
    Ok(modes)
}
