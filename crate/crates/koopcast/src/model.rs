//! The end-to-end forecaster: encoder MLP, eigen-structured propagation,
//! decoder MLP.
//!
//! `forecast(y, tau) = decode(propagate(tau, encode(y)))`: measurements are
//! standardized with training-split statistics, embedded into the Koopman
//! space by the encoder, evolved analytically by the constrained spectrum,
//! decoded, and de-standardized. The same model forecasts (`tau > 0`),
//! backcasts (`tau < 0`), and auto-reconstructs (`tau = 0`).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ParamId, ParamStore, Tape, Var};
use crate::linalg::Mat;
use crate::spectral::{
    assemble_basis, propagate_solved, realize_spectrum, realize_spectrum_values, EigenBasis,
    KoopmanSpectrum, SpectralConstraint, SpectrumVars, TimeMode,
};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Feed-forward network with tanh hidden activations and a linear output
/// layer. Holds parameter handles; values live in the model's store.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    /// Layer widths including input and output.
    pub dims: Vec<usize>,
}

impl Mlp {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Mat::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-s..=s));
            weights.push(store.add(format!("{prefix}.w{l}"), w, true));
            biases.push(store.add(format!("{prefix}.b{l}"), Mat::zeros(fan_out, 1), true));
        }
        Mlp {
            weights,
            biases,
            dims: dims.to_vec(),
        }
    }

    /// Frozen identity map (single linear layer, no bias contribution).
    fn identity(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let w = store.add(format!("{prefix}.w0"), Mat::identity(dim), false);
        let b = store.add(format!("{prefix}.b0"), Mat::zeros(dim, 1), false);
        Mlp {
            weights: vec![w],
            biases: vec![b],
            dims: vec![dim, dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }
}

/// Staged MLP: parameter nodes on a tape, ready for forward passes.
#[derive(Debug, Clone)]
struct StagedMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl StagedMlp {
    fn forward(&self, tape: &mut Tape, mut h: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let z = tape.matvec(self.weights[l], h)?;
            let z = tape.add(z, self.biases[l])?;
            h = if l < last { tape.tanh(z)? } else { z };
        }
        Ok(h)
    }
}

/// The full model: encoder, decoder, constrained spectrum, eigenbasis,
/// input standardization, and the parameter store that owns every value.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub measurement_dim: usize,
    pub koopman_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub constraint: SpectralConstraint,
    pub raw_spectral: Vec<ParamId>,
    pub basis_u: ParamId,
    pub basis_z: ParamId,
    pub time_mode: TimeMode,
    /// Per-dimension standardization applied before encode, inverted after
    /// decode. Identity (0, 1) until training sets it.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub params: ParamStore,
}

/// Initialize a model: Glorot-uniform MLP weights, basis `I + U(-0.1, 0.1)`
/// noise, raw spectral parameters at their declared inits.
pub fn init_model(
    measurement_dim: usize,
    koopman_dim: usize,
    hidden_sizes: &[usize],
    constraint: SpectralConstraint,
    time_mode: TimeMode,
    rng_seed: u64,
) -> Result<KoopmanModel> {
    if koopman_dim < 1 {
        return Err(Error::Config("koopman dimension must be >= 1".into()));
    }
    if hidden_sizes.iter().any(|&h| h == 0) {
        return Err(Error::Config("hidden sizes must be positive".into()));
    }
    constraint.validate(koopman_dim)?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut store = ParamStore::new();

    let mut enc_dims = vec![measurement_dim];
    enc_dims.extend_from_slice(hidden_sizes);
    enc_dims.push(koopman_dim);
    let encoder = Mlp::init(&mut store, "enc", &enc_dims, &mut rng);

    let mut dec_dims = vec![koopman_dim];
    dec_dims.extend_from_slice(hidden_sizes);
    dec_dims.push(measurement_dim);
    let decoder = Mlp::init(&mut store, "dec", &dec_dims, &mut rng);

    let raw_spectral = constraint
        .all_specs()
        .filter_map(|s| s.raw_init())
        .enumerate()
        .map(|(i, init)| store.add(format!("spec.raw{i}"), Mat::scalar(init), true))
        .collect();

    let k = koopman_dim;
    let w_init = Mat::from_fn(k, k, |i, j| {
        let noise: f64 = rng.gen_range(-0.1..=0.1);
        if i == j {
            1.0 + noise
        } else {
            noise
        }
    });
    let u = Mat::from_fn(k, k.div_ceil(2), |i, p| w_init[(i, 2 * p)]);
    let z = Mat::from_fn(k, k / 2, |i, p| w_init[(i, 2 * p + 1)]);
    let basis_u = store.add("basis.u", u, true);
    let basis_z = store.add("basis.z", z, true);

    Ok(KoopmanModel {
        measurement_dim,
        koopman_dim,
        hidden_sizes: hidden_sizes.to_vec(),
        encoder,
        decoder,
        constraint,
        raw_spectral,
        basis_u,
        basis_z,
        time_mode,
        norm_mean: vec![0.0; measurement_dim],
        norm_std: vec![1.0; measurement_dim],
        params: store,
    })
}

/// DMDF-style linear model: frozen identity encoder/decoder (K = M), no
/// standardization; only the basis and free spectral entries train.
pub fn init_linear_identity_model(
    dim: usize,
    constraint: SpectralConstraint,
    time_mode: TimeMode,
    rng_seed: u64,
) -> Result<KoopmanModel> {
    constraint.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut store = ParamStore::new();
    let encoder = Mlp::identity(&mut store, "enc", dim);
    let decoder = Mlp::identity(&mut store, "dec", dim);
    let raw_spectral = constraint
        .all_specs()
        .filter_map(|s| s.raw_init())
        .enumerate()
        .map(|(i, init)| store.add(format!("spec.raw{i}"), Mat::scalar(init), true))
        .collect();
    let w_init = Mat::from_fn(dim, dim, |i, j| {
        let noise: f64 = rng.gen_range(-0.1..=0.1);
        if i == j {
            1.0 + noise
        } else {
            noise
        }
    });
    let u = Mat::from_fn(dim, dim.div_ceil(2), |i, p| w_init[(i, 2 * p)]);
    let z = Mat::from_fn(dim, dim / 2, |i, p| w_init[(i, 2 * p + 1)]);
    let basis_u = store.add("basis.u", u, true);
    let basis_z = store.add("basis.z", z, true);
    Ok(KoopmanModel {
        measurement_dim: dim,
        koopman_dim: dim,
        hidden_sizes: vec![],
        encoder,
        decoder,
        constraint,
        raw_spectral,
        basis_u,
        basis_z,
        time_mode,
        norm_mean: vec![0.0; dim],
        norm_std: vec![1.0; dim],
        params: store,
    })
}

/// All model computations staged on one tape.
#[derive(Debug, Clone)]
pub struct StagedModel {
    encoder: StagedMlp,
    decoder: StagedMlp,
    pub spectrum: SpectrumVars,
    pub basis: Var,
    mean: Var,
    inv_std: Var,
    std: Var,
    time_mode: TimeMode,
    measurement_dim: usize,
}

impl KoopmanModel {
    /// Register every parameter on the tape (frozen parameters become
    /// constants) and realize the constrained spectrum and assembled basis.
    pub fn stage(&self, tape: &mut Tape) -> Result<StagedModel> {
        let stage_one = |tape: &mut Tape, id: ParamId| -> Result<Var> {
            if self.params.entry(id).trainable {
                tape.param(&self.params, id)
            } else {
                Ok(tape.constant(self.params.value(id).clone()))
            }
        };
        let stage_mlp = |tape: &mut Tape, mlp: &Mlp| -> Result<StagedMlp> {
            Ok(StagedMlp {
                weights: mlp
                    .weights
                    .iter()
                    .map(|&id| stage_one(tape, id))
                    .collect::<Result<_>>()?,
                biases: mlp
                    .biases
                    .iter()
                    .map(|&id| stage_one(tape, id))
                    .collect::<Result<_>>()?,
            })
        };
        let encoder = stage_mlp(tape, &self.encoder)?;
        let decoder = stage_mlp(tape, &self.decoder)?;
        let raw_vars: Vec<Var> = self
            .raw_spectral
            .iter()
            .map(|&id| stage_one(tape, id))
            .collect::<Result<_>>()?;
        let spectrum = realize_spectrum(tape, &self.constraint, &raw_vars)?;
        let u = stage_one(tape, self.basis_u)?;
        let z = stage_one(tape, self.basis_z)?;
        let basis = assemble_basis(tape, u, z)?;
        let mean = tape.constant(Mat::col(&self.norm_mean));
        let std = tape.constant(Mat::col(&self.norm_std));
        let inv_std: Vec<f64> = self.norm_std.iter().map(|s| 1.0 / s).collect();
        let inv_std = tape.constant(Mat::col(&inv_std));
        Ok(StagedModel {
            encoder,
            decoder,
            spectrum,
            basis,
            mean,
            inv_std,
            std,
            time_mode: self.time_mode,
            measurement_dim: self.measurement_dim,
        })
    }

    pub fn spectrum(&self) -> Result<KoopmanSpectrum> {
        let raw: Vec<f64> = self
            .raw_spectral
            .iter()
            .map(|&id| self.params.value(id).as_scalar())
            .collect();
        realize_spectrum_values(&self.constraint, &raw)
    }

    pub fn basis(&self) -> EigenBasis {
        EigenBasis {
            u: self.params.value(self.basis_u).clone(),
            z: self.params.value(self.basis_z).clone(),
        }
    }

    pub fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        debug_assert_eq!(mean.len(), self.measurement_dim);
        debug_assert_eq!(std.len(), self.measurement_dim);
        self.norm_mean = mean;
        self.norm_std = std;
    }

    /// One-off forecast. For repeated evaluation use [`KoopmanModel::evaluator`].
    pub fn forecast(&self, y: &[f64], tau: f64) -> Result<Vec<f64>> {
        let mut eval = self.evaluator()?;
        eval.forecast(y, tau)
    }

    pub fn evaluator(&self) -> Result<ModelEval> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape)?;
        Ok(ModelEval { tape, staged })
    }

    /// Dynamic modes: decoded rows of the basis inverse with their
    /// associated spectrum entries.
    pub fn dynamic_modes(&self) -> Result<Vec<crate::spectral::DynamicMode>> {
        let spectrum = self.spectrum()?;
        let mut eval = self.evaluator()?;
        crate::spectral::dynamic_modes(&self.basis(), &spectrum, |row| eval.decode(row))
    }
}

impl StagedModel {
    /// Standardize then run the encoder: `g = psi((y - mean) / std)`.
    pub fn encode(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        if tape.value(y).rows() != self.measurement_dim || !tape.value(y).is_col_vec() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: tape.value(y).shape_string(),
                rhs: format!("{}x1", self.measurement_dim),
            });
        }
        let centered = tape.sub(y, self.mean)?;
        let scaled = tape.mul(centered, self.inv_std)?;
        self.encoder.forward(tape, scaled)
    }

    /// Run the decoder then de-standardize: `y = phi(g) * std + mean`.
    pub fn decode(&self, tape: &mut Tape, g: Var) -> Result<Var> {
        let out = self.decoder.forward(tape, g)?;
        let scaled = tape.mul(out, self.std)?;
        tape.add(scaled, self.mean)
    }

    /// Basis coordinates `h = W^{-1} g`; reusable across horizons.
    pub fn basis_coords(&self, tape: &mut Tape, g: Var) -> Result<Var> {
        tape.solve_linear(self.basis, g)
    }

    /// The K x K spectrum block for horizon `tau` (reusable across anchor
    /// points that share the same gap).
    pub fn block(&self, tape: &mut Tape, tau: f64) -> Result<Var> {
        match self.time_mode {
            TimeMode::Continuous => crate::spectral::block_exponential(tape, &self.spectrum, tau),
            TimeMode::Discrete => crate::spectral::discrete_block(tape, &self.spectrum, tau),
        }
    }

    /// `W * block * h` for pre-solved coordinates and a pre-built block.
    pub fn apply_block(&self, tape: &mut Tape, block: Var, h: Var) -> Result<Var> {
        let rotated = tape.matvec(block, h)?;
        tape.matvec(self.basis, rotated)
    }

    /// Evolve pre-solved basis coordinates by `tau` and map back:
    /// `W block(tau) h`.
    pub fn propagate_coords(&self, tape: &mut Tape, h: Var, tau: f64) -> Result<Var> {
        propagate_solved(tape, self.basis, h, &self.spectrum, tau, self.time_mode)
    }

    pub fn propagate(&self, tape: &mut Tape, g: Var, tau: f64) -> Result<Var> {
        let h = self.basis_coords(tape, g)?;
        self.propagate_coords(tape, h, tau)
    }

    /// End-to-end prediction `decode(propagate(tau, encode(y)))`.
    pub fn forecast(&self, tape: &mut Tape, y: Var, tau: f64) -> Result<Var> {
        let g = self.encode(tape, y)?;
        let evolved = self.propagate(tape, g, tau)?;
        self.decode(tape, evolved)
    }
}

/// Read-only evaluation context: the model staged once on a private tape.
pub struct ModelEval {
    tape: Tape,
    staged: StagedModel,
}

impl ModelEval {
    pub fn encode(&mut self, y: &[f64]) -> Result<Vec<f64>> {
        let yv = self.tape.constant(Mat::col(y));
        let g = self.staged.encode(&mut self.tape, yv)?;
        Ok(self.tape.value(g).data().to_vec())
    }

    pub fn decode(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        let gv = self.tape.constant(Mat::col(g));
        let y = self.staged.decode(&mut self.tape, gv)?;
        Ok(self.tape.value(y).data().to_vec())
    }

    pub fn forecast(&mut self, y: &[f64], tau: f64) -> Result<Vec<f64>> {
        let yv = self.tape.constant(Mat::col(y));
        let out = self.staged.forecast(&mut self.tape, yv, tau)?;
        Ok(self.tape.value(out).data().to_vec())
    }

    /// Forecasts at many horizons from one anchor point; the anchor is
    /// encoded and basis-solved once.
    pub fn forecast_horizons(&mut self, y: &[f64], taus: &[f64]) -> Result<Vec<Vec<f64>>> {
        let yv = self.tape.constant(Mat::col(y));
        let g = self.staged.encode(&mut self.tape, yv)?;
        let h = self.staged.basis_coords(&mut self.tape, g)?;
        let mut out = Vec::with_capacity(taus.len());
        for &tau in taus {
            let evolved = self.staged.propagate_coords(&mut self.tape, h, tau)?;
            let y_hat = self.staged.decode(&mut self.tape, evolved)?;
            out.push(self.tape.value(y_hat).data().to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    trainable: bool,
}

/// Self-describing serialized model. Numbers survive the round trip at full
/// double precision (shortest round-trip decimal).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    schema_version: u32,
    measurement_dim: usize,
    koopman_dim: usize,
    hidden_sizes: Vec<usize>,
    time_mode: TimeMode,
    linear_identity: bool,
    constraint: SpectralConstraint,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    params: Vec<CheckpointParam>,
}

impl KoopmanModel {
    fn is_linear_identity(&self) -> bool {
        self.hidden_sizes.is_empty()
            && !self.params.entry(self.encoder.weights[0]).trainable
            && self.measurement_dim == self.koopman_dim
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            measurement_dim: self.measurement_dim,
            koopman_dim: self.koopman_dim,
            hidden_sizes: self.hidden_sizes.clone(),
            time_mode: self.time_mode,
            linear_identity: self.is_linear_identity(),
            constraint: self.constraint.clone(),
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
            params: self
                .params
                .ids()
                .map(|id| {
                    let e = self.params.entry(id);
                    CheckpointParam {
                        name: e.name.clone(),
                        rows: e.value.rows(),
                        cols: e.value.cols(),
                        data: e.value.data().to_vec(),
                        trainable: e.trainable,
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<KoopmanModel> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema version {}",
                ckpt.schema_version
            )));
        }
        let mut model = if ckpt.linear_identity {
            init_linear_identity_model(
                ckpt.measurement_dim,
                ckpt.constraint.clone(),
                ckpt.time_mode,
                0,
            )?
        } else {
            init_model(
                ckpt.measurement_dim,
                ckpt.koopman_dim,
                &ckpt.hidden_sizes,
                ckpt.constraint.clone(),
                ckpt.time_mode,
                0,
            )?
        };
        model.norm_mean = ckpt.norm_mean.clone();
        model.norm_std = ckpt.norm_std.clone();
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (id, saved) in model.params.ids().collect::<Vec<_>>().iter().zip(&ckpt.params) {
            let entry = model.params.entry(*id);
            if entry.name != saved.name || entry.value.shape() != (saved.rows, saved.cols) {
                return Err(Error::Config(format!(
                    "checkpoint parameter '{}' ({}x{}) does not match model slot '{}' ({})",
                    saved.name,
                    saved.rows,
                    saved.cols,
                    entry.name,
                    entry.value.shape_string()
                )));
            }
            *model.params.value_mut(*id) =
                Mat::from_vec(saved.rows, saved.cols, saved.data.clone());
            model.params.set_trainable(*id, saved.trainable);
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<KoopmanModel> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        KoopmanModel::from_checkpoint(&ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> KoopmanModel {
        init_model(
            2,
            2,
            &[4],
            SpectralConstraint::conservative(2),
            TimeMode::Continuous,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn default_architecture_dimensions() {
        let m = tiny_model(0);
        assert_eq!(m.encoder.dims, vec![2, 4, 2]);
        assert_eq!(m.decoder.dims, vec![2, 4, 2]);
        assert_eq!(m.raw_spectral.len(), 1);
    }

    #[test]
    fn same_seed_gives_bit_identical_models() {
        let a = tiny_model(7);
        let b = tiny_model(7);
        for (ia, ib) in a.params.ids().zip(b.params.ids()) {
            assert_eq!(a.params.value(ia).data(), b.params.value(ib).data());
        }
        let c = tiny_model(8);
        let differs = a
            .params
            .ids()
            .zip(c.params.ids())
            .any(|(ia, ic)| a.params.value(ia).data() != c.params.value(ic).data());
        assert!(differs);
    }

    #[test]
    fn fixed_zero_decay_realizes_exactly() {
        let m = tiny_model(3);
        let spectrum = m.spectrum().unwrap();
        assert_eq!(spectrum.rates, vec![0.0]);
    }

    #[test]
    fn zero_weight_encoder_returns_bias() {
        let mut m = tiny_model(1);
        for &w in &m.encoder.weights {
            let shape = m.params.value(w).shape();
            *m.params.value_mut(w) = Mat::zeros(shape.0, shape.1);
        }
        let bias_id = *m.encoder.biases.last().unwrap();
        *m.params.value_mut(bias_id) = Mat::col(&[0.25, -0.5]);
        let mut eval = m.evaluator().unwrap();
        let g = eval.encode(&[3.0, -8.0]).unwrap();
        assert_eq!(g, vec![0.25, -0.5]);
    }

    #[test]
    fn linear_encoder_is_matrix_action() {
        let mut m = init_model(
            2,
            2,
            &[],
            SpectralConstraint::conservative(2),
            TimeMode::Continuous,
            5,
        )
        .unwrap();
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]);
        *m.params.value_mut(m.encoder.weights[0]) = a.clone();
        *m.params.value_mut(m.encoder.biases[0]) = Mat::zeros(2, 1);
        let mut eval = m.evaluator().unwrap();
        let y = [0.7, -1.3];
        let g = eval.encode(&y).unwrap();
        let expect = a.matmul(&Mat::col(&y));
        assert_eq!(g, expect.data());
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let mut m = tiny_model(11);
        let y = [0.6, -0.9];
        let eval_loss = |model: &KoopmanModel| -> f64 {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape).unwrap();
            let yv = tape.constant(Mat::col(&y));
            let g = staged.encode(&mut tape, yv).unwrap();
            let r = tape.squared_norm(g).unwrap();
            tape.value(r).as_scalar()
        };
        let mut tape = Tape::new();
        let staged = m.stage(&mut tape).unwrap();
        let yv = tape.constant(Mat::col(&y));
        let g = staged.encode(&mut tape, yv).unwrap();
        let r = tape.squared_norm(g).unwrap();
        let grads = tape.backward(r).unwrap();

        let enc_ids: Vec<ParamId> = m
            .encoder
            .weights
            .iter()
            .chain(m.encoder.biases.iter())
            .copied()
            .collect();
        let step = 1e-5;
        for id in enc_ids {
            let n = m.params.value(id).len();
            for idx in 0..n {
                let orig = m.params.value(id).data()[idx];
                m.params.value_mut(id).data_mut()[idx] = orig + step;
                let plus = eval_loss(&m);
                m.params.value_mut(id).data_mut()[idx] = orig - step;
                let minus = eval_loss(&m);
                m.params.value_mut(id).data_mut()[idx] = orig;
                let fd = (plus - minus) / (2.0 * step);
                let ad = grads.get(id).unwrap().data()[idx];
                let denom = f64::max(1e-6, f64::max(fd.abs(), ad.abs()));
                assert!((ad - fd).abs() / denom < 1e-4, "ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn forecast_tau_zero_is_auto_reconstruction() {
        let m = tiny_model(13);
        let y = [1.2, -0.4];
        let mut eval = m.evaluator().unwrap();
        let g = eval.encode(&y).unwrap();
        let recon = eval.decode(&g).unwrap();
        let fc = eval.forecast(&y, 0.0).unwrap();
        for (a, b) in fc.iter().zip(&recon) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_model_quarter_turn() {
        // Identity encoder/decoder, identity basis, r=0, w=pi/2 sends
        // (1, 0) to (0, -1) at tau=1.
        let constraint = SpectralConstraint {
            decay: vec![crate::spectral::ModeSpec::Fixed { value: 0.0 }],
            freq: vec![crate::spectral::ModeSpec::Fixed {
                value: std::f64::consts::FRAC_PI_2,
            }],
        };
        let mut m =
            init_linear_identity_model(2, constraint, TimeMode::Continuous, 0).unwrap();
        *m.params.value_mut(m.basis_u) = Mat::col(&[1.0, 0.0]);
        *m.params.value_mut(m.basis_z) = Mat::col(&[0.0, 1.0]);
        let out = m.forecast(&[1.0, 0.0], 1.0).unwrap();
        assert!(out[0].abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn koopman_space_round_trip_and_path_independence() {
        let m = tiny_model(17);
        let y = [0.35, 0.8];
        let (tau1, tau2) = (0.7, 1.9);

        let mut tape = Tape::new();
        let staged = m.stage(&mut tape).unwrap();
        let yv = tape.constant(Mat::col(&y));
        let g = staged.encode(&mut tape, yv).unwrap();

        // Forecast then backcast in Koopman space returns encode(y).
        let fwd = staged.propagate(&mut tape, g, tau1).unwrap();
        let back = staged.propagate(&mut tape, fwd, -tau1).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(tape.value(g).data()) {
            assert!((a - b).abs() < 1e-8);
        }

        // Single-encode path independence.
        let two_step = staged.propagate(&mut tape, fwd, tau2).unwrap();
        let direct = staged.propagate(&mut tape, g, tau1 + tau2).unwrap();
        let dec_two = staged.decode(&mut tape, two_step).unwrap();
        let dec_direct = staged.decode(&mut tape, direct).unwrap();
        for (a, b) in tape
            .value(dec_two)
            .data()
            .iter()
            .zip(tape.value(dec_direct).data())
        {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forecasts_stay_finite() {
        let mut rng = StdRng::seed_from_u64(19);
        let m = tiny_model(23);
        let mut eval = m.evaluator().unwrap();
        for _ in 0..20 {
            let y = [
                rand::Rng::gen_range(&mut rng, -5.0..5.0),
                rand::Rng::gen_range(&mut rng, -5.0..5.0),
            ];
            let tau = rand::Rng::gen_range(&mut rng, -30.0..30.0);
            let out = eval.forecast(&y, tau).unwrap();
            assert!(out.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(29);
        m.set_normalization(vec![0.123456789123456789, -4.5], vec![2.25, 0.1]);
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let loaded = KoopmanModel::load(&path).unwrap();
        for (a, b) in m.params.ids().zip(loaded.params.ids()) {
            let (va, vb) = (m.params.value(a), loaded.params.value(b));
            assert_eq!(va.shape(), vb.shape());
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(m.norm_mean, loaded.norm_mean);
        // Saving again reproduces the same bytes.
        let path2 = dir.path().join("model2.json");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn linear_identity_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_linear_identity_model(
            2,
            SpectralConstraint::conservative(2),
            TimeMode::Continuous,
            3,
        )
        .unwrap();
        let path = dir.path().join("dmdf.json");
        m.save(&path).unwrap();
        let loaded = KoopmanModel::load(&path).unwrap();
        assert!(!loaded.params.entry(loaded.encoder.weights[0]).trainable);
        assert_eq!(loaded.koopman_dim, 2);
    }
}
