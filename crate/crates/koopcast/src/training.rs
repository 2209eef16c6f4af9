//! Multi-step forecast/backcast objective, Adam optimization, early
//! stopping, and contiguous data splitting.
//!
//! The loss sums squared prediction errors over every step count `nu` in
//! `[nu_start, nu_end]` and every anchor index whose target stays inside
//! the sequence: negative `nu` are backcasts, `nu = 0` is the
//! auto-reconstruction, positive `nu` are forecasts. Training is full-batch
//! Adam with the best-validation parameter snapshot kept for early stopping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::gradcore::{Gradients, ParamStore, Tape, Var};
use crate::linalg::Mat;
use crate::model::{KoopmanModel, StagedModel};
use crate::spectral::KoopmanSpectrum;

pub const DEFAULT_SPLIT_FRACTIONS: (f64, f64, f64) = (0.2, 0.1, 0.7);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub nu_start: i64,
    pub nu_end: i64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when validation loss has not improved for this many epochs.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub rng_seed: u64,
    /// Standardize inputs with training-split statistics. Off for linear
    /// identity pipelines (DMDF) where the model must act directly in
    /// measurement space.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            nu_start: -10,
            nu_end: 10,
            learning_rate: 1e-2,
            max_epochs: 5000,
            patience: 250,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rng_seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nu_start > self.nu_end {
            return Err(Error::Config(format!(
                "nu_start {} > nu_end {}",
                self.nu_start, self.nu_end
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment accumulators per parameter, plus the step counter
/// for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Only trainable parameters with a
/// gradient entry move; fixed spectral entries are not parameters at all,
/// so constraints hold by construction.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (id, g) in grads.iter() {
        if !store.entry(id).trainable {
            continue;
        }
        let idx = id.index();
        let shape = g.shape();
        let m = state.m[idx].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        let v = state.v[idx].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
        *m = m.scale(config.beta1).add(&g.scale(1.0 - config.beta1));
        *v = v
            .scale(config.beta2)
            .add(&g.zip_map(g, |a, b| a * b).scale(1.0 - config.beta2));
        let theta = store.value_mut(id);
        for i in 0..theta.len() {
            let m_hat = m.data()[i] / bias1;
            let v_hat = v.data()[i] / bias2;
            theta.data_mut()[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Anchor/target index pairs `(n, n + nu)` contributing to the loss:
/// `nu` in `[nu_start, nu_end]`, both endpoints inside `[0, n_points)`.
pub fn loss_terms(n_points: usize, nu_start: i64, nu_end: i64) -> Vec<(usize, usize)> {
    let n = n_points as i64;
    let mut terms = Vec::new();
    for nu in nu_start..=nu_end {
        let lo = 0.max(-nu);
        let hi = (n - 1).min(n - 1 - nu);
        for anchor in lo..=hi {
            terms.push((anchor as usize, (anchor + nu) as usize));
        }
    }
    terms
}

/// Differentiable multi-step forecast/backcast error:
/// sum over terms of `|| forecast(y_n, t_{n+nu} - t_n) - y_{n+nu} ||^2`.
///
/// Each anchor is encoded and basis-solved once; spectrum blocks are shared
/// between terms whose horizons are bit-identical.
pub fn multistep_loss(
    tape: &mut Tape,
    staged: &StagedModel,
    series: &TimeSeries,
    nu_start: i64,
    nu_end: i64,
) -> Result<Var> {
    if nu_start > nu_end {
        return Err(Error::Config(format!(
            "nu_start {nu_start} > nu_end {nu_end}"
        )));
    }
    let terms = loss_terms(series.len(), nu_start, nu_end);
    if terms.is_empty() {
        return Err(Error::DegenerateData(format!(
            "no valid loss terms for {} points with nu in [{nu_start}, {nu_end}]",
            series.len()
        )));
    }

    // Encode + basis-solve each anchor once.
    let mut coords: HashMap<usize, Var> = HashMap::new();
    for &(anchor, _) in &terms {
        if let std::collections::hash_map::Entry::Vacant(e) = coords.entry(anchor) {
            let y = tape.constant(Mat::col(series.row(anchor)));
            let g = staged.encode(tape, y)?;
            let h = staged.basis_coords(tape, g)?;
            e.insert(h);
        }
    }

    let mut blocks: HashMap<u64, Var> = HashMap::new();
    let mut total: Option<Var> = None;
    for &(anchor, target) in &terms {
        let tau = series.times[target] - series.times[anchor];
        let block = match blocks.entry(tau.to_bits()) {
            std::collections::hash_map::Entry::Occupied(e) => *e.get(),
            std::collections::hash_map::Entry::Vacant(e) => *e.insert(staged.block(tape, tau)?),
        };
        let h = coords[&anchor];
        let evolved = staged.apply_block(tape, block, h)?;
        let y_hat = staged.decode(tape, evolved)?;
        let y_target = tape.constant(Mat::col(series.row(target)));
        let residual = tape.sub(y_hat, y_target)?;
        let err = tape.squared_norm(residual)?;
        total = Some(match total {
            None => err,
            Some(acc) => tape.add(acc, err)?,
        });
    }
    Ok(total.expect("at least one term"))
}

/// Loss value without gradients.
pub fn multistep_loss_value(
    model: &KoopmanModel,
    series: &TimeSeries,
    nu_start: i64,
    nu_end: i64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape)?;
    let loss = multistep_loss(&mut tape, &staged, series, nu_start, nu_end)?;
    Ok(tape.value(loss).as_scalar())
}

/// Contiguous prefix split by index count: floor for train, floor for
/// validation, remainder test. Original timestamps are preserved.
pub fn split_series(
    series: &TimeSeries,
    fractions: (f64, f64, f64),
) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    let (f_train, f_val, f_test) = fractions;
    if f_train <= 0.0 || f_val <= 0.0 || f_test <= 0.0 || f_train + f_val + f_test > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "invalid split fractions ({f_train}, {f_val}, {f_test})"
        )));
    }
    let n = series.len();
    let n_train = (n as f64 * f_train).floor() as usize;
    let n_val = (n as f64 * f_val).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::DegenerateData(format!(
            "series of length {n} splits into ({n_train}, {n_val}, {}) parts",
            n.saturating_sub(n_train + n_val)
        )));
    }
    Ok((
        series.slice(0, n_train),
        series.slice(n_train, n_train + n_val),
        series.slice(n_train + n_val, n),
    ))
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub spectrum: KoopmanSpectrum,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_loss)
    }

    /// `epoch,train_loss,val_loss,r1..,omega1..` rows.
    pub fn to_csv(&self) -> String {
        let (n_r, n_w) = self
            .epochs
            .first()
            .map(|e| (e.spectrum.rates.len(), e.spectrum.freqs.len()))
            .unwrap_or((0, 0));
        let mut out = String::from("epoch,train_loss,val_loss");
        for i in 1..=n_r {
            out.push_str(&format!(",r{i}"));
        }
        for i in 1..=n_w {
            out.push_str(&format!(",omega{i}"));
        }
        out.push('\n');
        for rec in &self.epochs {
            out.push_str(&format!(
                "{},{},{}",
                rec.epoch, rec.train_loss, rec.val_loss
            ));
            for r in &rec.spectrum.rates {
                out.push_str(&format!(",{r}"));
            }
            for w in &rec.spectrum.freqs {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Training failure that preserves the history accumulated before the
/// abort (e.g. a conditioning error from the basis solve mid-training).
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub history: TrainHistory,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted after {} epoch(s): {}",
            self.history.epochs.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainAbort {}

/// Full-batch Adam on the multi-step loss over the training split, with
/// per-epoch validation on the following split and early stopping. Returns
/// the parameter snapshot with the lowest validation loss.
pub fn train(
    mut model: KoopmanModel,
    series: &TimeSeries,
    config: &TrainConfig,
) -> std::result::Result<(KoopmanModel, TrainHistory), Box<TrainAbort>> {
    let fail = |error: Error, history: TrainHistory| Box::new(TrainAbort { error, history });

    if let Err(e) = config.validate() {
        return Err(fail(e, TrainHistory::default()));
    }
    let (train_split, val_split, _test) = match split_series(series, DEFAULT_SPLIT_FRACTIONS) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, TrainHistory::default())),
    };
    if config.standardize {
        let (mean, std) = train_split.mean_std();
        model.set_normalization(mean, std);
    }

    let declared_fixed: Vec<(usize, f64)> = fixed_entries(&model);

    let mut history = TrainHistory::default();
    let mut adam = AdamState::new(&model.params);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let step = (|| -> Result<(f64, Gradients)> {
            let staged = model.stage(&mut tape)?;
            let loss = multistep_loss(&mut tape, &staged, &train_split, config.nu_start, config.nu_end)?;
            let value = tape.value(loss).as_scalar();
            let grads = tape.backward(loss)?;
            Ok((value, grads))
        })();
        let (train_loss, grads) = match step {
            Ok(x) => x,
            Err(e) => return Err(fail(e, history)),
        };
        adam_step(&mut model.params, &grads, &mut adam, config);

        // Hard constraints cannot drift: fixed entries are not parameters.
        let spectrum = match model.spectrum() {
            Ok(s) => s,
            Err(e) => return Err(fail(e, history)),
        };
        debug_assert!(declared_fixed.iter().all(|&(i, v)| {
            let realized = if i < spectrum.rates.len() {
                spectrum.rates[i]
            } else {
                spectrum.freqs[i - spectrum.rates.len()]
            };
            realized.to_bits() == v.to_bits()
        }));

        let val_loss =
            match multistep_loss_value(&model, &val_split, config.nu_start, config.nu_end) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, history)),
            };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            spectrum,
        });

        let improved = best.as_ref().map_or(true, |(_, best_val, _)| val_loss < *best_val);
        if improved {
            best = Some((epoch, val_loss, model.params.clone()));
            history.best_epoch = Some(epoch);
        }
        let best_epoch = best.as_ref().map(|(e, _, _)| *e).unwrap_or(0);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    if let Some((_, _, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// Flat indices (rates then freqs) and declared values of fixed entries.
fn fixed_entries(model: &KoopmanModel) -> Vec<(usize, f64)> {
    model
        .constraint
        .all_specs()
        .enumerate()
        .filter_map(|(i, s)| match s {
            crate::spectral::ModeSpec::Fixed { value } => Some((i, *value)),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig, Sampling, SystemKind};
    use crate::model::{init_linear_identity_model, init_model};
    use crate::spectral::{ModeSpec, SpectralConstraint, TimeMode};
    use std::collections::BTreeMap;
    use std::collections::HashSet;

    fn small_series(n: usize) -> TimeSeries {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.25).collect();
        let values = Mat::from_fn(n, 2, |i, j| {
            let t = times[i];
            if j == 0 {
                t.sin()
            } else {
                t.cos()
            }
        });
        TimeSeries::new(times, values, "sine").unwrap()
    }

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
    fn term_enumeration_matches_brute_force() {
        // Formula bounds against a brute-force scan of all (n, nu) pairs.
        for n in [1usize, 2, 3, 6, 10] {
            for (lo, hi) in [(-1i64, 1i64), (-3, 0), (0, 2), (-10, 10), (2, 4)] {
                let fast: HashSet<(usize, usize)> = loss_terms(n, lo, hi).into_iter().collect();
                let mut brute = HashSet::new();
                for nu in lo..=hi {
                    for anchor in 0..n as i64 {
                        let target = anchor + nu;
                        if target >= 0 && target < n as i64 {
                            brute.insert((anchor as usize, target as usize));
                        }
                    }
                }
                assert_eq!(fast, brute, "n={n} range=[{lo},{hi}]");
            }
        }
        // N=3, nu in {-1,0,1}: 2 + 3 + 2 = 7 terms.
        assert_eq!(loss_terms(3, -1, 1).len(), 7);
    }

    #[test]
    fn loss_matches_per_term_forecasts() {
        let model = tiny_model(5);
        let series = small_series(6);
        let total = multistep_loss_value(&model, &series, -2, 2).unwrap();
        let mut eval = model.evaluator().unwrap();
        let mut expected = 0.0;
        for (anchor, target) in loss_terms(series.len(), -2, 2) {
            let tau = series.times[target] - series.times[anchor];
            let y_hat = eval.forecast(series.row(anchor), tau).unwrap();
            expected += y_hat
                .iter()
                .zip(series.row(target))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        assert!(
            (total - expected).abs() <= 1e-9 * expected.max(1.0),
            "{total} vs {expected}"
        );
    }

    #[test]
    fn perfect_identity_system_has_zero_loss() {
        let constraint = SpectralConstraint {
            decay: vec![ModeSpec::Fixed { value: 0.0 }],
            freq: vec![ModeSpec::Fixed { value: 0.0 }],
        };
        let mut model =
            init_linear_identity_model(2, constraint, TimeMode::Continuous, 0).unwrap();
        *model.params.value_mut(model.basis_u) = Mat::col(&[1.0, 0.0]);
        *model.params.value_mut(model.basis_z) = Mat::col(&[0.0, 1.0]);
        let times: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let values = Mat::from_fn(8, 2, |_, j| if j == 0 { 0.7 } else { -0.2 });
        let series = TimeSeries::new(times, values, "constant").unwrap();
        let loss = multistep_loss_value(&model, &series, -3, 3).unwrap();
        assert!(loss < 1e-24, "loss {loss}");
    }

    #[test]
    fn nu_zero_only_is_auto_reconstruction() {
        let model = tiny_model(9);
        let series = small_series(5);
        let loss = multistep_loss_value(&model, &series, 0, 0).unwrap();
        let mut eval = model.evaluator().unwrap();
        let mut expected = 0.0;
        for n in 0..series.len() {
            let g = eval.encode(series.row(n)).unwrap();
            let y = eval.decode(&g).unwrap();
            expected += y
                .iter()
                .zip(series.row(n))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        assert!((loss - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn degenerate_loss_is_error() {
        let model = tiny_model(1);
        let series = small_series(3);
        // Every nu pushes the target outside the series.
        match multistep_loss_value(&model, &series, 5, 7) {
            Err(Error::DegenerateData(_)) => {}
            other => panic!("expected degenerate data error, got {other:?}"),
        }
    }

    #[test]
    fn multistep_gradient_matches_finite_differences() {
        let mut model = tiny_model(21);
        let series = small_series(6);
        let loss_of = |m: &KoopmanModel| multistep_loss_value(m, &series, -2, 2).unwrap();

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape).unwrap();
        let loss = multistep_loss(&mut tape, &staged, &series, -2, 2).unwrap();
        let grads = tape.backward(loss).unwrap();

        let step = 1e-5;
        for id in model.params.trainable_ids() {
            for idx in 0..model.params.value(id).len() {
                let orig = model.params.value(id).data()[idx];
                model.params.value_mut(id).data_mut()[idx] = orig + step;
                let plus = loss_of(&model);
                model.params.value_mut(id).data_mut()[idx] = orig - step;
                let minus = loss_of(&model);
                model.params.value_mut(id).data_mut()[idx] = orig;
                let fd = (plus - minus) / (2.0 * step);
                let ad = grads.get(id).unwrap().data()[idx];
                // Relative check with a floor at the finite-difference
                // cancellation noise (~eps * loss / step).
                let tol = 1e-4 * f64::max(fd.abs(), ad.abs()) + 1e-7;
                assert!(
                    (ad - fd).abs() < tol,
                    "param {} [{idx}]: ad={ad} fd={fd}",
                    model.params.entry(id).name
                );
            }
        }
    }

    #[test]
    fn backcast_terms_add_loss() {
        let model = tiny_model(33);
        let series = small_series(7);
        let with_backcast = multistep_loss_value(&model, &series, -2, 2).unwrap();
        let without = multistep_loss_value(&model, &series, 0, 2).unwrap();
        assert!(with_backcast > without);

        // The difference is exactly the enumerated backcast terms.
        let mut eval = model.evaluator().unwrap();
        let mut backcast_sum = 0.0;
        for (anchor, target) in loss_terms(series.len(), -2, -1) {
            let tau = series.times[target] - series.times[anchor];
            let y_hat = eval.forecast(series.row(anchor), tau).unwrap();
            backcast_sum += y_hat
                .iter()
                .zip(series.row(target))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        assert!((with_backcast - without - backcast_sum).abs() < 1e-9 * with_backcast);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::col(&[1.0, -2.0]), true);
        let mut state = AdamState::new(&store);
        let config = TrainConfig::default();
        // Zero gradient via a root that ignores the parameter.
        let mut tape = Tape::new();
        let _x = tape.param(&store, id).unwrap();
        let c = tape.constant_scalar(3.0);
        let root = tape.mul(c, c).unwrap();
        let grads = tape.backward(root).unwrap();
        adam_step(&mut store, &grads, &mut state, &config);
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Mat::scalar(0.0), true);
        let mut state = AdamState::new(&store);
        let config = TrainConfig::default();
        // Gradient 1 via root = theta on the tape.
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let root = tape.sum(x).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(id).unwrap().as_scalar(), 1.0);
        adam_step(&mut store, &grads, &mut state, &config);
        // Bias correction makes the first update ~ lr * sign(g).
        let theta = store.value(id).as_scalar();
        assert!((theta + 0.01).abs() < 1e-7, "theta={theta}");
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Mat::scalar(1.0), true);
        let mut state = AdamState::new(&store);
        let config = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let f = |store: &ParamStore| store.value(id).as_scalar().powi(2);
        let initial = f(&store);
        let mut prev = initial;
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id).unwrap();
            let root = tape.mul(x, x).unwrap();
            let grads = tape.backward(root).unwrap();
            adam_step(&mut store, &grads, &mut state, &config);
            let now = f(&store);
            assert!(now < prev, "loss rose: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn split_sizes_match_percentages() {
        let series = small_series(100);
        let (train, val, test) = split_series(&series, DEFAULT_SPLIT_FRACTIONS).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (20, 10, 70));
        // Timestamps preserved.
        assert_eq!(val.times[0], series.times[20]);

        let series = small_series(10);
        let (train, val, test) = split_series(&series, DEFAULT_SPLIT_FRACTIONS).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (2, 1, 7));
    }

    #[test]
    fn split_too_short_is_error() {
        let series = small_series(4);
        match split_series(&series, DEFAULT_SPLIT_FRACTIONS) {
            Err(Error::DegenerateData(_)) => {}
            other => panic!("expected degenerate data, got {other:?}"),
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let model = tiny_model(3);
        let before: Vec<Vec<f64>> = model
            .params
            .ids()
            .map(|id| model.params.value(id).data().to_vec())
            .collect();
        let series = small_series(40);
        let config = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(model, &series, &config).unwrap();
        assert!(history.epochs.is_empty());
        for (id, orig) in trained.params.ids().zip(&before) {
            assert_eq!(trained.params.value(id).data(), &orig[..]);
        }
    }

    #[test]
    fn linear_system_loss_drops_tenfold() {
        let cfg = GeneratorConfig {
            system: SystemKind::LinearTest,
            params: BTreeMap::from([("omega".to_string(), 1.0)]),
            t_end: 15.0,
            n_samples: 60,
            sampling: Sampling::Regular,
            noise_std: 0.0,
            rng_seed: 0,
            initial_state: None,
        };
        let series = generate(&cfg).unwrap();
        let model = tiny_model(0);
        let config = TrainConfig {
            nu_start: -3,
            nu_end: 3,
            max_epochs: 500,
            patience: 500,
            ..TrainConfig::default()
        };
        let (_, history) = train(model, &series, &config).unwrap();
        let first = history.epochs[0].train_loss;
        let best = history
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(
            best * 10.0 <= first,
            "loss only dropped {first} -> {best}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let series = small_series(40);
        let config = TrainConfig {
            nu_start: -2,
            nu_end: 2,
            max_epochs: 25,
            ..TrainConfig::default()
        };
        let run = || {
            let model = tiny_model(7);
            let (_, history) = train(model, &series, &config).unwrap();
            history
        };
        let (h1, h2) = (run(), run());
        assert_eq!(h1.epochs.len(), h2.epochs.len());
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
    }

    #[test]
    fn fixed_entries_survive_updates_bitwise() {
        let series = small_series(40);
        let config = TrainConfig {
            nu_start: -2,
            nu_end: 2,
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let (trained, history) = train(tiny_model(11), &series, &config).unwrap();
        let spectrum = trained.spectrum().unwrap();
        assert_eq!(spectrum.rates[0].to_bits(), 0.0_f64.to_bits());
        for rec in &history.epochs {
            assert_eq!(rec.spectrum.rates[0].to_bits(), 0.0_f64.to_bits());
        }
    }

    #[test]
    fn early_stopping_best_not_worse_than_final() {
        let mut cfg = GeneratorConfig {
            system: SystemKind::Vanderpol,
            params: BTreeMap::new(),
            t_end: 20.0,
            n_samples: 80,
            sampling: Sampling::Regular,
            noise_std: 0.05,
            rng_seed: 3,
            initial_state: None,
        };
        cfg.params.insert("mu".into(), 1.0);
        let series = generate(&cfg).unwrap();
        let config = TrainConfig {
            nu_start: -2,
            nu_end: 2,
            max_epochs: 60,
            patience: 20,
            ..TrainConfig::default()
        };
        let (_, history) = train(tiny_model(13), &series, &config).unwrap();
        let best = history.best_val_loss().unwrap();
        let last = history.epochs.last().unwrap().val_loss;
        assert!(best <= last);
    }

    #[test]
    fn singular_basis_aborts_with_history() {
        let mut model = tiny_model(17);
        // Collapse the basis: identical u and z columns make W singular.
        *model.params.value_mut(model.basis_u) = Mat::col(&[1.0, 0.0]);
        *model.params.value_mut(model.basis_z) = Mat::col(&[1.0, 0.0]);
        let series = small_series(40);
        let config = TrainConfig {
            nu_start: 0,
            nu_end: 1,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        match train(model, &series, &config) {
            Err(abort) => {
                assert!(matches!(abort.error, Error::IllConditioned { .. }));
                assert!(abort.history.epochs.is_empty());
            }
            Ok(_) => panic!("expected conditioning abort"),
        }
    }

    #[test]
    fn history_csv_layout() {
        let series = small_series(40);
        let config = TrainConfig {
            nu_start: 0,
            nu_end: 1,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let (_, history) = train(tiny_model(19), &series, &config).unwrap();
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss,r1,omega1");
        assert_eq!(lines.count(), 3);
    }
}
