//! ELBO objective, Adam and the early-stopped training loop.
//!
//! Loss sign convention: [`LossBreakdown::loss`] is the quantity minimized,
//! `kl_scale · KL · b / n_train + NLL` for a batch of `b` experiments, and
//! `elbo = −loss`. Summed over an epoch the KL term is counted once.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureScaler, GraphSeries, SensorGraph};
use crate::graphnet::{denormalize_target, normalize_target, GraphNetConfig, GraphNetModel};
use crate::layers::{ParamStore, Sampling};
use crate::rng::{derive_seed, stream, streams, StageRng};
use crate::tensor::{RngNoise, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub train_window: usize,
    pub eval_window: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Multiplies the `KL · batch / n_train` term.
    pub kl_scale: f64,
    /// Likelihood scale per normalized target `(p_phi/π, p_L/length, p_psi/π)`.
    pub likelihood_sigma: [f64; 3],
    /// Experiments per optimizer step.
    pub batch_size: usize,
    /// Rescale each step's gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train: 350,
            n_test: 100,
            train_window: 150,
            eval_window: 200,
            patience: 50,
            max_epochs: 500,
            learning_rate: 1e-3,
            kl_scale: 1.0,
            likelihood_sigma: [0.1; 3],
            batch_size: 1,
            grad_clip: None,
            deterministic: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_timesteps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.train_window == 0 || self.train_window > n_timesteps {
            return bad(format!("train_window {} outside 1..={n_timesteps}", self.train_window));
        }
        if self.eval_window == 0 || self.eval_window > n_timesteps {
            return bad(format!("eval_window {} outside 1..={n_timesteps}", self.eval_window));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return bad("patience, max_epochs and batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.kl_scale >= 0.0) {
            return bad("learning_rate must be > 0 and kl_scale >= 0".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.likelihood_sigma.iter().any(|s| !(*s > 0.0)) {
            return bad("likelihood_sigma must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Minimized objective.
    pub loss: f64,
    pub elbo: f64,
    /// `KL(q ‖ p)` before scaling.
    pub kl: f64,
    /// Negative log-likelihood (sum of squares for the deterministic model).
    pub nll: f64,
    /// Squared normalized residuals per target, summed over the batch.
    pub squared_errors: [f64; 3],
}

/// Records the training objective for `batch` on `tape`.
///
/// Angular residuals are wrapped before squaring. Deterministic models use
/// a plain sum of squares with no KL term.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    model: &GraphNetModel,
    tape: &mut Tape,
    params: &crate::layers::Binding,
    batch: &[SensorGraph],
    length: f64,
    n_train: usize,
    config: &TrainConfig,
    sampling: &mut Sampling<'_>,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let deterministic = model.config.deterministic;
    let mut out = LossBreakdown::default();
    let mut terms = Vec::with_capacity(batch.len() + 1);
    for graph in batch {
        let target = graph
            .global_target
            .ok_or_else(|| Error::InvalidArgument("training graph has no target".into()))?;
        let target = normalize_target(target, length);
        let y = model.forward_on_tape(tape, params, graph, sampling)?;
        let pred = tape.value(y).data().to_vec();
        // shift each target by whole periods so the residual lands in the wrapped range
        let periods = [2.0, 0.0, 1.0];
        let shifted: Vec<f64> = (0..3)
            .map(|d| {
                if periods[d] == 0.0 {
                    target[d]
                } else {
                    let p = periods[d];
                    target[d] + p * ((pred[d] - target[d]) / p).round()
                }
            })
            .collect();
        let t = tape.constant(Tensor::new(vec![1, 3], shifted.clone())?);
        let r = tape.sub(y, t)?;
        let r = if deterministic {
            r
        } else {
            let inv = config.likelihood_sigma.map(|s| 1.0 / s);
            let w = tape.constant(Tensor::new(vec![1, 3], inv.to_vec())?);
            tape.mul(r, w)?
        };
        let sq = tape.square(r);
        let s = tape.sum(sq);
        let term = if deterministic { s } else { tape.scale(s, 0.5) };
        terms.push(term);
        for d in 0..3 {
            out.squared_errors[d] += (pred[d] - shifted[d]).powi(2);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let mut nll = tape.value(total).item();
    if !deterministic {
        let log_norm: f64 = config
            .likelihood_sigma
            .iter()
            .map(|s| 0.5 * (TAU * s * s).ln())
            .sum::<f64>()
            * batch.len() as f64;
        let c = tape.constant(Tensor::scalar(log_norm));
        total = tape.add(total, c)?;
        nll += log_norm;
        let kl = model.kl_on_tape(tape, params)?;
        out.kl = tape.value(kl).item();
        let weighted = tape.scale(kl, config.kl_scale * batch.len() as f64 / n_train.max(1) as f64);
        total = tape.add(total, weighted)?;
    }
    out.nll = nll;
    out.loss = tape.value(total).item();
    out.elbo = -out.loss;
    Ok((total, out))
}

/// Evaluates the training objective without gradients.
pub fn elbo_loss(
    model: &GraphNetModel,
    batch: &[SensorGraph],
    length: f64,
    n_train: usize,
    config: &TrainConfig,
    sampling: &mut Sampling<'_>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    Ok(loss_on_tape(model, &mut tape, &params, batch, length, n_train, config, sampling)?.1)
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients(
    model: &GraphNetModel,
    batch: &[SensorGraph],
    length: f64,
    n_train: usize,
    config: &TrainConfig,
    sampling: &mut Sampling<'_>,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let (loss, breakdown) = loss_on_tape(model, &mut tape, &params, batch, length, n_train, config, sampling)?;
    let mut grads = tape.backward(loss)?;
    Ok((breakdown, params.collect(&model.params, &mut grads)))
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u32,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, g)) in params.get_mut(id).data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Scales all gradients by a common factor so their joint norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Uniform window start in `0..=n_timesteps − window`.
pub fn sample_window_start(rng: &mut impl Rng, n_timesteps: usize, window: usize) -> usize {
    rng.random_range(0..=n_timesteps - window)
}

/// A trained network with the feature scaler it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Localizer {
    pub model: GraphNetModel,
    pub scaler: FeatureScaler,
    /// Tube length, for mapping normalized outputs back to meters.
    pub length: f64,
}

impl Localizer {
    /// Physical `(p_phi, p_L, p_psi)` from one window of `series`.
    pub fn predict_window(
        &self,
        series: &GraphSeries,
        start: usize,
        window: usize,
        sampling: &mut Sampling<'_>,
    ) -> Result<[f64; 3]> {
        let graph = series.window(start, window, &self.scaler)?;
        let y = self.model.forward(&graph, sampling)?;
        Ok(denormalize_target(y, self.length))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_elbo: f64,
    pub kl: f64,
    pub nll: f64,
    pub test_loss: f64,
    pub rmse_phi: f64,
    pub rmse_l: f64,
    pub rmse_psi: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub localizer: Localizer,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn test_pass(
    model: &GraphNetModel,
    graphs: &[SensorGraph],
    length: f64,
    n_train: usize,
    config: &TrainConfig,
    noise_seed: u64,
) -> Result<(f64, [f64; 3])> {
    let mut rng = StageRng::seed_from_u64(noise_seed);
    let mut noise = RngNoise(&mut rng);
    let mut total = 0.0;
    let mut sq = [0.0; 3];
    for g in graphs {
        let b = elbo_loss(model, std::slice::from_ref(g), length, n_train, config, &mut Sampling::Sample(&mut noise))?;
        total += b.loss;
        let scale = [std::f64::consts::PI, length, std::f64::consts::PI];
        for d in 0..3 {
            sq[d] += b.squared_errors[d] * scale[d] * scale[d];
        }
    }
    let n = graphs.len() as f64;
    Ok((total / n, sq.map(|s| (s / n).sqrt())))
}

/// Trains on `train`, monitoring the loss on fixed windows and noise of
/// `test`, and returns the parameters with the lowest test loss.
///
/// Each epoch visits the training experiments in shuffled order with a
/// fresh random window for each. Training stops after `patience` epochs
/// without improvement or at `max_epochs`.
pub fn train(
    train: &[GraphSeries],
    test: &[GraphSeries],
    length: f64,
    model_config: &GraphNetConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("training and test sets must be non-empty".into()));
    }
    let n_timesteps = train.iter().chain(test).map(GraphSeries::n_timesteps).min().unwrap_or(0);
    config.validate(n_timesteps)?;
    if config.train_window < model_config.min_window() {
        return Err(Error::Config(format!(
            "train: train_window {} shorter than the convolution stack ({})",
            config.train_window,
            model_config.min_window()
        )));
    }
    let model_config = GraphNetConfig {
        deterministic: config.deterministic,
        ..model_config.clone()
    };
    let scaler = FeatureScaler::fit(train.iter().map(|s| &s.features))?;
    let mut model = GraphNetModel::new(model_config, &mut stream(config.seed, &[streams::INIT]))?;
    let mut adam = Adam::new(&model.params, config.learning_rate);

    let mut order_rng = stream(config.seed, &[streams::TRAIN, 0]);
    let mut noise_rng = stream(config.seed, &[streams::TRAIN, 1]);
    let mut test_rng = stream(config.seed, &[streams::TEST_EVAL]);
    let test_graphs = test
        .iter()
        .map(|s| {
            let start = sample_window_start(&mut test_rng, s.n_timesteps(), config.train_window);
            s.window(start, config.train_window, &scaler)
        })
        .collect::<Result<Vec<_>>>()?;
    let test_noise_seed = derive_seed(config.seed, &[streams::TEST_EVAL, 1]);

    let n_train = train.len();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut indices: Vec<usize> = (0..n_train).collect();
    for epoch in 0..config.max_epochs {
        indices.shuffle(&mut order_rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let start = sample_window_start(&mut order_rng, s.n_timesteps(), config.train_window);
                    s.window(start, config.train_window, &scaler)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut noise = RngNoise(&mut noise_rng);
            let (b, mut grads) = loss_and_gradients(
                &model,
                &batch,
                length,
                n_train,
                config,
                &mut Sampling::Sample(&mut noise),
            )?;
            if !b.loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, experiments {chunk:?} (loss {})",
                    b.loss
                )));
            }
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut model.params, &grads);
            sums.elbo += b.elbo;
            sums.kl += b.kl;
            sums.nll += b.nll;
            steps += 1;
        }
        let (test_loss, rmse) = test_pass(&model, &test_graphs, length, n_train, config, test_noise_seed)?;
        if !test_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite test loss at epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            train_elbo: sums.elbo / steps as f64,
            kl: sums.kl / steps as f64,
            nll: sums.nll / steps as f64,
            test_loss,
            rmse_phi: rmse[0],
            rmse_l: rmse[1],
            rmse_psi: rmse[2],
        };
        on_epoch(&entry);
        log.push(entry);
        let improved = best.as_ref().is_none_or(|(l, _, _)| test_loss < *l);
        if improved {
            best = Some((test_loss, epoch, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        localizer: Localizer { model, scaler, length },
        log,
        best_epoch,
    })
}

/// Least-squares baseline: [`train`] with every variational layer replaced
/// by its mean and no KL term.
pub fn train_deterministic(
    train_set: &[GraphSeries],
    test: &[GraphSeries],
    length: f64,
    model_config: &GraphNetConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        deterministic: true,
        ..config.clone()
    };
    train(train_set, test, length, model_config, &config, on_epoch)
}
