//! Network layers over the autodiff tape: dense, temporal convolution and a
//! variational dense layer with local reparametrization.
//!
//! Parameters live in a [`ParamStore`]. Each forward pass binds the store to
//! a fresh [`Tape`] as leaves, so gradients come back indexed by [`ParamId`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softplus, Gradients, NoiseSource, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in creation order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Replaces values from another store of identical layout.
    pub fn load(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names
            || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("parameter layout mismatch".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// `(name, shape)` for every parameter.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| t.shape().to_vec()))
            .collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binds parameters to existing tape variables, one per parameter in
    /// store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zero where the loss does not depend on it.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// How variational layers produce their pre-activations.
pub enum Sampling<'a> {
    /// Posterior means only; bit-reproducible.
    Mean,
    /// One local-reparametrization draw per output unit and row.
    Sample(&'a mut dyn NoiseSource),
}

impl Sampling<'_> {
    pub fn is_mean(&self) -> bool {
        matches!(self, Sampling::Mean)
    }
}

fn glorot(fan_in: usize, fan_out: usize, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("glorot shape")
}

/// Affine layer `x W + b` on `[n × in]` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(n_in, n_out, vec![n_in, n_out], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        Self {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params.var(self.weight))?;
        tape.add_bias(h, params.var(self.bias))
    }
}

/// Valid-padding temporal convolution on `[batch × time × c_in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot(width * c_in, c_out, vec![width, c_in, c_out], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            kernel,
            bias,
            width,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, params.var(self.kernel))?;
        let shape = tape.shape(y).to_vec();
        let flat = tape.reshape(y, vec![shape[0] * shape[1], shape[2]])?;
        let biased = tape.add_bias(flat, params.var(self.bias))?;
        tape.reshape(biased, shape)
    }
}

/// Prior scale and posterior initialization for variational layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalInit {
    pub prior_sigma: f64,
    pub mu_std: f64,
    pub sigma: f64,
}

impl Default for VariationalInit {
    fn default() -> Self {
        Self {
            prior_sigma: 1.0,
            mu_std: 0.05,
            sigma: 0.01,
        }
    }
}

/// `softplus⁻¹(y)` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y − 1), rearranged to stay finite for large y
    y + (-(-y).exp_m1()).ln()
}

/// Dense layer with a factored Gaussian posterior over weights and biases,
/// `σ = softplus(ρ)`, against a zero-mean Gaussian prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalDense {
    pub weight_mu: ParamId,
    pub weight_rho: ParamId,
    pub bias_mu: ParamId,
    pub bias_rho: ParamId,
    pub n_in: usize,
    pub n_out: usize,
    pub prior_sigma: f64,
}

impl VariationalDense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: &VariationalInit,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, init.mu_std).expect("finite init std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        let rho = inverse_softplus(init.sigma);
        let w_mu = Tensor::new(vec![n_in, n_out], draw(n_in * n_out)).expect("weight shape");
        let b_mu = Tensor::new(vec![n_out], draw(n_out)).expect("bias shape");
        Self {
            weight_mu: store.add(format!("{name}.weight_mu"), w_mu),
            weight_rho: store.add(format!("{name}.weight_rho"), Tensor::full(&[n_in, n_out], rho)),
            bias_mu: store.add(format!("{name}.bias_mu"), b_mu),
            bias_rho: store.add(format!("{name}.bias_rho"), Tensor::full(&[n_out], rho)),
            n_in,
            n_out,
            prior_sigma: init.prior_sigma,
        }
    }

    /// Pre-activation mean `x μ_W + μ_b` and variance `x² σ_W² + σ_b²`.
    pub fn moments(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<(Var, Var)> {
        let h = tape.matmul(x, params.var(self.weight_mu))?;
        let mean = tape.add_bias(h, params.var(self.bias_mu))?;
        let sw = tape.softplus(params.var(self.weight_rho));
        let sw2 = tape.square(sw);
        let sb = tape.softplus(params.var(self.bias_rho));
        let sb2 = tape.square(sb);
        let x2 = tape.square(x);
        let v = tape.matmul(x2, sw2)?;
        let var = tape.add_bias(v, sb2)?;
        Ok((mean, var))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, sampling: &mut Sampling<'_>) -> Result<Var> {
        match sampling {
            Sampling::Mean => {
                let h = tape.matmul(x, params.var(self.weight_mu))?;
                tape.add_bias(h, params.var(self.bias_mu))
            }
            Sampling::Sample(noise) => {
                let (mean, var) = self.moments(tape, params, x)?;
                let std = tape.sqrt(var);
                tape.gaussian_sample(mean, std, &mut **noise)
            }
        }
    }

    fn pairs(&self) -> [(ParamId, ParamId); 2] {
        [(self.weight_mu, self.weight_rho), (self.bias_mu, self.bias_rho)]
    }

    /// Closed-form `KL(q ‖ p)` recorded on the tape.
    pub fn kl_on_tape(&self, tape: &mut Tape, params: &Binding) -> Result<Var> {
        let sp2 = self.prior_sigma * self.prior_sigma;
        let mut total: Option<Var> = None;
        for (mu, rho) in self.pairs() {
            let n = tape.value(params.var(mu)).len() as f64;
            let sigma = tape.softplus(params.var(rho));
            let log_sigma = tape.log(sigma);
            let s2 = tape.square(sigma);
            let m2 = tape.square(params.var(mu));
            let quad = tape.add(s2, m2)?;
            let sum_quad = tape.sum(quad);
            let sum_log = tape.sum(log_sigma);
            let a = tape.scale(sum_quad, 0.5 / sp2);
            let b = tape.sub(a, sum_log)?;
            let c = tape.constant(Tensor::scalar(n * (self.prior_sigma.ln() - 0.5)));
            let term = tape.add(b, c)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("two parameter pairs"))
    }

    /// Closed-form `KL(q ‖ p)` from stored values.
    pub fn kl(&self, store: &ParamStore) -> f64 {
        self.pairs()
            .iter()
            .map(|&(mu, rho)| kl_gaussian(store.get(mu).data(), store.get(rho).data(), self.prior_sigma))
            .sum()
    }
}

/// `Σ log(σ_p/σ_q) + (σ_q² + μ²)/(2σ_p²) − ½` with `σ_q = softplus(ρ)`.
pub fn kl_gaussian(mu: &[f64], rho: &[f64], prior_sigma: f64) -> f64 {
    let sp2 = prior_sigma * prior_sigma;
    mu.iter()
        .zip(rho)
        .map(|(&m, &r)| {
            let s = softplus(r);
            (prior_sigma / s).ln() + (s * s + m * m) / (2.0 * sp2) - 0.5
        })
        .sum()
}
