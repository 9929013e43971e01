//! Graph network: a graph-independent input block, message-passing core
//! blocks and a graph-to-global output head.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, wrap_periodic};
use crate::graph::{SensorGraph, N_EDGE_FEATURES, N_NODE_CHANNELS};
use crate::layers::{Binding, Conv1d, Dense, ParamStore, Sampling, VariationalDense, VariationalInit};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphNetConfig {
    /// Node and edge latent width.
    pub latent: usize,
    pub n_core: usize,
    pub conv_widths: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// Replace every variational layer by its posterior mean.
    pub deterministic: bool,
    pub variational: VariationalInit,
}

impl Default for GraphNetConfig {
    fn default() -> Self {
        Self {
            latent: 32,
            n_core: 2,
            conv_widths: vec![7, 5],
            conv_channels: vec![16, 32],
            deterministic: false,
            variational: VariationalInit::default(),
        }
    }
}

impl GraphNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.n_core == 0 {
            return Err(Error::Config("model: latent and n_core must be >= 1".into()));
        }
        if self.conv_widths.is_empty()
            || self.conv_widths.len() != self.conv_channels.len()
            || self.conv_widths.contains(&0)
            || self.conv_channels.contains(&0)
        {
            return Err(Error::Config(
                "model: conv_widths and conv_channels must be non-empty, positive and of equal length".into(),
            ));
        }
        if !(self.variational.prior_sigma > 0.0 && self.variational.sigma > 0.0 && self.variational.mu_std >= 0.0) {
            return Err(Error::Config("model: variational scales must be positive".into()));
        }
        Ok(())
    }

    /// Shortest window the temporal convolutions accept.
    pub fn min_window(&self) -> usize {
        1 + self.conv_widths.iter().map(|w| w - 1).sum::<usize>()
    }
}

/// Crack parameters `(p_phi, p_L, p_psi)` scaled to `(p_phi/π, p_L/length, p_psi/π)`.
pub fn normalize_target(target: [f64; 3], length: f64) -> [f64; 3] {
    [target[0] / PI, target[1] / length, target[2] / PI]
}

/// Inverse of [`normalize_target`], with angles mapped into their natural ranges.
pub fn denormalize_target(y: [f64; 3], length: f64) -> [f64; 3] {
    [
        normalize_angle(y[0] * PI),
        y[1] * length,
        (y[2] * PI).rem_euclid(PI),
    ]
}

/// `prediction − target` in normalized units, angles wrapped to their period.
pub fn normalized_residual(prediction: [f64; 3], target: [f64; 3]) -> [f64; 3] {
    [
        wrap_periodic(prediction[0] - target[0], 2.0),
        prediction[1] - target[1],
        wrap_periodic(prediction[2] - target[2], 1.0),
    ]
}

/// Latent node and edge states with fixed connectivity.
#[derive(Clone, Debug)]
pub struct GraphState {
    /// `[n_nodes × latent]`.
    pub nodes: Var,
    /// `[n_edges × latent]`.
    pub edges: Var,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    pub n_nodes: usize,
}

/// `dense + ReLU → variational + ReLU → dense`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesMlp {
    pub first: Dense,
    pub hidden: VariationalDense,
    pub last: Dense,
}

impl BayesMlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        width: usize,
        n_out: usize,
        init: &VariationalInit,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Dense::new(store, &format!("{name}.first"), n_in, width, rng),
            hidden: VariationalDense::new(store, &format!("{name}.hidden"), width, width, init, rng),
            last: Dense::new(store, &format!("{name}.last"), width, n_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, sampling: &mut Sampling<'_>) -> Result<Var> {
        let h = self.first.forward(tape, params, x)?;
        let h = tape.relu(h);
        let h = self.hidden.forward(tape, params, h, sampling)?;
        let h = tape.relu(h);
        self.last.forward(tape, params, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBlock {
    pub convs: Vec<Conv1d>,
    pub node_out: Dense,
    pub edge_first: Dense,
    pub edge_second: Dense,
}

impl InputBlock {
    /// Nodes: temporal convolutions, global max-pool, dense. Edges: two-layer
    /// ReLU MLP. No information passes between entities.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, graph: &SensorGraph) -> Result<GraphState> {
        graph.validate()?;
        let mut h = tape.constant(graph.node_features.clone());
        for conv in &self.convs {
            if tape.shape(h)[1] < conv.width {
                return Err(Error::InvalidArgument(format!(
                    "time window of {} steps is shorter than the convolution stack needs",
                    graph.n_time()
                )));
            }
            let y = conv.forward(tape, params, h)?;
            h = tape.relu(y);
        }
        let pooled = tape.max_over_axis(h, 1)?;
        let nodes = self.node_out.forward(tape, params, pooled)?;

        let e = tape.constant(graph.edge_feature_tensor());
        let e = self.edge_first.forward(tape, params, e)?;
        let e = tape.relu(e);
        let e = self.edge_second.forward(tape, params, e)?;
        let edges = tape.relu(e);
        Ok(GraphState {
            nodes,
            edges,
            senders: graph.senders(),
            receivers: graph.receivers(),
            n_nodes: graph.n_nodes(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreBlock {
    pub edge: BayesMlp,
    pub node: BayesMlp,
}

impl CoreBlock {
    /// Edge update from `[e, v_sender, v_receiver]`, mean aggregation of
    /// incoming edges, node update from `[v, ē]`; both with additive skips.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        state: &GraphState,
        sampling: &mut Sampling<'_>,
    ) -> Result<GraphState> {
        let vs = tape.gather_rows(state.nodes, &state.senders)?;
        let vr = tape.gather_rows(state.nodes, &state.receivers)?;
        let edge_in = tape.concat(&[state.edges, vs, vr], 1)?;
        let de = self.edge.forward(tape, params, edge_in, sampling)?;
        let edges = tape.add(state.edges, de)?;

        let agg = tape.segment_mean(edges, &state.receivers, state.n_nodes)?;
        let node_in = tape.concat(&[state.nodes, agg], 1)?;
        let dv = self.node.forward(tape, params, node_in, sampling)?;
        let nodes = tape.add(state.nodes, dv)?;
        Ok(GraphState {
            nodes,
            edges,
            senders: state.senders.clone(),
            receivers: state.receivers.clone(),
            n_nodes: state.n_nodes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputBlock {
    pub head: BayesMlp,
}

impl OutputBlock {
    /// `[mean node latent, mean edge latent]` through the head, shape `[1 × 3]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        state: &GraphState,
        sampling: &mut Sampling<'_>,
    ) -> Result<Var> {
        if state.n_nodes == 0 || state.senders.is_empty() {
            return Err(Error::InvalidArgument("output block needs a non-empty graph".into()));
        }
        let v = tape.mean_over_axis(state.nodes, 0)?;
        let e = tape.mean_over_axis(state.edges, 0)?;
        let u = tape.concat(&[v, e], 0)?;
        let width = tape.shape(u)[0];
        let u = tape.reshape(u, vec![1, width])?;
        self.head.forward(tape, params, u, sampling)
    }
}

/// Network parameters together with the blocks that index into them.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphNetModel {
    pub config: GraphNetConfig,
    pub params: ParamStore,
    pub input: InputBlock,
    pub cores: Vec<CoreBlock>,
    pub output: OutputBlock,
}

impl GraphNetModel {
    pub fn new(config: GraphNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.latent;
        let init = config.variational;
        let mut params = ParamStore::new();
        let mut c_in = N_NODE_CHANNELS;
        let mut convs = Vec::new();
        for (i, (&w, &c)) in config.conv_widths.iter().zip(&config.conv_channels).enumerate() {
            convs.push(Conv1d::new(&mut params, &format!("input.conv{i}"), w, c_in, c, rng));
            c_in = c;
        }
        let input = InputBlock {
            convs,
            node_out: Dense::new(&mut params, "input.node", c_in, d, rng),
            edge_first: Dense::new(&mut params, "input.edge0", N_EDGE_FEATURES, d, rng),
            edge_second: Dense::new(&mut params, "input.edge1", d, d, rng),
        };
        let cores = (0..config.n_core)
            .map(|i| CoreBlock {
                edge: BayesMlp::new(&mut params, &format!("core{i}.edge"), 3 * d, d, d, &init, rng),
                node: BayesMlp::new(&mut params, &format!("core{i}.node"), 2 * d, d, d, &init, rng),
            })
            .collect();
        let output = OutputBlock {
            head: BayesMlp::new(&mut params, "output", 2 * d, d, 3, &init, rng),
        };
        Ok(Self {
            config,
            params,
            input,
            cores,
            output,
        })
    }

    pub fn variational_layers(&self) -> impl Iterator<Item = &VariationalDense> {
        self.cores
            .iter()
            .flat_map(|c| [&c.edge.hidden, &c.node.hidden])
            .chain(std::iter::once(&self.output.head.hidden))
    }

    /// `KL(q ‖ p)` summed over all variational layers.
    pub fn kl(&self) -> f64 {
        self.variational_layers().map(|l| l.kl(&self.params)).sum()
    }

    pub fn kl_on_tape(&self, tape: &mut Tape, params: &Binding) -> Result<Var> {
        let mut total: Option<Var> = None;
        for layer in self.variational_layers() {
            let k = layer.kl_on_tape(tape, params)?;
            total = Some(match total {
                Some(t) => tape.add(t, k)?,
                None => k,
            });
        }
        Ok(total.expect("at least one variational layer"))
    }

    /// Records the full network on `tape`; returns the `[1 × 3]` normalized output.
    /// Deterministic models ignore the sampling argument.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &Binding,
        graph: &SensorGraph,
        sampling: &mut Sampling<'_>,
    ) -> Result<Var> {
        let mut mean = Sampling::Mean;
        let sampling = if self.config.deterministic { &mut mean } else { sampling };
        let mut state = self.input.forward(tape, params, graph)?;
        for core in &self.cores {
            state = core.forward(tape, params, &state, sampling)?;
        }
        self.output.forward(tape, params, &state, sampling)
    }

    /// Normalized prediction for one graph.
    pub fn forward(&self, graph: &SensorGraph, sampling: &mut Sampling<'_>) -> Result<[f64; 3]> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let y = self.forward_on_tape(&mut tape, &params, graph, sampling)?;
        let d = tape.value(y).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Prediction in physical units `(p_phi, p_L, p_psi)`.
    pub fn predict(&self, graph: &SensorGraph, length: f64, sampling: &mut Sampling<'_>) -> Result<[f64; 3]> {
        Ok(denormalize_target(self.forward(graph, sampling)?, length))
    }

    /// Node latents after the input block and `n_core` core blocks.
    pub fn node_latents(&self, graph: &SensorGraph, n_core: usize, sampling: &mut Sampling<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let mut state = self.input.forward(&mut tape, &params, graph)?;
        for core in self.cores.iter().take(n_core) {
            state = core.forward(&mut tape, &params, &state, sampling)?;
        }
        Ok(tape.value(state.nodes).clone())
    }
}
