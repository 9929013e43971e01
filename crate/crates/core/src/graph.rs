//! Sensor graphs: random sensor layouts, node and edge features, and
//! symmetric k-nearest-neighbour connectivity under the geodesic metric.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::{contrast_experiment, ContrastedSeries, PcaBasis, SensorReadings, N_CHANNELS};
use crate::sim::{CrackLabel, DenseStrainField, Experiment, TubeConfig};
use crate::tensor::Tensor;

pub use crate::geometry::{geodesic_distance, SurfacePoint};

/// Residual channels followed by `p_L / length`, `sin p_phi`, `cos p_phi`.
pub const N_NODE_CHANNELS: usize = N_CHANNELS + 3;
/// `[ΔL / length, sin Δφ, cos Δφ, distance / length]`.
pub const N_EDGE_FEATURES: usize = 4;

/// Rejection sampling gives up after this many draws per sensor.
const MAX_ATTEMPTS_PER_SENSOR: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub n_sensors: usize,
    pub k: usize,
    /// Sensors closer than this to the crack centre are not placed, meters.
    pub exclusion_radius: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_sensors: 150,
            k: 6,
            exclusion_radius: 0.10,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("graph: k must be >= 1".into()));
        }
        if self.n_sensors <= self.k {
            return Err(Error::Config(format!(
                "graph: n_sensors ({}) must exceed k ({})",
                self.n_sensors, self.k
            )));
        }
        if !(self.exclusion_radius >= 0.0) {
            return Err(Error::Config("graph: exclusion_radius must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sensor positions and the grid cell each one reads from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub positions: Vec<SurfacePoint>,
    pub cells: Vec<(usize, usize)>,
}

impl SensorLayout {
    pub fn from_positions(tube: &TubeConfig, positions: Vec<SurfacePoint>) -> Self {
        let cells = positions.iter().map(|&p| tube.nearest_cell(p)).collect();
        Self { positions, cells }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Flat grid indices `li * n_angle + ai`.
    pub fn grid_indices(&self, n_angle: usize) -> Vec<usize> {
        self.cells.iter().map(|&(li, ai)| li * n_angle + ai).collect()
    }

    /// Sensors per square meter of tube surface.
    pub fn density(&self, tube: &TubeConfig) -> f64 {
        self.len() as f64 / tube.surface_area()
    }
}

/// Uniform random sensors over the surface, rejecting draws within
/// `exclusion_radius` (geodesic) of the crack centre.
pub fn place_sensors(
    tube: &TubeConfig,
    crack: Option<&CrackLabel>,
    n_sensors: usize,
    exclusion_radius: f64,
    rng: &mut impl Rng,
) -> Result<SensorLayout> {
    let radius = tube.radius();
    let mut positions = Vec::with_capacity(n_sensors);
    let max_attempts = MAX_ATTEMPTS_PER_SENSOR * n_sensors.max(1);
    let mut attempts = 0;
    while positions.len() < n_sensors {
        if attempts == max_attempts {
            return Err(Error::InvalidArgument(format!(
                "placed only {} of {n_sensors} sensors after {max_attempts} draws",
                positions.len()
            )));
        }
        attempts += 1;
        let p = SurfacePoint::new(rng.random::<f64>() * tube.length, rng.random::<f64>() * TAU);
        let excluded = crack.is_some_and(|c| geodesic_distance(p, c.center(), radius) < exclusion_radius);
        if !excluded {
            positions.push(p);
        }
    }
    Ok(SensorLayout::from_positions(tube, positions))
}

/// Relative geometry of an edge, `receiver − sender`.
pub fn edge_features(
    sender: SurfacePoint,
    receiver: SurfacePoint,
    radius: f64,
    length: f64,
) -> [f64; N_EDGE_FEATURES] {
    let dphi = receiver.phi - sender.phi;
    [
        (receiver.l - sender.l) / length,
        dphi.sin(),
        dphi.cos(),
        geodesic_distance(sender, receiver, radius) / length,
    ]
}

/// Directed edges to each node's `k` nearest neighbours, symmetrized and
/// deduplicated, sorted by `(sender, receiver)`. Ties in distance go to the
/// lower index.
pub fn knn_edges(positions: &[SurfacePoint], k: usize, radius: f64) -> Result<Vec<(usize, usize)>> {
    let n = positions.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more than k = {k} sensors, got {n}"
        )));
    }
    let mut set = BTreeSet::new();
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (geodesic_distance(positions[i], positions[j], radius), j)),
        );
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &dists[..k] {
            set.insert((i, j));
            set.insert((j, i));
        }
    }
    Ok(set.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub sender: usize,
    pub receiver: usize,
    pub features: [f64; N_EDGE_FEATURES],
}

/// An attributed sensor graph over one time window.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    /// `[n_nodes × n_time × N_NODE_CHANNELS]`.
    pub node_features: Tensor,
    pub edges: Vec<Edge>,
    /// `(p_phi, p_L, p_psi)` in physical units.
    pub global_target: Option<[f64; 3]>,
}

impl SensorGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_time(&self) -> usize {
        self.node_features.shape()[1]
    }

    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.sender).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.receiver).collect()
    }

    /// `[n_edges × N_EDGE_FEATURES]`.
    pub fn edge_feature_tensor(&self) -> Tensor {
        let data = self.edges.iter().flat_map(|e| e.features).collect();
        Tensor::new(vec![self.edges.len(), N_EDGE_FEATURES], data).expect("edge feature shape")
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.node_features.shape();
        if shape.len() != 3 || shape[2] != N_NODE_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "node features must be [nodes x time x {N_NODE_CHANNELS}], got {shape:?}"
            )));
        }
        let n = shape[0];
        for e in &self.edges {
            if e.sender >= n || e.receiver >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge {} -> {} out of range for {n} nodes",
                    e.sender, e.receiver
                )));
            }
            if e.sender == e.receiver {
                return Err(Error::InvalidArgument(format!("self-edge at node {}", e.sender)));
            }
        }
        Ok(())
    }

    /// Relabels nodes so that old node `i` becomes `node_perm[i]`, and
    /// reorders edges so that new edge `edge_perm[j]` is old edge `j`.
    pub fn permuted(&self, node_perm: &[usize], edge_perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        if !is_permutation(node_perm, n) || !is_permutation(edge_perm, self.n_edges()) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        let row = self.node_features.len() / n.max(1);
        let mut data = vec![0.0; self.node_features.len()];
        for (old, &new) in node_perm.iter().enumerate() {
            data[new * row..(new + 1) * row]
                .copy_from_slice(&self.node_features.data()[old * row..(old + 1) * row]);
        }
        let mut edges = self.edges.clone();
        for (old, &new) in edge_perm.iter().enumerate() {
            let e = &self.edges[old];
            edges[new] = Edge {
                sender: node_perm[e.sender],
                receiver: node_perm[e.receiver],
                features: e.features,
            };
        }
        Ok(Self {
            node_features: Tensor::new(self.node_features.shape().to_vec(), data)?,
            edges,
            global_target: self.global_target,
        })
    }
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n
        && p.iter().all(|&i| {
            let fresh = i < n && !seen[i];
            if fresh {
                seen[i] = true;
            }
            fresh
        })
}

/// Unstandardized node features for time steps `start..start + len`:
/// the eight contrasted channels then the three position channels.
pub fn node_features(
    residuals: &ContrastedSeries,
    positions: &[SurfacePoint],
    length: f64,
    start: usize,
    len: usize,
) -> Result<Tensor> {
    if positions.len() != residuals.n_sensors {
        return Err(Error::InvalidArgument(format!(
            "{} positions for {} sensors",
            positions.len(),
            residuals.n_sensors
        )));
    }
    if len == 0 || start + len > residuals.n_timesteps {
        return Err(Error::InvalidArgument(format!(
            "window {start}..{} outside {} time steps",
            start + len,
            residuals.n_timesteps
        )));
    }
    let n = positions.len();
    let mut data = Vec::with_capacity(n * len * N_NODE_CHANNELS);
    for (s, p) in positions.iter().enumerate() {
        let pos = [p.l / length, p.phi.sin(), p.phi.cos()];
        for t in start..start + len {
            let base = (s * residuals.n_timesteps + t) * N_CHANNELS;
            data.extend_from_slice(&residuals.data[base..base + N_CHANNELS]);
            data.extend_from_slice(&pos);
        }
    }
    Tensor::new(vec![n, len, N_NODE_CHANNELS], data)
}

/// Assembles a graph from a layout, its node features and k-NN edges.
pub fn build_sensor_graph(
    layout: &SensorLayout,
    node_features: Tensor,
    k: usize,
    target: Option<[f64; 3]>,
    tube: &TubeConfig,
) -> Result<SensorGraph> {
    if node_features.shape().first() != Some(&layout.len()) {
        return Err(Error::InvalidArgument(format!(
            "node features {:?} do not match {} sensors",
            node_features.shape(),
            layout.len()
        )));
    }
    let edges = graph_edges(layout, k, tube)?;
    let graph = SensorGraph {
        node_features,
        edges,
        global_target: target,
    };
    graph.validate()?;
    Ok(graph)
}

fn graph_edges(layout: &SensorLayout, k: usize, tube: &TubeConfig) -> Result<Vec<Edge>> {
    let radius = tube.radius();
    Ok(knn_edges(&layout.positions, k, radius)?
        .into_iter()
        .map(|(s, r)| Edge {
            sender: s,
            receiver: r,
            features: edge_features(layout.positions[s], layout.positions[r], radius, tube.length),
        })
        .collect())
}

/// Per-channel standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of each channel over every node and
    /// time step of `series`. Channels with no spread keep unit scale.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = [0.0; N_NODE_CHANNELS];
        let mut sq = [0.0; N_NODE_CHANNELS];
        for t in series {
            if t.shape().last() != Some(&N_NODE_CHANNELS) {
                return Err(Error::InvalidArgument(format!(
                    "scaler input has shape {:?}",
                    t.shape()
                )));
            }
            for row in t.data().chunks(N_NODE_CHANNELS) {
                count += 1;
                for c in 0..N_NODE_CHANNELS {
                    sum[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no data to fit feature scaler".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &mut Tensor) {
        let c = self.mean.len();
        for row in features.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// A sensor graph with features over the full time range, from which
/// windows are cut for training and prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSeries {
    pub layout: SensorLayout,
    pub edges: Vec<Edge>,
    pub k: usize,
    /// Unstandardized `[n_nodes × n_timesteps × N_NODE_CHANNELS]`.
    pub features: Tensor,
    pub crack: Option<CrackLabel>,
}

impl GraphSeries {
    pub fn new(
        layout: SensorLayout,
        residuals: &ContrastedSeries,
        k: usize,
        crack: Option<CrackLabel>,
        tube: &TubeConfig,
    ) -> Result<Self> {
        let features = node_features(residuals, &layout.positions, tube.length, 0, residuals.n_timesteps)?;
        let edges = graph_edges(&layout, k, tube)?;
        Ok(Self {
            layout,
            edges,
            k,
            features,
            crack,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_timesteps(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn target(&self) -> Option<[f64; 3]> {
        self.crack.map(|c| c.target())
    }

    /// Standardized graph for time steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize, scaler: &FeatureScaler) -> Result<SensorGraph> {
        let (n, t_len) = (self.n_nodes(), self.n_timesteps());
        if len == 0 || start + len > t_len {
            return Err(Error::InvalidArgument(format!(
                "window {start}..{} outside {t_len} time steps",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len * N_NODE_CHANNELS);
        for s in 0..n {
            let from = (s * t_len + start) * N_NODE_CHANNELS;
            data.extend_from_slice(&self.features.data()[from..from + len * N_NODE_CHANNELS]);
        }
        let mut node_features = Tensor::new(vec![n, len, N_NODE_CHANNELS], data)?;
        scaler.apply(&mut node_features);
        Ok(SensorGraph {
            node_features,
            edges: self.edges.clone(),
            global_target: self.target(),
        })
    }
}

/// Places sensors for a lazily evaluated experiment, reads and contrasts
/// them, and builds the full-length graph series.
pub fn prepare_experiment(
    exp: &Experiment,
    basis: &PcaBasis,
    config: &GraphConfig,
    rng: &mut impl Rng,
) -> Result<GraphSeries> {
    config.validate()?;
    let tube = exp.config();
    let crack = exp.crack();
    let layout = place_sensors(tube, crack.as_ref(), config.n_sensors, config.exclusion_radius, rng)?;
    let readings = SensorReadings::from_experiment(exp, &layout.cells);
    let residuals = contrast_experiment(basis, &readings, &layout.grid_indices(tube.n_angle))?;
    GraphSeries::new(layout, &residuals, config.k, crack, tube)
}

/// As [`prepare_experiment`], reading from a dense field.
pub fn prepare_dense(
    field: &DenseStrainField,
    basis: &PcaBasis,
    config: &GraphConfig,
    rng: &mut impl Rng,
) -> Result<GraphSeries> {
    config.validate()?;
    let tube = &field.config;
    let layout = place_sensors(tube, field.crack.as_ref(), config.n_sensors, config.exclusion_radius, rng)?;
    let readings = SensorReadings::from_dense(field, &layout.cells);
    let residuals = contrast_experiment(basis, &readings, &layout.grid_indices(tube.n_angle))?;
    GraphSeries::new(layout, &residuals, config.k, field.crack, tube)
}
