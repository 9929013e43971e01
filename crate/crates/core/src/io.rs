//! On-disk formats.
//!
//! Array files share one container: the magic `CRKG`, a little-endian `u64`
//! header length, a JSON header, then little-endian `f64` arrays back to
//! back. The header records each array's name and length.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::write_atomic;
use crate::graph::{Edge, FeatureScaler, GraphSeries, SensorLayout, N_EDGE_FEATURES, N_NODE_CHANNELS};
use crate::graphnet::{GraphNetConfig, GraphNetModel};
use crate::pca::{ChannelBasis, PcaBasis};
use crate::sim::{CrackLabel, DenseStrainField, Experiment, Simulator, TubeConfig};
use crate::tensor::Tensor;
use crate::training::{EpochLog, Localizer};

const MAGIC: &[u8; 4] = b"CRKG";

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    header: H,
    arrays: Vec<(String, usize)>,
}

/// Writes a container file atomically.
pub fn write_container<H: Serialize>(path: &Path, kind: &str, header: &H, arrays: &[(&str, &[f64])]) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        header,
        arrays: arrays.iter().map(|(n, a)| (n.to_string(), a.len())).collect(),
    };
    let json = serde_json::to_vec(&env)?;
    let total: usize = arrays.iter().map(|(_, a)| a.len()).sum();
    let mut bytes = Vec::with_capacity(12 + json.len() + 8 * total);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, a) in arrays {
        for v in *a {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Reads a container written by [`write_container`], checking its kind.
pub fn read_container<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<(String, Vec<f64>)>)> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a container file", path.display())));
    }
    let len = u64::from_le_bytes(head[4..].try_into().expect("eight bytes")) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)?;
    let env: Envelope<H> = serde_json::from_slice(&json)?;
    if env.kind != kind {
        return Err(Error::Format(format!(
            "{} holds '{}', expected '{kind}'",
            path.display(),
            env.kind
        )));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let total: usize = env.arrays.iter().map(|(_, n)| n).sum();
    if rest.len() != 8 * total {
        return Err(Error::Format(format!(
            "{}: {} payload bytes, header declares {}",
            path.display(),
            rest.len(),
            8 * total
        )));
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")));
    let arrays = env
        .arrays
        .into_iter()
        .map(|(name, n)| (name, values.by_ref().take(n).collect()))
        .collect();
    Ok((env.header, arrays))
}

fn take_array(arrays: &mut Vec<(String, Vec<f64>)>, name: &str) -> Result<Vec<f64>> {
    let i = arrays
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing array '{name}'")))?;
    Ok(arrays.swap_remove(i).1)
}

#[derive(Serialize, Deserialize)]
struct ExperimentHeader {
    config: TubeConfig,
    seed: u64,
    n_modes: usize,
    defects: Vec<(CrackLabel, f64)>,
}

/// Stores an experiment as its modal coordinates and defects; the field is
/// re-evaluated on load.
pub fn save_experiment(path: &Path, exp: &Experiment) -> Result<()> {
    let header = ExperimentHeader {
        config: exp.config().clone(),
        seed: exp.seed(),
        n_modes: exp.config().n_modes,
        defects: exp.defects(),
    };
    write_container(path, "experiment", &header, &[("coefficients", exp.coefficients())])
}

pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let (h, mut arrays): (ExperimentHeader, _) = read_container(path, "experiment")?;
    let sim = Simulator::new(h.config)?;
    let mut exp = sim.from_coefficients(h.seed, take_array(&mut arrays, "coefficients")?)?;
    for (crack, gain) in h.defects {
        exp.add_defect(crack, gain)?;
    }
    Ok(exp)
}

#[derive(Serialize, Deserialize)]
struct DenseHeader {
    config: TubeConfig,
    crack: Option<CrackLabel>,
    seed: u64,
    shape: [usize; 4],
}

/// Full `[t, L, φ, channel]` field. Only practical on small grids.
pub fn save_dense_field(path: &Path, field: &DenseStrainField) -> Result<()> {
    let c = &field.config;
    let header = DenseHeader {
        config: c.clone(),
        crack: field.crack,
        seed: field.seed,
        shape: [c.n_timesteps, c.n_length, c.n_angle, 6],
    };
    write_container(
        path,
        "dense-field",
        &header,
        &[("strain", &field.strain), ("coefficients", &field.coefficients)],
    )
}

pub fn load_dense_field(path: &Path) -> Result<DenseStrainField> {
    let (h, mut arrays): (DenseHeader, _) = read_container(path, "dense-field")?;
    Ok(DenseStrainField {
        config: h.config,
        strain: take_array(&mut arrays, "strain")?,
        crack: h.crack,
        seed: h.seed,
        coefficients: take_array(&mut arrays, "coefficients")?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub file: String,
    pub seed: u64,
    pub crack: Option<CrackLabel>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Serialize, Deserialize)]
struct ChannelHeader {
    n_components: usize,
    singular_values: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    n_length: usize,
    n_angle: usize,
    channels: Vec<ChannelHeader>,
}

pub fn save_basis(path: &Path, basis: &PcaBasis) -> Result<()> {
    let header = BasisHeader {
        n_length: basis.n_length,
        n_angle: basis.n_angle,
        channels: basis
            .channels
            .iter()
            .map(|c| ChannelHeader {
                n_components: c.n_components(),
                singular_values: c.singular_values.clone(),
                explained_variance_ratio: c.explained_variance_ratio.clone(),
            })
            .collect(),
    };
    let names: Vec<(String, String)> = (0..basis.channels.len())
        .map(|i| (format!("mean{i}"), format!("components{i}")))
        .collect();
    let mut arrays: Vec<(&str, &[f64])> = Vec::new();
    for (c, (m, k)) in basis.channels.iter().zip(&names) {
        arrays.push((m, &c.mean));
        arrays.push((k, c.components()));
    }
    write_container(path, "pca-basis", &header, &arrays)
}

pub fn load_basis(path: &Path) -> Result<PcaBasis> {
    let (h, mut arrays): (BasisHeader, _) = read_container(path, "pca-basis")?;
    let channels = h
        .channels
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            ChannelBasis::new(
                take_array(&mut arrays, &format!("mean{i}"))?,
                take_array(&mut arrays, &format!("components{i}"))?,
                c.n_components,
                c.singular_values,
                c.explained_variance_ratio,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PcaBasis {
        n_length: h.n_length,
        n_angle: h.n_angle,
        channels,
    })
}

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    n_nodes: usize,
    n_edges: usize,
    k: usize,
    window: (usize, usize),
    target: Option<[f64; 3]>,
    crack: Option<CrackLabel>,
    layout: SensorLayout,
}

pub fn save_graph(path: &Path, series: &GraphSeries) -> Result<()> {
    let header = GraphHeader {
        n_nodes: series.n_nodes(),
        n_edges: series.edges.len(),
        k: series.k,
        window: (0, series.n_timesteps()),
        target: series.target(),
        crack: series.crack,
        layout: series.layout.clone(),
    };
    let endpoints: Vec<f64> = series
        .edges
        .iter()
        .flat_map(|e| [e.sender as f64, e.receiver as f64])
        .collect();
    let edge_features: Vec<f64> = series.edges.iter().flat_map(|e| e.features).collect();
    write_container(
        path,
        "sensor-graph",
        &header,
        &[
            ("node_features", series.features.data()),
            ("edge_endpoints", &endpoints),
            ("edge_features", &edge_features),
        ],
    )
}

pub fn load_graph(path: &Path) -> Result<GraphSeries> {
    let (h, mut arrays): (GraphHeader, _) = read_container(path, "sensor-graph")?;
    let features = Tensor::new(
        vec![h.n_nodes, h.window.1 - h.window.0, N_NODE_CHANNELS],
        take_array(&mut arrays, "node_features")?,
    )?;
    let endpoints = take_array(&mut arrays, "edge_endpoints")?;
    let edge_features = take_array(&mut arrays, "edge_features")?;
    if endpoints.len() != 2 * h.n_edges || edge_features.len() != N_EDGE_FEATURES * h.n_edges {
        return Err(Error::Format(format!("{}: edge arrays do not match header", path.display())));
    }
    let edges = endpoints
        .chunks_exact(2)
        .zip(edge_features.chunks_exact(N_EDGE_FEATURES))
        .map(|(ends, f)| Edge {
            sender: ends[0] as usize,
            receiver: ends[1] as usize,
            features: f.try_into().expect("edge feature width"),
        })
        .collect();
    Ok(GraphSeries {
        layout: h.layout,
        edges,
        k: h.k,
        features,
        crack: h.crack,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub model: GraphNetConfig,
    pub parameters: Vec<(String, Vec<usize>)>,
    pub scaler: FeatureScaler,
    pub length: f64,
    pub best_epoch: usize,
    /// Free-form hyperparameters recorded alongside, e.g. the training config.
    pub hyperparameters: serde_json::Value,
}

/// `manifest.json` and `params.bin` (parameters concatenated in manifest
/// order, little-endian `f64`) under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    localizer: &Localizer,
    best_epoch: usize,
    hyperparameters: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format: 1,
        model: localizer.model.config.clone(),
        parameters: localizer.model.params.layout(),
        scaler: localizer.scaler.clone(),
        length: localizer.length,
        best_epoch,
        hyperparameters,
    };
    let flat = localizer.model.params.flatten();
    let mut bytes = Vec::with_capacity(8 * flat.len());
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("params.bin"), &bytes)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Localizer, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let bytes = fs::read(dir.join("params.bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("params.bin length is not a multiple of 8".into()));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    // parameters are overwritten below, so the init stream is irrelevant
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = GraphNetModel::new(manifest.model.clone(), &mut rng)?;
    if model.params.layout() != manifest.parameters {
        return Err(Error::Format("checkpoint topology does not match its parameters".into()));
    }
    model.params.set_flat(&flat)?;
    let localizer = Localizer {
        model,
        scaler: manifest.scaler.clone(),
        length: manifest.length,
    };
    Ok((localizer, manifest))
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
