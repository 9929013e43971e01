#![allow(dead_code)]

use crackgnn_core::graph::{edge_features, knn_edges, Edge, SensorGraph, N_NODE_CHANNELS};
use crackgnn_core::graphnet::GraphNetConfig;
use crackgnn_core::geometry::SurfacePoint;
use crackgnn_core::tensor::{FrozenNoise, NoiseSource, RecordingNoise, RngNoise, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LENGTH: f64 = 10.0;
pub const RADIUS: f64 = 0.5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Model small enough for element-wise finite differences.
pub fn small_config(deterministic: bool) -> GraphNetConfig {
    GraphNetConfig {
        latent: 6,
        n_core: 2,
        conv_widths: vec![3, 2],
        conv_channels: vec![3, 4],
        deterministic,
        ..GraphNetConfig::default()
    }
}

pub fn random_positions(n: usize, rng: &mut impl Rng) -> Vec<SurfacePoint> {
    (0..n)
        .map(|_| SurfacePoint::new(rng.random::<f64>() * LENGTH, rng.random::<f64>() * std::f64::consts::TAU))
        .collect()
}

/// A k-NN sensor graph over random positions with normal node features.
pub fn random_graph(n: usize, n_time: usize, k: usize, rng: &mut impl Rng) -> SensorGraph {
    let positions = random_positions(n, rng);
    let edges = knn_edges(&positions, k, RADIUS)
        .unwrap()
        .into_iter()
        .map(|(s, r)| Edge {
            sender: s,
            receiver: r,
            features: edge_features(positions[s], positions[r], RADIUS, LENGTH),
        })
        .collect();
    SensorGraph {
        node_features: normal_tensor(&[n, n_time, N_NODE_CHANNELS], rng),
        edges,
        global_target: Some([
            rng.random::<f64>() * std::f64::consts::TAU,
            rng.random::<f64>() * LENGTH,
            rng.random::<f64>() * std::f64::consts::PI,
        ]),
    }
}

/// Runs `f` once with fresh noise and returns the draws it consumed.
pub fn record<T>(seed: u64, f: impl FnOnce(&mut dyn NoiseSource) -> T) -> (T, Vec<Vec<f64>>) {
    let mut rec = RecordingNoise::new(RngNoise(rng(seed)));
    let out = f(&mut rec);
    (out, rec.into_draws())
}

pub fn frozen(draws: &[Vec<f64>]) -> FrozenNoise {
    FrozenNoise::new(draws.to_vec())
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output element carries a
/// distinct weight in the checked gradient.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let w = normal_tensor(tape.shape(x), &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

/// Kolmogorov–Smirnov test of `u` against Uniform(0, 1); returns the
/// asymptotic p-value.
pub fn ks_uniform_p(u: &[f64]) -> f64 {
    let mut s = u.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i as f64 + 1.0) / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

/// Singular values of a row-major `rows × cols` matrix, descending.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Basis with orthonormal random components and a random mean.
pub fn random_channel_basis(
    grid: usize,
    k: usize,
    rng: &mut impl Rng,
) -> crackgnn_core::pca::ChannelBasis {
    let a = nalgebra::DMatrix::from_fn(grid, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let components: Vec<f64> = (0..grid).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect();
    let mean = (0..grid).map(|_| rng.sample(StandardNormal)).collect();
    crackgnn_core::pca::ChannelBasis::new(mean, components, k, vec![1.0; k], vec![1.0 / k as f64; k]).unwrap()
}

/// `(Ψ̄ᵀΨ̄)⁻¹Ψ̄ᵀε̄` computed literally, and the residual `Ψ̄ĉ − ε̄`.
pub fn normal_equations(
    basis: &crackgnn_core::pca::ChannelBasis,
    sensors: &[usize],
    readings: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let k = basis.n_components();
    let psi = nalgebra::DMatrix::from_fn(sensors.len(), k, |i, j| basis.row(sensors[i])[j]);
    let eps = nalgebra::DVector::from_iterator(
        sensors.len(),
        sensors.iter().zip(readings).map(|(&s, &r)| r - basis.mean[s]),
    );
    let gram_inv = (psi.transpose() * &psi).try_inverse().expect("well-conditioned");
    let c = gram_inv * psi.transpose() * &eps;
    let r = &psi * &c - eps;
    (c.iter().copied().collect(), r.iter().copied().collect())
}

/// Moves recorded per-row draws to follow a relabelling: row `i` of every
/// node draw goes to `node_perm[i]` and row `j` of every edge draw to
/// `edge_perm[j]`. Core blocks draw edges then nodes; the global head last.
pub fn permute_draws(
    draws: &[Vec<f64>],
    n_core: usize,
    node_perm: &[usize],
    edge_perm: &[usize],
) -> Vec<Vec<f64>> {
    let relabel = |draw: &[f64], perm: &[usize]| -> Vec<f64> {
        let width = draw.len() / perm.len();
        let mut out = vec![0.0; draw.len()];
        for (old, &new) in perm.iter().enumerate() {
            out[new * width..(new + 1) * width].copy_from_slice(&draw[old * width..(old + 1) * width]);
        }
        out
    };
    assert_eq!(draws.len(), 2 * n_core + 1);
    let mut out = Vec::with_capacity(draws.len());
    for c in 0..n_core {
        out.push(relabel(&draws[2 * c], edge_perm));
        out.push(relabel(&draws[2 * c + 1], node_perm));
    }
    out.push(draws[2 * n_core].clone());
    out
}
