use std::f64::consts::TAU;
use std::hint::black_box;

use crackgnn_core::geometry::SurfacePoint;
use crackgnn_core::graph::{edge_features, knn_edges, Edge, SensorGraph, N_NODE_CHANNELS};
use crackgnn_core::graphnet::{GraphNetConfig, GraphNetModel};
use crackgnn_core::layers::Sampling;
use crackgnn_core::pca::{sparse_project, PcaBasis, PcaConfig, SparseProjector};
use crackgnn_core::rng::{stream, StageRng};
use crackgnn_core::sim::{Simulator, TubeConfig};
use crackgnn_core::tensor::{gemm, RngNoise, Tape, Tensor};
use crackgnn_core::training::{loss_and_gradients, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::seq::index::sample;
use rand::Rng;

fn uniform(n: usize, r: &mut StageRng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    let mut r = stream(1, &[]);
    for n in [32, 128, 256] {
        let a = uniform(n * n, &mut r);
        let b = uniform(n * n, &mut r);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), false, 0.0, &mut out))
        });
    }
    group.finish();
}

fn bench_conv1d(c: &mut Criterion) {
    let mut r = stream(2, &[]);
    // one window of the default model's first convolution over 60 sensors
    let x = Tensor::new(vec![60, 150, N_NODE_CHANNELS], uniform(60 * 150 * N_NODE_CHANNELS, &mut r)).unwrap();
    let k = Tensor::new(vec![5, N_NODE_CHANNELS, 16], uniform(5 * N_NODE_CHANNELS * 16, &mut r)).unwrap();
    c.bench_function("conv1d forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv1d(xv, kv).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn bench_projection(c: &mut Criterion) {
    let tube = TubeConfig {
        n_length: 60,
        n_angle: 60,
        n_timesteps: 200,
        ..TubeConfig::default()
    };
    let sim = Simulator::new(tube.clone()).unwrap();
    let healthy = vec![sim.healthy(3, 0)];
    let config = PcaConfig {
        n_components: 12,
        ..PcaConfig::default()
    };
    let basis = PcaBasis::fit_healthy(&healthy, &config, &mut stream(3, &[1])).unwrap();
    let mut r = stream(3, &[2]);
    let sensors = sample(&mut r, tube.grid_points(), 60).into_vec();
    let readings = uniform(60, &mut r);
    let series = uniform(60 * 200, &mut r);
    let channel = basis.channel(0);
    let mut group = c.benchmark_group("sparse projection");
    group.bench_function("single snapshot", |bench| {
        bench.iter(|| sparse_project(black_box(channel), &sensors, black_box(&readings)).unwrap())
    });
    let projector = SparseProjector::new(channel, &sensors).unwrap();
    group.bench_function("200 snapshots, factored once", |bench| {
        bench.iter(|| projector.residuals(black_box(&series), 200).unwrap())
    });
    group.finish();
}

fn sensor_graph(n: usize, window: usize, r: &mut StageRng) -> SensorGraph {
    let positions: Vec<SurfacePoint> = (0..n)
        .map(|_| SurfacePoint::new(r.random::<f64>() * 10.0, r.random::<f64>() * TAU))
        .collect();
    let edges = knn_edges(&positions, 6, 0.5)
        .unwrap()
        .into_iter()
        .map(|(s, t)| Edge {
            sender: s,
            receiver: t,
            features: edge_features(positions[s], positions[t], 0.5, 10.0),
        })
        .collect();
    SensorGraph {
        node_features: Tensor::new(vec![n, window, N_NODE_CHANNELS], uniform(n * window * N_NODE_CHANNELS, r)).unwrap(),
        edges,
        global_target: Some([1.0, 5.0, 0.5]),
    }
}

fn bench_graphnet(c: &mut Criterion) {
    let mut r = stream(4, &[]);
    let model = GraphNetModel::new(GraphNetConfig::default(), &mut r).unwrap();
    let graph = sensor_graph(60, 150, &mut r);
    let mut group = c.benchmark_group("graph network");
    group.sample_size(20);
    group.bench_function("forward, 60 sensors", |bench| {
        let mut noise = RngNoise(stream(4, &[1]));
        bench.iter(|| model.forward(black_box(&graph), &mut Sampling::Sample(&mut noise)).unwrap())
    });
    let batch = [graph.clone()];
    let config = TrainConfig::default();
    group.bench_function("elbo + gradients, 60 sensors", |bench| {
        let mut noise = RngNoise(stream(4, &[2]));
        bench.iter(|| loss_and_gradients(&model, &batch, 10.0, 40, &config, &mut Sampling::Sample(&mut noise)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_conv1d, bench_projection, bench_graphnet);
criterion_main!(benches);
