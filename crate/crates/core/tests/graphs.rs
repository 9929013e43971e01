mod common;

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use common::*;
use crackgnn_core::geometry::{geodesic_distance, SurfacePoint};
use crackgnn_core::graph::*;
use crackgnn_core::sim::{CrackLabel, TubeConfig};
use rand::seq::SliceRandom;
use rand::Rng;

fn brute_neighbours(positions: &[SurfacePoint], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..positions.len())
        .filter(|&j| j != i)
        .map(|j| (geodesic_distance(positions[i], positions[j], RADIUS), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d[..k].iter().map(|p| p.1).collect()
}

#[test]
fn knn_graphs_are_symmetric_and_contain_every_nearest_neighbour() {
    let mut r = rng(30);
    for _ in 0..100 {
        let n = r.random_range(8..60);
        let k = r.random_range(1..7);
        let positions = random_positions(n, &mut r);
        let edges = knn_edges(&positions, k, RADIUS).unwrap();
        let set: BTreeSet<_> = edges.iter().copied().collect();
        assert_eq!(set.len(), edges.len(), "duplicates");
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
        let mut degree = vec![0; n];
        for &(s, t) in &edges {
            assert_ne!(s, t);
            assert!(set.contains(&(t, s)));
            degree[s] += 1;
        }
        assert!(degree.iter().all(|&d| d >= k));
        for i in 0..n {
            for j in brute_neighbours(&positions, i, k) {
                assert!(set.contains(&(i, j)));
            }
        }
    }
}

#[test]
fn knn_commutes_with_relabelling() {
    let mut r = rng(31);
    for _ in 0..50 {
        let n = 30;
        let positions = random_positions(n, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let mut shuffled = vec![positions[0]; n];
        for (old, &new) in perm.iter().enumerate() {
            shuffled[new] = positions[old];
        }
        let a: BTreeSet<_> = knn_edges(&positions, 4, RADIUS)
            .unwrap()
            .into_iter()
            .map(|(s, t)| (perm[s], perm[t]))
            .collect();
        let b: BTreeSet<_> = knn_edges(&shuffled, 4, RADIUS).unwrap().into_iter().collect();
        assert_eq!(a, b);
    }
}

#[test]
fn edge_features_are_translation_invariant() {
    let mut r = rng(32);
    for _ in 0..200 {
        let a = random_positions(2, &mut r);
        let (dl, dphi) = (r.random_range(-3.0..3.0), r.random_range(-10.0..10.0));
        let shift = |p: SurfacePoint| SurfacePoint::new(p.l + dl, (p.phi + dphi).rem_euclid(TAU));
        let f = edge_features(a[0], a[1], RADIUS, LENGTH);
        let g = edge_features(shift(a[0]), shift(a[1]), RADIUS, LENGTH);
        for (x, y) in f.iter().zip(&g) {
            assert!((x - y).abs() < 1e-12, "{f:?} {g:?}");
        }
    }
}

#[test]
fn angular_offset_round_trips_through_atan2() {
    let mut r = rng(33);
    for _ in 0..1000 {
        let a = random_positions(2, &mut r);
        let f = edge_features(a[0], a[1], RADIUS, LENGTH);
        let recovered = f[1].atan2(f[2]);
        let want = (a[1].phi - a[0].phi + PI).rem_euclid(TAU) - PI;
        let diff = (recovered - want + PI).rem_euclid(TAU) - PI;
        assert!(diff.abs() < 1e-12);
        assert!((f[1].hypot(f[2]) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn placement_respects_the_exclusion_zone() {
    let tube = TubeConfig::default();
    let mut r = rng(34);
    let exclusion = 0.15;
    for _ in 0..1000 {
        let crack = CrackLabel::sample(&tube, &mut r);
        let layout = place_sensors(&tube, Some(&crack), 40, exclusion, &mut r).unwrap();
        assert_eq!(layout.len(), 40);
        for p in &layout.positions {
            assert!(geodesic_distance(*p, crack.center(), tube.radius()) >= exclusion);
            assert!((0.0..tube.length).contains(&p.l) && (0.0..TAU).contains(&p.phi));
        }
    }
}

#[test]
fn permuted_graph_keeps_edges_and_features() {
    let mut r = rng(35);
    let g = random_graph(12, 5, 3, &mut r);
    let permuted = {
        let mut p: Vec<usize> = (0..12).collect();
        p.shuffle(&mut r);
        let e: Vec<usize> = (0..g.n_edges()).rev().collect();
        g.permuted(&p, &e).unwrap()
    };
    permuted.validate().unwrap();
    let canon = |g: &SensorGraph| -> BTreeSet<(usize, usize)> { g.edges.iter().map(|e| (e.sender, e.receiver)).collect() };
    assert_eq!(canon(&g).len(), canon(&permuted).len());
    // features travel with their edge regardless of position in the list
    let sum = |g: &SensorGraph| g.edges.iter().map(|e| e.features[3]).sum::<f64>();
    assert!((sum(&g) - sum(&permuted)).abs() < 1e-12);
    assert!((g.node_features.data().iter().sum::<f64>() - permuted.node_features.data().iter().sum::<f64>()).abs() < 1e-9);
}
