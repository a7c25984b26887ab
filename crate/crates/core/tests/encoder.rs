use gmope::experts::{Activation, EncoderConfig, GcnEncoder, GraphEncoder, NormalizedAdjacency};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng};

fn cfg(layers: usize, input: usize, hidden: usize, output: usize, act: Activation, bias: bool) -> EncoderConfig {
    EncoderConfig {
        layers,
        input_dim: input,
        hidden_dim: hidden,
        output_dim: output,
        bias,
        activation: act,
        self_loops: true,
    }
}

#[test]
fn isolated_node_identity_propagation() {
    let c = cfg(1, 3, 3, 3, Activation::Linear, false);
    let enc = GcnEncoder::from_parts(c, vec![Array2::eye(3)], vec![Array1::zeros(0)]).unwrap();
    let adj = NormalizedAdjacency::new(1, &[], true);
    let x = array![[0.3f64, -1.0, 2.5]];
    assert_eq!(enc.encode(&adj, &x).unwrap(), x);
}

#[test]
fn two_node_hand_computation() {
    // Â = [[.5,.5],[.5,.5]]; XW = [[1,4],[3,8]]; ÂXW + b = [[2.5,5],[2.5,5]].
    let c = cfg(1, 2, 2, 2, Activation::Linear, true);
    let enc = GcnEncoder::from_parts(c, vec![array![[1.0, 0.0], [0.0, 2.0]]], vec![array![0.5, -1.0]]).unwrap();
    let adj = NormalizedAdjacency::new(2, &[(0, 1)], true);
    assert_eq!(adj.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    let out = enc.encode(&adj, &array![[1.0f64, 2.0], [3.0, 4.0]]).unwrap();
    assert_eq!(out, array![[2.5, 5.0], [2.5, 5.0]]);
}

#[test]
fn width_mismatch_is_rejected() {
    let enc = GcnEncoder::<f64>::init(cfg(2, 4, 3, 2, Activation::Relu, true), 0).unwrap();
    let adj = NormalizedAdjacency::new(2, &[(0, 1)], true);
    assert!(enc.encode(&adj, &Array2::zeros((2, 5))).is_err());
}

#[test]
fn encoding_is_deterministic() {
    let enc = GcnEncoder::<f64>::init(cfg(3, 4, 5, 2, Activation::Relu, true), 9).unwrap();
    let adj = NormalizedAdjacency::new(4, &[(0, 1), (1, 2), (2, 3)], true);
    let x = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
    assert_eq!(enc.encode(&adj, &x).unwrap(), enc.encode(&adj, &x).unwrap());
}

fn random_graph(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = gmope::rng::stream(seed, 1);
    let mut e = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen_bool(0.3) {
                e.push((u, v));
            }
        }
    }
    e
}

proptest! {
    #[test]
    fn permutation_equivariance(n in 1usize..20, seed in 0u64..300) {
        let enc = GcnEncoder::<f64>::init(cfg(2, 3, 4, 2, Activation::Relu, true), seed).unwrap();
        let mut rng = gmope::rng::stream(seed, 2);
        let edges = random_graph(n, seed);
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // node v moves to position perm[v]
        let px = {
            let mut m = Array2::zeros((n, 3));
            for (v, &to) in perm.iter().enumerate() {
                m.row_mut(to).assign(&x.row(v));
            }
            m
        };
        let pe: Vec<_> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let out = enc.encode(&NormalizedAdjacency::new(n, &edges, true), &x).unwrap();
        let pout = enc.encode(&NormalizedAdjacency::new(n, &pe, true), &px).unwrap();
        for v in 0..n {
            for c in 0..2 {
                prop_assert!((out[[v, c]] - pout[[perm[v], c]]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn parameter_and_input_gradients_match_finite_differences() {
    // loss = sum of outputs on a 5-node graph.
    let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)];
    let adj = NormalizedAdjacency::new(5, &edges, true);
    for act in [Activation::Relu, Activation::Tanh, Activation::Linear] {
        let enc = GcnEncoder::<f64>::init(cfg(3, 4, 6, 3, act, true), 17).unwrap();
        let mut rng = gmope::rng::stream(5, 5);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let (out, cache) = enc.forward(&adj, &x).unwrap();
        let (grads, dx) = enc.backward(&adj, &cache, &Array2::ones(out.raw_dim()));
        let loss = |e: &GcnEncoder<f64>, x: &Array2<f64>| e.encode(&adj, x).unwrap().sum();
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!((analytic - fd).abs() / denom < 1e-3, "{act:?} {what}: analytic {analytic} fd {fd}");
        };
        for l in 0..3 {
            let (r, c) = enc.weights()[l].dim();
            for i in 0..r {
                for j in 0..c {
                    let mut p = enc.clone();
                    p.weights_mut()[l][[i, j]] += h;
                    let mut m = enc.clone();
                    m.weights_mut()[l][[i, j]] -= h;
                    check(grads.weights[l][[i, j]], loss(&p, &x), loss(&m, &x), &format!("W{l}[{i},{j}]"));
                }
            }
            for j in 0..enc.biases()[l].len() {
                let mut p = enc.clone();
                p.biases_mut()[l][j] += h;
                let mut m = enc.clone();
                m.biases_mut()[l][j] -= h;
                check(grads.biases[l][j], loss(&p, &x), loss(&m, &x), &format!("b{l}[{j}]"));
            }
        }
        for i in 0..5 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                check(dx[[i, j]], loss(&enc, &xp), loss(&enc, &xm), &format!("x[{i},{j}]"));
            }
        }
    }
}
