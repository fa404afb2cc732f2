mod common;

use common::{gradient_check, gradient_setup, max_diff, permute_state, random_crystal, random_state, small_config};
use disflow::crystal::pad_to_order;
use disflow::geometry::{sample_uniform_simplex, torus_exp};
use disflow::net::model::{forward, forward_batch, init_node_features, ModelParams, NetConfig};
use disflow::training::{loss_and_gradients, TaskMode, TrainingPair};
use disflow::{FlowState, VelocityBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn node_features_have_hidden_width_and_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(NetConfig { num_layers: 1, n_freq: 2, ..NetConfig::default() }, &mut rng);
    let s = sample_uniform_simplex(params.config.vocab, &mut rng);
    let h = init_node_features(&s, 0.3, &params).unwrap();
    assert_eq!(h.len(), 512);
    assert_eq!(h, init_node_features(&s, 0.3, &params).unwrap());
    let other = sample_uniform_simplex(params.config.vocab, &mut rng);
    let h2 = init_node_features(&other, 0.3, &params).unwrap();
    assert!(h.iter().zip(&h2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 0.0);
}

#[test]
fn permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init_with(small_config(5, 2), &mut rng, false);
    let state = random_state(&mut rng, 5, 5, 2);
    let perm = [3, 0, 4, 1, 2];
    let permuted = permute_state(&state, &perm);
    let a = forward(&state, 0.4, &params).unwrap();
    let b = forward(&permuted, 0.4, &params).unwrap();
    for k in 0..6 {
        assert!((a.lattice[k] - b.lattice[k]).abs() <= 1e-9);
    }
    for (new, &old) in perm.iter().enumerate() {
        for (x, y) in a.species.row(old).iter().zip(b.species.row(new)) {
            assert!((x - y).abs() <= 1e-9);
        }
        for (x, y) in a.weights.row(old).iter().zip(b.weights.row(new)) {
            assert!((x - y).abs() <= 1e-9);
        }
        let pa = a.positions.index_axis(ndarray::Axis(0), old);
        let pb = b.positions.index_axis(ndarray::Axis(0), new);
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn translation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParams::init_with(small_config(5, 2), &mut rng, false);
    for _ in 0..5 {
        let state = random_state(&mut rng, 4, 5, 2);
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let mut moved = state.clone();
        for i in 0..4 {
            for r in 0..2 {
                let p = torus_exp(state.position(i, r), shift);
                for k in 0..3 {
                    moved.positions[[i, r, k]] = p[k];
                }
            }
        }
        let a = forward(&state, 0.7, &params).unwrap();
        let b = forward(&moved, 0.7, &params).unwrap();
        assert!(max_diff(&a, &b) <= 1e-9);
    }
}

#[test]
fn padding_invariance_in_weighted_sum_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params3 = ModelParams::init_with(small_config(6, 3), &mut rng, false);
    let params5 = params3.pad_to_order(5).unwrap();
    let c3 = random_crystal(&mut rng, 4, 6, 3);
    let c5 = pad_to_order(&c3, 5).unwrap();
    let a = forward(&FlowState::from_crystal(&c3).unwrap(), 0.5, &params3).unwrap();
    let b = forward(&FlowState::from_crystal(&c5).unwrap(), 0.5, &params5).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    assert!(a.lattice.iter().zip(&b.lattice).all(|(x, y)| close(*x, *y)));
    assert!(a.species.iter().zip(b.species.iter()).all(|(x, y)| close(*x, *y)));
    for i in 0..4 {
        for r in 0..3 {
            assert!(close(a.weights[[i, r]], b.weights[[i, r]]));
            for k in 0..3 {
                assert!(close(a.positions[[i, r, k]], b.positions[[i, r, k]]));
            }
        }
        for r in 3..5 {
            for k in 0..3 {
                assert_eq!(b.positions[[i, r, k]], 0.0);
            }
        }
    }
}

#[test]
fn sphere_outputs_are_tangent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init_with(small_config(7, 2), &mut rng, false);
    let state = random_state(&mut rng, 6, 7, 2);
    let v = forward(&state, 0.2, &params).unwrap();
    for i in 0..6 {
        let ds: f64 = v.species.row(i).iter().zip(state.species.row(i)).map(|(a, b)| a * b).sum();
        let dw: f64 = v.weights.row(i).iter().zip(state.weights.row(i)).map(|(a, b)| a * b).sum();
        assert!(ds.abs() <= 1e-8 && dw.abs() <= 1e-8);
    }
}

#[test]
fn single_site_graph_is_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = ModelParams::init_with(small_config(5, 2), &mut rng, false);
    let v = forward(&random_state(&mut rng, 1, 5, 2), 0.5, &params).unwrap();
    assert!(v.lattice.iter().chain(v.positions.iter()).chain(v.species.iter()).all(|x| x.is_finite()));
}

#[test]
fn too_many_sites_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::init(small_config(5, 2), &mut rng);
    assert!(forward(&random_state(&mut rng, 11, 5, 2), 0.5, &params).is_err());
}

#[test]
fn zero_heads_give_zero_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ModelParams::init(small_config(5, 2), &mut rng);
    let v = forward(&random_state(&mut rng, 3, 5, 2), 0.0, &params).unwrap();
    assert!(max_diff(&v, &VelocityBundle::zeros(3, 2, 5)) == 0.0);
}

#[test]
fn batching_matches_single_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = ModelParams::init_with(small_config(5, 2), &mut rng, false);
    let a = random_state(&mut rng, 3, 5, 2);
    let b = random_state(&mut rng, 5, 5, 2);
    let batch = forward_batch(&[&a, &b], &[0.1, 0.9], &params).unwrap();
    assert!(max_diff(&batch[0], &forward(&a, 0.1, &params).unwrap()) <= 1e-12);
    assert!(max_diff(&batch[1], &forward(&b, 0.9, &params).unwrap()) <= 1e-12);
}

#[test]
fn gradients_match_central_differences() {
    let (params, pairs, w) = gradient_setup(10);
    let worst = gradient_check(&params, &pairs, &w, 1e-5);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn zero_loss_has_zero_gradient() {
    let (params, mut pairs, w) = gradient_setup(11);
    for p in &mut pairs {
        let v = forward(&p.state, p.t, &params).unwrap();
        p.lattice_target = v.lattice;
        p.coord_target = v.positions.clone();
        p.species_target = v.species.clone();
        p.weights_target = v.weights.clone();
    }
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let (loss, grads) = loss_and_gradients(&params, &refs, &w, TaskMode::Dng).unwrap();
    assert!(loss.abs() <= 1e-24);
    assert!(grads.iter().flat_map(|g| g.iter()).all(|x| x.abs() <= 1e-12));
}
