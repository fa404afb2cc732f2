#![allow(dead_code)]

use disflow::crystal::{DisorderedCrystal, LatticeParams, Site};
use disflow::geometry::sample_uniform_simplex;
use disflow::net::model::{forward_batch, ModelParams, NetConfig};
use disflow::training::{batch_loss, loss_and_gradients, make_training_pair, LossWeights, TaskMode, TrainingPair};
use disflow::{FlowState, VelocityBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(vocab: usize, order: usize) -> NetConfig {
    NetConfig { hidden_dim: 16, num_layers: 2, n_freq: 4, time_freq: 4, vocab, order, max_atoms: 10, ..NetConfig::default() }
}

/// Random sites with dense species vectors. For `order > 2` the last
/// position channel is left empty.
pub fn random_crystal<R: Rng>(rng: &mut R, n: usize, vocab: usize, order: usize) -> DisorderedCrystal {
    let sites = (0..n)
        .map(|_| {
            let positions = (0..order).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
            let mut w = sample_uniform_simplex(order, rng);
            if order > 2 {
                w[order - 1] = 0.0;
                let sum: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= sum);
            }
            Site::new(sample_uniform_simplex(vocab, rng), positions, w).unwrap()
        })
        .collect();
    let lattice = LatticeParams::new(
        rng.random_range(3.0..7.0),
        rng.random_range(3.0..7.0),
        rng.random_range(3.0..7.0),
        rng.random_range(75.0..105.0),
        rng.random_range(75.0..105.0),
        rng.random_range(75.0..105.0),
    );
    DisorderedCrystal::new(lattice, sites).unwrap()
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize, vocab: usize, order: usize) -> FlowState {
    FlowState::from_crystal(&random_crystal(rng, n, vocab, order)).unwrap()
}

pub fn max_diff(a: &VelocityBundle, b: &VelocityBundle) -> f64 {
    let d = |x: f64, y: f64| (x - y).abs();
    let mut m = a.lattice.iter().zip(&b.lattice).map(|(x, y)| d(*x, *y)).fold(0.0, f64::max);
    m = a.positions.iter().zip(b.positions.iter()).map(|(x, y)| d(*x, *y)).fold(m, f64::max);
    m = a.species.iter().zip(b.species.iter()).map(|(x, y)| d(*x, *y)).fold(m, f64::max);
    a.weights.iter().zip(b.weights.iter()).map(|(x, y)| d(*x, *y)).fold(m, f64::max)
}

pub fn permute_state(state: &FlowState, perm: &[usize]) -> FlowState {
    let mut out = state.clone();
    for (new, &old) in perm.iter().enumerate() {
        out.positions
            .index_axis_mut(ndarray::Axis(0), new)
            .assign(&state.positions.index_axis(ndarray::Axis(0), old));
        out.species.row_mut(new).assign(&state.species.row(old));
        out.weights.row_mut(new).assign(&state.weights.row(old));
    }
    out
}

/// Model with hidden 16, K=2 and randomized heads plus two DNG pairs of
/// four sites over five species.
pub fn gradient_setup(seed: u64) -> (ModelParams, Vec<TrainingPair>, LossWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init_with(small_config(5, 2), &mut rng, false);
    let prior = Default::default();
    let pairs = (0..2)
        .map(|_| make_training_pair(&random_crystal(&mut rng, 4, 5, 2), &mut rng, TaskMode::Dng, &prior).unwrap())
        .collect();
    (params, pairs, LossWeights::for_task(TaskMode::Dng))
}

pub fn total_loss(params: &ModelParams, pairs: &[TrainingPair], w: &LossWeights) -> f64 {
    let states: Vec<&FlowState> = pairs.iter().map(|p| &p.state).collect();
    let times: Vec<f64> = pairs.iter().map(|p| p.t).collect();
    let v = forward_batch(&states, &times, params).unwrap();
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    batch_loss(&refs, &v.iter().collect::<Vec<_>>(), w, TaskMode::Dng).unwrap().total
}

/// Largest relative error between reverse-mode gradients and central
/// differences with step `h`, over every parameter.
pub fn gradient_check(params: &ModelParams, pairs: &[TrainingPair], w: &LossWeights, h: f64) -> f64 {
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let (_, grads) = loss_and_gradients(params, &refs, w, TaskMode::Dng).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for (ti, g) in grads.iter().enumerate() {
        for r in 0..g.nrows() {
            for c in 0..g.ncols() {
                let orig = p.tensors()[ti][[r, c]];
                p.tensors_mut()[ti][[r, c]] = orig + h;
                let up = total_loss(&p, pairs, w);
                p.tensors_mut()[ti][[r, c]] = orig - h;
                let down = total_loss(&p, pairs, w);
                p.tensors_mut()[ti][[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g[[r, c]];
                worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
            }
        }
    }
    worst
}
