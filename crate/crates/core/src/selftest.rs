//! Quick internal consistency suites for a built binary.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crystal::{DisorderedCrystal, LatticeParams, Site};
use crate::discretize::{ensemble_vote, heuristics, DiscretizeConfig};
use crate::geometry::{
    fisher_rao_distance, remove_mean, sample_uniform_simplex, simplex_interpolate, simplex_to_sphere,
    sphere_distance, sphere_exp, sphere_log, torus_exp, torus_log, wrap_displacement, LengthPrior,
};
use crate::net::model::{forward, forward_batch, ModelParams, NetConfig};
use crate::state::FlowState;
use crate::training::{batch_loss, loss_and_gradients, make_training_pair, LossWeights, TaskMode, TrainingPair};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, failures: Vec<String>, ok: String) -> SuiteResult {
    match failures.into_iter().next() {
        None => SuiteResult { name, passed: true, detail: ok },
        Some(f) => SuiteResult { name, passed: false, detail: f },
    }
}

fn geometry(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for d in [2, 5, 100] {
        for _ in 0..200 {
            let mu = sample_uniform_simplex(d, rng);
            let nu = sample_uniform_simplex(d, rng);
            let (x, y) = (simplex_to_sphere(&mu).expect("simplex"), simplex_to_sphere(&nu).expect("simplex"));
            worst = worst.max((sphere_distance(&x, &y) - 0.5 * fisher_rao_distance(&mu, &nu)).abs());
            if let Ok(v) = sphere_log(&x, &y) {
                let back = sphere_exp(&x, &v);
                worst = worst.max(back.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            let p = simplex_interpolate(&mu, &nu, rng.random()).expect("path");
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            if p.iter().any(|&v| v < -1e-12) {
                fails.push(format!("path left the simplex at D={d}"));
            }
        }
    }
    if worst > 1e-9 {
        fails.push(format!("identity error {worst:e}"));
    }
    outcome("geometry", fails, format!("max error {worst:.1e}"))
}

fn torus(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let f0: [f64; 3] = std::array::from_fn(|_| rng.random());
        let f1: [f64; 3] = std::array::from_fn(|_| rng.random());
        let back = torus_exp(f0, torus_log(f0, f1));
        let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let moved = torus_log(torus_exp(f0, c), torus_exp(f1, c));
        let plain = torus_log(f0, f1);
        for k in 0..3 {
            worst = worst.max(wrap_displacement(back[k] - f1[k]).abs()).max((moved[k] - plain[k]).abs());
        }
        let disp: Vec<[f64; 3]> = (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect();
        let centered = remove_mean(&disp);
        for k in 0..3 {
            worst = worst.max(centered.iter().map(|d| d[k]).sum::<f64>().abs());
        }
    }
    let fails = if worst > 1e-10 { vec![format!("torus error {worst:e}")] } else { vec![] };
    outcome("torus", fails, format!("max error {worst:.1e}"))
}

fn random_crystal(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> DisorderedCrystal {
    let sites = (0..n)
        .map(|_| {
            let positions = (0..2).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
            Site::new(sample_uniform_simplex(vocab, rng), positions, sample_uniform_simplex(2, rng)).expect("site")
        })
        .collect();
    DisorderedCrystal::new(LatticeParams::new(4.0, 5.0, 6.0, 85.0, 95.0, 100.0), sites).expect("crystal")
}

fn small_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let cfg =
        NetConfig { hidden_dim: 16, num_layers: 2, n_freq: 4, time_freq: 4, vocab: 5, order: 2, max_atoms: 8, ..NetConfig::default() };
    ModelParams::init_with(cfg, rng, false)
}

fn gradients(rng: &mut ChaCha8Rng) -> SuiteResult {
    let params = small_model(rng);
    let pairs: Vec<TrainingPair> = (0..2)
        .map(|_| make_training_pair(&random_crystal(rng, 4, 5), rng, TaskMode::Dng, &LengthPrior::default()).expect("pair"))
        .collect();
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let w = LossWeights::for_task(TaskMode::Dng);
    let loss = |p: &ModelParams| -> f64 {
        let states: Vec<&FlowState> = pairs.iter().map(|p| &p.state).collect();
        let times: Vec<f64> = pairs.iter().map(|p| p.t).collect();
        let v = forward_batch(&states, &times, p).expect("forward");
        batch_loss(&refs, &v.iter().collect::<Vec<_>>(), &w, TaskMode::Dng).expect("loss").total
    };
    let (_, grads) = match loss_and_gradients(&params, &refs, &w, TaskMode::Dng) {
        Ok(g) => g,
        Err(e) => return outcome("gradients", vec![e.to_string()], String::new()),
    };
    let flat: Vec<(usize, usize)> =
        grads.iter().enumerate().flat_map(|(t, g)| (0..g.len()).map(move |i| (t, i))).collect();
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    let h = 1e-5;
    for k in sample_indices(rng, flat.len(), 200.min(flat.len())) {
        let (t, i) = flat[k];
        let cols = grads[t].ncols();
        let idx = [i / cols, i % cols];
        let orig = p.tensors()[t][idx];
        p.tensors_mut()[t][idx] = orig + h;
        let up = loss(&p);
        p.tensors_mut()[t][idx] = orig - h;
        let down = loss(&p);
        p.tensors_mut()[t][idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t][idx];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
    }
    let fails = if worst >= 1e-4 { vec![format!("relative error {worst:e}")] } else { vec![] };
    outcome("gradients", fails, format!("200 sampled parameters, max relative error {worst:.1e}"))
}

fn symmetry(rng: &mut ChaCha8Rng) -> SuiteResult {
    let params = small_model(rng);
    let state = FlowState::from_crystal(&random_crystal(rng, 5, 5)).expect("state");
    let base = forward(&state, 0.5, &params).expect("forward");
    let mut moved = state.clone();
    let c: [f64; 3] = std::array::from_fn(|_| rng.random());
    for i in 0..state.num_sites() {
        for r in 0..state.order() {
            let f = torus_exp(state.position(i, r), c);
            for k in 0..3 {
                moved.positions[[i, r, k]] = f[k];
            }
        }
    }
    let other = forward(&moved, 0.5, &params).expect("forward");
    let mut worst = base.lattice.iter().zip(&other.lattice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for (a, b) in [(&base.species, &other.species), (&base.weights, &other.weights)] {
        worst = a.iter().zip(b.iter()).fold(worst, |m, (x, y)| m.max((x - y).abs()));
    }
    worst = base.positions.iter().zip(other.positions.iter()).fold(worst, |m, (x, y)| m.max((x - y).abs()));
    let fails = if worst > 1e-9 { vec![format!("translation error {worst:e}")] } else { vec![] };
    outcome("symmetry", fails, format!("translation error {worst:.1e}"))
}

fn discretization(rng: &mut ChaCha8Rng) -> SuiteResult {
    let cfg = DiscretizeConfig::default();
    let mut fails = Vec::new();
    let pad = |head: &[f64]| {
        let mut v = vec![0.0; 100];
        v[..head.len()].copy_from_slice(head);
        v
    };
    if ensemble_vote(&pad(&[0.5, 0.45, 0.05]), &cfg).indices != [0, 1] {
        fails.push("example (0.5, 0.45, 0.05)".to_string());
    }
    if ensemble_vote(&pad(&[0.6, 0.25, 0.15]), &cfg).indices != [0, 1] {
        fails.push("example (0.6, 0.25, 0.15)".to_string());
    }
    if ensemble_vote(&pad(&[0.8, 0.2]), &cfg).indices != [0] {
        fails.push("example (0.8, 0.2)".to_string());
    }
    for d in [2, 5, 100] {
        for _ in 0..1000 {
            let s = sample_uniform_simplex(d, rng);
            let a = ensemble_vote(&s, &cfg);
            if a.indices.is_empty() || (a.occupancy.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                fails.push(format!("invalid selection at D={d}"));
            }
            let stricter = DiscretizeConfig { tau_abs: cfg.tau_abs + 0.1, alpha_adapt: cfg.alpha_adapt + 0.1, ..cfg.clone() };
            let (lo, hi) = (heuristics(&s, &cfg), heuristics(&s, &stricter));
            if !hi[1].iter().all(|j| lo[1].contains(j)) || !hi[3].iter().all(|j| lo[3].contains(j)) {
                fails.push(format!("threshold monotonicity at D={d}"));
            }
        }
    }
    outcome("discretization", fails, "worked examples and 3000 random vectors".into())
}

/// Runs every suite with a fixed seed.
pub fn run_all() -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    vec![geometry(&mut rng), torus(&mut rng), gradients(&mut rng), symmetry(&mut rng), discretization(&mut rng)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
