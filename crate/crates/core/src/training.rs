//! Conditional flow matching objective and the optimization loop.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::DisorderedCrystal;
use crate::error::{Error, Result};
use crate::geometry::{
    self, remove_mean, sample_priors, sphere_exp, sphere_log, torus_exp, torus_log, LengthPrior,
};
use crate::net::model::{forward_on_tape, ForwardVars, ModelParams, NetConfig};
use crate::net::tape::{Tape, Tensor, Var};
use crate::state::{nudge_angles, FlowState, VelocityBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Structure prediction: species and position weights are given.
    Csp,
    /// De novo generation of every field.
    Dng,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csp" => Ok(TaskMode::Csp),
            "dng" => Ok(TaskMode::Dng),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Relative (unnormalized) loss weights per field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lattice: f64,
    pub coords: f64,
    pub coords_extra: f64,
    pub species: f64,
    pub weights: f64,
}

impl LossWeights {
    pub fn for_task(task: TaskMode) -> Self {
        match task {
            TaskMode::Csp => Self { lattice: 1.0, coords: 400.0, coords_extra: 40.0, species: 0.0, weights: 0.0 },
            TaskMode::Dng => {
                Self { lattice: 1.0, coords: 400.0, coords_extra: 40.0, species: 2000.0, weights: 40.0 }
            }
        }
    }

    /// `λ = λ̃ / Σ λ̃`, with the disorder terms forced to zero for CSP.
    pub fn normalized(&self, task: TaskMode) -> Result<Self> {
        let mut w = *self;
        if task == TaskMode::Csp {
            w.species = 0.0;
            w.weights = 0.0;
        }
        let all = [w.lattice, w.coords, w.coords_extra, w.species, w.weights];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        let sum: f64 = all.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Config("loss weights sum to zero".into()));
        }
        Ok(Self {
            lattice: w.lattice / sum,
            coords: w.coords / sum,
            coords_extra: w.coords_extra / sum,
            species: w.species / sum,
            weights: w.weights / sum,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub task: TaskMode,
    pub loss_weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub net: NetConfig,
}

impl TrainingConfig {
    pub fn new(task: TaskMode) -> Self {
        Self {
            task,
            loss_weights: LossWeights::for_task(task),
            learning_rate: 6e-4,
            epochs: 2000,
            batch_size: 512,
            seed: 0,
            grad_clip: 10.0,
            net: NetConfig::default(),
        }
    }
}

/// One conditional-flow-matching sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub t: f64,
    pub state: FlowState,
    /// `l̃_1 - l̃_0`.
    pub lattice_target: [f64; 6],
    /// Mean-removed torus displacement per site and position channel.
    pub coord_target: Array3<f64>,
    /// Channels that carry a coordinate target.
    pub coord_mask: Array2<bool>,
    /// Sphere log of the species vector; zero in CSP mode.
    pub species_target: Array2<f64>,
    pub weights_target: Array2<f64>,
    /// Sites with two or more occupied positions.
    pub pd_mask: Vec<bool>,
}

/// Draws `t ~ U(0, 1)` and a prior state, then builds the pair.
pub fn make_training_pair<R: Rng + ?Sized>(
    crystal: &DisorderedCrystal,
    rng: &mut R,
    task: TaskMode,
    lengths: &LengthPrior,
) -> Result<TrainingPair> {
    let t: f64 = rng.random();
    let prior = sample_priors(crystal.num_sites(), crystal.vocab_size(), crystal.order(), rng, lengths);
    make_training_pair_with(crystal, &prior, t, task)
}

/// Deterministic pair construction from an explicit prior draw.
pub fn make_training_pair_with(
    crystal: &DisorderedCrystal,
    prior: &FlowState,
    t: f64,
    task: TaskMode,
) -> Result<TrainingPair> {
    let data = FlowState::from_crystal(crystal)?;
    let n = crystal.num_sites();
    let order = crystal.order();
    if prior.num_sites() != n || prior.order() != order || prior.vocab() != data.vocab() {
        return Err(Error::Shape("prior does not match crystal shape".into()));
    }

    let lattice_target: [f64; 6] = std::array::from_fn(|k| data.lattice[k] - prior.lattice[k]);
    let lattice = if t == 1.0 {
        data.lattice
    } else {
        std::array::from_fn(|k| (1.0 - t) * prior.lattice[k] + t * data.lattice[k])
    };

    let pd_mask: Vec<bool> = crystal.sites.iter().map(|s| s.is_pd()).collect();
    let mut coord_mask = Array2::from_elem((n, order), false);
    for (i, site) in crystal.sites.iter().enumerate() {
        coord_mask[[i, 0]] = true;
        if pd_mask[i] {
            for r in 1..order {
                coord_mask[[i, r]] = site.pos_weights[r] > 0.0;
            }
        }
    }

    // One common translation is removed across every active channel.
    let active: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..order).map(move |r| (i, r)))
        .filter(|&(i, r)| coord_mask[[i, r]])
        .collect();
    let raw: Vec<[f64; 3]> =
        active.iter().map(|&(i, r)| torus_log(prior.position(i, r), data.position(i, r))).collect();
    let centered = remove_mean(&raw);
    let mut coord_target = Array3::zeros((n, order, 3));
    let mut positions = prior.positions.clone();
    for (&(i, r), d) in active.iter().zip(&centered) {
        let f = torus_exp(prior.position(i, r), d.map(|x| t * x));
        for k in 0..3 {
            coord_target[[i, r, k]] = d[k];
            positions[[i, r, k]] = f[k];
        }
    }

    let (species, species_target, weights, weights_target) = match task {
        TaskMode::Csp => (
            data.species.clone(),
            Array2::zeros(data.species.raw_dim()),
            data.weights.clone(),
            Array2::zeros(data.weights.raw_dim()),
        ),
        TaskMode::Dng => {
            let (s, st) = sphere_path(&prior.species, &data.species, t)?;
            let (w, wt) = sphere_path(&prior.weights, &data.weights, t)?;
            (s, st, w, wt)
        }
    };

    Ok(TrainingPair {
        t,
        state: FlowState { lattice, positions, species, weights },
        lattice_target,
        coord_target,
        coord_mask,
        species_target,
        weights_target,
        pd_mask,
    })
}

/// Row-wise geodesic point at time `t` and the log-map target at the start.
fn sphere_path(x0: &Array2<f64>, x1: &Array2<f64>, t: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut xt = x0.clone();
    let mut target = Array2::zeros(x0.raw_dim());
    for i in 0..x0.nrows() {
        let a = x0.row(i).to_vec();
        let b = x1.row(i).to_vec();
        let v = sphere_log(&a, &b)?;
        let p = if t == 1.0 { b } else { sphere_exp(&a, &v.iter().map(|x| t * x).collect::<Vec<_>>()) };
        for k in 0..a.len() {
            target[[i, k]] = v[k];
            xt[[i, k]] = p[k];
        }
    }
    Ok((xt, target))
}

/// Unweighted per-field losses and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lattice: f64,
    pub coords: f64,
    pub coords_extra: f64,
    pub species: f64,
    pub weights: f64,
    pub total: f64,
}

/// Targets and per-entry weights of one field over a stacked batch.
struct FieldTerm {
    target: Tensor,
    /// Entry weights with the field normalization (without `λ`).
    weights: Tensor,
}

struct BatchTerms {
    lattice: FieldTerm,
    coords: FieldTerm,
    coords_extra: Option<FieldTerm>,
    species: FieldTerm,
    weights: FieldTerm,
}

fn batch_terms(pairs: &[&TrainingPair]) -> BatchTerms {
    let b = pairs.len() as f64;
    let total: usize = pairs.iter().map(|p| p.state.num_sites()).sum();
    let order = pairs[0].state.order();
    let vocab = pairs[0].state.vocab();

    let mut lattice = FieldTerm { target: Tensor::zeros((pairs.len(), 6)), weights: Tensor::zeros((pairs.len(), 6)) };
    let mut coords = FieldTerm { target: Tensor::zeros((total, 3)), weights: Tensor::zeros((total, 3)) };
    let extra_w = 3 * order.saturating_sub(1);
    let mut extra = FieldTerm { target: Tensor::zeros((total, extra_w)), weights: Tensor::zeros((total, extra_w)) };
    let mut species = FieldTerm { target: Tensor::zeros((total, vocab)), weights: Tensor::zeros((total, vocab)) };
    let mut weights = FieldTerm { target: Tensor::zeros((total, order)), weights: Tensor::zeros((total, order)) };

    let mut off = 0;
    for (g, p) in pairs.iter().enumerate() {
        let n = p.state.num_sites();
        let nf = n as f64;
        for k in 0..6 {
            lattice.target[[g, k]] = p.lattice_target[k];
            lattice.weights[[g, k]] = 1.0 / (6.0 * b);
        }
        let extra_rows = (0..n).map(|i| (1..order).filter(|&r| p.coord_mask[[i, r]]).count()).sum::<usize>();
        for i in 0..n {
            for k in 0..3 {
                coords.target[[off + i, k]] = p.coord_target[[i, 0, k]];
                coords.weights[[off + i, k]] = 1.0 / (3.0 * nf * b);
            }
            for r in 1..order {
                if !p.coord_mask[[i, r]] {
                    continue;
                }
                for k in 0..3 {
                    let c = 3 * (r - 1) + k;
                    extra.target[[off + i, c]] = p.coord_target[[i, r, k]];
                    extra.weights[[off + i, c]] = 1.0 / (3.0 * extra_rows as f64 * b);
                }
            }
            for k in 0..vocab {
                species.target[[off + i, k]] = p.species_target[[i, k]];
                species.weights[[off + i, k]] = 1.0 / (nf * vocab as f64 * b);
            }
            for k in 0..order {
                weights.target[[off + i, k]] = p.weights_target[[i, k]];
                weights.weights[[off + i, k]] = 1.0 / (nf * order as f64 * b);
            }
        }
        off += n;
    }
    BatchTerms {
        lattice,
        coords,
        coords_extra: (order > 1).then_some(extra),
        species,
        weights,
    }
}

fn weighted_sq(pred: &Tensor, term: &FieldTerm) -> f64 {
    let mut s = 0.0;
    ndarray::Zip::from(pred).and(&term.target).and(&term.weights).for_each(|p, t, w| {
        if *w != 0.0 {
            s += w * (p - t) * (p - t);
        }
    });
    s
}

fn stack_velocities(vels: &[&VelocityBundle]) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let total: usize = vels.iter().map(|v| v.positions.shape()[0]).sum();
    let order = vels[0].positions.shape()[1];
    let vocab = vels[0].species.ncols();
    let mut lat = Tensor::zeros((vels.len(), 6));
    let mut c = Tensor::zeros((total, 3));
    let mut ce = Tensor::zeros((total, 3 * order.saturating_sub(1)));
    let mut s = Tensor::zeros((total, vocab));
    let mut w = Tensor::zeros((total, order));
    let mut off = 0;
    for (g, v) in vels.iter().enumerate() {
        for k in 0..6 {
            lat[[g, k]] = v.lattice[k];
        }
        let n = v.positions.shape()[0];
        for i in 0..n {
            for k in 0..3 {
                c[[off + i, k]] = v.positions[[i, 0, k]];
                for r in 1..order {
                    ce[[off + i, 3 * (r - 1) + k]] = v.positions[[i, r, k]];
                }
            }
            s.row_mut(off + i).assign(&v.species.row(i));
            w.row_mut(off + i).assign(&v.weights.row(i));
        }
        off += n;
    }
    (lat, c, ce, s, w)
}

/// Flow-matching loss of a batch of pairs against given velocities.
pub fn batch_loss(
    pairs: &[&TrainingPair],
    velocities: &[&VelocityBundle],
    weights: &LossWeights,
    task: TaskMode,
) -> Result<LossBreakdown> {
    if pairs.is_empty() || pairs.len() != velocities.len() {
        return Err(Error::Shape("pairs and velocities must be non-empty and aligned".into()));
    }
    let lambda = weights.normalized(task)?;
    let terms = batch_terms(pairs);
    let (lat, c, ce, s, w) = stack_velocities(velocities);
    let mut out = LossBreakdown {
        lattice: weighted_sq(&lat, &terms.lattice),
        coords: weighted_sq(&c, &terms.coords),
        coords_extra: terms.coords_extra.as_ref().map_or(0.0, |t| weighted_sq(&ce, t)),
        species: weighted_sq(&s, &terms.species),
        weights: weighted_sq(&w, &terms.weights),
        total: 0.0,
    };
    if task == TaskMode::Csp {
        out.species = 0.0;
        out.weights = 0.0;
    }
    out.total = lambda.lattice * out.lattice
        + lambda.coords * out.coords
        + lambda.coords_extra * out.coords_extra
        + lambda.species * out.species
        + lambda.weights * out.weights;
    Ok(out)
}

/// Loss of a single pair.
pub fn loss(
    pair: &TrainingPair,
    velocities: &VelocityBundle,
    weights: &LossWeights,
    task: TaskMode,
) -> Result<LossBreakdown> {
    batch_loss(&[pair], &[velocities], weights, task)
}

/// Records the weighted total loss of a batch on the tape.
pub fn loss_on_tape(
    tape: &mut Tape,
    out: &ForwardVars,
    pairs: &[&TrainingPair],
    weights: &LossWeights,
    task: TaskMode,
) -> Result<Var> {
    let lambda = weights.normalized(task)?;
    let terms = batch_terms(pairs);
    let mut parts = Vec::new();
    let mut add = |tape: &mut Tape, v: Var, term: FieldTerm, lam: f64| {
        if lam > 0.0 {
            let w = term.weights * lam;
            parts.push(tape.sq_error(v, Rc::new(term.target), Rc::new(w)));
        }
    };
    add(tape, out.lattice, terms.lattice, lambda.lattice);
    add(tape, out.coords, terms.coords, lambda.coords);
    if let (Some(v), Some(term)) = (out.coords_extra, terms.coords_extra) {
        add(tape, v, term, lambda.coords_extra);
    }
    add(tape, out.species, terms.species, lambda.species);
    add(tape, out.weights, terms.weights, lambda.weights);
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p);
    }
    Ok(total)
}

/// Loss value and parameter gradients of a batch.
pub fn loss_and_gradients(
    params: &ModelParams,
    pairs: &[&TrainingPair],
    weights: &LossWeights,
    task: TaskMode,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let states: Vec<&FlowState> = pairs.iter().map(|p| &p.state).collect();
    let times: Vec<f64> = pairs.iter().map(|p| p.t).collect();
    let out = forward_on_tape(&mut tape, params, &states, &times)?;
    let root = loss_on_tape(&mut tape, &out, pairs, weights, task)?;
    let value = tape.scalar(root);
    let mut grads = tape.backward(root)?;
    let g = out
        .params
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.raw_dim())))
        .collect();
    Ok((value, g))
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut [Tensor]) -> f64 {
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if self.clip > 0.0 && norm > self.clip {
            let s = self.clip / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        norm
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean total loss per epoch.
    pub history: Vec<f64>,
    pub length_prior: LengthPrior,
    /// Histogram of training atom counts, indexed by count.
    pub atom_counts: Vec<usize>,
}

/// Histogram of site counts, indexed by count.
pub fn atom_count_histogram(dataset: &[DisorderedCrystal]) -> Vec<usize> {
    let max = dataset.iter().map(|c| c.num_sites()).max().unwrap_or(0);
    let mut h = vec![0; max + 1];
    for c in dataset {
        h[c.num_sites()] += 1;
    }
    h
}

/// Trains from freshly initialized parameters.
pub fn train(dataset: &[DisorderedCrystal], config: &TrainingConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_, _| {})
}

/// As [`train`], reporting `(epoch, mean loss)` after each epoch.
pub fn train_with(
    dataset: &[DisorderedCrystal],
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let first = dataset.first().ok_or_else(|| Error::Empty("training set".into()))?;
    let (vocab, order) = (first.vocab_size(), first.order());
    if dataset.iter().any(|c| c.vocab_size() != vocab || c.order() != order) {
        return Err(Error::Shape("all training crystals must share D and order".into()));
    }
    let net = NetConfig { vocab, order, ..config.net.clone() };
    if let Some(big) = dataset.iter().find(|c| c.num_sites() > net.max_atoms) {
        return Err(Error::TooManyAtoms { n: big.num_sites(), max: net.max_atoms });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(net, &mut rng);
    let length_prior = LengthPrior::fit(dataset);
    let mut adam = Adam::new(&params, config.learning_rate, config.grad_clip);
    let mut order_idx: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let batch = config.batch_size.max(1);

    for epoch in 0..config.epochs {
        order_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order_idx.chunks(batch).enumerate() {
            let pairs = chunk
                .iter()
                .map(|&i| make_training_pair(&dataset[i], &mut rng, config.task, &length_prior))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TrainingPair> = pairs.iter().collect();
            let (value, mut grads) = loss_and_gradients(&params, &refs, &config.loss_weights, config.task)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch} batch {b}: {what}")),
                    other => other,
                })?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} batch {b}")));
            }
            adam.step(&mut params, &mut grads);
            sum += value * chunk.len() as f64;
        }
        let mean = sum / dataset.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome { params, history, length_prior, atom_counts: atom_count_histogram(dataset) })
}

/// Convenience wrapper for unconstrained lattice targets of one crystal.
pub fn unconstrained_lattice(crystal: &DisorderedCrystal) -> Result<[f64; 6]> {
    geometry::lattice_to_unconstrained(&nudge_angles(crystal.lattice))
}
