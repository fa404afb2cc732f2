//! Euler integration of a velocity field over the product manifold.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::DisorderedCrystal;
use crate::error::{Error, Result};
use crate::geometry::{
    angle_from_unconstrained, project_tangent, sample_priors, simplex_to_sphere, sphere_exp, torus_exp,
    LengthPrior,
};
use crate::net::model::{forward_batch, ModelParams};
use crate::state::{FlowState, VelocityBundle};
use crate::training::TaskMode;

/// Angles that move more than this many degrees when clamped are reported.
const ANGLE_WARN_DEG: f64 = 1.0;

/// Anything that predicts per-field velocities for a batch of states.
pub trait VelocityField: Sync {
    fn velocities(&self, states: &[&FlowState], t: f64) -> Result<Vec<VelocityBundle>>;

    fn checksum(&self) -> Option<u64> {
        None
    }
}

impl VelocityField for ModelParams {
    fn velocities(&self, states: &[&FlowState], t: f64) -> Result<Vec<VelocityBundle>> {
        if let Some(s) = states.iter().find(|s| s.num_sites() > self.config.max_atoms) {
            return Err(Error::TooManyAtoms { n: s.num_sites(), max: self.config.max_atoms });
        }
        forward_batch(states, &vec![t; states.len()], self)
    }

    fn checksum(&self) -> Option<u64> {
        Some(ModelParams::checksum(self))
    }
}

/// The field that is zero everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocities(&self, states: &[&FlowState], _t: f64) -> Result<Vec<VelocityBundle>> {
        Ok(states.iter().map(|s| VelocityBundle::zeros(s.num_sites(), s.order(), s.vocab())).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Anti-annealing slope `s` in `c(t) = 1 + s t`.
    pub slope: f64,
    pub task: TaskMode,
    pub seed: u64,
    /// Worker threads over independent chunks of chains. Results do not
    /// depend on it.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl SamplerConfig {
    pub fn new(task: TaskMode) -> Self {
        Self { steps: 1000, slope: 20.0, task, seed: 0, threads: 1 }
    }

    fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.slope >= 0.0) || !self.slope.is_finite() {
            return Err(Error::Config(format!("slope must be finite and >= 0, got {}", self.slope)));
        }
        Ok(())
    }

    pub fn anti_annealing(&self, t: f64) -> f64 {
        1.0 + self.slope * t
    }
}

/// Fixed species and position weights for structure prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub species: Vec<Vec<f64>>,
    pub pos_weights: Vec<Vec<f64>>,
}

impl Condition {
    pub fn from_crystal(c: &DisorderedCrystal) -> Self {
        Self {
            species: c.sites.iter().map(|s| s.species.clone()).collect(),
            pos_weights: c.sites.iter().map(|s| s.pos_weights.clone()).collect(),
        }
    }

    pub fn num_sites(&self) -> usize {
        self.species.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub seed: u64,
    pub steps: usize,
    pub slope: f64,
    pub model_checksum: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub crystal: DisorderedCrystal,
    pub metadata: SampleMetadata,
}

/// Draws a prior state; under a condition the disorder fields are fixed.
pub fn initial_state<R: Rng + ?Sized>(
    num_sites: usize,
    vocab: usize,
    order: usize,
    condition: Option<&Condition>,
    lengths: &LengthPrior,
    rng: &mut R,
) -> Result<FlowState> {
    let mut state = sample_priors(num_sites, vocab, order, rng, lengths);
    if let Some(c) = condition {
        if c.num_sites() != num_sites || c.pos_weights.len() != num_sites {
            return Err(Error::Shape("condition does not match the number of sites".into()));
        }
        for i in 0..num_sites {
            if c.species[i].len() != vocab || c.pos_weights[i].len() != order {
                return Err(Error::Shape(format!("condition site {i} has the wrong width")));
            }
            for (k, x) in simplex_to_sphere(&c.species[i])?.into_iter().enumerate() {
                state.species[[i, k]] = x;
            }
            for (k, x) in simplex_to_sphere(&c.pos_weights[i])?.into_iter().enumerate() {
                state.weights[[i, k]] = x;
            }
        }
    }
    Ok(state)
}

/// Integrates a batch of states from `t = 0` to `t = 1`.
///
/// `on_step` sees every state after each update.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    states: &mut [FlowState],
    config: &SamplerConfig,
    mut on_step: impl FnMut(usize, &[FlowState]),
) -> Result<()> {
    config.check()?;
    let dt = 1.0 / config.steps as f64;
    let fixed_disorder = config.task == TaskMode::Csp;
    for step in 0..config.steps {
        let t = step as f64 * dt;
        let refs: Vec<&FlowState> = states.iter().collect();
        let vels = field.velocities(&refs, t)?;
        let c = config.anti_annealing(t);
        for (state, v) in states.iter_mut().zip(&vels) {
            euler_step(state, v, dt, c, fixed_disorder);
            if !is_finite(state) {
                return Err(Error::NonFinite(format!("sampler state at step {step}")));
            }
        }
        on_step(step, states);
    }
    Ok(())
}

fn euler_step(state: &mut FlowState, v: &VelocityBundle, dt: f64, c: f64, fixed_disorder: bool) {
    for k in 0..6 {
        state.lattice[k] += dt * v.lattice[k];
    }
    let (n, order) = (state.num_sites(), state.order());
    for i in 0..n {
        for r in 0..order {
            if state.weights[[i, r]] == 0.0 {
                continue;
            }
            let f = torus_exp(state.position(i, r), std::array::from_fn(|k| c * dt * v.positions[[i, r, k]]));
            for k in 0..3 {
                state.positions[[i, r, k]] = f[k];
            }
        }
    }
    if fixed_disorder {
        return;
    }
    for i in 0..n {
        sphere_step(state.species.row_mut(i), v.species.row(i), dt);
        sphere_step(state.weights.row_mut(i), v.weights.row(i), dt);
    }
}

fn sphere_step(mut x: ndarray::ArrayViewMut1<f64>, v: ndarray::ArrayView1<f64>, dt: f64) {
    let cur = x.to_vec();
    let tangent = project_tangent(&cur, &v.iter().map(|a| dt * a).collect::<Vec<_>>());
    let mut next = sphere_exp(&cur, &tangent);
    let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
    next.iter_mut().for_each(|a| *a /= norm);
    for (dst, src) in x.iter_mut().zip(next) {
        *dst = src;
    }
}

fn is_finite(s: &FlowState) -> bool {
    s.lattice.iter().all(|x| x.is_finite())
        && s.positions.iter().all(|x| x.is_finite())
        && s.species.iter().all(|x| x.is_finite())
        && s.weights.iter().all(|x| x.is_finite())
}

fn angle_warnings(state: &FlowState) -> Vec<String> {
    ["alpha", "beta", "gamma"]
        .iter()
        .enumerate()
        .filter_map(|(k, name)| {
            let raw = angle_from_unconstrained(state.lattice[3 + k]);
            let clamped = raw.clamp(60.0, 120.0);
            ((raw - clamped).abs() > ANGLE_WARN_DEG)
                .then(|| format!("{name} = {raw:.3} deg clamped to {clamped:.3}"))
        })
        .collect()
}

fn finish<F: VelocityField + ?Sized>(field: &F, config: &SamplerConfig, seed: u64, state: &FlowState) -> Sample {
    Sample {
        crystal: state.to_crystal(),
        metadata: SampleMetadata {
            seed,
            steps: config.steps,
            slope: config.slope,
            model_checksum: field.checksum(),
            warnings: angle_warnings(state),
        },
    }
}

/// Generates one crystal with `num_sites` sites from `config.seed`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    num_sites: usize,
    vocab: usize,
    order: usize,
    config: &SamplerConfig,
    condition: Option<&Condition>,
    lengths: &LengthPrior,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states = vec![initial_state(num_sites, vocab, order, condition, lengths, &mut rng)?];
    integrate(field, &mut states, config, |_, _| {})?;
    Ok(finish(field, config, config.seed, &states[0]))
}

/// Draws atom counts from a histogram indexed by count.
#[derive(Clone, Debug)]
pub struct SizeSampler {
    cumulative: Vec<f64>,
}

impl SizeSampler {
    pub fn from_histogram(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 || counts.first().is_some_and(|&c| c > 0) && total == counts[0] {
            return Err(Error::Empty("atom-count histogram".into()));
        }
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .enumerate()
            .map(|(n, &c)| {
                if n > 0 {
                    acc += c as f64 / total as f64;
                }
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1).max(1)
    }
}

/// Per-chain generator derived from the batch seed.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Generates `count` independent crystals; chains of equal size are
/// integrated together.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<F: VelocityField + ?Sized>(
    field: &F,
    sizes: &SizeSampler,
    count: usize,
    vocab: usize,
    order: usize,
    config: &SamplerConfig,
    lengths: &LengthPrior,
    chunk: usize,
) -> Result<Vec<Sample>> {
    let mut states = Vec::with_capacity(count);
    for chain in 0..count {
        let mut rng = chain_rng(config.seed, chain as u64);
        let n = sizes.sample(&mut rng);
        states.push(initial_state(n, vocab, order, None, lengths, &mut rng)?);
    }
    run_chains(field, states, config, chunk)
}

/// One structure per condition, in input order.
pub fn sample_conditioned<F: VelocityField + ?Sized>(
    field: &F,
    conditions: &[Condition],
    vocab: usize,
    order: usize,
    config: &SamplerConfig,
    lengths: &LengthPrior,
    chunk: usize,
) -> Result<Vec<Sample>> {
    let states = conditions
        .iter()
        .enumerate()
        .map(|(chain, c)| {
            let mut rng = chain_rng(config.seed, chain as u64);
            initial_state(c.num_sites(), vocab, order, Some(c), lengths, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = run_chains(field, states, config, chunk)?;
    // Conditioned fields come back bit-exact, not re-derived from sphere points.
    for (s, c) in out.iter_mut().zip(conditions) {
        for (site, (sp, w)) in s.crystal.sites.iter_mut().zip(c.species.iter().zip(&c.pos_weights)) {
            site.species = sp.clone();
            site.pos_weights = w.clone();
        }
    }
    Ok(out)
}

fn run_chains<F: VelocityField + ?Sized>(
    field: &F,
    mut states: Vec<FlowState>,
    config: &SamplerConfig,
    chunk: usize,
) -> Result<Vec<Sample>> {
    let chunk = chunk.max(1);
    let threads = config.threads.max(1);
    if threads == 1 {
        for part in states.chunks_mut(chunk) {
            integrate(field, part, config, |_, _| {})?;
        }
    } else {
        let queue = Mutex::new(states.chunks_mut(chunk));
        let queue = &queue;
        std::thread::scope(|scope| {
            let workers: Vec<_> = (0..threads)
                .map(|_| {
                    scope.spawn(move || -> Result<()> {
                        loop {
                            let next = queue.lock().expect("queue lock").next();
                            match next {
                                Some(part) => integrate(field, part, config, |_, _| {})?,
                                None => return Ok(()),
                            }
                        }
                    })
                })
                .collect();
            workers.into_iter().try_for_each(|w| w.join().expect("sampler worker panicked"))
        })?;
    }
    Ok(states
        .iter()
        .enumerate()
        .map(|(chain, s)| {
            let mut out = finish(field, config, config.seed, s);
            out.metadata.warnings.iter_mut().for_each(|w| *w = format!("chain {chain}: {w}"));
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::VOCAB_SIZE;

    #[test]
    fn one_step_zero_field_returns_prior() {
        let mut cfg = SamplerConfig::new(TaskMode::Dng);
        cfg.steps = 1;
        cfg.seed = 3;
        let lp = LengthPrior::default();
        let out = sample(&ZeroField, 4, VOCAB_SIZE, 2, &cfg, None, &lp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = initial_state(4, VOCAB_SIZE, 2, None, &lp, &mut rng).unwrap();
        let expect = prior.to_crystal();
        assert_eq!(out.crystal.lattice, expect.lattice);
        for (a, b) in out.crystal.sites.iter().zip(&expect.sites) {
            assert_eq!(a.positions, b.positions);
            for (x, y) in a.pos_weights.iter().zip(&b.pos_weights).chain(a.species.iter().zip(&b.species)) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        assert!(out.metadata.model_checksum.is_none());
    }

    #[test]
    fn size_sampler_never_returns_zero() {
        let s = SizeSampler::from_histogram(&[0, 0, 3, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = s.sample(&mut rng);
            assert!(n == 2 || n == 4);
        }
        assert!(SizeSampler::from_histogram(&[5]).is_err());
        assert!(SizeSampler::from_histogram(&[]).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let mut cfg = SamplerConfig::new(TaskMode::Dng);
        cfg.steps = 0;
        assert!(sample(&ZeroField, 2, 5, 2, &cfg, None, &LengthPrior::default()).is_err());
    }
}
