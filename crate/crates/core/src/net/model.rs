//! Graph velocity network over the fully connected site graph.
//!
//! Node features start from the species vector and the flow time. Each of
//! the `K` layers builds a message for every ordered pair `i != j` from both
//! node states, the unconstrained lattice, the occupancy-weighted edge
//! features and a learned atom-count embedding, sums messages per receiver
//! and applies a residual update. Per-site heads emit coordinate, species
//! and position-weight velocities; a mean-pooled graph feature drives the
//! lattice head.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{time_embedding, write_edge_features, EdgeMode};
use super::tape::{Tape, Tensor, Var};
use crate::crystal::DEFAULT_MAX_SITES;
use crate::elements::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::geometry::gram;
use crate::geometry::lattice_matrix;
use crate::state::{FlowState, VelocityBundle};

/// Smallest lattice length used when building edge geometry.
const MIN_FEATURE_LENGTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Sinusoidal frequencies per axis in the distance features.
    pub n_freq: usize,
    /// Frequencies of the time embedding.
    pub time_freq: usize,
    pub vocab: usize,
    /// Position channels per site (`ℓ_max`).
    pub order: usize,
    pub max_atoms: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            num_layers: 6,
            n_freq: 128,
            time_freq: 16,
            vocab: VOCAB_SIZE,
            order: 2,
            max_atoms: DEFAULT_MAX_SITES,
            activation: Activation::Silu,
        }
    }
}

impl NetConfig {
    pub fn edge_mode(&self) -> EdgeMode {
        EdgeMode::for_order(self.order)
    }

    fn message_input_dim(&self) -> usize {
        let (dist, dir) = self.edge_mode().dims(self.order, self.n_freq);
        3 * self.hidden_dim + 6 + dist + dir
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
    final_activation: bool,
}

#[derive(Clone, Debug)]
struct Layout {
    prob: Mlp,
    time: Mlp,
    init: Mlp,
    atom_count: usize,
    message: Vec<Mlp>,
    update: Vec<Mlp>,
    head_coord: Mlp,
    head_coord_extra: Option<Mlp>,
    head_species: Mlp,
    head_weights: Mlp,
    head_lattice: Mlp,
}

/// Tensor shapes registered while the layout is built.
struct Registry {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    /// Layers whose weights start at zero.
    zero_init: Vec<bool>,
}

impl Registry {
    fn tensor(&mut self, name: String, shape: (usize, usize), zero: bool) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.zero_init.push(zero);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        Linear {
            w: self.tensor(format!("{name}.weight"), (fan_in, fan_out), zero),
            b: self.tensor(format!("{name}.bias"), (1, fan_out), zero),
        }
    }

    /// Two-layer perceptron `in -> hidden -> out`.
    fn mlp(&mut self, name: &str, dims: (usize, usize, usize), final_act: bool, zero_last: bool) -> Mlp {
        let (i, h, o) = dims;
        Mlp {
            layers: vec![
                self.linear(&format!("{name}.0"), i, h, false),
                self.linear(&format!("{name}.1"), h, o, zero_last),
            ],
            final_activation: final_act,
        }
    }
}

fn build_layout(cfg: &NetConfig) -> (Layout, Registry) {
    let mut r = Registry { names: Vec::new(), shapes: Vec::new(), zero_init: Vec::new() };
    let h = cfg.hidden_dim;
    let prob = r.mlp("prob", (cfg.vocab, h, h), false, false);
    let time = r.mlp("time", (2 * cfg.time_freq, h, h), false, false);
    let init = r.mlp("init", (2 * h, h, h), false, false);
    let atom_count = r.tensor("atom_count".into(), (cfg.max_atoms, h), false);
    let mut message = Vec::new();
    let mut update = Vec::new();
    for k in 0..cfg.num_layers {
        message.push(r.mlp(&format!("layers.{k}.message"), (cfg.message_input_dim(), h, h), true, false));
        update.push(r.mlp(&format!("layers.{k}.update"), (2 * h, h, h), false, false));
    }
    let head_coord = r.mlp("head.coord", (h, h, 3), false, true);
    let head_coord_extra =
        (cfg.order > 1).then(|| r.mlp("head.coord_extra", (h, h, 3 * (cfg.order - 1)), false, true));
    let head_species = r.mlp("head.species", (h, h, cfg.vocab), false, true);
    let head_weights = r.mlp("head.weights", (h, h, cfg.order), false, true);
    let head_lattice = r.mlp("head.lattice", (h, h, 6), false, true);
    let layout = Layout {
        prob,
        time,
        init,
        atom_count,
        message,
        update,
        head_coord,
        head_coord_extra,
        head_species,
        head_weights,
        head_lattice,
    };
    (layout, r)
}

/// Network weights together with the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: NetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Uniform fan-in initialization; the last layer of every output head is
    /// zero so the initial velocity field vanishes.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Self {
        Self::init_with(config, rng, true)
    }

    /// As [`ModelParams::init`], optionally randomizing the head outputs too.
    pub fn init_with<R: Rng + ?Sized>(config: NetConfig, rng: &mut R, zero_heads: bool) -> Self {
        let (layout, reg) = build_layout(&config);
        let mut tensors = Vec::with_capacity(reg.shapes.len());
        for (i, &(rows, cols)) in reg.shapes.iter().enumerate() {
            let is_bias = reg.names[i].ends_with(".bias");
            let fan_in = if is_bias { reg.shapes[i - 1].0 } else { rows };
            let t = if reg.zero_init[i] && zero_heads {
                Tensor::zeros((rows, cols))
            } else if reg.names[i] == "atom_count" {
                Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
            } else {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
            };
            tensors.push(t);
        }
        Self { config, names: reg.names, tensors, layout }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let (layout, reg) = build_layout(&config);
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(reg.names.len());
        for (name, &shape) in reg.names.iter().zip(&reg.shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
            if !t.iter().all(|x| x.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor {name} is not finite")));
            }
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, names: reg.names, tensors, layout })
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Indices of the tensors belonging to one output head, e.g. `"species"`.
    pub fn head_tensor_indices(&self, head: &str) -> Vec<usize> {
        let prefix = format!("head.{head}.");
        self.names.iter().enumerate().filter(|(_, n)| n.starts_with(&prefix)).map(|(i, _)| i).collect()
    }

    /// Extends a weighted-sum model to more position channels. New output
    /// units of the coordinate and weight heads start at zero.
    pub fn pad_to_order(&self, order: usize) -> Result<Self> {
        let old = self.config.order;
        if order < old || EdgeMode::for_order(old) != EdgeMode::for_order(order) {
            return Err(Error::Config(format!("cannot pad a model of order {old} to {order}")));
        }
        let config = NetConfig { order, ..self.config.clone() };
        let (_, reg) = build_layout(&config);
        let own: HashMap<&str, &Tensor> = self.named().collect();
        let named = reg
            .names
            .iter()
            .zip(&reg.shapes)
            .map(|(name, &(rows, cols))| {
                let mut t = Tensor::zeros((rows, cols));
                if let Some(src) = own.get(name.as_str()) {
                    let (r0, c0) = src.dim();
                    t.slice_mut(ndarray::s![..r0.min(rows), ..c0.min(cols)])
                        .assign(&src.slice(ndarray::s![..r0.min(rows), ..c0.min(cols)]));
                }
                (name.clone(), t)
            })
            .collect();
        Self::from_named(config, named)
    }

    /// Order-independent fingerprint of the weights (FNV-1a over the bits).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in self.named() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for x in t.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Tape handles for the network outputs of a batch.
pub struct ForwardVars {
    /// `B x 6`.
    pub lattice: Var,
    /// `n x 3`, primary position channel.
    pub coords: Var,
    /// `n x 3(order - 1)`, remaining channels.
    pub coords_extra: Option<Var>,
    /// `n x D`, projected to the sphere tangent space.
    pub species: Var,
    /// `n x order`, projected to the sphere tangent space.
    pub weights: Var,
    /// Tape handle of every parameter tensor, in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    /// First node of each graph in the stacked node list.
    pub offsets: Vec<usize>,
}

fn mlp_forward(tape: &mut Tape, p: &[Var], mlp: &Mlp, x: Var) -> Var {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (k, layer) in mlp.layers.iter().enumerate() {
        h = tape.matmul(h, p[layer.w]);
        h = tape.add_bias(h, p[layer.b]);
        if k < last || mlp.final_activation {
            h = tape.silu(h);
        }
    }
    h
}

/// Geometry used only for edge directions: lengths floored and angles
/// clamped so that mid-flow states always give a valid metric.
fn feature_metric(state: &FlowState) -> Result<[[f64; 3]; 3]> {
    let mut l = state.lattice_params();
    l.a = l.a.max(MIN_FEATURE_LENGTH);
    l.b = l.b.max(MIN_FEATURE_LENGTH);
    l.c = l.c.max(MIN_FEATURE_LENGTH);
    match lattice_matrix(&l) {
        Ok(m) => Ok(gram(&m)),
        // Clamped angles can still describe a flat cell; fall back to orthogonal axes.
        Err(_) => {
            let mut ortho = l;
            ortho.alpha = 90.0;
            ortho.beta = 90.0;
            ortho.gamma = 90.0;
            Ok(gram(&lattice_matrix(&ortho)?))
        }
    }
}

fn check_state(cfg: &NetConfig, state: &FlowState) -> Result<()> {
    let n = state.num_sites();
    if n == 0 {
        return Err(Error::Shape("state has no sites".into()));
    }
    if n > cfg.max_atoms {
        return Err(Error::TooManyAtoms { n, max: cfg.max_atoms });
    }
    if state.order() != cfg.order || state.vocab() != cfg.vocab {
        return Err(Error::Shape(format!(
            "state (order {}, D {}) does not fit model (order {}, D {})",
            state.order(),
            state.vocab(),
            cfg.order,
            cfg.vocab
        )));
    }
    Ok(())
}

/// Records the forward pass of a batch of states on `tape`.
///
/// `times[g]` is the flow time of `states[g]`. Parameters enter the tape as
/// differentiable leaves.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    states: &[&FlowState],
    times: &[f64],
) -> Result<ForwardVars> {
    let cfg = &params.config;
    let lay = &params.layout;
    if states.len() != times.len() || states.is_empty() {
        return Err(Error::Shape("states and times must be non-empty and aligned".into()));
    }
    for s in states {
        check_state(cfg, s)?;
    }
    let mode = cfg.edge_mode();
    let (dist_dim, dir_dim) = mode.dims(cfg.order, cfg.n_freq);
    let h = cfg.hidden_dim;

    let mut offsets = Vec::with_capacity(states.len());
    let mut node_graph = Vec::new();
    let mut total = 0;
    for (g, s) in states.iter().enumerate() {
        offsets.push(total);
        total += s.num_sites();
        node_graph.extend(std::iter::repeat_n(g, s.num_sites()));
    }
    let n_edges: usize = states.iter().map(|s| s.num_sites() * (s.num_sites() - 1)).sum();

    let mut species_in = Tensor::zeros((total, cfg.vocab));
    let mut time_in = Tensor::zeros((total, 2 * cfg.time_freq));
    let mut sphere_s = Tensor::zeros((total, cfg.vocab));
    let mut sphere_w = Tensor::zeros((total, cfg.order));
    let edge_const_width = 6 + dist_dim;
    let mut edge_const = Tensor::zeros((n_edges, edge_const_width));
    let mut edge_dir = Tensor::zeros((n_edges, dir_dim));
    let mut receivers = Vec::with_capacity(n_edges);
    let mut senders = Vec::with_capacity(n_edges);
    let mut count_idx = Vec::with_capacity(n_edges);

    let mut e = 0;
    for (g, s) in states.iter().enumerate() {
        let n = s.num_sites();
        let off = offsets[g];
        let temb = time_embedding(times[g], cfg.time_freq);
        for i in 0..n {
            for k in 0..cfg.vocab {
                let x = s.species[[i, k]];
                sphere_s[[off + i, k]] = x;
                species_in[[off + i, k]] = x * x;
            }
            for k in 0..cfg.order {
                sphere_w[[off + i, k]] = s.weights[[i, k]];
            }
            for (k, v) in temb.iter().enumerate() {
                time_in[[off + i, k]] = *v;
            }
        }
        let metric = feature_metric(s)?;
        let pos: Vec<Vec<[f64; 3]>> =
            (0..n).map(|i| (0..cfg.order).map(|r| s.position(i, r)).collect()).collect();
        let w: Vec<Vec<f64>> = (0..n).map(|i| s.weights_simplex(i)).collect();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut row = edge_const.row_mut(e);
                let row = row.as_slice_mut().expect("contiguous row");
                row[..6].copy_from_slice(&s.lattice);
                let mut dir_row = edge_dir.row_mut(e);
                write_edge_features(
                    &pos[i],
                    &w[i],
                    &pos[j],
                    &w[j],
                    &metric,
                    mode,
                    cfg.n_freq,
                    &mut row[6..],
                    dir_row.as_slice_mut().expect("contiguous row"),
                );
                receivers.push(off + i);
                senders.push(off + j);
                count_idx.push(n - 1);
                e += 1;
            }
        }
    }

    let p: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let receivers: Rc<[usize]> = receivers.into();
    let senders: Rc<[usize]> = senders.into();
    let count_idx: Rc<[usize]> = count_idx.into();

    let s_in = tape.constant(species_in);
    let t_in = tape.constant(time_in);
    let hp = mlp_forward(tape, &p, &lay.prob, s_in);
    let ht = mlp_forward(tape, &p, &lay.time, t_in);
    let joined = tape.concat(&[hp, ht]);
    let mut hidden = mlp_forward(tape, &p, &lay.init, joined);

    let c_edge = tape.constant(edge_const);
    let c_dir = tape.constant(edge_dir);
    let z = tape.gather(p[lay.atom_count], count_idx);
    for (msg, upd) in lay.message.iter().zip(&lay.update) {
        let hi = tape.gather(hidden, receivers.clone());
        let hj = tape.gather(hidden, senders.clone());
        let m_in = tape.concat(&[hi, hj, c_edge, z, c_dir]);
        let m = mlp_forward(tape, &p, msg, m_in);
        let agg = tape.scatter_sum(m, receivers.clone(), total);
        let u_in = tape.concat(&[hidden, agg]);
        let u = mlp_forward(tape, &p, upd, u_in);
        hidden = tape.add(hidden, u);
    }
    debug_assert_eq!(tape.value(hidden).ncols(), h);

    let coords = mlp_forward(tape, &p, &lay.head_coord, hidden);
    let coords_extra = lay.head_coord_extra.as_ref().map(|m| mlp_forward(tape, &p, m, hidden));
    let raw_s = mlp_forward(tape, &p, &lay.head_species, hidden);
    let species = tape.project(raw_s, Rc::new(sphere_s));
    let raw_w = mlp_forward(tape, &p, &lay.head_weights, hidden);
    let weights = tape.project(raw_w, Rc::new(sphere_w));
    let pooled = tape.segment_mean(hidden, node_graph.into(), states.len());
    let lattice = mlp_forward(tape, &p, &lay.head_lattice, pooled);
    tape.check_finite()?;

    Ok(ForwardVars { lattice, coords, coords_extra, species, weights, params: p, offsets })
}

/// Network output for a single state.
pub fn forward(state: &FlowState, t: f64, params: &ModelParams) -> Result<VelocityBundle> {
    Ok(forward_batch(&[state], &[t], params)?.pop().expect("one output"))
}

/// Network outputs for several states evaluated as one stacked graph.
pub fn forward_batch(
    states: &[&FlowState],
    times: &[f64],
    params: &ModelParams,
) -> Result<Vec<VelocityBundle>> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, states, times)?;
    Ok(unpack(&tape, &out, states, params.config.order))
}

pub(crate) fn unpack(
    tape: &Tape,
    out: &ForwardVars,
    states: &[&FlowState],
    order: usize,
) -> Vec<VelocityBundle> {
    let lat = tape.value(out.lattice);
    let coords = tape.value(out.coords);
    let extra = out.coords_extra.map(|v| tape.value(v));
    let sp = tape.value(out.species);
    let wt = tape.value(out.weights);
    states
        .iter()
        .enumerate()
        .map(|(g, s)| {
            let n = s.num_sites();
            let off = out.offsets[g];
            let mut positions = Array3::zeros((n, order, 3));
            for i in 0..n {
                for k in 0..3 {
                    positions[[i, 0, k]] = coords[[off + i, k]];
                }
                if let Some(x) = extra {
                    for r in 1..order {
                        for k in 0..3 {
                            positions[[i, r, k]] = x[[off + i, 3 * (r - 1) + k]];
                        }
                    }
                }
            }
            let species = Array2::from_shape_fn((n, s.vocab()), |(i, k)| sp[[off + i, k]]);
            let weights = Array2::from_shape_fn((n, order), |(i, k)| wt[[off + i, k]]);
            VelocityBundle {
                lattice: std::array::from_fn(|k| lat[[g, k]]),
                positions,
                species,
                weights,
            }
        })
        .collect()
}

/// Initial node features `φ_init(φ_prob(s), φ_time(t))`.
pub fn init_node_features(species: &[f64], t: f64, params: &ModelParams) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if species.len() != cfg.vocab {
        return Err(Error::Shape(format!("species of length {}, expected {}", species.len(), cfg.vocab)));
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let s_in = tape.constant(Tensor::from_shape_vec((1, cfg.vocab), species.to_vec()).expect("shape"));
    let t_in = tape.constant(
        Tensor::from_shape_vec((1, 2 * cfg.time_freq), time_embedding(t, cfg.time_freq)).expect("shape"),
    );
    let hp = mlp_forward(&mut tape, &p, &params.layout.prob, s_in);
    let ht = mlp_forward(&mut tape, &p, &params.layout.time, t_in);
    let joined = tape.concat(&[hp, ht]);
    let h = mlp_forward(&mut tape, &p, &params.layout.init, joined);
    tape.check_finite()?;
    Ok(tape.value(h).iter().copied().collect())
}
