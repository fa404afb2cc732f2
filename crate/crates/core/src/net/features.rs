//! Fixed (parameter-free) feature maps of the velocity network.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::{mat_vec, torus_log, Mat3};

/// Direction features below this norm are zeroed.
pub const DIRECTION_EPS: f64 = 1e-8;

/// How the per-position-pair edge features are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeMode {
    /// One block per position pair, fixed order `(0,0), (0,1), (1,0), (1,1)`.
    Concat,
    /// Occupancy-weighted sum over all position pairs.
    WeightedSum,
}

impl EdgeMode {
    /// Concatenation for binary PD, weighted summation otherwise.
    pub fn for_order(order: usize) -> Self {
        if order == 2 {
            EdgeMode::Concat
        } else {
            EdgeMode::WeightedSum
        }
    }

    fn blocks(self, order: usize) -> usize {
        match self {
            EdgeMode::Concat => order * order,
            EdgeMode::WeightedSum => 1,
        }
    }

    /// `(distance, direction)` feature widths.
    pub fn dims(self, order: usize, n_freq: usize) -> (usize, usize) {
        let b = self.blocks(order);
        (b * 3 * 2 * n_freq, b * 3)
    }
}

/// `[sin(2πk d), cos(2πk d)]` for each axis and `k = 1..=n_freq`.
pub fn sinusoidal_embedding(d: [f64; 3], n_freq: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * 2 * n_freq];
    add_sinusoidal(d, n_freq, 1.0, &mut out);
    out
}

fn add_sinusoidal(d: [f64; 3], n_freq: usize, weight: f64, out: &mut [f64]) {
    let mut idx = 0;
    for &x in &d {
        for k in 1..=n_freq {
            let (s, c) = (2.0 * PI * k as f64 * x).sin_cos();
            out[idx] += weight * s;
            out[idx + 1] += weight * c;
            idx += 2;
        }
    }
}

/// Unit direction of `M Δ`, or zero when the norm vanishes.
pub fn metric_direction(metric: &Mat3, delta: [f64; 3]) -> [f64; 3] {
    let u = mat_vec(metric, delta);
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if n < DIRECTION_EPS {
        [0.0; 3]
    } else {
        u.map(|x| x / n)
    }
}

/// Distance and direction features of the edge from site `i` to site `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatures {
    pub dist: Vec<f64>,
    pub dir: Vec<f64>,
}

/// Computes edge features for one ordered pair of sites.
///
/// `w_i`, `w_j` are the position weights on the simplex. Pairs whose joint
/// weight is zero contribute nothing.
pub fn edge_features(
    pos_i: &[[f64; 3]],
    w_i: &[f64],
    pos_j: &[[f64; 3]],
    w_j: &[f64],
    metric: &Mat3,
    mode: EdgeMode,
    n_freq: usize,
) -> EdgeFeatures {
    let order = w_i.len();
    let (dd, dr) = mode.dims(order, n_freq);
    let mut out = EdgeFeatures { dist: vec![0.0; dd], dir: vec![0.0; dr] };
    write_edge_features(pos_i, w_i, pos_j, w_j, metric, mode, n_freq, &mut out.dist, &mut out.dir);
    out
}

/// In-place variant of [`edge_features`]; buffers must be zeroed.
#[allow(clippy::too_many_arguments)]
pub fn write_edge_features(
    pos_i: &[[f64; 3]],
    w_i: &[f64],
    pos_j: &[[f64; 3]],
    w_j: &[f64],
    metric: &Mat3,
    mode: EdgeMode,
    n_freq: usize,
    dist: &mut [f64],
    dir: &mut [f64],
) {
    let order = w_i.len();
    let block = 3 * 2 * n_freq;
    for a in 0..order {
        for b in 0..order {
            let weight = w_i[a] * w_j[b];
            if weight == 0.0 {
                continue;
            }
            let slot = match mode {
                EdgeMode::Concat => a * order + b,
                EdgeMode::WeightedSum => 0,
            };
            let delta = torus_log(pos_i[a], pos_j[b]);
            add_sinusoidal(delta, n_freq, weight, &mut dist[slot * block..(slot + 1) * block]);
            let u = metric_direction(metric, delta);
            for k in 0..3 {
                dir[slot * 3 + k] += weight * u[k];
            }
        }
    }
}

/// Transformer-style sinusoidal embedding of the flow time `t ∈ [0, 1]`.
pub fn time_embedding(t: f64, n_freq: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n_freq];
    let scale = (10_000f64).ln() / n_freq.max(1) as f64;
    for k in 0..n_freq {
        let arg = 1000.0 * t * (-scale * k as f64).exp();
        out[k] = arg.sin();
        out[n_freq + k] = arg.cos();
    }
    out
}
