//! Continuous occupancies to multi-hot assignments: a sharpness test for
//! ordered sites, then a vote over five selection heuristics.

use serde::{Deserialize, Serialize};

use crate::crystal::{argmax, DisorderedCrystal, Site};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizeConfig {
    pub tau_ratio: f64,
    pub k: usize,
    pub tau_abs: f64,
    pub tau_percentile: f64,
    pub alpha_adapt: f64,
    pub tau_entropy: f64,
    pub tau_vote: usize,
}

impl Default for DiscretizeConfig {
    fn default() -> Self {
        Self { tau_ratio: 3.0, k: 2, tau_abs: 0.2, tau_percentile: 95.0, alpha_adapt: 0.2, tau_entropy: 0.9, tau_vote: 4 }
    }
}

impl DiscretizeConfig {
    pub fn check(&self) -> Result<()> {
        let ok = self.tau_ratio > 1.0
            && self.k >= 1
            && (0.0..=1.0).contains(&self.tau_abs)
            && (0.0..=100.0).contains(&self.tau_percentile)
            && (0.0..=1.0).contains(&self.alpha_adapt)
            && (0.0..=1.0).contains(&self.tau_entropy)
            && (1..=5).contains(&self.tau_vote);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid discretization thresholds {self:?}")))
        }
    }
}

/// Selected indices (ascending) and their renormalized occupancies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHotAssignment {
    pub indices: Vec<usize>,
    pub occupancy: Vec<f64>,
}

impl MultiHotAssignment {
    fn from_indices(s: &[f64], indices: Vec<usize>) -> Self {
        let sum: f64 = indices.iter().map(|&j| s[j]).sum();
        let occupancy = if sum > 0.0 {
            indices.iter().map(|&j| s[j] / sum).collect()
        } else {
            vec![1.0 / indices.len() as f64; indices.len()]
        };
        Self { indices, occupancy }
    }

    /// Dense vector of length `d`.
    pub fn to_dense(&self, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        for (&j, &p) in self.indices.iter().zip(&self.occupancy) {
            v[j] = p;
        }
        v
    }
}

/// Largest and second-largest entries; ties keep the lowest index first.
fn top_two(s: &[f64]) -> (usize, f64, f64) {
    let j1 = argmax(s);
    let p2 = s.iter().enumerate().filter(|&(j, _)| j != j1).map(|(_, &x)| x).fold(f64::NEG_INFINITY, f64::max);
    (j1, s[j1], if p2.is_finite() { p2 } else { 0.0 })
}

/// Stage I: the argmax index when `p1 / p2 > τ_ratio`.
pub fn stage1_ordered(s: &[f64], config: &DiscretizeConfig) -> Option<usize> {
    let (j1, p1, p2) = top_two(s);
    if p2 <= 0.0 || p1 / p2 > config.tau_ratio {
        Some(j1)
    } else {
        None
    }
}

/// Linear-interpolation quantile of all entries.
pub fn percentile(s: &[f64], q: f64) -> f64 {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Entropy normalized by `ln d`, with `0 ln 0 = 0`.
pub fn normalized_entropy(s: &[f64]) -> f64 {
    if s.len() < 2 {
        return 0.0;
    }
    let h: f64 = s.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h / (s.len() as f64).ln()
}

/// Indices of the `k` largest entries; ties prefer lower indices.
pub fn top_k(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn above(s: &[f64], cut: f64) -> Vec<usize> {
    (0..s.len()).filter(|&j| s[j] > cut).collect()
}

/// The five candidate selections, each sorted ascending.
pub fn heuristics(s: &[f64], config: &DiscretizeConfig) -> [Vec<usize>; 5] {
    let p1 = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let adaptive = above(s, config.alpha_adapt * p1);
    let entropy = if normalized_entropy(s) > config.tau_entropy { vec![argmax(s)] } else { adaptive.clone() };
    [
        top_k(s, config.k),
        above(s, config.tau_abs),
        above(s, percentile(s, config.tau_percentile)),
        adaptive,
        entropy,
    ]
}

/// Per-index vote counts over the five heuristics.
pub fn vote_counts(s: &[f64], config: &DiscretizeConfig) -> Vec<usize> {
    let mut votes = vec![0; s.len()];
    for set in heuristics(s, config) {
        for j in set {
            votes[j] += 1;
        }
    }
    votes
}

/// Stage I, then the Stage II vote; an empty vote falls back to argmax.
pub fn ensemble_vote(s: &[f64], config: &DiscretizeConfig) -> MultiHotAssignment {
    if let Some(j) = stage1_ordered(s, config) {
        return MultiHotAssignment { indices: vec![j], occupancy: vec![1.0] };
    }
    let votes = vote_counts(s, config);
    let mut chosen: Vec<usize> = (0..s.len()).filter(|&j| votes[j] >= config.tau_vote).collect();
    if chosen.is_empty() {
        chosen.push(argmax(s));
    }
    MultiHotAssignment::from_indices(s, chosen)
}

/// Applies [`ensemble_vote`] to every species and position-weight vector.
pub fn discretize_crystal(crystal: &DisorderedCrystal, config: &DiscretizeConfig) -> DisorderedCrystal {
    let sites = crystal
        .sites
        .iter()
        .map(|site| {
            let species = ensemble_vote(&site.species, config).to_dense(site.species.len());
            let pos_weights = ensemble_vote(&site.pos_weights, config).to_dense(site.pos_weights.len());
            let positions = site
                .positions
                .iter()
                .zip(&pos_weights)
                .map(|(p, &w)| if w > 0.0 { *p } else { [0.0; 3] })
                .collect();
            Site { species, positions, pos_weights }
        })
        .collect();
    DisorderedCrystal { lattice: crystal.lattice, sites }
}
