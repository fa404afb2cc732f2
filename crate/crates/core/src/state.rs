//! Points and tangent vectors on the product manifold.

use ndarray::{Array2, Array3};

use crate::crystal::{wrap_unit, DisorderedCrystal, LatticeParams, Site};
use crate::error::Result;
use crate::geometry::{self, unconstrained_to_lattice};

/// A crystal-shaped point on the flow manifold.
///
/// Disorder weights are stored as sphere points `x = √μ`; the simplex view
/// is recovered by squaring.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    /// Unconstrained lattice `(a, b, c, φ(α), φ(β), φ(γ))`.
    pub lattice: [f64; 6],
    /// `N x order x 3` fractional coordinates.
    pub positions: Array3<f64>,
    /// `N x D` sphere coordinates of the species vectors.
    pub species: Array2<f64>,
    /// `N x order` sphere coordinates of the position weights.
    pub weights: Array2<f64>,
}

/// Per-field velocities; shapes mirror [`FlowState`].
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityBundle {
    pub lattice: [f64; 6],
    pub positions: Array3<f64>,
    pub species: Array2<f64>,
    pub weights: Array2<f64>,
}

impl VelocityBundle {
    pub fn zeros(num_sites: usize, order: usize, vocab: usize) -> Self {
        Self {
            lattice: [0.0; 6],
            positions: Array3::zeros((num_sites, order, 3)),
            species: Array2::zeros((num_sites, vocab)),
            weights: Array2::zeros((num_sites, order)),
        }
    }
}

impl FlowState {
    pub fn num_sites(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn order(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.species.shape()[1]
    }

    pub fn position(&self, site: usize, row: usize) -> [f64; 3] {
        std::array::from_fn(|k| self.positions[[site, row, k]])
    }

    /// Simplex view of the species vector of one site.
    pub fn species_simplex(&self, site: usize) -> Vec<f64> {
        self.species.row(site).iter().map(|x| x * x).collect()
    }

    pub fn weights_simplex(&self, site: usize) -> Vec<f64> {
        self.weights.row(site).iter().map(|x| x * x).collect()
    }

    /// Lattice parameters with angles clamped to [60, 120].
    pub fn lattice_params(&self) -> LatticeParams {
        clamp_angles(unconstrained_to_lattice(&self.lattice))
    }

    /// Embeds a crystal: unconstrained lattice, coordinates as stored and
    /// square roots of the disorder weights.
    pub fn from_crystal(crystal: &DisorderedCrystal) -> Result<Self> {
        let lattice = geometry::lattice_to_unconstrained(&nudge_angles(crystal.lattice))?;
        let n = crystal.num_sites();
        let order = crystal.order();
        let vocab = crystal.vocab_size();
        let mut positions = Array3::zeros((n, order, 3));
        let mut species = Array2::zeros((n, vocab));
        let mut weights = Array2::zeros((n, order));
        for (i, site) in crystal.sites.iter().enumerate() {
            for (r, p) in site.positions.iter().enumerate() {
                for k in 0..3 {
                    positions[[i, r, k]] = p[k];
                }
            }
            for (k, x) in geometry::simplex_to_sphere(&site.species)?.into_iter().enumerate() {
                species[[i, k]] = x;
            }
            for (k, x) in geometry::simplex_to_sphere(&site.pos_weights)?.into_iter().enumerate() {
                weights[[i, k]] = x;
            }
        }
        Ok(Self { lattice, positions, species, weights })
    }

    /// Reads the state back as a crystal. Rows with zero weight are zeroed
    /// and probability vectors renormalized against rounding.
    pub fn to_crystal(&self) -> DisorderedCrystal {
        let sites = (0..self.num_sites())
            .map(|i| {
                let species = renormalized(self.species_simplex(i));
                let pos_weights = renormalized(self.weights_simplex(i));
                let positions = (0..self.order())
                    .map(|r| {
                        if pos_weights[r] == 0.0 {
                            [0.0; 3]
                        } else {
                            self.position(i, r).map(wrap_unit)
                        }
                    })
                    .collect();
                Site { species, positions, pos_weights }
            })
            .collect();
        DisorderedCrystal { lattice: self.lattice_params(), sites }
    }
}

fn renormalized(v: Vec<f64>) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.into_iter().map(|x| x / sum).collect()
    } else {
        v
    }
}

pub fn clamp_angles(l: LatticeParams) -> LatticeParams {
    LatticeParams::from_arrays(l.lengths(), l.angles().map(|a| a.clamp(60.0, 120.0)))
}

/// Moves angles at exactly 60° a hair inside the domain of the logit.
pub fn nudge_angles(l: LatticeParams) -> LatticeParams {
    LatticeParams::from_arrays(l.lengths(), l.angles().map(|a| if a <= 60.0 { 60.0 + 1e-6 } else { a }))
}
