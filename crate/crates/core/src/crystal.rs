//! Unified site-centric representation of ordered, substitutionally
//! disordered (SD) and positionally disordered (PD) crystals.
//!
//! Each site carries an element occupancy vector `species` on the
//! `(D-1)`-simplex, an `order x 3` block of candidate fractional positions
//! and a probability vector `pos_weights` over those positions. Ordered sites
//! are one-hot with weights `[1, 0, ...]`. Unused position rows are zero.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elements::{self, VOCAB_SIZE};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SITES: usize = 160;
/// Binary positional disorder.
pub const DEFAULT_ORDER: usize = 2;

/// Tolerance of the stored simplex invariant.
pub const SIMPLEX_TOL: f64 = 1e-8;
/// Inputs within this distance of unit sum are renormalized at construction.
pub const RENORMALIZE_TOL: f64 = 1e-6;

/// Lattice lengths (Å) and angles (degrees).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LatticeParams {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { a, b, c, alpha, beta, gamma }
    }

    pub fn cubic(a: f64) -> Self {
        Self::new(a, a, a, 90.0, 90.0, 90.0)
    }

    pub fn lengths(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn from_arrays(lengths: [f64; 3], angles: [f64; 3]) -> Self {
        Self::new(lengths[0], lengths[1], lengths[2], angles[0], angles[1], angles[2])
    }

    /// Checks the ingestion range: positive lengths, angles in [60, 120].
    pub fn check(&self) -> Result<()> {
        if !self.lengths().iter().all(|&l| l.is_finite() && l > 0.0) {
            return Err(Error::InvalidLattice(format!("non-positive length in {self:?}")));
        }
        if !self.angles().iter().all(|&t| (60.0..=120.0).contains(&t)) {
            return Err(Error::InvalidLattice(format!("angle outside [60, 120] in {self:?}")));
        }
        Ok(())
    }
}

/// Wraps a fractional coordinate into [0, 1).
pub fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

pub fn wrap_point(p: [f64; 3]) -> [f64; 3] {
    p.map(wrap_unit)
}

/// One crystallographic site.
///
/// Fields are public so that diagnostics can inspect unvalidated data; use
/// [`Site::new`] to build a site that satisfies every invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    /// Element occupancy vector, length `D`.
    pub species: Vec<f64>,
    /// Candidate fractional positions, one row per PD channel.
    pub positions: Vec<[f64; 3]>,
    /// Occupancy of each position row.
    pub pos_weights: Vec<f64>,
}

fn normalize_simplex(v: &[f64], what: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidSimplex(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::InvalidSimplex(format!("{what} sums to {sum}")));
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

impl Site {
    /// Builds a site, renormalizing both probability vectors and wrapping
    /// coordinates. Rows with zero weight are zeroed.
    pub fn new(species: Vec<f64>, positions: Vec<[f64; 3]>, pos_weights: Vec<f64>) -> Result<Self> {
        if positions.len() != pos_weights.len() || positions.is_empty() {
            return Err(Error::Shape(format!(
                "{} position rows for {} weights",
                positions.len(),
                pos_weights.len()
            )));
        }
        let species = normalize_simplex(&species, "species")?;
        let pos_weights = normalize_simplex(&pos_weights, "pos_weights")?;
        let positions = positions
            .iter()
            .zip(&pos_weights)
            .map(|(p, &w)| if w == 0.0 { [0.0; 3] } else { wrap_point(*p) })
            .collect();
        Ok(Self { species, positions, pos_weights })
    }

    /// Ordered site of a single element at `coord`.
    pub fn ordered(index: usize, vocab: usize, coord: [f64; 3], order: usize) -> Self {
        let mut species = vec![0.0; vocab];
        species[index] = 1.0;
        let mut positions = vec![[0.0; 3]; order];
        positions[0] = wrap_point(coord);
        let mut pos_weights = vec![0.0; order];
        pos_weights[0] = 1.0;
        Self { species, positions, pos_weights }
    }

    pub fn order(&self) -> usize {
        self.pos_weights.len()
    }

    /// Number of position rows with nonzero weight.
    pub fn active_positions(&self) -> usize {
        self.pos_weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// A site is positionally disordered when two or more rows are occupied.
    pub fn is_pd(&self) -> bool {
        self.active_positions() >= 2
    }

    pub fn is_sd(&self) -> bool {
        self.species.iter().filter(|&&x| x > 0.0).count() >= 2
    }

    /// Index of the most probable element, lowest index on ties.
    pub fn dominant_species(&self) -> usize {
        argmax(&self.species)
    }

    /// Position row with the largest weight.
    pub fn dominant_position(&self) -> [f64; 3] {
        self.positions[argmax(&self.pos_weights)]
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A crystal as a lattice plus a list of sites.
///
/// Element vocabulary index `k` denotes atomic number `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisorderedCrystal {
    pub lattice: LatticeParams,
    pub sites: Vec<Site>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    SimplexSum,
    NegativeEntry,
    CoordinateRange,
    PaddingNotZero,
    ShapeMismatch,
    SiteCount,
    LatticeLength,
    LatticeAngle,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::SimplexSum => "simplex sum",
            ViolationKind::NegativeEntry => "negative entry",
            ViolationKind::CoordinateRange => "coordinate range",
            ViolationKind::PaddingNotZero => "padding not zero",
            ViolationKind::ShapeMismatch => "shape mismatch",
            ViolationKind::SiteCount => "site count",
            ViolationKind::LatticeLength => "lattice length",
            ViolationKind::LatticeAngle => "lattice angle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// `None` for crystal-level violations.
    pub site: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            Some(i) => write!(f, "site {i}: {} ({})", self.kind.name(), self.detail),
            None => write!(f, "{} ({})", self.kind.name(), self.detail),
        }
    }
}

impl DisorderedCrystal {
    pub fn new(lattice: LatticeParams, sites: Vec<Site>) -> Result<Self> {
        let crystal = Self { lattice, sites };
        let violations = crystal.validate_with(DEFAULT_MAX_SITES);
        match violations.first() {
            None => Ok(crystal),
            Some(v) => Err(Error::InvalidCrystal(v.to_string())),
        }
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    /// Element vocabulary size `D`.
    pub fn vocab_size(&self) -> usize {
        self.sites.first().map_or(VOCAB_SIZE, |s| s.species.len())
    }

    /// Maximum PD order `ℓ_max`.
    pub fn order(&self) -> usize {
        self.sites.first().map_or(DEFAULT_ORDER, Site::order)
    }

    pub fn is_ordered(&self) -> bool {
        self.sites.iter().all(|s| !s.is_sd() && !s.is_pd())
    }

    /// Lists every broken invariant. Empty iff the crystal is valid.
    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(DEFAULT_MAX_SITES)
    }

    pub fn validate_with(&self, max_sites: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |site: Option<usize>, kind: ViolationKind, detail: String| {
            out.push(Violation { site, kind, detail });
        };

        let n = self.sites.len();
        if n == 0 || n > max_sites {
            push(None, ViolationKind::SiteCount, format!("{n} sites, allowed 1..={max_sites}"));
        }
        let l = &self.lattice;
        if !l.lengths().iter().all(|&x| x.is_finite() && x > 0.0) {
            push(None, ViolationKind::LatticeLength, format!("{:?}", l.lengths()));
        }
        if !l.angles().iter().all(|&x| (60.0..=120.0).contains(&x)) {
            push(None, ViolationKind::LatticeAngle, format!("{:?}", l.angles()));
        }

        let vocab = self.vocab_size();
        let order = self.order();
        for (i, site) in self.sites.iter().enumerate() {
            let at = Some(i);
            if site.species.len() != vocab
                || site.pos_weights.len() != order
                || site.positions.len() != order
            {
                push(
                    at,
                    ViolationKind::ShapeMismatch,
                    format!(
                        "D={} order={} positions={}",
                        site.species.len(),
                        site.pos_weights.len(),
                        site.positions.len()
                    ),
                );
                continue;
            }
            for (name, v) in [("species", &site.species), ("pos_weights", &site.pos_weights)] {
                if v.iter().any(|&x| !(x >= 0.0)) {
                    push(at, ViolationKind::NegativeEntry, name.to_string());
                }
                let sum: f64 = v.iter().sum();
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    push(at, ViolationKind::SimplexSum, format!("{name} sums to {sum}"));
                }
            }
            for (row, (p, &w)) in site.positions.iter().zip(&site.pos_weights).enumerate() {
                if p.iter().any(|&x| !(0.0..1.0).contains(&x)) {
                    push(at, ViolationKind::CoordinateRange, format!("row {row}: {p:?}"));
                }
                if w == 0.0 && p.iter().any(|&x| x != 0.0) {
                    push(at, ViolationKind::PaddingNotZero, format!("row {row}"));
                }
            }
        }
        out
    }
}

/// Builds an ordered crystal from atomic numbers and fractional coordinates.
pub fn from_ordered(
    elements: &[u32],
    coords: &[[f64; 3]],
    lattice: LatticeParams,
    order: usize,
) -> Result<DisorderedCrystal> {
    if elements.len() != coords.len() {
        return Err(Error::Shape(format!(
            "{} elements for {} coordinates",
            elements.len(),
            coords.len()
        )));
    }
    let sites = elements
        .iter()
        .zip(coords)
        .map(|(&z, &c)| {
            let idx = elements::index_of(z).ok_or_else(|| Error::UnknownElement(z.to_string()))?;
            Ok(Site::ordered(idx, VOCAB_SIZE, c, order.max(1)))
        })
        .collect::<Result<Vec<_>>>()?;
    DisorderedCrystal::new(lattice, sites)
}

/// Extends (or shrinks) every site to `order` position rows.
///
/// Shrinking is allowed only when every dropped row has zero weight.
pub fn pad_to_order(crystal: &DisorderedCrystal, order: usize) -> Result<DisorderedCrystal> {
    let mut out = crystal.clone();
    for (i, site) in out.sites.iter_mut().enumerate() {
        let current = site.order();
        if order < current {
            let dropped: f64 = site.pos_weights[order..].iter().sum();
            if dropped > 0.0 {
                return Err(Error::ShrinkOrder { site: i, order, weight: dropped });
            }
        }
        site.positions.resize(order, [0.0; 3]);
        site.pos_weights.resize(order, 0.0);
    }
    Ok(out)
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws one ordered realization: an element from each site's species
/// vector and a position from its position weights.
pub fn sample_realization<R: Rng + ?Sized>(
    crystal: &DisorderedCrystal,
    rng: &mut R,
) -> DisorderedCrystal {
    let sites = crystal
        .sites
        .iter()
        .map(|site| {
            let k = draw_categorical(&site.species, rng);
            let row = draw_categorical(&site.pos_weights, rng);
            Site::ordered(k, site.species.len(), site.positions[row], site.order())
        })
        .collect();
    DisorderedCrystal { lattice: crystal.lattice, sites }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nacl() -> DisorderedCrystal {
        from_ordered(&[11, 17], &[[0.0; 3], [0.5; 3]], LatticeParams::cubic(5.64), 2).unwrap()
    }

    fn sd_site(a: usize, b: usize, pa: f64, coord: [f64; 3]) -> Site {
        let mut s = vec![0.0; VOCAB_SIZE];
        s[a] = pa;
        s[b] = 1.0 - pa;
        Site::new(s, vec![coord, [0.0; 3]], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn ordered_nacl_is_valid() {
        let c = nacl();
        assert!(c.validate().is_empty());
        assert_eq!(c.sites[0].pos_weights, vec![1.0, 0.0]);
        assert_eq!(c.sites[0].positions[1], [0.0; 3]);
        assert!(c.is_ordered());
    }

    #[test]
    fn single_iron_site() {
        let c = from_ordered(&[26], &[[0.0; 3]], LatticeParams::cubic(3.0), 2).unwrap();
        assert_eq!(c.sites[0].species[25], 1.0);
        assert_eq!(c.sites[0].species.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn unknown_element_rejected() {
        let err = from_ordered(&[101], &[[0.0; 3]], LatticeParams::cubic(3.0), 2).unwrap_err();
        assert!(matches!(err, Error::UnknownElement(_)));
    }

    #[test]
    fn simplex_sum_violation() {
        let mut c = nacl();
        c.sites[0].species[10] = 0.9;
        let v = c.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::SimplexSum);
        assert_eq!(v[0].site, Some(0));
    }

    #[test]
    fn coordinate_range_violation() {
        let mut c = nacl();
        c.sites[1].positions[0][2] = 1.0;
        let v = c.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind.name(), "coordinate range");
        assert_eq!(v[0].site, Some(1));
    }

    #[test]
    fn construction_renormalizes_and_wraps() {
        let mut s = vec![0.0; 4];
        s[0] = 0.5 + 4e-7;
        s[1] = 0.5;
        let site = Site::new(s, vec![[1.25, -0.25, 0.0]], vec![1.0]).unwrap();
        assert!((site.species.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(site.positions[0], [0.25, 0.75, 0.0]);

        let bad = Site::new(vec![0.5, 0.4], vec![[0.0; 3]], vec![1.0]);
        assert!(bad.is_err());
    }

    #[test]
    fn padding_appends_zero_rows() {
        let mut s = vec![0.0; VOCAB_SIZE];
        s[7] = 1.0;
        let site = Site::new(s, vec![[0.1, 0.2, 0.3], [0.15, 0.2, 0.3]], vec![0.6, 0.4]).unwrap();
        let c = DisorderedCrystal::new(LatticeParams::cubic(4.0), vec![site]).unwrap();
        let p = pad_to_order(&c, 5).unwrap();
        assert_eq!(p.sites[0].pos_weights, vec![0.6, 0.4, 0.0, 0.0, 0.0]);
        assert_eq!(p.sites[0].positions[4], [0.0; 3]);
        assert!(p.validate().is_empty());
        assert_eq!(pad_to_order(&c, 2).unwrap(), c);

        let mut p5 = p.clone();
        p5.sites[0].pos_weights = vec![0.5, 0.2, 0.3, 0.0, 0.0];
        p5.sites[0].positions[2] = [0.4, 0.4, 0.4];
        assert!(matches!(pad_to_order(&p5, 2), Err(Error::ShrinkOrder { site: 0, .. })));
    }

    #[test]
    fn realization_of_ordered_is_identity() {
        let c = nacl();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert_eq!(sample_realization(&c, &mut rng), c);
        }
    }

    #[test]
    fn realization_marginals() {
        // Fe (25) / Ni (27) 50:50 on site 0; PD site with weights 0.7 / 0.3.
        let mut s = vec![0.0; VOCAB_SIZE];
        s[7] = 1.0;
        let pd = Site::new(s, vec![[0.1, 0.1, 0.1], [0.2, 0.1, 0.1]], vec![0.7, 0.3]).unwrap();
        let c = DisorderedCrystal::new(
            LatticeParams::cubic(4.0),
            vec![sd_site(25, 27, 0.5, [0.5; 3]), pd],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let (mut fe, mut first) = (0usize, 0usize);
        for _ in 0..draws {
            let r = sample_realization(&c, &mut rng);
            assert!(r.is_ordered());
            fe += (r.sites[0].species[25] == 1.0) as usize;
            first += (r.sites[1].positions[0] == [0.1, 0.1, 0.1]) as usize;
        }
        assert!((fe as f64 / draws as f64 - 0.5).abs() < 0.02);
        assert!((first as f64 / draws as f64 - 0.7).abs() < 0.02);

        // Chi-square goodness of fit, 1 dof, 99.9% critical value 10.83.
        let chi = |obs: usize, p: f64| {
            let n = draws as f64;
            let e1 = n * p;
            let e2 = n * (1.0 - p);
            let o1 = obs as f64;
            (o1 - e1).powi(2) / e1 + (n - o1 - e2).powi(2) / e2
        };
        assert!(chi(fe, 0.5) < 10.83);
        assert!(chi(first, 0.7) < 10.83);
    }
}
