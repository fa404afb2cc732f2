//! Closed-form manifold kernels.
//!
//! Three factors make up the flow manifold:
//! - the flat torus `[0,1)^3` for fractional coordinates,
//! - the positive orthant of the unit sphere, reached from the probability
//!   simplex through the elementwise square root, for disorder weights,
//! - an unconstrained Euclidean space for lattice parameters, where angles
//!   pass through a logit transform.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Exp1, LogNormal};
use serde::{Deserialize, Serialize};

use crate::crystal::{wrap_unit, DisorderedCrystal, LatticeParams};
use crate::error::{Error, Result};
use crate::state::FlowState;

pub type Mat3 = [[f64; 3]; 3];

/// Below this norm `sinc` switches to its Taylor expansion.
const SINC_TAYLOR: f64 = 1e-4;
/// Inner products at or below `-1 + ANTIPODAL_TOL` have no unique geodesic.
const ANTIPODAL_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Torus

/// Shortest periodic representative of a displacement, in [-0.5, 0.5).
pub fn wrap_displacement(z: f64) -> f64 {
    let r = (z + 0.5).rem_euclid(1.0);
    if r >= 1.0 {
        -0.5
    } else {
        r - 0.5
    }
}

/// Wrapped displacement from `f0` to `f1`.
pub fn torus_log(f0: [f64; 3], f1: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| wrap_displacement(f1[k] - f0[k]))
}

pub fn torus_exp(f0: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| wrap_unit(f0[k] + v[k]))
}

/// Subtracts the per-axis mean displacement. The result is a raw Euclidean
/// regression target and is deliberately left unwrapped.
pub fn remove_mean(displacements: &[[f64; 3]]) -> Vec<[f64; 3]> {
    if displacements.is_empty() {
        return Vec::new();
    }
    let n = displacements.len() as f64;
    let mut mean = [0.0; 3];
    for d in displacements {
        for k in 0..3 {
            mean[k] += d[k];
        }
    }
    let mean = mean.map(|m| m / n);
    displacements.iter().map(|d| std::array::from_fn(|k| d[k] - mean[k])).collect()
}

// ---------------------------------------------------------------------------
// Simplex and sphere

/// Elementwise square root, mapping the simplex onto the positive orthant.
pub fn simplex_to_sphere(mu: &[f64]) -> Result<Vec<f64>> {
    mu.iter()
        .map(|&m| {
            if m < -1e-12 || !m.is_finite() {
                Err(Error::InvalidSimplex(format!("entry {m} is negative")))
            } else {
                Ok(m.max(0.0).sqrt())
            }
        })
        .collect()
}

/// Elementwise square. Lands on the simplex for any unit vector.
pub fn sphere_to_simplex(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v * v).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Great-circle distance between unit vectors.
pub fn sphere_distance(x: &[f64], y: &[f64]) -> f64 {
    dot(x, y).clamp(-1.0, 1.0).acos()
}

/// `2 arccos(Σ √(μ_k ν_k))`.
pub fn fisher_rao_distance(mu: &[f64], nu: &[f64]) -> f64 {
    let bc: f64 = mu.iter().zip(nu).map(|(a, b)| (a * b).max(0.0).sqrt()).sum();
    2.0 * bc.clamp(-1.0, 1.0).acos()
}

/// `sin(x) / x` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < SINC_TAYLOR {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// `exp_x(v) = cos‖v‖ x + sinc‖v‖ v`.
pub fn sphere_exp(x: &[f64], v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    let (c, s) = (n.cos(), sinc(n));
    x.iter().zip(v).map(|(xi, vi)| c * xi + s * vi).collect()
}

/// Logarithmic map on the unit sphere.
///
/// Equal to `θ / sin θ · (x1 - cos θ · x0)` with `cos θ = ⟨x0, x1⟩`. The
/// angle is recovered with `atan2` so short geodesics keep full precision.
pub fn sphere_log(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    let c = dot(x0, x1);
    if c <= -1.0 + ANTIPODAL_TOL {
        return Err(Error::Geometry(format!("antipodal points (cos = {c})")));
    }
    let u: Vec<f64> = x1.iter().zip(x0).map(|(b, a)| b - c * a).collect();
    let nu = norm(&u);
    if nu == 0.0 {
        return Ok(vec![0.0; x0.len()]);
    }
    let theta = nu.atan2(c);
    Ok(u.into_iter().map(|ui| theta * ui / nu).collect())
}

/// Removes the component of `v` along the unit vector `x`.
pub fn project_tangent(x: &[f64], v: &[f64]) -> Vec<f64> {
    let d = dot(x, v);
    v.iter().zip(x).map(|(vi, xi)| vi - d * xi).collect()
}

/// Fisher-Rao geodesic between two categorical distributions.
pub fn simplex_interpolate(mu0: &[f64], mu1: &[f64], t: f64) -> Result<Vec<f64>> {
    if t == 0.0 {
        return Ok(mu0.to_vec());
    }
    if t == 1.0 {
        return Ok(mu1.to_vec());
    }
    let x0 = simplex_to_sphere(mu0)?;
    let x1 = simplex_to_sphere(mu1)?;
    let v: Vec<f64> = sphere_log(&x0, &x1)?.into_iter().map(|vi| t * vi).collect();
    Ok(sphere_to_simplex(&sphere_exp(&x0, &v)))
}

// ---------------------------------------------------------------------------
// Lattice

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `logit((η - 60) / 120)`.
pub fn angle_to_unconstrained(deg: f64) -> f64 {
    logit((deg - 60.0) / 120.0)
}

/// `120 σ(η') + 60`.
pub fn angle_from_unconstrained(x: f64) -> f64 {
    120.0 * sigmoid(x) + 60.0
}

/// Maps lattice parameters to `(a, b, c, φ(α), φ(β), φ(γ))`.
///
/// Angles must lie in (60, 120]; at 60 the logit diverges.
pub fn lattice_to_unconstrained(l: &LatticeParams) -> Result<[f64; 6]> {
    if !l.lengths().iter().all(|&x| x.is_finite() && x > 0.0) {
        return Err(Error::InvalidLattice(format!("non-positive length in {l:?}")));
    }
    if !l.angles().iter().all(|&t| t > 60.0 && t <= 120.0) {
        return Err(Error::InvalidLattice(format!("angle outside (60, 120] in {l:?}")));
    }
    let [a, b, c] = l.lengths();
    let [al, be, ga] = l.angles().map(angle_to_unconstrained);
    Ok([a, b, c, al, be, ga])
}

/// Inverse of [`lattice_to_unconstrained`]. Angles land in (60, 180) and are
/// not clamped here.
pub fn unconstrained_to_lattice(v: &[f64; 6]) -> LatticeParams {
    LatticeParams::new(
        v[0],
        v[1],
        v[2],
        angle_from_unconstrained(v[3]),
        angle_from_unconstrained(v[4]),
        angle_from_unconstrained(v[5]),
    )
}

/// Lattice matrix with the cell vectors as columns: `a` along x, `b` in the
/// xy-plane. Cartesian position is `L f`.
pub fn lattice_matrix(l: &LatticeParams) -> Result<Mat3> {
    let [a, b, c] = l.lengths();
    let [al, be, ga] = l.angles().map(f64::to_radians);
    let (ca, cb, cg, sg) = (al.cos(), be.cos(), ga.cos(), ga.sin());
    let cy = (ca - cb * cg) / sg;
    let cz2 = 1.0 - cb * cb - cy * cy;
    if !(cz2 > 0.0) || !sg.is_finite() || sg.abs() < 1e-12 {
        return Err(Error::InvalidLattice(format!("degenerate cell {l:?}")));
    }
    let cz = cz2.sqrt();
    let m = [
        [a, b * cg, c * cb],
        [0.0, b * sg, c * cy],
        [0.0, 0.0, c * cz],
    ];
    let det = det3(&m);
    if det <= 1e-10 || det <= 1e-6 * a * b * c {
        return Err(Error::InvalidLattice(format!("degenerate cell {l:?}")));
    }
    Ok(m)
}

/// Metric tensor `M = Lᵀ L`.
pub fn metric(l: &LatticeParams) -> Result<Mat3> {
    Ok(gram(&lattice_matrix(l)?))
}

pub fn gram(m: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| m[k][i] * m[k][j]).sum()))
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Cell volume in Å³.
pub fn volume(l: &LatticeParams) -> Result<f64> {
    Ok(det3(&lattice_matrix(l)?))
}

// ---------------------------------------------------------------------------
// Priors

/// Per-axis LogNormal parameters of the lattice-length prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    pub loc: [f64; 3],
    pub scale: [f64; 3],
}

impl Default for LengthPrior {
    fn default() -> Self {
        Self { loc: [1.0; 3], scale: [0.5; 3] }
    }
}

impl LengthPrior {
    /// Log-mean and log-std per axis. Falls back to the default when empty;
    /// a zero spread is floored at 1e-3.
    pub fn fit<'a>(crystals: impl IntoIterator<Item = &'a DisorderedCrystal>) -> Self {
        let logs: Vec<[f64; 3]> =
            crystals.into_iter().map(|c| c.lattice.lengths().map(f64::ln)).collect();
        if logs.is_empty() {
            return Self::default();
        }
        let n = logs.len() as f64;
        let loc: [f64; 3] = std::array::from_fn(|k| logs.iter().map(|l| l[k]).sum::<f64>() / n);
        let scale = std::array::from_fn(|k| {
            let var = logs.iter().map(|l| (l[k] - loc[k]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-3)
        });
        Self { loc, scale }
    }
}

/// Uniform sample from the simplex (Dirichlet(1, ..., 1)).
pub fn sample_uniform_simplex<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Draws the prior state: LogNormal lengths, U(60, 120) angles, uniform
/// coordinates in every position channel and uniform disorder weights.
pub fn sample_priors<R: Rng + ?Sized>(
    num_sites: usize,
    vocab: usize,
    order: usize,
    rng: &mut R,
    lengths: &LengthPrior,
) -> FlowState {
    let mut lattice = [0.0; 6];
    for k in 0..3 {
        let dist = LogNormal::new(lengths.loc[k], lengths.scale[k])
            .unwrap_or_else(|_| LogNormal::new(1.0, 0.5).expect("valid fallback"));
        lattice[k] = dist.sample(rng);
    }
    for k in 3..6 {
        // Open interval keeps the logit finite.
        let mut deg = 60.0 + 60.0 * rng.random::<f64>();
        if deg <= 60.0 {
            deg = 60.0 + f64::EPSILON * 64.0;
        }
        lattice[k] = angle_to_unconstrained(deg);
    }
    let positions = Array3::from_shape_fn((num_sites, order, 3), |_| rng.random::<f64>());
    let mut species = Array2::zeros((num_sites, vocab));
    let mut weights = Array2::zeros((num_sites, order));
    for i in 0..num_sites {
        for (k, p) in sample_uniform_simplex(vocab, rng).into_iter().enumerate() {
            species[[i, k]] = p.sqrt();
        }
        for (k, p) in sample_uniform_simplex(order, rng).into_iter().enumerate() {
            weights[[i, k]] = p.sqrt();
        }
    }
    FlowState { lattice, positions, species, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn torus_log_examples() {
        let v = torus_log([0.9; 3], [0.1; 3]);
        for x in v {
            assert!((x - 0.2).abs() < 1e-12);
        }
        assert_eq!(torus_log([0.25; 3], [0.75; 3]), [-0.5; 3]);
        assert_eq!(torus_log([0.3, 0.7, 0.0], [0.3, 0.7, 0.0]), [0.0; 3]);
    }

    #[test]
    fn torus_exp_examples() {
        let f = torus_exp([0.9; 3], [0.2; 3]);
        for x in f {
            assert!((x - 0.1).abs() < 1e-12);
        }
        assert_eq!(torus_exp([0.4, 0.1, 0.0], [0.0; 3]), [0.4, 0.1, 0.0]);
    }

    #[test]
    fn wrap_edge_cases() {
        assert_eq!(wrap_displacement(0.5), -0.5);
        assert_eq!(wrap_displacement(-0.5), -0.5);
        let tiny = wrap_displacement(-1e-18);
        assert!((-0.5..0.5).contains(&tiny));
    }

    #[test]
    fn remove_mean_examples() {
        assert_eq!(remove_mean(&[[0.3, 0.0, 0.0]]), vec![[0.0; 3]]);
        let pair = [[0.2, 0.0, 0.0], [-0.2, 0.0, 0.0]];
        assert_eq!(remove_mean(&pair), pair.to_vec());
    }

    #[test]
    fn sphere_map_examples() {
        let x = simplex_to_sphere(&[0.25, 0.75]).unwrap();
        assert_eq!(x[0], 0.5);
        assert!((x[1] - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(simplex_to_sphere(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let mu = sphere_to_simplex(&[-0.6, 0.8]);
        assert!((mu[0] - 0.36).abs() < 1e-15 && (mu[1] - 0.64).abs() < 1e-15);
        assert!(simplex_to_sphere(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn fisher_rao_examples() {
        assert_eq!(fisher_rao_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let d = fisher_rao_distance(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((d - std::f64::consts::PI).abs() < 1e-15);
        let d = fisher_rao_distance(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sphere_log_exp_identities() {
        let x = simplex_to_sphere(&[0.2, 0.3, 0.5]).unwrap();
        assert!(sphere_log(&x, &x).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(sphere_exp(&x, &[0.0; 3]), x);
        assert!(sphere_log(&[1.0, 0.0], &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn sinc_is_continuous_at_switch() {
        let below = sinc(SINC_TAYLOR * (1.0 - 1e-9));
        let above = sinc(SINC_TAYLOR * (1.0 + 1e-9));
        assert!((below - above).abs() < 1e-14);
        assert_eq!(sinc(0.0), 1.0);
    }

    #[test]
    fn interpolation_midpoint_of_orthogonal_vertices() {
        let m = simplex_interpolate(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        // Midpoint of the quarter circle is (cos 45°, sin 45°); squares are 1/2.
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
        assert_eq!(simplex_interpolate(&[0.2, 0.8], &[0.6, 0.4], 0.0).unwrap(), vec![0.2, 0.8]);
        assert_eq!(simplex_interpolate(&[0.2, 0.8], &[0.6, 0.4], 1.0).unwrap(), vec![0.6, 0.4]);
    }

    #[test]
    fn angle_transform_values() {
        assert!((angle_to_unconstrained(90.0) + 3f64.ln()).abs() < 1e-12);
        assert_eq!(angle_from_unconstrained(0.0), 120.0);
        assert!(lattice_to_unconstrained(&LatticeParams::new(1.0, 1.0, 1.0, 60.0, 90.0, 90.0))
            .is_err());
        assert!(lattice_to_unconstrained(&LatticeParams::new(1.0, 1.0, 1.0, 90.0, 90.0, 121.0))
            .is_err());
        let hex = LatticeParams::new(3.0, 3.0, 5.0, 90.0, 90.0, 120.0);
        assert_eq!(lattice_to_unconstrained(&hex).unwrap()[5], 0.0);
    }

    #[test]
    fn lattice_metric_examples() {
        let m = metric(&LatticeParams::cubic(2.0)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 4.0 } else { 0.0 };
                assert!((m[i][j] - expect).abs() < 1e-12);
            }
        }
        let hex = metric(&LatticeParams::new(1.0, 1.0, 1.0, 90.0, 90.0, 120.0)).unwrap();
        assert!((hex[0][1] + 0.5).abs() < 1e-12);
        let v = volume(&LatticeParams::new(2.0, 3.0, 4.0, 90.0, 90.0, 90.0)).unwrap();
        assert!((v - 24.0).abs() < 1e-12);
        assert!(lattice_matrix(&LatticeParams::new(1.0, 1.0, 1.0, 120.0, 120.0, 120.0)).is_err());
    }

    #[test]
    fn metric_is_rotation_invariant() {
        let l = lattice_matrix(&LatticeParams::new(3.0, 4.0, 5.0, 80.0, 100.0, 110.0)).unwrap();
        let (a, b) = (0.3f64, 1.1f64);
        let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
        let mul = |p: &Mat3, q: &Mat3| -> Mat3 {
            std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| p[i][k] * q[k][j]).sum()))
        };
        let rotated = mul(&mul(&rx, &rz), &l);
        let (g0, g1) = (gram(&l), gram(&rotated));
        for i in 0..3 {
            for j in 0..3 {
                assert!((g0[i][j] - g1[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_samples_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 10_000;
        let mut mean = [0.0; 4];
        for _ in 0..draws {
            let s = sample_priors(3, 4, 2, &mut rng, &LengthPrior::default());
            let l = unconstrained_to_lattice(&s.lattice);
            assert!(l.angles().iter().all(|a| (60.0..=120.0).contains(a)));
            assert!(s.positions.iter().all(|x| (0.0..1.0).contains(x)));
            for k in 0..4 {
                mean[k] += s.species[[0, k]].powi(2);
            }
            let wsum: f64 = s.weights.row(1).iter().map(|x| x * x).sum();
            assert!((wsum - 1.0).abs() < 1e-12);
        }
        for m in mean {
            assert!((m / draws as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn length_prior_fit() {
        let c = |a: f64| DisorderedCrystal {
            lattice: LatticeParams::new(a, 2.0 * a, 3.0, 90.0, 90.0, 90.0),
            sites: vec![],
        };
        let data = [c(2.0), c(8.0)];
        let p = LengthPrior::fit(&data);
        assert!((p.loc[0] - 4f64.ln()).abs() < 1e-12);
        assert!((p.scale[0] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(p.scale[2], 1e-3);
        assert_eq!(LengthPrior::fit(&[]), LengthPrior::default());
    }
}
