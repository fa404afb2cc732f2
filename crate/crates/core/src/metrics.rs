//! Evaluation metrics for generated and predicted crystals, defined on
//! expected (occupancy-weighted) quantities.

use pathfinding::matrix::Matrix;
use pathfinding::prelude::kuhn_munkres_min;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crystal::{sample_realization, DisorderedCrystal};
use crate::elements::{atomic_mass, oxidation_states, symbol};
use crate::error::{Error, Result};
use crate::geometry::{det3, lattice_matrix, mat_vec, wrap_displacement, Mat3};

/// Grams per atomic mass unit times 1e24 (Å³ to cm³).
const AMU_G_PER_CM3: f64 = 1.660_539_066_60;
/// Maximum per-element difference of normalized expected compositions.
pub const COMPOSITION_TOL: f64 = 0.05;
/// Maximum per-entry difference of species vectors for two sites to pair up.
pub const SITE_SPECIES_TOL: f64 = 0.1;
const CHARGE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchTolerances {
    pub ltol: f64,
    pub stol: f64,
    pub angle_tol: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        Self { ltol: 0.3, stol: 0.5, angle_tol: 10.0 }
    }
}

/// `Σ_i (Σ_ℓ w_iℓ) s_i`, one entry per element.
pub fn expected_composition(c: &DisorderedCrystal) -> Vec<f64> {
    let mut out = vec![0.0; c.vocab_size()];
    for site in &c.sites {
        let occ: f64 = site.pos_weights.iter().sum();
        for (o, s) in out.iter_mut().zip(&site.species) {
            *o += occ * s;
        }
    }
    out
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.into_iter().map(|x| x / s).collect()
    } else {
        v
    }
}

fn sorted3(mut v: [f64; 3]) -> [f64; 3] {
    v.sort_by(f64::total_cmp);
    v
}

fn mean_matrix(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (a[i][j] + b[i][j])))
}

fn cart_norm2(m: &Mat3, d: [f64; 3]) -> f64 {
    let v = mat_vec(m, d);
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

fn wrapped(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| wrap_displacement(a[k] - b[k]))
}

/// Normalized RMSE when `pred` matches `truth`, otherwise `None`.
pub fn structure_match(pred: &DisorderedCrystal, truth: &DisorderedCrystal, tol: &MatchTolerances) -> Option<f64> {
    let n = truth.num_sites();
    if pred.num_sites() != n || n == 0 || pred.vocab_size() != truth.vocab_size() {
        return None;
    }
    let cp = normalized(expected_composition(pred));
    let ct = normalized(expected_composition(truth));
    if cp.iter().zip(&ct).any(|(a, b)| (a - b).abs() > COMPOSITION_TOL) {
        return None;
    }
    let (lp, lt) = (sorted3(pred.lattice.lengths()), sorted3(truth.lattice.lengths()));
    if lp.iter().zip(&lt).any(|(p, t)| (p - t).abs() > tol.ltol * t) {
        return None;
    }
    let (ap, at) = (sorted3(pred.lattice.angles()), sorted3(truth.lattice.angles()));
    if ap.iter().zip(&at).any(|(p, t)| (p - t).abs() > tol.angle_tol) {
        return None;
    }
    let mp = lattice_matrix(&pred.lattice).ok()?;
    let mt = lattice_matrix(&truth.lattice).ok()?;
    let m = mean_matrix(&mp, &mt);
    let scale = (det3(&mt) / n as f64).cbrt();
    let cutoff2 = (tol.stol * scale).powi(2);

    let fp: Vec<[f64; 3]> = pred.sites.iter().map(|s| s.dominant_position()).collect();
    let ft: Vec<[f64; 3]> = truth.sites.iter().map(|s| s.dominant_position()).collect();
    let compatible: Vec<Vec<bool>> = pred
        .sites
        .iter()
        .map(|a| {
            truth
                .sites
                .iter()
                .map(|b| a.species.iter().zip(&b.species).all(|(x, y)| (x - y).abs() <= SITE_SPECIES_TOL))
                .collect()
        })
        .collect();

    let mut best: Option<f64> = None;
    for anchor in 0..n {
        if !compatible[0][anchor] {
            continue;
        }
        let shift = wrapped(ft[anchor], fp[0]);
        let cost = Matrix::from_fn(n, n, |(i, j)| {
            if !compatible[i][j] {
                return INCOMPATIBLE;
            }
            let d = wrapped(fp[i], ft[j]);
            let d = std::array::from_fn(|k| wrap_displacement(d[k] + shift[k]));
            (cart_norm2(&m, d) * COST_SCALE).round() as i64
        });
        let (_, assign) = kuhn_munkres_min(&cost);
        if assign.iter().enumerate().any(|(i, &j)| !compatible[i][j]) {
            continue;
        }
        // Residual displacements after removing their mean translation.
        let disp: Vec<[f64; 3]> = assign
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let d = wrapped(fp[i], ft[j]);
                std::array::from_fn(|k| wrap_displacement(d[k] + shift[k]))
            })
            .collect();
        let mean: [f64; 3] = std::array::from_fn(|k| disp.iter().map(|d| d[k]).sum::<f64>() / n as f64);
        let d2: Vec<f64> = disp.iter().map(|d| cart_norm2(&m, std::array::from_fn(|k| d[k] - mean[k]))).collect();
        if d2.iter().any(|&x| x > cutoff2) {
            continue;
        }
        let rmse = (d2.iter().sum::<f64>() / n as f64).sqrt() / scale;
        if best.is_none_or(|b| rmse < b) {
            best = Some(rmse);
        }
    }
    best
}

const COST_SCALE: f64 = 1e9;
const INCOMPATIBLE: i64 = 1_000_000_000_000_000;

/// Fraction matched and mean RMSE over the matched pairs.
pub fn match_rate(
    preds: &[DisorderedCrystal],
    truths: &[DisorderedCrystal],
    tol: &MatchTolerances,
) -> Result<(f64, Option<f64>)> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} references", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::Empty("match set".into()));
    }
    let rmses: Vec<f64> = preds.iter().zip(truths).filter_map(|(p, t)| structure_match(p, t, tol)).collect();
    let rate = rmses.len() as f64 / preds.len() as f64;
    let mean = (!rmses.is_empty()).then(|| rmses.iter().sum::<f64>() / rmses.len() as f64);
    Ok((rate, mean))
}

/// Occupied positions as `(site, cartesian)` pairs.
fn occupied(c: &DisorderedCrystal) -> Vec<(usize, [f64; 3])> {
    c.sites
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.positions.iter().zip(&s.pos_weights).filter(|(_, &w)| w > 0.0).map(move |(p, _)| (i, *p))
        })
        .collect()
}

/// Smallest periodic distance between occupied positions, in Å. Alternative
/// positions of one site are not compared within the same cell.
pub fn min_distance(c: &DisorderedCrystal) -> Result<f64> {
    let m = lattice_matrix(&c.lattice)?;
    let pts = occupied(c);
    let mut best = f64::INFINITY;
    for (a, &(si, pi)) in pts.iter().enumerate() {
        for (b, &(sj, pj)) in pts.iter().enumerate().skip(a) {
            let base = wrapped(pj, pi);
            for image in images(1) {
                let home = image == [0, 0, 0];
                if home && (a == b || si == sj) {
                    continue;
                }
                let d = std::array::from_fn(|k| base[k] + image[k] as f64);
                best = best.min(cart_norm2(&m, d));
            }
        }
    }
    Ok(best.sqrt())
}

fn images(r: i32) -> impl Iterator<Item = [i32; 3]> {
    (-r..=r).flat_map(move |x| (-r..=r).flat_map(move |y| (-r..=r).map(move |z| [x, y, z])))
}

/// No two occupied positions closer than `d_min` Å.
pub fn structural_validity(c: &DisorderedCrystal, d_min: f64) -> bool {
    min_distance(c).is_ok_and(|d| d >= d_min)
}

/// Charge neutrality of the expected composition under some choice of one
/// oxidation state per element. `Err` carries the reason for failure.
pub fn composition_check(c: &DisorderedCrystal) -> std::result::Result<(), String> {
    let amounts: Vec<(usize, f64)> =
        expected_composition(c).into_iter().enumerate().filter(|&(_, x)| x > 1e-12).collect();
    if amounts.is_empty() {
        return Err("empty composition".into());
    }
    let mut states = Vec::with_capacity(amounts.len());
    for &(k, _) in &amounts {
        let s = oxidation_states(k);
        if s.is_empty() {
            return Err(format!("no oxidation states tabulated for {}", symbol(k)));
        }
        states.push(s);
    }
    // Reachable charge range of the elements after position `i`.
    let mut lo = vec![0.0; amounts.len() + 1];
    let mut hi = vec![0.0; amounts.len() + 1];
    for i in (0..amounts.len()).rev() {
        let a = amounts[i].1;
        let min = *states[i].iter().min().expect("non-empty") as f64;
        let max = *states[i].iter().max().expect("non-empty") as f64;
        lo[i] = lo[i + 1] + a * min;
        hi[i] = hi[i + 1] + a * max;
    }
    fn search(i: usize, q: f64, amounts: &[(usize, f64)], states: &[&[i32]], lo: &[f64], hi: &[f64]) -> bool {
        if i == amounts.len() {
            return q.abs() <= CHARGE_TOL;
        }
        if q + lo[i] > CHARGE_TOL || q + hi[i] < -CHARGE_TOL {
            return false;
        }
        states[i].iter().any(|&s| search(i + 1, q + amounts[i].1 * s as f64, amounts, states, lo, hi))
    }
    if search(0, 0.0, &amounts, &states, &lo, &hi) {
        Ok(())
    } else {
        Err("no charge-neutral assignment of oxidation states".into())
    }
}

pub fn compositional_validity(c: &DisorderedCrystal) -> bool {
    composition_check(c).is_ok()
}

/// Expected mass over cell volume in g/cm³.
pub fn density(c: &DisorderedCrystal) -> Result<f64> {
    let m = lattice_matrix(&c.lattice)?;
    let mass: f64 = expected_composition(c).iter().enumerate().map(|(k, x)| x * atomic_mass(k)).sum();
    Ok(mass * AMU_G_PER_CM3 / det3(&m))
}

/// Number of distinct elements with nonzero occupancy anywhere.
pub fn n_el(c: &DisorderedCrystal) -> usize {
    (0..c.vocab_size()).filter(|&k| c.sites.iter().any(|s| s.species[k] > 0.0)).count()
}

/// Order-1 Wasserstein distance between two empirical distributions.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Empty("wasserstein sample".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        while ia < a.len() && a[ia] <= w[0] {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= w[0] {
            ib += 1;
        }
        total += (ia as f64 / na - ib as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

pub const FP_CUTOFF: f64 = 6.0;
pub const FP_BINS: usize = 32;
pub const FP_SIGMA: f64 = 0.2;

/// Averaged descriptor: smeared neighbor-distance histogram per atom and
/// element fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub distances: Vec<f64>,
    pub composition: Vec<f64>,
}

impl Fingerprint {
    pub fn struct_distance(&self, other: &Fingerprint) -> f64 {
        euclid(&self.distances, &other.distances)
    }

    pub fn comp_distance(&self, other: &Fingerprint) -> f64 {
        euclid(&self.composition, &other.composition)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Image range per axis that covers the fingerprint cutoff.
fn image_ranges(m: &Mat3) -> [i32; 3] {
    let col = |j: usize| [m[0][j], m[1][j], m[2][j]];
    let cross = |u: [f64; 3], v: [f64; 3]| [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let vol = det3(m).abs();
    std::array::from_fn(|k| {
        let c = cross(col((k + 1) % 3), col((k + 2) % 3));
        let height = vol / (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        (FP_CUTOFF / height).ceil() as i32
    })
}

fn ordered_descriptor(c: &DisorderedCrystal) -> Result<Fingerprint> {
    let m = lattice_matrix(&c.lattice)?;
    let pts: Vec<[f64; 3]> = occupied(c).into_iter().map(|(_, p)| p).collect();
    let r = image_ranges(&m);
    let width = FP_CUTOFF / FP_BINS as f64;
    let centers: Vec<f64> = (0..FP_BINS).map(|b| (b as f64 + 0.5) * width).collect();
    let mut hist = vec![0.0; FP_BINS];
    let norm = 1.0 / (FP_SIGMA * (2.0 * std::f64::consts::PI).sqrt());
    for (a, &pa) in pts.iter().enumerate() {
        for (b, &pb) in pts.iter().enumerate() {
            let base = wrapped(pb, pa);
            for x in -r[0]..=r[0] {
                for y in -r[1]..=r[1] {
                    for z in -r[2]..=r[2] {
                        if a == b && x == 0 && y == 0 && z == 0 {
                            continue;
                        }
                        let d = cart_norm2(&m, [base[0] + x as f64, base[1] + y as f64, base[2] + z as f64]).sqrt();
                        if d >= FP_CUTOFF {
                            continue;
                        }
                        for (h, &cb) in hist.iter_mut().zip(&centers) {
                            let u = (d - cb) / FP_SIGMA;
                            *h += width * norm * (-0.5 * u * u).exp();
                        }
                    }
                }
            }
        }
    }
    let n = pts.len().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(Fingerprint { distances: hist, composition: normalized(expected_composition(c)) })
}

/// Mean descriptor over `n_realizations` ordered draws.
pub fn fingerprint<R: Rng + ?Sized>(c: &DisorderedCrystal, rng: &mut R, n_realizations: usize) -> Result<Fingerprint> {
    let n = n_realizations.max(1);
    let mut acc: Option<Fingerprint> = None;
    for _ in 0..n {
        let fp = ordered_descriptor(&sample_realization(c, rng))?;
        acc = Some(match acc {
            None => fp,
            Some(mut a) => {
                a.distances.iter_mut().zip(&fp.distances).for_each(|(x, y)| *x += y);
                a.composition.iter_mut().zip(&fp.composition).for_each(|(x, y)| *x += y);
                a
            }
        });
    }
    let mut out = acc.expect("at least one realization");
    out.distances.iter_mut().for_each(|x| *x /= n as f64);
    out.composition.iter_mut().for_each(|x| *x /= n as f64);
    Ok(out)
}

fn within(a: &Fingerprint, b: &Fingerprint, d_struct: f64, d_comp: f64) -> bool {
    a.struct_distance(b) <= d_struct && a.comp_distance(b) <= d_comp
}

/// `(recall, precision)` under threshold balls.
pub fn coverage(
    generated: &[Fingerprint],
    reference: &[Fingerprint],
    d_struct: f64,
    d_comp: f64,
) -> Result<(f64, f64)> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("coverage set".into()));
    }
    let frac = |from: &[Fingerprint], to: &[Fingerprint]| {
        from.iter().filter(|a| to.iter().any(|b| within(a, b, d_struct, d_comp))).count() as f64 / from.len() as f64
    };
    Ok((frac(reference, generated), frac(generated, reference)))
}

/// 95th percentile of nearest-neighbor distances within the reference
/// set, separately for the two blocks.
pub fn calibrate_coverage_thresholds(reference: &[Fingerprint]) -> Result<(f64, f64)> {
    if reference.len() < 2 {
        return Err(Error::Empty("need two reference fingerprints to calibrate".into()));
    }
    let nn = |f: &dyn Fn(&Fingerprint, &Fingerprint) -> f64| -> Vec<f64> {
        reference
            .iter()
            .enumerate()
            .map(|(i, a)| {
                reference
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| f(a, b))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let s = nn(&|a, b| a.struct_distance(b));
    let c = nn(&|a, b| a.comp_distance(b));
    Ok((crate::discretize::percentile(&s, 95.0), crate::discretize::percentile(&c, 95.0)))
}

/// Flat evaluation summary; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub match_rate: Option<f64>,
    pub rmse: Option<f64>,
    pub structural_validity: Option<f64>,
    pub compositional_validity: Option<f64>,
    pub coverage_recall: Option<f64>,
    pub coverage_precision: Option<f64>,
    pub wdist_density: Option<f64>,
    pub wdist_n_el: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table: MR, RMSE, validity, coverage, Wdist.
    pub fn table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let num = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let header = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}",
            "MR(%)", "RMSE", "Struc(%)", "Comp(%)", "COV-R(%)", "COV-P(%)", "Wdist(rho)", "Wdist(Nel)"
        );
        let row = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}",
            pct(self.match_rate),
            num(self.rmse),
            pct(self.structural_validity),
            pct(self.compositional_validity),
            pct(self.coverage_recall),
            pct(self.coverage_precision),
            num(self.wdist_density),
            num(self.wdist_n_el)
        );
        format!("{header}\n{row}")
    }
}

/// Options of the generation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    pub d_min: f64,
    pub n_realizations: usize,
    /// Coverage thresholds; calibrated on the reference set when absent.
    pub thresholds: Option<(f64, f64)>,
}

impl Default for GenerationEval {
    fn default() -> Self {
        Self { d_min: 0.5, n_realizations: 10, thresholds: None }
    }
}

/// Structure-prediction metrics.
pub fn evaluate_csp(preds: &[DisorderedCrystal], truths: &[DisorderedCrystal], tol: &MatchTolerances) -> Result<EvalReport> {
    let (rate, rmse) = match_rate(preds, truths, tol)?;
    Ok(EvalReport { match_rate: Some(rate), rmse, ..Default::default() })
}

/// Validity, coverage and property distances of a generated set.
pub fn evaluate_generation<R: Rng + ?Sized>(
    generated: &[DisorderedCrystal],
    reference: &[DisorderedCrystal],
    opts: &GenerationEval,
    rng: &mut R,
) -> Result<EvalReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let n = generated.len() as f64;
    let structural = generated.iter().filter(|c| structural_validity(c, opts.d_min)).count() as f64 / n;
    let compositional = generated.iter().filter(|c| compositional_validity(c)).count() as f64 / n;
    let dens = |set: &[DisorderedCrystal]| set.iter().filter_map(|c| density(c).ok()).collect::<Vec<_>>();
    let nel = |set: &[DisorderedCrystal]| set.iter().map(|c| n_el(c) as f64).collect::<Vec<_>>();
    let fg = generated.iter().map(|c| fingerprint(c, rng, opts.n_realizations)).collect::<Result<Vec<_>>>()?;
    let fr = reference.iter().map(|c| fingerprint(c, rng, opts.n_realizations)).collect::<Result<Vec<_>>>()?;
    let (ds, dc) = match opts.thresholds {
        Some(t) => t,
        None => calibrate_coverage_thresholds(&fr)?,
    };
    let (recall, precision) = coverage(&fg, &fr, ds, dc)?;
    Ok(EvalReport {
        structural_validity: Some(structural),
        compositional_validity: Some(compositional),
        coverage_recall: Some(recall),
        coverage_precision: Some(precision),
        wdist_density: Some(wasserstein_1d(&dens(generated), &dens(reference))?),
        wdist_n_el: Some(wasserstein_1d(&nel(generated), &nel(reference))?),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{from_ordered, LatticeParams, Site};
    use crate::elements::{index_of, VOCAB_SIZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nacl() -> DisorderedCrystal {
        from_ordered(&[11, 17], &[[0.0; 3], [0.5; 3]], LatticeParams::cubic(5.64), 2).unwrap()
    }

    fn sd(a: u32, b: u32, coord: [f64; 3]) -> Site {
        let mut s = vec![0.0; VOCAB_SIZE];
        s[index_of(a).unwrap()] = 0.5;
        s[index_of(b).unwrap()] = 0.5;
        Site::new(s, vec![coord, [0.0; 3]], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn self_match_and_translation() {
        let c = nacl();
        let tol = MatchTolerances::default();
        assert_eq!(structure_match(&c, &c, &tol), Some(0.0));
        let mut shifted = c.clone();
        for s in &mut shifted.sites {
            let p = s.positions[0];
            s.positions[0] = [(p[0] + 0.25) % 1.0, (p[1] + 0.1) % 1.0, (p[2] + 0.3) % 1.0];
        }
        assert!(structure_match(&shifted, &c, &tol).unwrap() < 1e-12);
        let mut swapped = c.clone();
        swapped.sites[0] = Site::ordered(index_of(19).unwrap(), VOCAB_SIZE, [0.0; 3], 2);
        assert!(structure_match(&swapped, &c, &tol).is_none());
    }

    #[test]
    fn match_rate_examples() {
        let c = nacl();
        let tol = MatchTolerances::default();
        assert_eq!(match_rate(&[c.clone(), c.clone()], &[c.clone(), c.clone()], &tol).unwrap(), (1.0, Some(0.0)));
        let other = from_ordered(&[26], &[[0.0; 3]], LatticeParams::cubic(3.0), 2).unwrap();
        assert_eq!(match_rate(&[other], &[c.clone()], &tol).unwrap(), (0.0, None));
        assert!(match_rate(&[c.clone()], &[], &tol).is_err());
    }

    #[test]
    fn validity_examples() {
        let close = from_ordered(&[26, 26], &[[0.0; 3], [0.02, 0.0, 0.0]], LatticeParams::cubic(10.0), 2).unwrap();
        assert!(!structural_validity(&close, 0.5));
        let single = from_ordered(&[26], &[[0.0; 3]], LatticeParams::cubic(3.0), 2).unwrap();
        assert!((min_distance(&single).unwrap() - 3.0).abs() < 1e-12);
        assert!(structural_validity(&single, 0.5));
        let mut o = vec![0.0; VOCAB_SIZE];
        o[index_of(26).unwrap()] = 1.0;
        let pd = Site::new(o, vec![[0.5; 3], [0.53, 0.5, 0.5]], vec![0.5, 0.5]).unwrap();
        let c = DisorderedCrystal::new(LatticeParams::cubic(10.0), vec![pd]).unwrap();
        assert!(structural_validity(&c, 0.5));
    }

    #[test]
    fn composition_examples() {
        assert!(compositional_validity(&nacl()));
        let mixed = DisorderedCrystal::new(
            LatticeParams::cubic(5.6),
            vec![sd(11, 19, [0.0; 3]), Site::ordered(index_of(17).unwrap(), VOCAB_SIZE, [0.5; 3], 2)],
        )
        .unwrap();
        assert!(compositional_validity(&mixed));
        let na = from_ordered(&[11], &[[0.0; 3]], LatticeParams::cubic(4.0), 2).unwrap();
        assert!(!compositional_validity(&na));
    }

    #[test]
    fn density_and_element_count() {
        let fe = from_ordered(&[26], &[[0.0; 3]], LatticeParams::cubic(3.0), 2).unwrap();
        assert!((density(&fe).unwrap() - 3.4345).abs() < 1e-3);
        let c = DisorderedCrystal::new(
            LatticeParams::cubic(4.0),
            vec![sd(26, 28, [0.0; 3]), Site::ordered(index_of(8).unwrap(), VOCAB_SIZE, [0.5; 3], 2)],
        )
        .unwrap();
        assert_eq!(n_el(&c), 3);
        let mut half = fe.clone();
        half.sites[0].pos_weights = vec![0.5, 0.0];
        assert!((density(&half).unwrap() - 0.5 * density(&fe).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn fingerprint_examples() {
        let c = nacl();
        let a = fingerprint(&c, &mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();
        let b = fingerprint(&c, &mut ChaCha8Rng::seed_from_u64(2), 10).unwrap();
        for (x, y) in a.distances.iter().zip(&b.distances) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = from_ordered(&[26], &[[0.0; 3]], LatticeParams::cubic(20.0), 2).unwrap();
        let f = fingerprint(&big, &mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();
        assert!(f.distances.iter().all(|&x| x < 1e-12));
        let perm = DisorderedCrystal { lattice: c.lattice, sites: vec![c.sites[1].clone(), c.sites[0].clone()] };
        let p = fingerprint(&perm, &mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();
        for (x, y) in a.distances.iter().zip(&p.distances) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fe = from_ordered(&[26], &[[0.0; 3]], LatticeParams::cubic(3.0), 2).unwrap();
        let refs = vec![fingerprint(&nacl(), &mut rng, 1).unwrap(), fingerprint(&fe, &mut rng, 1).unwrap()];
        assert_eq!(coverage(&refs, &refs, 1e-9, 1e-9).unwrap(), (1.0, 1.0));
        let far = vec![fingerprint(
            &from_ordered(&[6], &[[0.0; 3]], LatticeParams::cubic(15.0), 2).unwrap(),
            &mut rng,
            1,
        )
        .unwrap()];
        assert_eq!(coverage(&far, &refs, 1e-3, 1e-3).unwrap(), (0.0, 0.0));
        let doubled: Vec<Fingerprint> = refs.iter().chain(&refs).cloned().collect();
        assert_eq!(coverage(&doubled, &refs, 1e-9, 1e-9).unwrap(), (1.0, 1.0));
    }
}
