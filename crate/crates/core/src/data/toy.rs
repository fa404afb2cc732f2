//! Synthetic datasets built by jittering a template crystal.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::crystal::{wrap_point, DisorderedCrystal, LatticeParams, Site};
use crate::elements::{index_of, VOCAB_SIZE};

/// Relative half-width of the uniform lattice-length jitter.
pub const LENGTH_JITTER: f64 = 0.02;

fn one_hot(z: u32) -> Vec<f64> {
    let mut s = vec![0.0; VOCAB_SIZE];
    s[index_of(z).expect("known element")] = 1.0;
    s
}

fn ordered(z: u32, p: [f64; 3]) -> Site {
    Site::new(one_hot(z), vec![p, [0.0; 3]], vec![1.0, 0.0]).expect("valid site")
}

/// Four sites in a 5 Å cube: a 50/50 Na/K site, Cl, Mg and O. Charge
/// neutral with every element distinct. Coordinates avoid half-cell
/// offsets, whose antipodal ambiguity on the torus makes the layout hard to
/// learn at toy scale.
pub fn sd_template() -> DisorderedCrystal {
    let mut s = vec![0.0; VOCAB_SIZE];
    s[index_of(11).expect("Na")] = 0.5;
    s[index_of(19).expect("K")] = 0.5;
    let sd = Site::new(s, vec![[0.0; 3], [0.0; 3]], vec![1.0, 0.0]).expect("valid site");
    DisorderedCrystal::new(
        LatticeParams::cubic(5.0),
        vec![sd, ordered(17, [0.55, 0.45, 0.5]), ordered(12, [0.35, 0.8, 0.15]), ordered(8, [0.8, 0.3, 0.2])],
    )
    .expect("valid template")
}

/// [`sd_template`] with the O site split over two positions 0.3 Å apart.
pub fn sd_pd_template() -> DisorderedCrystal {
    let mut c = sd_template();
    c.sites[3] = Site::new(one_hot(8), vec![[0.8, 0.27, 0.2], [0.8, 0.33, 0.2]], vec![0.6, 0.4]).expect("valid site");
    c
}

/// `n` copies of `template` with wrapped Gaussian coordinate noise of
/// standard deviation `noise` (fractional) and, when `noise > 0`, a uniform
/// ±2% jitter of each lattice length. Occupancies are kept.
pub fn make_toy_dataset<R: Rng + ?Sized>(
    template: &DisorderedCrystal,
    n: usize,
    noise: f64,
    rng: &mut R,
) -> Vec<DisorderedCrystal> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
    (0..n)
        .map(|_| {
            let mut c = template.clone();
            if noise > 0.0 {
                let l = c.lattice.lengths().map(|x| x * (1.0 + rng.random_range(-LENGTH_JITTER..=LENGTH_JITTER)));
                c.lattice = LatticeParams::from_arrays(l, c.lattice.angles());
                for site in &mut c.sites {
                    for (p, &w) in site.positions.iter_mut().zip(&site.pos_weights) {
                        if w > 0.0 {
                            *p = wrap_point(std::array::from_fn(|k| p[k] + normal.sample(rng)));
                        }
                    }
                }
            }
            c
        })
        .collect()
}
