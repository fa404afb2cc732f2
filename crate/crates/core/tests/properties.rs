mod common;

use common::random_crystal;
use disflow::crystal::{pad_to_order, LatticeParams};
use disflow::data::cif::{parse_cif, to_cif, CifOptions};
use disflow::data::{parse_jsonl, split, to_jsonl, Record, Split};
use disflow::discretize::{ensemble_vote, heuristics, percentile, DiscretizeConfig};
use disflow::geometry::{
    fisher_rao_distance, lattice_to_unconstrained, remove_mean, simplex_interpolate, simplex_to_sphere,
    sphere_distance, sphere_exp, sphere_log, torus_exp, torus_log, unconstrained_to_lattice, wrap_displacement,
};
use disflow::metrics::{structure_match, wasserstein_1d, MatchTolerances};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 2..=max_dim).prop_map(|mut v| {
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    })
}

fn simplex_pair(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_dim).prop_flat_map(|d| (simplex(d).prop_filter("dim", move |v| v.len() == d), simplex(d).prop_filter("dim", move |v| v.len() == d)))
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(0.0..1.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sphere_distance_is_half_fisher_rao((mu, nu) in simplex_pair(12)) {
        let (x, y) = (simplex_to_sphere(&mu).unwrap(), simplex_to_sphere(&nu).unwrap());
        prop_assert!((sphere_distance(&x, &y) - 0.5 * fisher_rao_distance(&mu, &nu)).abs() < 1e-10);
    }

    #[test]
    fn sphere_log_then_exp_returns((mu, nu) in simplex_pair(12)) {
        let (x, y) = (simplex_to_sphere(&mu).unwrap(), simplex_to_sphere(&nu).unwrap());
        if let Ok(v) = sphere_log(&x, &y) {
            let back = sphere_exp(&x, &v);
            for (a, b) in back.iter().zip(&y) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // log lies in the tangent space
            prop_assert!(v.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn geodesic_path_stays_on_simplex((mu, nu) in simplex_pair(12), t in 0.0..1.0f64) {
        let p = simplex_interpolate(&mu, &nu, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= -1e-12));
    }

    #[test]
    fn torus_round_trip(f0 in point(), f1 in point()) {
        let back = torus_exp(f0, torus_log(f0, f1));
        for k in 0..3 {
            prop_assert!(wrap_displacement(back[k] - f1[k]).abs() < 1e-12);
        }
        prop_assert!(torus_log(f0, f1).iter().all(|d| (-0.5..0.5).contains(d)));
    }

    #[test]
    fn torus_log_is_translation_equivariant(f0 in point(), f1 in point(), c in prop::array::uniform3(-3.0..3.0f64)) {
        let a = torus_log(f0, f1);
        let b = torus_log(torus_exp(f0, c), torus_exp(f1, c));
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_displacements_sum_to_zero(d in prop::collection::vec(prop::array::uniform3(-0.5..0.5f64), 1..30)) {
        let c = remove_mean(&d);
        for k in 0..3 {
            prop_assert!(c.iter().map(|x| x[k]).sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn lattice_transform_round_trip(
        lengths in prop::array::uniform3(2.0..20.0f64),
        angles in prop::array::uniform3(75.0..105.0f64),
    ) {
        let l = LatticeParams::from_arrays(lengths, angles);
        let back = unconstrained_to_lattice(&lattice_to_unconstrained(&l).unwrap());
        for (a, b) in back.lengths().iter().chain(&back.angles()).zip(l.lengths().iter().chain(&l.angles())) {
            prop_assert!((a - b).abs() < 1e-9 * b.abs());
        }
    }

    #[test]
    fn padding_keeps_crystals_valid(seed in any::<u64>(), n in 1usize..6, extra in 0usize..3) {
        let c = random_crystal(&mut ChaCha8Rng::seed_from_u64(seed), n, 7, 2);
        let p = pad_to_order(&c, 2 + extra).unwrap();
        prop_assert!(p.validate().is_empty());
        prop_assert_eq!(p.order(), 2 + extra);
        for (a, b) in c.sites.iter().zip(&p.sites) {
            prop_assert_eq!(&a.species, &b.species);
            prop_assert_eq!(&a.positions[..], &b.positions[..2]);
        }
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact(seed in any::<u64>(), n in 1usize..6, order in 2usize..4) {
        let c = random_crystal(&mut ChaCha8Rng::seed_from_u64(seed), n, disflow::elements::VOCAB_SIZE, order);
        let text = to_jsonl(&[Record::new(c.clone())]).unwrap();
        let back = parse_jsonl(&text).unwrap();
        prop_assert_eq!(&back[0].crystal, &c);
        prop_assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn cif_round_trip(seed in any::<u64>(), n in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = random_crystal(&mut rng, n, disflow::elements::VOCAB_SIZE, 2);
        // one species per site and well separated ordered positions
        for (i, site) in c.sites.iter_mut().enumerate() {
            site.species.iter_mut().for_each(|x| *x = 0.0);
            site.species[i % 20] = 1.0;
            site.positions = vec![[i as f64 / n as f64, 0.5 * (i % 2) as f64, 0.25], [0.0; 3]];
            site.pos_weights = vec![1.0, 0.0];
        }
        let back = parse_cif(&to_cif(&c, "rt"), &CifOptions::default()).unwrap();
        prop_assert_eq!(back.num_sites(), c.num_sites());
        for (a, b) in back.lattice.lengths().iter().zip(c.lattice.lengths()) {
            prop_assert!((a - b).abs() < 1e-4);
        }
        for (a, b) in back.sites.iter().zip(&c.sites) {
            prop_assert_eq!(a.dominant_species(), b.dominant_species());
            for k in 0..3 {
                prop_assert!(wrap_displacement(a.positions[0][k] - b.positions[0][k]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn vote_selection_is_a_distribution(s in simplex(30)) {
        let cfg = DiscretizeConfig::default();
        let a = ensemble_vote(&s, &cfg);
        prop_assert!(!a.indices.is_empty());
        prop_assert!((a.occupancy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(a.clone(), ensemble_vote(&s, &cfg));
    }

    #[test]
    fn raising_thresholds_never_adds(s in simplex(30), tau in 0.0..0.9f64, alpha in 0.0..0.9f64, bump in 0.0..0.1f64) {
        let lo = DiscretizeConfig { tau_abs: tau, alpha_adapt: alpha, ..DiscretizeConfig::default() };
        let hi = DiscretizeConfig { tau_abs: tau + bump, alpha_adapt: alpha + bump, ..DiscretizeConfig::default() };
        let (a, b) = (heuristics(&s, &lo), heuristics(&s, &hi));
        prop_assert!(b[1].iter().all(|j| a[1].contains(j)));
        prop_assert!(b[3].iter().all(|j| a[3].contains(j)));
    }

    #[test]
    fn percentile_is_bounded(s in simplex(30), q in 0.0..=100.0f64) {
        let p = percentile(&s, q);
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p >= lo && p <= hi);
    }

    #[test]
    fn wasserstein_is_a_metric(
        xs in prop::collection::vec(-10.0..10.0f64, 1..20),
        ys in prop::collection::vec(-10.0..10.0f64, 1..20),
    ) {
        let d = wasserstein_1d(&xs, &ys).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - wasserstein_1d(&ys, &xs).unwrap()).abs() < 1e-12);
        prop_assert!(wasserstein_1d(&xs, &xs).unwrap().abs() < 1e-12);
        let shift: Vec<f64> = xs.iter().map(|x| x + 1.5).collect();
        prop_assert!((wasserstein_1d(&xs, &shift).unwrap() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn crystals_match_their_own_translates(seed in any::<u64>(), n in 1usize..6, c in prop::array::uniform3(0.0..1.0f64)) {
        let a = random_crystal(&mut ChaCha8Rng::seed_from_u64(seed), n, 6, 2);
        let mut b = a.clone();
        for site in &mut b.sites {
            for (p, &w) in site.positions.iter_mut().zip(&site.pos_weights) {
                if w > 0.0 {
                    *p = torus_exp(*p, c);
                }
            }
        }
        let tol = MatchTolerances::default();
        let ab = structure_match(&a, &b, &tol);
        let ba = structure_match(&b, &a, &tol);
        prop_assert!(ab.is_some_and(|r| r < 1e-9));
        prop_assert!(ba.is_some_and(|r| r < 1e-9));
    }

    #[test]
    fn splits_partition(n in 1usize..200, seed in any::<u64>()) {
        let records: Vec<Record> = (0..n)
            .map(|i| Record::new(disflow::crystal::from_ordered(&[26], &[[i as f64 / (n as f64 + 1.0), 0.0, 0.0]], LatticeParams::cubic(3.0), 2).unwrap()))
            .collect();
        let d = split(records, seed, [0.8, 0.1, 0.1]).unwrap();
        prop_assert_eq!(d.count(Split::Train) + d.count(Split::Val) + d.count(Split::Test), n);
        prop_assert_eq!(d.records.len(), n);
    }
}
