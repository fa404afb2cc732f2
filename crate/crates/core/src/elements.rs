//! Periodic-table lookups for the fixed 100-element vocabulary.
//!
//! Vocabulary index `k` corresponds to atomic number `k + 1`.

use std::collections::HashMap;
use std::sync::OnceLock;

/// Number of element types in the vocabulary (H through Fm).
pub const VOCAB_SIZE: usize = 100;

const SYMBOLS: [&str; VOCAB_SIZE] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm",
];

// Standard atomic weights (u); mass number of the longest-lived isotope for
// elements without a stable one.
const MASSES: [f64; VOCAB_SIZE] = [
    1.008, 4.0026, 6.94, 9.0122, 10.81, 12.011, 14.007, 15.999, 18.998, 20.180, 22.990, 24.305,
    26.982, 28.085, 30.974, 32.06, 35.45, 39.948, 39.098, 40.078, 44.956, 47.867, 50.942, 51.996,
    54.938, 55.845, 58.933, 58.693, 63.546, 65.38, 69.723, 72.630, 74.922, 78.971, 79.904, 83.798,
    85.468, 87.62, 88.906, 91.224, 92.906, 95.95, 98.0, 101.07, 102.91, 106.42, 107.87, 112.41,
    114.82, 118.71, 121.76, 127.60, 126.90, 131.29, 132.91, 137.33, 138.91, 140.12, 140.91, 144.24,
    145.0, 150.36, 151.96, 157.25, 158.93, 162.50, 164.93, 167.26, 168.93, 173.05, 174.97, 178.49,
    180.95, 183.84, 186.21, 190.23, 192.22, 195.08, 196.97, 200.59, 204.38, 207.2, 208.98, 209.0,
    210.0, 222.0, 223.0, 226.0, 227.0, 232.04, 231.04, 238.03, 237.0, 244.0, 243.0, 247.0, 247.0,
    251.0, 252.0, 257.0,
];

const OXIDATION_TABLE: &str = include_str!("../data/oxidation_states.txt");

/// Vocabulary index for an atomic number, if it is in range.
pub fn index_of(atomic_number: u32) -> Option<usize> {
    let z = atomic_number as usize;
    (1..=VOCAB_SIZE).contains(&z).then(|| z - 1)
}

/// Atomic number for a vocabulary index.
pub fn atomic_number(index: usize) -> u32 {
    index as u32 + 1
}

pub fn symbol(index: usize) -> &'static str {
    SYMBOLS[index]
}

pub fn atomic_mass(index: usize) -> f64 {
    MASSES[index]
}

/// Case-insensitive element symbol lookup, returning the vocabulary index.
pub fn index_of_symbol(sym: &str) -> Option<usize> {
    static MAP: OnceLock<HashMap<String, usize>> = OnceLock::new();
    let map = MAP.get_or_init(|| {
        SYMBOLS
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_ascii_lowercase(), i))
            .collect()
    });
    map.get(&sym.to_ascii_lowercase()).copied()
}

/// Common oxidation states of an element, from the bundled table.
pub fn oxidation_states(index: usize) -> &'static [i32] {
    static TABLE: OnceLock<Vec<Vec<i32>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut out = vec![Vec::new(); VOCAB_SIZE];
        for line in OXIDATION_TABLE.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let z: usize = fields.next().and_then(|f| f.parse().ok()).unwrap_or(0);
            let _symbol = fields.next();
            if let Some(slot) = z.checked_sub(1).and_then(|i| out.get_mut(i)) {
                *slot = fields.filter_map(|f| f.parse().ok()).collect();
            }
        }
        out
    });
    table.get(index).map(Vec::as_slice).unwrap_or(&[])
}
