//! Datasets on disk: JSONL records, splits, augmentation and CIF input.

pub mod cif;
mod jsonl;
pub mod toy;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::crystal::{from_ordered, DisorderedCrystal};
use crate::elements;
use crate::error::{Error, Result};

pub use jsonl::{crystal_from_json, crystal_to_json, parse_jsonl, read_jsonl, to_jsonl, write_jsonl};

/// One crystal with free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub crystal: DisorderedCrystal,
    pub meta: Map<String, Value>,
}

impl Record {
    pub fn new(crystal: DisorderedCrystal) -> Self {
        Self { crystal, meta: Map::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Records with a split label each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub labels: Vec<Split>,
}

impl Dataset {
    pub fn part(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().zip(&self.labels).filter(move |(_, &l)| l == split).map(|(r, _)| r)
    }

    pub fn crystals(&self, split: Split) -> Vec<DisorderedCrystal> {
        self.part(split).map(|r| r.crystal.clone()).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.iter().filter(|&&l| l == split).count()
    }
}

/// Split sizes: train and validation rounded to nearest, the rest to test.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

/// Shuffles under `seed` and labels each record.
pub fn split(records: Vec<Record>, seed: u64, fractions: [f64; 3]) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let [train, val, _] = split_counts(records.len(), fractions)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Split::Test; records.len()];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset { records, labels })
}

/// Appends ordered structures to the training split; validation and test
/// are left as is.
pub fn augment_ordered(dataset: &Dataset, ordered: &[DisorderedCrystal]) -> Result<Dataset> {
    let first = dataset.records.first().ok_or_else(|| Error::Empty("dataset".into()))?;
    let (vocab, order) = (first.crystal.vocab_size(), first.crystal.order());
    let mut out = dataset.clone();
    for (j, c) in ordered.iter().enumerate() {
        if c.vocab_size() != vocab {
            return Err(Error::Shape(format!("ordered structure {j} has D={}, expected {vocab}", c.vocab_size())));
        }
        if !c.is_ordered() {
            return Err(Error::InvalidCrystal(format!("augmentation structure {j} is disordered")));
        }
        let numbers: Vec<u32> =
            c.sites.iter().map(|s| elements::atomic_number(s.dominant_species())).collect();
        let coords: Vec<[f64; 3]> = c.sites.iter().map(|s| s.dominant_position()).collect();
        let mut rec = Record::new(from_ordered(&numbers, &coords, c.lattice, order)?);
        rec.meta.insert("augmented".into(), Value::Bool(true));
        out.records.push(rec);
        out.labels.push(Split::Train);
    }
    Ok(out)
}
