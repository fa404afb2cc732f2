use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::Record;
use crate::crystal::{wrap_point, DisorderedCrystal, LatticeParams, Site, SIMPLEX_TOL};
use crate::elements::{atomic_number, index_of, VOCAB_SIZE};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSpecies {
    z: u32,
    p: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSite {
    s: Vec<JsonSpecies>,
    positions: Vec<[f64; 3]>,
    pos_weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonCrystal {
    lattice: LatticeParams,
    sites: Vec<JsonSite>,
    #[serde(default)]
    meta: Map<String, Value>,
}

pub fn crystal_to_json(record: &Record) -> Result<String> {
    let sites = record
        .crystal
        .sites
        .iter()
        .map(|site| JsonSite {
            s: site
                .species
                .iter()
                .enumerate()
                .filter(|(_, &p)| p != 0.0)
                .map(|(k, &p)| JsonSpecies { z: atomic_number(k), p })
                .collect(),
            positions: site.positions.clone(),
            pos_weights: site.pos_weights.clone(),
        })
        .collect();
    let doc = JsonCrystal { lattice: record.crystal.lattice, sites, meta: record.meta.clone() };
    Ok(serde_json::to_string(&doc)?)
}

fn decode(doc: JsonCrystal) -> std::result::Result<Record, String> {
    if doc.sites.is_empty() {
        return Err("no sites".into());
    }
    let order = doc.sites.iter().map(|s| s.positions.len()).max().unwrap_or(0);
    let mut sites = Vec::with_capacity(doc.sites.len());
    for (i, js) in doc.sites.into_iter().enumerate() {
        if js.positions.len() != js.pos_weights.len() || js.positions.is_empty() {
            return Err(format!("site {i}: positions and pos_weights differ in length or are empty"));
        }
        let mut species = vec![0.0; VOCAB_SIZE];
        for e in &js.s {
            let k = index_of(e.z).ok_or_else(|| format!("site {i}: unknown atomic number {}", e.z))?;
            species[k] += e.p;
        }
        let mut positions = js.positions;
        let mut pos_weights = js.pos_weights;
        positions.resize(order, [0.0; 3]);
        pos_weights.resize(order, 0.0);
        let exact = [&species, &pos_weights].iter().all(|v| (v.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL)
            && positions.iter().flatten().all(|x| (0.0..1.0).contains(x));
        let site = if exact {
            Site { species, positions, pos_weights }
        } else {
            let positions = positions.into_iter().map(wrap_point).collect();
            Site::new(species, positions, pos_weights).map_err(|e| format!("site {i}: {e}"))?
        };
        sites.push(site);
    }
    let crystal = DisorderedCrystal::new(doc.lattice, sites).map_err(|e| e.to_string())?;
    Ok(Record { crystal, meta: doc.meta })
}

pub fn crystal_from_json(line: &str) -> Result<Record> {
    parse_line(line, 1)
}

fn parse_line(line: &str, number: usize) -> Result<Record> {
    let doc: JsonCrystal =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: number, msg: e.to_string() })?;
    decode(doc).map_err(|msg| Error::Parse { line: number, msg })
}

pub fn to_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&crystal_to_json(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses one crystal per non-blank line.
pub fn parse_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, to_jsonl(records)?)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    parse_jsonl(&fs::read_to_string(path)?)
}
