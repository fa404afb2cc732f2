//! A small CIF reader for disordered structures and a matching P1 writer.
//!
//! Supported: the first data block, cell lengths and angles, an optional
//! explicit list of symmetry operations, and the atom-site loop with
//! occupancy and disorder assembly/group tags.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::crystal::{wrap_point, DisorderedCrystal, LatticeParams, Site};
use crate::elements::{index_of_symbol, symbol, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::geometry::{lattice_matrix, mat_vec, wrap_displacement, Mat3};

#[derive(Clone, Debug, PartialEq)]
pub struct CifOptions {
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Largest number of positions per site.
    pub order: usize,
    /// Fractional distance under which rows share a coordinate.
    pub merge_tol: f64,
    /// Largest separation (Å) of unlabeled positional alternatives.
    pub pd_distance: f64,
    /// Largest separation (Å) of alternatives within a labeled assembly.
    pub assembly_distance: f64,
}

impl Default for CifOptions {
    fn default() -> Self {
        Self { min_atoms: 3, max_atoms: 50, order: 2, merge_tol: 1e-4, pd_distance: 1.0, assembly_distance: 2.0 }
    }
}

const OCC_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
struct Token {
    text: String,
    quoted: bool,
    line: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let n = i + 1;
        if let Some(rest) = line.strip_prefix(';') {
            let mut field = rest.to_string();
            for (_, l) in lines.by_ref() {
                if l.starts_with(';') {
                    break;
                }
                field.push('\n');
                field.push_str(l);
            }
            out.push(Token { text: field, quoted: true, line: n });
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        let mut j = 0;
        while j < chars.len() {
            let c = chars[j];
            if c.is_whitespace() {
                j += 1;
            } else if c == '#' {
                break;
            } else if c == '\'' || c == '"' {
                let start = j + 1;
                let mut k = start;
                while k < chars.len() && !(chars[k] == c && (k + 1 == chars.len() || chars[k + 1].is_whitespace())) {
                    k += 1;
                }
                out.push(Token { text: chars[start..k.min(chars.len())].iter().collect(), quoted: true, line: n });
                j = k + 1;
            } else {
                let start = j;
                while j < chars.len() && !chars[j].is_whitespace() {
                    j += 1;
                }
                out.push(Token { text: chars[start..j].iter().collect(), quoted: false, line: n });
            }
        }
    }
    out
}

struct Loop {
    tags: Vec<String>,
    rows: Vec<Vec<Token>>,
}

impl Loop {
    fn column(&self, names: &[&str]) -> Option<usize> {
        names.iter().find_map(|n| self.tags.iter().position(|t| t.eq_ignore_ascii_case(n)))
    }
}

struct Block {
    items: HashMap<String, Token>,
    loops: Vec<Loop>,
}

fn is_keyword(t: &Token) -> bool {
    if t.quoted {
        return false;
    }
    let low = t.text.to_ascii_lowercase();
    t.text.starts_with('_') || low == "loop_" || low.starts_with("data_") || low.starts_with("save_")
}

fn parse_block(tokens: &[Token]) -> Result<Block> {
    let mut block = Block { items: HashMap::new(), loops: Vec::new() };
    let mut i = 0;
    let mut seen_data = false;
    while i < tokens.len() {
        let t = &tokens[i];
        let low = t.text.to_ascii_lowercase();
        if !t.quoted && low.starts_with("data_") {
            if seen_data {
                break;
            }
            seen_data = true;
            i += 1;
        } else if !t.quoted && low == "loop_" {
            let start_line = t.line;
            i += 1;
            let mut tags = Vec::new();
            while i < tokens.len() && !tokens[i].quoted && tokens[i].text.starts_with('_') {
                tags.push(tokens[i].text.to_ascii_lowercase());
                i += 1;
            }
            let mut values = Vec::new();
            while i < tokens.len() && !is_keyword(&tokens[i]) {
                values.push(tokens[i].clone());
                i += 1;
            }
            if tags.is_empty() || values.len() % tags.len() != 0 {
                return Err(Error::Parse {
                    line: start_line,
                    msg: format!("loop with {} tags has {} values", tags.len(), values.len()),
                });
            }
            let rows = values.chunks(tags.len()).map(<[Token]>::to_vec).collect();
            block.loops.push(Loop { tags, rows });
        } else if !t.quoted && t.text.starts_with('_') {
            let value = tokens.get(i + 1).filter(|v| !is_keyword(v)).ok_or_else(|| Error::Parse {
                line: t.line,
                msg: format!("tag {} has no value", t.text),
            })?;
            block.items.insert(t.text.to_ascii_lowercase(), value.clone());
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(block)
}

/// Numeric value with any standard uncertainty `(..)` removed.
fn number(t: &Token) -> Option<f64> {
    let s = t.text.split('(').next()?.trim();
    if s.is_empty() || s == "?" || s == "." {
        return None;
    }
    s.parse().ok()
}

fn label(t: &Token) -> Option<String> {
    let s = t.text.trim();
    (!s.is_empty() && s != "." && s != "?").then(|| s.to_string())
}

/// Element symbol at the start of a type symbol or site label.
fn element_of(raw: &str) -> Option<usize> {
    let letters: String = raw.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    if letters.len() >= 2 {
        if let Some(k) = index_of_symbol(&letters[..2]) {
            return Some(k);
        }
    }
    letters.get(..1).and_then(index_of_symbol)
}

/// Affine map `f -> R f + t` of a symmetry operation.
#[derive(Clone, Debug, PartialEq)]
pub struct SymOp {
    pub rot: Mat3,
    pub trans: [f64; 3],
}

impl SymOp {
    pub fn identity() -> Self {
        Self { rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], trans: [0.0; 3] }
    }

    pub fn apply(&self, f: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rot, f);
        std::array::from_fn(|k| r[k] + self.trans[k])
    }
}

/// Parses operations written like `-x+1/2, y, z-y`.
pub fn parse_symop(text: &str) -> Option<SymOp> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return None;
    }
    let mut op = SymOp { rot: [[0.0; 3]; 3], trans: [0.0; 3] };
    for (row, part) in parts.iter().enumerate() {
        let s: String = part.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
        if s.is_empty() {
            return None;
        }
        let mut chars = s.chars().peekable();
        while chars.peek().is_some() {
            let mut sign = 1.0;
            while let Some(&c) = chars.peek() {
                match c {
                    '+' => {}
                    '-' => sign = -sign,
                    _ => break,
                }
                chars.next();
            }
            let mut num = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_digit() || c == '.' || c == '/' {
                    num.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            let value = if num.is_empty() {
                None
            } else if let Some((a, b)) = num.split_once('/') {
                Some(a.parse::<f64>().ok()? / b.parse::<f64>().ok()?)
            } else {
                Some(num.parse::<f64>().ok()?)
            };
            if chars.peek() == Some(&'*') {
                chars.next();
            }
            match chars.peek() {
                Some(&c @ ('x' | 'y' | 'z')) => {
                    chars.next();
                    let col = (c as u8 - b'x') as usize;
                    op.rot[row][col] += sign * value.unwrap_or(1.0);
                }
                _ => op.trans[row] += sign * value?,
            }
        }
    }
    Some(op)
}

#[derive(Clone, Debug)]
struct Atom {
    element: usize,
    coord: [f64; 3],
    occ: f64,
    assembly: Option<String>,
    group: Option<String>,
}

/// Rows that share a coordinate.
#[derive(Clone, Debug)]
struct Group {
    coord: [f64; 3],
    amounts: Vec<f64>,
    occ: f64,
    assembly: Option<String>,
    group: Option<String>,
}

fn frac_close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    (0..3).all(|k| wrap_displacement(a[k] - b[k]).abs() <= tol)
}

fn cart_distance(m: &Mat3, a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = mat_vec(m, std::array::from_fn(|k| wrap_displacement(a[k] - b[k])));
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn cell(block: &Block) -> Result<LatticeParams> {
    let get = |name: &str| -> Result<f64> {
        block.items.get(name).and_then(number).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {name}") })
    };
    Ok(LatticeParams::new(
        get("_cell_length_a")?,
        get("_cell_length_b")?,
        get("_cell_length_c")?,
        get("_cell_angle_alpha")?,
        get("_cell_angle_beta")?,
        get("_cell_angle_gamma")?,
    ))
}

fn symmetry_ops(block: &Block) -> Result<Vec<SymOp>> {
    let names = ["_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz"];
    for lp in &block.loops {
        if let Some(col) = lp.column(&names) {
            return lp
                .rows
                .iter()
                .map(|r| {
                    parse_symop(&r[col].text).ok_or_else(|| Error::Parse {
                        line: r[col].line,
                        msg: format!("bad symmetry operation {:?}", r[col].text),
                    })
                })
                .collect();
        }
    }
    Ok(vec![SymOp::identity()])
}

fn atoms(block: &Block) -> Result<Vec<Atom>> {
    let lp = block
        .loops
        .iter()
        .find(|l| l.column(&["_atom_site_fract_x"]).is_some())
        .ok_or_else(|| Error::Parse { line: 0, msg: "no atom-site loop".into() })?;
    let col = |n: &str| lp.column(&[n]);
    let (cx, cy, cz) = match (col("_atom_site_fract_x"), col("_atom_site_fract_y"), col("_atom_site_fract_z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Parse { line: 0, msg: "atom-site loop lacks fractional coordinates".into() }),
    };
    let (ctype, clabel) = (col("_atom_site_type_symbol"), col("_atom_site_label"));
    let (cocc, casm, cgrp) =
        (col("_atom_site_occupancy"), col("_atom_site_disorder_assembly"), col("_atom_site_disorder_group"));
    let mut out = Vec::with_capacity(lp.rows.len());
    for row in &lp.rows {
        let line = row[0].line;
        let name = ctype.or(clabel).map(|c| row[c].text.clone()).unwrap_or_default();
        let element = element_of(&name).ok_or_else(|| Error::UnknownElement(name.clone()))?;
        let coord = [cx, cy, cz].map(|c| number(&row[c]));
        let coord = match coord {
            [Some(x), Some(y), Some(z)] => [x, y, z],
            _ => return Err(Error::Parse { line, msg: format!("bad coordinates for {name}") }),
        };
        let occ = cocc.and_then(|c| number(&row[c])).unwrap_or(1.0);
        if !(occ > 0.0) || occ > 1.0 + OCC_TOL {
            return Err(Error::Parse { line, msg: format!("occupancy {occ} of {name}") });
        }
        out.push(Atom {
            element,
            coord: wrap_point(coord),
            occ,
            assembly: casm.and_then(|c| label(&row[c])),
            group: cgrp.and_then(|c| label(&row[c])),
        });
    }
    Ok(out)
}

/// Reads the first data block of a CIF into a crystal.
pub fn parse_cif(text: &str, opts: &CifOptions) -> Result<DisorderedCrystal> {
    let block = parse_block(&tokenize(text))?;
    let lattice = cell(&block)?;
    let m = lattice_matrix(&lattice).map_err(|e| Error::Rejected(e.to_string()))?;
    let ops = symmetry_ops(&block)?;

    let mut expanded: Vec<Atom> = Vec::new();
    for atom in atoms(&block)? {
        let mut images: Vec<[f64; 3]> = Vec::new();
        for op in &ops {
            let p = wrap_point(op.apply(atom.coord));
            if !images.iter().any(|q| frac_close(*q, p, opts.merge_tol)) {
                images.push(p);
            }
        }
        expanded.extend(images.into_iter().map(|coord| Atom { coord, ..atom.clone() }));
    }

    let mut groups: Vec<Group> = Vec::new();
    for a in &expanded {
        let g = match groups.iter_mut().position(|g| frac_close(g.coord, a.coord, opts.merge_tol)) {
            Some(i) => &mut groups[i],
            None => {
                groups.push(Group {
                    coord: a.coord,
                    amounts: vec![0.0; VOCAB_SIZE],
                    occ: 0.0,
                    assembly: a.assembly.clone(),
                    group: a.group.clone(),
                });
                groups.last_mut().expect("just pushed")
            }
        };
        g.amounts[a.element] += a.occ;
        g.occ += a.occ;
        if g.occ > 1.0 + OCC_TOL {
            return Err(Error::Rejected(format!("site at {:?} has occupancy {:.4} > 1", g.coord, g.occ)));
        }
    }

    let clusters = pd_clusters(&groups, &m, opts);
    let mut sites = Vec::with_capacity(clusters.len());
    for members in clusters {
        if members.len() > opts.order {
            return Err(Error::Rejected(format!(
                "{} alternative positions exceed order {}",
                members.len(),
                opts.order
            )));
        }
        let total: f64 = members.iter().map(|&g| groups[g].occ).sum();
        let mut species = vec![0.0; VOCAB_SIZE];
        for &g in &members {
            for (s, a) in species.iter_mut().zip(&groups[g].amounts) {
                *s += a / total;
            }
        }
        let mut positions: Vec<[f64; 3]> = members.iter().map(|&g| groups[g].coord).collect();
        let mut weights: Vec<f64> = members.iter().map(|&g| groups[g].occ / total).collect();
        positions.resize(opts.order, [0.0; 3]);
        weights.resize(opts.order, 0.0);
        sites.push(Site::new(species, positions, weights)?);
    }

    let n = sites.len();
    if n < opts.min_atoms || n > opts.max_atoms {
        return Err(Error::Rejected(format!("{n} sites outside [{}, {}]", opts.min_atoms, opts.max_atoms)));
    }
    if let Err(e) = lattice.check() {
        return Err(Error::Rejected(e.to_string()));
    }
    DisorderedCrystal::new(lattice, sites).map_err(|e| Error::Rejected(e.to_string()))
}

fn dominant(g: &Group) -> usize {
    crate::crystal::argmax(&g.amounts)
}

/// Greedy closest-first grouping of partially occupied coordinate groups.
fn pd_clusters(groups: &[Group], m: &Mat3, opts: &CifOptions) -> Vec<Vec<usize>> {
    let partial: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].occ < 1.0 - OCC_TOL).collect();
    let mut pairs = Vec::new();
    for (x, &a) in partial.iter().enumerate() {
        for &b in &partial[x + 1..] {
            let (ga, gb) = (&groups[a], &groups[b]);
            let d = cart_distance(m, ga.coord, gb.coord);
            let eligible = match (&ga.assembly, &gb.assembly) {
                (Some(x), Some(y)) => x == y && (ga.group.is_none() || ga.group != gb.group) && d <= opts.assembly_distance,
                (None, None) => dominant(ga) == dominant(gb) && d <= opts.pd_distance,
                _ => false,
            };
            if eligible {
                pairs.push((d, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut owner: Vec<usize> = (0..groups.len()).collect();
    let mut members: Vec<Vec<usize>> = (0..groups.len()).map(|g| vec![g]).collect();
    for (_, a, b) in pairs {
        let (ra, rb) = (owner[a], owner[b]);
        if ra == rb {
            continue;
        }
        let occ: f64 = members[ra].iter().chain(&members[rb]).map(|&g| groups[g].occ).sum();
        // Alternatives from the same disorder group never co-cluster.
        let clash = members[ra].iter().any(|&p| {
            members[rb].iter().any(|&q| groups[p].group.is_some() && groups[p].group == groups[q].group)
        });
        if occ > 1.0 + OCC_TOL || clash {
            continue;
        }
        let moved = std::mem::take(&mut members[rb]);
        for &g in &moved {
            owner[g] = ra;
        }
        members[ra].extend(moved);
        members[ra].sort_unstable();
    }
    let mut out: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
    out.sort_by_key(|m| m[0]);
    out
}

/// Writes a P1 CIF; positional alternatives become one disorder assembly
/// per site with one group per position.
pub fn to_cif(crystal: &DisorderedCrystal, name: &str) -> String {
    let l = &crystal.lattice;
    let mut out = String::new();
    let _ = writeln!(out, "data_{name}");
    for (tag, v) in [
        ("_cell_length_a", l.a),
        ("_cell_length_b", l.b),
        ("_cell_length_c", l.c),
        ("_cell_angle_alpha", l.alpha),
        ("_cell_angle_beta", l.beta),
        ("_cell_angle_gamma", l.gamma),
    ] {
        let _ = writeln!(out, "{tag} {v:.10}");
    }
    out.push_str("loop_\n_symmetry_equiv_pos_as_xyz\n'x, y, z'\n");
    out.push_str("loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n");
    out.push_str("_atom_site_fract_z\n_atom_site_occupancy\n_atom_site_disorder_assembly\n_atom_site_disorder_group\n");
    let mut count = 0;
    for (i, site) in crystal.sites.iter().enumerate() {
        let pd = site.is_pd();
        for (r, (p, &w)) in site.positions.iter().zip(&site.pos_weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            for (k, &s) in site.species.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                count += 1;
                let sym = symbol(k);
                let (asm, grp) = if pd { (format!("A{i}"), format!("{}", r + 1)) } else { (".".into(), ".".into()) };
                let _ = writeln!(
                    out,
                    "{sym}{count} {sym} {:.10} {:.10} {:.10} {:.10} {asm} {grp}",
                    p[0],
                    p[1],
                    p[2],
                    s * w
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::index_of;

    const HEADER: &str = "data_test\n_cell_length_a 5.0\n_cell_length_b 5.0(1)\n_cell_length_c 5.0\n\
_cell_angle_alpha 90\n_cell_angle_beta 90\n_cell_angle_gamma 90\n";

    fn opts1() -> CifOptions {
        CifOptions { min_atoms: 1, ..Default::default() }
    }

    #[test]
    fn substitutional_rows_merge() {
        let text = format!(
            "{HEADER}loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n\
_atom_site_fract_z\n_atom_site_occupancy\nNa1 Na+ 0 0 0 0.5\nK1 K 0.00001 0 0 0.5\nCl1 Cl- 0.5 0.5 0.5 1\n"
        );
        let c = parse_cif(&text, &opts1()).unwrap();
        assert_eq!(c.num_sites(), 2);
        let s = &c.sites[0].species;
        assert!((s[index_of(11).unwrap()] - 0.5).abs() < 1e-12);
        assert!((s[index_of(19).unwrap()] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn default_occupancy_is_one() {
        let text = format!(
            "{HEADER}loop_\n_atom_site_label\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nFe1 0.25 0.25 1.25\n"
        );
        let c = parse_cif(&text, &opts1()).unwrap();
        assert_eq!(c.sites[0].species[index_of(26).unwrap()], 1.0);
        assert_eq!(c.sites[0].positions[0], [0.25, 0.25, 0.25]);
    }

    #[test]
    fn assembly_becomes_positional_site() {
        let text = format!(
            "{HEADER}loop_\n_atom_site_label\n_atom_site_type_symbol\n_atom_site_fract_x\n_atom_site_fract_y\n\
_atom_site_fract_z\n_atom_site_occupancy\n_atom_site_disorder_assembly\n_atom_site_disorder_group\n\
O1 O 0.1 0.1 0.1 0.7 A 1\nO2 O 0.14 0.1 0.1 0.3 A 2\nMg1 Mg 0.6 0.6 0.6 1 . .\n"
        );
        let c = parse_cif(&text, &opts1()).unwrap();
        assert_eq!(c.num_sites(), 2);
        assert!(c.sites[0].is_pd());
        assert!((c.sites[0].pos_weights[0] - 0.7).abs() < 1e-12);
        assert!((c.sites[0].pos_weights[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn symmetry_expansion() {
        let text = format!(
            "{HEADER}loop_\n_symmetry_equiv_pos_as_xyz\n'x,y,z'\n'-x+1/2,-y+1/2,z'\nloop_\n_atom_site_label\n\
_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nNa1 0 0 0\nCl1 0.25 0.25 0.5\n"
        );
        let c = parse_cif(&text, &opts1()).unwrap();
        // Na has two images, Cl lies on the rotation axis.
        assert_eq!(c.num_sites(), 3);
    }

    #[test]
    fn symop_parser() {
        let op = parse_symop("-x+1/2, y-x, 0.5+z").unwrap();
        let p = op.apply([0.1, 0.3, 0.2]);
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12 && (p[2] - 0.7).abs() < 1e-12);
        assert!(parse_symop("x,y").is_none());
    }

    #[test]
    fn errors_and_filters() {
        let bad_loop = format!("{HEADER}loop_\n_atom_site_label\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nNa1 0 0\n");
        assert!(matches!(parse_cif(&bad_loop, &opts1()), Err(Error::Parse { .. })));
        let unknown = format!("{HEADER}loop_\n_atom_site_label\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nQq1 0 0 0\n");
        assert!(matches!(parse_cif(&unknown, &opts1()), Err(Error::UnknownElement(_))));
        let over = format!(
            "{HEADER}loop_\n_atom_site_label\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\n\
_atom_site_occupancy\nNa1 0 0 0 0.7\nK1 0 0 0 0.7\n"
        );
        assert!(matches!(parse_cif(&over, &opts1()), Err(Error::Rejected(_))));
        let one = format!("{HEADER}loop_\n_atom_site_label\n_atom_site_fract_x\n_atom_site_fract_y\n_atom_site_fract_z\nNa1 0 0 0\n");
        assert!(matches!(parse_cif(&one, &CifOptions::default()), Err(Error::Rejected(_))));
    }
}
