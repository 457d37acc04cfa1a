//! Backbone structures: PDB-subset parsing, a compact cache format, and the
//! residue k-nearest-neighbor graph consumed by the structure encoder.
//!
//! Cache format (one residue per line, coordinates in Å at three decimals):
//!
//! ```text
//! #protfuse-structure v1
//! id P00001
//! M 1.000 2.000 3.000 1.458 2.000 3.000 2.009 3.420 3.000 1.251 4.390 3.000
//! ```
//!
//! Each residue line is the one-letter code followed by N, CA, C and O
//! coordinates (x y z each).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub const CANONICAL_AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";
pub const UNKNOWN_AMINO_ACID: char = 'X';

const CACHE_HEADER: &str = "#protfuse-structure v1";

const THREE_LETTER: [(&str, char); 20] = [
    ("ALA", 'A'),
    ("CYS", 'C'),
    ("ASP", 'D'),
    ("GLU", 'E'),
    ("PHE", 'F'),
    ("GLY", 'G'),
    ("HIS", 'H'),
    ("ILE", 'I'),
    ("LYS", 'K'),
    ("LEU", 'L'),
    ("MET", 'M'),
    ("ASN", 'N'),
    ("PRO", 'P'),
    ("GLN", 'Q'),
    ("ARG", 'R'),
    ("SER", 'S'),
    ("THR", 'T'),
    ("VAL", 'V'),
    ("TRP", 'W'),
    ("TYR", 'Y'),
];

pub fn one_letter(three: &str) -> char {
    THREE_LETTER
        .iter()
        .find(|(t, _)| t.eq_ignore_ascii_case(three))
        .map_or(UNKNOWN_AMINO_ACID, |&(_, c)| c)
}

pub fn three_letter(code: char) -> &'static str {
    THREE_LETTER
        .iter()
        .find(|&&(_, c)| c == code)
        .map_or("UNK", |&(t, _)| t)
}

/// Maps anything outside the 20 canonical residues to `X`.
pub fn normalize_code(c: char) -> char {
    let up = c.to_ascii_uppercase();
    if CANONICAL_AMINO_ACIDS.contains(up) {
        up
    } else {
        UNKNOWN_AMINO_ACID
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueRecord {
    pub aa_code: char,
    pub n_xyz: Vec3,
    pub ca_xyz: Vec3,
    pub c_xyz: Vec3,
    pub o_xyz: Vec3,
}

impl ResidueRecord {
    fn atoms(&self) -> [&Vec3; 4] {
        [&self.n_xyz, &self.ca_xyz, &self.c_xyz, &self.o_xyz]
    }

    fn is_finite(&self) -> bool {
        self.atoms().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProteinStructure {
    pub id: String,
    pub residues: Vec<ResidueRecord>,
    /// Residues dropped during parsing because a backbone atom was missing.
    #[serde(default)]
    pub dropped_residues: usize,
}

impl ProteinStructure {
    pub fn new(id: impl Into<String>, residues: Vec<ResidueRecord>) -> Result<Self> {
        if residues.is_empty() {
            return Err(Error::EmptyStructure);
        }
        if let Some(i) = residues.iter().position(|r| !r.is_finite()) {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "non-finite coordinate".into(),
            });
        }
        let residues = residues
            .into_iter()
            .map(|mut r| {
                r.aa_code = normalize_code(r.aa_code);
                r
            })
            .collect();
        Ok(Self {
            id: id.into(),
            residues,
            dropped_residues: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn translated(&self, shift: Vec3) -> Self {
        let mv = |p: &Vec3| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
        let residues = self
            .residues
            .iter()
            .map(|r| ResidueRecord {
                aa_code: r.aa_code,
                n_xyz: mv(&r.n_xyz),
                ca_xyz: mv(&r.ca_xyz),
                c_xyz: mv(&r.c_xyz),
                o_xyz: mv(&r.o_xyz),
            })
            .collect();
        Self {
            id: self.id.clone(),
            residues,
            dropped_residues: self.dropped_residues,
        }
    }
}

#[derive(Default)]
struct PendingResidue {
    name: String,
    atoms: [Option<Vec3>; 4],
}

fn backbone_slot(atom: &str) -> Option<usize> {
    match atom {
        "N" => Some(0),
        "CA" => Some(1),
        "C" => Some(2),
        "O" => Some(3),
        _ => None,
    }
}

fn column(line: &str, start: usize, end: usize) -> &str {
    line.get(start.min(line.len())..end.min(line.len()))
        .unwrap_or("")
}

/// Parses the ATOM records of a single-chain PDB document.
///
/// Only N/CA/C/O atoms are read. Residues lacking any of the four are dropped
/// and counted in [`ProteinStructure::dropped_residues`]. Parsing stops at the
/// first `ENDMDL`.
pub fn parse_structure(text: &str, id: &str) -> Result<ProteinStructure> {
    let mut order: Vec<(char, String)> = Vec::new();
    let mut pending: Vec<PendingResidue> = Vec::new();
    let mut chains: Vec<char> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM") {
            continue;
        }
        let bad = |reason: &str| Error::MalformedRecord {
            line: lineno,
            reason: reason.to_string(),
        };
        if line.len() < 54 {
            return Err(bad("ATOM record shorter than 54 columns"));
        }
        let atom = column(line, 12, 16).trim();
        let res_name = column(line, 17, 20).trim();
        let chain = column(line, 21, 22).chars().next().unwrap_or(' ');
        let res_seq = column(line, 22, 26).trim();
        let icode = column(line, 26, 27);
        res_seq
            .parse::<i32>()
            .map_err(|_| bad("unparseable residue number"))?;
        let mut xyz = [0.0; 3];
        for (k, (a, b)) in [(30, 38), (38, 46), (46, 54)].into_iter().enumerate() {
            xyz[k] = column(line, a, b)
                .trim()
                .parse::<f64>()
                .map_err(|_| bad("unparseable coordinate"))?;
            if !xyz[k].is_finite() {
                return Err(bad("non-finite coordinate"));
            }
        }
        if !chains.contains(&chain) {
            chains.push(chain);
        }
        let key = (chain, format!("{res_seq}{icode}"));
        let idx = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                pending.push(PendingResidue {
                    name: res_name.to_string(),
                    ..Default::default()
                });
                pending.len() - 1
            }
        };
        if let Some(slot) = backbone_slot(atom) {
            let entry = &mut pending[idx].atoms[slot];
            if entry.is_none() {
                *entry = Some(xyz);
            }
        }
    }

    if chains.len() > 1 {
        return Err(Error::MultiChain(chains));
    }

    let mut residues = Vec::with_capacity(pending.len());
    let mut dropped = 0;
    for p in pending {
        match p.atoms {
            [Some(n), Some(ca), Some(c), Some(o)] => residues.push(ResidueRecord {
                aa_code: one_letter(&p.name),
                n_xyz: n,
                ca_xyz: ca,
                c_xyz: c,
                o_xyz: o,
            }),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{id}: dropped {dropped} residue(s) with incomplete backbone");
    }
    let mut s = ProteinStructure::new(id, residues)?;
    s.dropped_residues = dropped;
    Ok(s)
}

/// Writes the backbone as PDB ATOM records (chain A).
pub fn write_pdb(s: &ProteinStructure) -> String {
    let mut out = String::new();
    let mut serial = 1;
    for (i, r) in s.residues.iter().enumerate() {
        for (name, p, element) in [
            ("N", r.n_xyz, "N"),
            ("CA", r.ca_xyz, "C"),
            ("C", r.c_xyz, "C"),
            ("O", r.o_xyz, "O"),
        ] {
            let _ = writeln!(
                out,
                "ATOM  {:>5} {:<4} {:>3} A{:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00          {:>2}",
                serial,
                format!(" {name}"),
                three_letter(r.aa_code),
                i + 1,
                p[0],
                p[1],
                p[2],
                element
            );
            serial += 1;
        }
    }
    out.push_str("END\n");
    out
}

/// Serializes to the line-oriented cache format.
pub fn serialize_structure(s: &ProteinStructure) -> String {
    let mut out = format!("{CACHE_HEADER}\nid {}\n", s.id);
    for r in &s.residues {
        out.push(r.aa_code);
        for atom in r.atoms() {
            for v in atom {
                let _ = write!(out, " {v:.3}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn deserialize_structure(text: &str) -> Result<ProteinStructure> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, reason: &str| Error::MalformedRecord {
        line,
        reason: reason.to_string(),
    };
    match lines.next() {
        Some((_, h)) if h.trim() == CACHE_HEADER => {}
        _ => return Err(bad(1, "missing structure cache header")),
    }
    let id = match lines.next() {
        Some((_, l)) if l.starts_with("id ") => l[3..].trim().to_string(),
        _ => return Err(bad(2, "missing id line")),
    };
    let mut residues = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let code = parts
            .next()
            .and_then(|c| c.chars().next())
            .ok_or_else(|| bad(i + 1, "missing residue code"))?;
        let vals: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 1, "unparseable coordinate"))?;
        if vals.len() != 12 {
            return Err(bad(i + 1, "expected 12 coordinates"));
        }
        let v = |k: usize| [vals[k], vals[k + 1], vals[k + 2]];
        residues.push(ResidueRecord {
            aa_code: code,
            n_xyz: v(0),
            ca_xyz: v(3),
            c_xyz: v(6),
            o_xyz: v(9),
        });
    }
    ProteinStructure::new(id, residues)
}

/// Concatenated one-letter codes, one per residue.
pub fn derive_sequence(s: &ProteinStructure) -> String {
    s.residues.iter().map(|r| r.aa_code).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub k: usize,
    pub rbf_count: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 16, rbf_count: 16 }
    }
}

pub const RBF_MIN: f64 = 2.0;
pub const RBF_MAX: f64 = 22.0;

/// Gaussian radial basis of a distance: centers uniform on [2, 22] Å, width
/// equal to the center spacing.
pub fn rbf_encode(distance: f64, rbf_count: usize) -> Vec<f64> {
    let (spacing, width) = if rbf_count > 1 {
        let sp = (RBF_MAX - RBF_MIN) / (rbf_count - 1) as f64;
        (sp, sp)
    } else {
        (0.0, RBF_MAX - RBF_MIN)
    };
    (0..rbf_count)
        .map(|m| {
            let center = RBF_MIN + spacing * m as f64;
            let z = (distance - center) / width;
            (-z * z).exp()
        })
        .collect()
}

/// k-nearest-neighbor residue graph over CA atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueGraph {
    pub num_residues: usize,
    pub k: usize,
    /// `num_residues × k`, row-major.
    pub neighbor_index: Vec<usize>,
    /// False where a slot is padding (only when `num_residues < k`).
    pub valid: Vec<bool>,
    /// `(num_residues · k) × rbf_count`; row `i·k + j` is edge (i, neighbor j).
    pub edge_features: Matrix,
    /// CA–CA distance of every slot.
    pub distances: Vec<f64>,
}

impl ResidueGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_index[i * self.k..(i + 1) * self.k]
    }

    pub fn valid_slots(&self, i: usize) -> &[bool] {
        &self.valid[i * self.k..(i + 1) * self.k]
    }

    pub fn rbf_count(&self) -> usize {
        self.edge_features.ncols()
    }
}

fn ca_distance(a: &ResidueRecord, b: &ResidueRecord) -> f64 {
    let d: f64 = (0..3).map(|k| (a.ca_xyz[k] - b.ca_xyz[k]).powi(2)).sum();
    d.sqrt()
}

/// Builds the graph: each residue's `k` nearest residues by CA distance, self
/// first, ties toward the lower index. When `L < k` the list holds every
/// residue and is padded by repeating its last entry; padded slots are
/// invalid and carry zero edge features.
pub fn build_residue_graph(s: &ProteinStructure, cfg: GraphConfig) -> ResidueGraph {
    assert!(cfg.k >= 1, "k must be positive");
    let l = s.len();
    let k = cfg.k;
    let mut neighbor_index = Vec::with_capacity(l * k);
    let mut valid = Vec::with_capacity(l * k);
    let mut distances = Vec::with_capacity(l * k);
    let mut edge_features = Matrix::zeros((l * k, cfg.rbf_count));
    for i in 0..l {
        let mut order: Vec<(f64, usize)> = (0..l)
            .filter(|&j| j != i)
            .map(|j| (ca_distance(&s.residues[i], &s.residues[j]), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.insert(0, (0.0, i));
        order.truncate(k);
        let last = *order.last().expect("self is always present");
        for slot in 0..k {
            let (d, j, ok) = match order.get(slot) {
                Some(&(d, j)) => (d, j, true),
                None => (last.0, last.1, false),
            };
            neighbor_index.push(j);
            valid.push(ok);
            distances.push(d);
            if ok {
                let feats = rbf_encode(d, cfg.rbf_count);
                for (c, f) in feats.into_iter().enumerate() {
                    edge_features[[i * k + slot, c]] = f;
                }
            }
        }
    }
    ResidueGraph {
        num_residues: l,
        k,
        neighbor_index,
        valid,
        edge_features,
        distances,
    }
}
