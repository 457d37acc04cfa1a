//! Deterministic synthetic proteins for tests, demos and the desk-scale corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::instruction_data::{
    write_annotations, write_jsonl, write_manifest, AnnotationRecord, MolInstRecord, PeerInstance, PeerSplits,
    Split, TaskTag,
};
use crate::protein_io::{derive_sequence, write_pdb, ProteinStructure, ResidueRecord, Vec3, CANONICAL_AMINO_ACIDS};

const CA_STEP: f64 = 3.8;

fn unit(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn add(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    unit([
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ])
}

/// Uniform random residues over the canonical alphabet.
pub fn random_sequence<R: Rng>(len: usize, rng: &mut R) -> String {
    let alphabet = CANONICAL_AMINO_ACIDS.as_bytes();
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
        .collect()
}

/// Coil-like backbone for `sequence`: a persistent random walk of CA atoms
/// 3.8 Å apart, with N, C and O placed at fixed bond lengths around each CA.
pub fn structure_for_sequence<R: Rng>(id: &str, sequence: &str, rng: &mut R) -> ProteinStructure {
    coil_for_sequence(id, sequence, 0.6, rng)
}

/// Like [`structure_for_sequence`] with the step-to-step bend size given;
/// small values give extended chains, large ones compact coils.
pub fn coil_for_sequence<R: Rng>(id: &str, sequence: &str, bend_size: f64, rng: &mut R) -> ProteinStructure {
    let mut dir = random_unit(rng);
    let mut ca = [0.0; 3];
    let residues = sequence
        .chars()
        .map(|aa_code| {
            let bend = random_unit(rng);
            dir = unit(add(dir, bend, bend_size));
            ca = add(ca, dir, CA_STEP);
            let side = unit(add(bend, dir, -0.5));
            let n = add(add(ca, dir, -0.9), side, 1.1);
            let c = add(add(ca, dir, 1.0), side, -1.1);
            let o = add(c, side, -1.23);
            ResidueRecord {
                aa_code,
                n_xyz: n,
                ca_xyz: ca,
                c_xyz: c,
                o_xyz: o,
            }
        })
        .collect();
    ProteinStructure::new(id, residues).expect("non-empty finite backbone")
}

/// Random sequence of length `len` (at least 1) on a random coil.
pub fn random_structure<R: Rng>(id: &str, len: usize, rng: &mut R) -> ProteinStructure {
    let seq = random_sequence(len.max(1), rng);
    structure_for_sequence(id, &seq, rng)
}


struct Family {
    residues: &'static str,
    bend: f64,
    name: &'static str,
    location: &'static str,
    function: &'static str,
    similarity: &'static str,
    subcellular: u32,
    fold: u32,
    purpose: &'static str,
    reaction: &'static str,
    domain: &'static str,
    role: &'static str,
}

const FAMILIES: [Family; 6] = [
    Family {
        residues: "DEKRQ",
        bend: 0.3,
        name: "Histone chaperone",
        location: "Nucleus",
        function: "Binds histones.",
        similarity: "NAP family",
        subcellular: 0,
        fold: 7,
        purpose: "a histone chaperone",
        reaction: "ATP + H2O = ADP + Pi",
        domain: "bromo domain",
        role: "Binds histones.",
    },
    Family {
        residues: "AGSTP",
        bend: 1.2,
        name: "Aldolase",
        location: "Cytoplasm",
        function: "Acts in glycolysis.",
        similarity: "Aldolase family",
        subcellular: 1,
        fold: 42,
        purpose: "a glycolytic enzyme",
        reaction: "FBP = DHAP + G3P",
        domain: "aldolase domain",
        role: "Acts in glycolysis.",
    },
    Family {
        residues: "CNGYW",
        bend: 0.5,
        name: "Kazal inhibitor",
        location: "Secreted",
        function: "Inhibits proteases.",
        similarity: "Kazal family",
        subcellular: 2,
        fold: 118,
        purpose: "a protease inhibitor",
        reaction: "peptide + H2O = 2 peptides",
        domain: "Kazal domain",
        role: "Regulates proteases.",
    },
    Family {
        residues: "ILMVF",
        bend: 0.9,
        name: "ADP/ATP carrier",
        location: "Mitochondrion",
        function: "Exchanges ADP for ATP.",
        similarity: "Carrier family",
        subcellular: 3,
        fold: 305,
        purpose: "a nucleotide carrier",
        reaction: "ADP(out) = ADP(in)",
        domain: "Solcar repeat",
        role: "Transports ATP.",
    },
    Family {
        residues: "HKRST",
        bend: 0.4,
        name: "Zinc finger",
        location: "Nucleus",
        function: "Binds DNA.",
        similarity: "C2H2 family",
        subcellular: 0,
        fold: 911,
        purpose: "a DNA-binding factor",
        reaction: "DNA + dNTP = DNA + PPi",
        domain: "zinc finger",
        role: "Binds DNA.",
    },
    Family {
        residues: "ELAWY",
        bend: 1.0,
        name: "Hormone receptor",
        location: "Cell membrane",
        function: "Senses hormones.",
        similarity: "GPCR family",
        subcellular: 4,
        fold: 1194,
        purpose: "a hormone receptor",
        reaction: "ATP + Ser = ADP + pSer",
        domain: "receptor domain",
        role: "Mediates signaling.",
    },
];

const MOLINST_PROMPTS: [(TaskTag, &str); 8] = [
    (TaskTag::ProteinFunction, "Analyze the following amino acid sequence, and determine the function of the resulting protein. {seq}"),
    (TaskTag::ProteinFunction, "Predict the general function of the protein from its sequence:\n```\n{seq}\n```"),
    (TaskTag::CatalyticActivity, "Please evaluate the following protein sequence and provide an explanation of the enzyme's catalytic activity: ```\n{seq}\n```"),
    (TaskTag::CatalyticActivity, "What reaction does the given protein sequence catalyze? {seq}"),
    (TaskTag::DomainMotif, "Given this protein sequence, can you identify any common protein motifs or domains?\n```\n{seq}\n```"),
    (TaskTag::DomainMotif, "Identify the domains present in the sequence below. {seq}"),
    (TaskTag::FunctionalDescription, "Inspect the protein sequence and offer a concise description of its properties.\n```\n{seq}\n```"),
    (TaskTag::FunctionalDescription, "Describe the role of this sequence in the cell. {seq}"),
];

fn molinst_output(task: TaskTag, f: &Family) -> String {
    match task {
        TaskTag::ProteinFunction => format!("It is {}.", f.purpose),
        TaskTag::CatalyticActivity => format!("{}.", f.reaction),
        TaskTag::DomainMotif => format!("Contains a {}.", f.domain),
        _ => f.role.to_string(),
    }
}

/// Size and randomness of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusSpec {
    pub proteins_per_family: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Proteins per family held out for validation and for test.
    pub held_out_per_family: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            proteins_per_family: 8,
            min_len: 20,
            max_len: 40,
            held_out_per_family: 1,
            seed: 17,
        }
    }
}

pub const NUM_FAMILIES: usize = FAMILIES.len();

/// What [`write_corpus`] wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub proteins: usize,
    pub annotations: usize,
    /// (train, valid, test) per property task.
    pub peer: BTreeMap<String, (usize, usize, usize)>,
    pub molinst: BTreeMap<String, usize>,
}

fn family_sequence<R: Rng>(f: &Family, len: usize, rng: &mut R) -> String {
    let favoured = f.residues.as_bytes();
    let all = CANONICAL_AMINO_ACIDS.as_bytes();
    (0..len)
        .map(|_| {
            let pool = if rng.gen_bool(0.7) { favoured } else { all };
            pool[rng.gen_range(0..pool.len())] as char
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn pairs<R: Rng>(members: &[(String, usize)], count: usize, rng: &mut R) -> Vec<PeerInstance> {
    (0..count)
        .map(|_| {
            let a = &members[rng.gen_range(0..members.len())];
            let mut b = &members[rng.gen_range(0..members.len())];
            while b.0 == a.0 && members.len() > 1 {
                b = &members[rng.gen_range(0..members.len())];
            }
            PeerInstance {
                protein_ids: vec![a.0.clone(), b.0.clone()],
                label: u32::from((a.1 + b.1) % 2 == 0),
            }
        })
        .collect()
}

/// Writes a synthetic corpus under `dir`: `structures/*.pdb`,
/// `annotations.tsv`, `peer/<task>.tsv` and `molinst/<task>.jsonl`.
///
/// Each protein belongs to one of six families. The family sets the residue
/// composition, how tightly the chain coils, the annotation text, every
/// property label and every Mol-Instructions answer, so all tasks are
/// learnable from either modality. Proteins are split per family into
/// train, valid and test; pairs only combine proteins of one split.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<CorpusSummary> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "fixture lengths {}..={} are not a valid range",
            spec.min_len, spec.max_len
        )));
    }
    if spec.proteins_per_family <= 2 * spec.held_out_per_family {
        return Err(Error::Config("fixtures need training proteins in every family".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut members: BTreeMap<Split, Vec<(String, usize)>> = BTreeMap::new();
    let mut annotations = Vec::new();
    let mut molinst: BTreeMap<TaskTag, Vec<MolInstRecord>> = BTreeMap::new();
    let mut single_rows: Vec<(String, usize, Split)> = Vec::new();
    for (fi, fam) in FAMILIES.iter().enumerate() {
        for j in 0..spec.proteins_per_family {
            let id = format!("FX{fi}{j:02}");
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let seq = family_sequence(fam, len, &mut rng);
            let s = coil_for_sequence(&id, &seq, fam.bend, &mut rng);
            write_file(&dir.join("structures").join(format!("{id}.pdb")), &write_pdb(&s))?;
            let split = if j < spec.held_out_per_family {
                Split::Test
            } else if j < 2 * spec.held_out_per_family {
                Split::Valid
            } else {
                Split::Train
            };
            members.entry(split).or_default().push((id.clone(), fi));
            single_rows.push((id.clone(), fi, split));
            let dropped = rng.gen_range(0..8);
            annotations.push(AnnotationRecord {
                protein_id: id.clone(),
                name: Some(fam.name.to_string()),
                subcellular_location: (dropped != 1).then(|| fam.location.to_string()),
                function_text: (dropped != 2).then(|| fam.function.to_string()),
                families: (dropped != 3).then(|| fam.similarity.to_string()),
            });
            for task in TaskTag::MOLINST {
                let options: Vec<&str> = MOLINST_PROMPTS
                    .iter()
                    .filter(|(t, _)| *t == task)
                    .map(|(_, p)| *p)
                    .collect();
                let prompt = options[rng.gen_range(0..options.len())];
                molinst.entry(task).or_default().push(MolInstRecord {
                    protein_id: id.clone(),
                    task,
                    instruction: prompt.replace("{seq}", &derive_sequence(&s)),
                    output: molinst_output(task, fam),
                });
            }
        }
    }
    let mut summary = CorpusSummary {
        proteins: single_rows.len(),
        annotations: annotations.len(),
        peer: BTreeMap::new(),
        molinst: BTreeMap::new(),
    };
    write_file(&dir.join("annotations.tsv"), &write_annotations(&annotations))?;
    for task in TaskTag::PEER {
        let mut splits = PeerSplits::default();
        if task.arity() == 1 {
            for (id, fi, split) in &single_rows {
                let fam = &FAMILIES[*fi];
                let label = match task {
                    TaskTag::Solubility => (*fi % 2) as u32,
                    TaskTag::SubcellularLocalization => fam.subcellular,
                    TaskTag::BinaryLocalization => u32::from(fi % 2 == 0 || *fi == 1),
                    _ => fam.fold,
                };
                let inst = PeerInstance {
                    protein_ids: vec![id.clone()],
                    label,
                };
                push_split(&mut splits, *split, inst);
            }
        } else {
            for (split, m) in &members {
                let n = m.len() * 2 / 3;
                for inst in pairs(m, n.max(2), &mut rng) {
                    push_split(&mut splits, *split, inst);
                }
            }
        }
        for list in [&mut splits.train, &mut splits.valid, &mut splits.test] {
            list.shuffle(&mut rng);
        }
        write_file(&dir.join("peer").join(format!("{task}.tsv")), &write_manifest(&splits))?;
        summary.peer.insert(task.name().to_string(), splits.counts());
    }
    for (task, records) in &molinst {
        write_jsonl(records, &dir.join("molinst").join(format!("{task}.jsonl")))?;
        summary.molinst.insert(task.name().to_string(), records.len());
    }
    Ok(summary)
}

fn push_split(splits: &mut PeerSplits, split: Split, inst: PeerInstance) {
    match split {
        Split::Train => splits.train.push(inst),
        Split::Valid => splits.valid.push(inst),
        Split::Test => splits.test.push(inst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protein_io::derive_sequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(a: Vec3, b: Vec3) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn consecutive_alpha_carbons_are_3_8_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_structure("p", 30, &mut rng);
        assert_eq!(s.len(), 30);
        for w in s.residues.windows(2) {
            assert!((dist(w[0].ca_xyz, w[1].ca_xyz) - 3.8).abs() < 1e-9);
        }
    }

    #[test]
    fn corpus_counts_follow_the_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::default();
        let summary = write_corpus(dir.path(), &spec).unwrap();
        let n = NUM_FAMILIES * spec.proteins_per_family;
        assert_eq!(summary.proteins, n);
        assert_eq!(summary.peer["solubility"], (n - 12, 6, 6));
        assert_eq!(summary.molinst["domain_motif"], n);
        let pdbs = fs::read_dir(dir.path().join("structures")).unwrap().count();
        assert_eq!(pdbs, n);
        let again = tempfile::tempdir().unwrap();
        write_corpus(again.path(), &spec).unwrap();
        for rel in ["annotations.tsv", "peer/yeast_ppi.tsv", "molinst/catalytic_activity.jsonl", "structures/FX300.pdb"] {
            assert_eq!(
                fs::read(dir.path().join(rel)).unwrap(),
                fs::read(again.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn same_seed_same_structure() {
        let a = random_structure("p", 12, &mut ChaCha8Rng::seed_from_u64(4));
        let b = random_structure("p", 12, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let seq = derive_sequence(&a);
        assert_eq!(seq.len(), 12);
    }
}
