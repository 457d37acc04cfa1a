//! Per-modality MLP projectors into the decoder width, and residue-wise fusion.

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::linear;
use crate::params::{BoundParams, ParamSet, ParamSpec};
use crate::structure_encoder::ResidueFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub d_in_seq: usize,
    pub d_in_struct: usize,
    pub d_model: usize,
    pub hidden: usize,
    /// Number of linear layers; `tanh` sits between consecutive ones.
    pub depth: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_in_seq: 64,
            d_in_struct: 32,
            d_model: 64,
            hidden: 64,
            depth: 2,
        }
    }
}

fn mlp_specs(d_in: usize, hidden: usize, d_out: usize, depth: usize) -> Vec<ParamSpec> {
    (0..depth)
        .flat_map(|i| {
            let fan_in = if i == 0 { d_in } else { hidden };
            let fan_out = if i + 1 == depth { d_out } else { hidden };
            ParamSpec::linear(&format!("layer{i}"), fan_in, fan_out)
        })
        .collect()
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d_in_seq, self.d_in_struct, self.d_model, self.hidden, self.depth].contains(&0) {
            return Err(Error::Config("projector widths and depth must be positive".into()));
        }
        Ok(())
    }

    pub fn seq_specs(&self) -> Vec<ParamSpec> {
        mlp_specs(self.d_in_seq, self.hidden, self.d_model, self.depth)
    }

    pub fn struct_specs(&self) -> Vec<ParamSpec> {
        mlp_specs(self.d_in_struct, self.hidden, self.d_model, self.depth)
    }
}

pub fn init_projector_params(specs: &[ParamSpec], seed: u64) -> ParamSet {
    ParamSet::init(specs, seed)
}

/// Row-wise MLP.
pub fn project_on(tape: &mut Tape, z: Var, depth: usize, params: &BoundParams) -> Var {
    let mut h = z;
    for i in 0..depth {
        h = linear(tape, h, params, &format!("layer{i}"));
        if i + 1 < depth {
            h = tape.tanh(h);
        }
    }
    h
}

fn project(
    z: &ResidueFeatures,
    d_in: usize,
    specs: &[ParamSpec],
    depth: usize,
    params: &ParamSet,
    what: &str,
) -> Result<Matrix> {
    if z.width() != d_in {
        return Err(Error::ShapeMismatch(format!(
            "{what} input has width {}, expected {d_in}",
            z.width()
        )));
    }
    params.check_shapes(specs, what)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(z.values.clone());
    let out = project_on(&mut tape, x, depth, &bound);
    Ok(tape.value(out).clone())
}

pub fn project_seq(z: &ResidueFeatures, cfg: &ProjectorConfig, params: &ParamSet) -> Result<Matrix> {
    cfg.validate()?;
    project(z, cfg.d_in_seq, &cfg.seq_specs(), cfg.depth, params, "sequence projector")
}

pub fn project_struct(
    z: &ResidueFeatures,
    cfg: &ProjectorConfig,
    params: &ParamSet,
) -> Result<Matrix> {
    cfg.validate()?;
    project(z, cfg.d_in_struct, &cfg.struct_specs(), cfg.depth, params, "structure projector")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Residue-wise sum of both projections (L rows).
    Add,
    /// Structure rows followed by sequence rows (2L rows), the unfused ablation.
    ConcatTokens,
    SeqOnly,
    StructOnly,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::ConcatTokens => "concat_tokens",
            FusionMode::SeqOnly => "seq_only",
            FusionMode::StructOnly => "struct_only",
        }
    }

    pub fn uses_seq(self) -> bool {
        !matches!(self, FusionMode::StructOnly)
    }

    pub fn uses_struct(self) -> bool {
        !matches!(self, FusionMode::SeqOnly)
    }

    /// Protein rows handed to the decoder for a protein of `len` residues.
    pub fn token_count(self, len: usize) -> usize {
        match self {
            FusionMode::ConcatTokens => 2 * len,
            _ => len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityFlags {
    pub seq: bool,
    pub structure: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedProteinEmbedding {
    pub values: Matrix,
    /// Residue count of the source protein.
    pub length: usize,
    pub modality: ModalityFlags,
}

impl FusedProteinEmbedding {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

fn require(
    mode: FusionMode,
    seq: Option<(usize, usize)>,
    structure: Option<(usize, usize)>,
) -> Result<()> {
    if mode.uses_seq() && seq.is_none() {
        return Err(Error::MissingModality {
            mode: mode.name(),
            modality: "sequence",
        });
    }
    if mode.uses_struct() && structure.is_none() {
        return Err(Error::MissingModality {
            mode: mode.name(),
            modality: "structure",
        });
    }
    if let (FusionMode::Add | FusionMode::ConcatTokens, Some(a), Some(b)) = (mode, seq, structure) {
        if a != b {
            return Err(Error::LengthMismatch(format!(
                "sequence projection is {a:?} but structure projection is {b:?}"
            )));
        }
    }
    Ok(())
}

/// Fusion on a tape; validates modalities and shapes first.
pub fn fuse_on(
    tape: &mut Tape,
    seq: Option<Var>,
    structure: Option<Var>,
    mode: FusionMode,
) -> Result<Var> {
    require(
        mode,
        seq.map(|v| tape.value(v).dim()),
        structure.map(|v| tape.value(v).dim()),
    )?;
    Ok(match mode {
        FusionMode::Add => tape.add(seq.unwrap(), structure.unwrap()),
        FusionMode::ConcatTokens => tape.concat_rows(&[structure.unwrap(), seq.unwrap()]),
        FusionMode::SeqOnly => seq.unwrap(),
        FusionMode::StructOnly => structure.unwrap(),
    })
}

pub fn fuse(
    h_seq: Option<&Matrix>,
    h_struct: Option<&Matrix>,
    mode: FusionMode,
) -> Result<FusedProteinEmbedding> {
    require(mode, h_seq.map(Matrix::dim), h_struct.map(Matrix::dim))?;
    let length = h_seq.or(h_struct).map_or(0, Matrix::nrows);
    let values = match mode {
        FusionMode::Add => h_seq.unwrap() + h_struct.unwrap(),
        FusionMode::ConcatTokens => {
            ndarray::concatenate![ndarray::Axis(0), *h_struct.unwrap(), *h_seq.unwrap()]
        }
        FusionMode::SeqOnly => h_seq.unwrap().clone(),
        FusionMode::StructOnly => h_struct.unwrap().clone(),
    };
    Ok(FusedProteinEmbedding {
        values,
        length,
        modality: ModalityFlags {
            seq: mode.uses_seq(),
            structure: mode.uses_struct(),
        },
    })
}
