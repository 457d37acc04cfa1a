//! Bidirectional transformer over residue tokens, with an optional
//! masked-residue pretraining objective.
//!
//! No begin/end tokens are added: the encoder emits exactly one row per
//! residue, which is what lets its output line up with the structure encoder.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{block_specs, layer_norm, linear, sinusoidal_positions, transformer_block};
use crate::params::{BoundParams, Init, ParamSet, ParamSpec};
use crate::protein_io::{normalize_code, CANONICAL_AMINO_ACIDS, UNKNOWN_AMINO_ACID};
use crate::structure_encoder::ResidueFeatures;

pub const UNKNOWN_ID: u32 = 20;
pub const MASK_ID: u32 = 21;
pub const PAD_ID: u32 = 22;
pub const RESIDUE_VOCAB_SIZE: usize = 23;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidueTokenIds {
    pub ids: Vec<u32>,
}

impl ResidueTokenIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One token per residue; non-canonical letters become `X`.
pub fn tokenize_residues(seq: &str) -> Result<ResidueTokenIds> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let ids = seq
        .chars()
        .map(|c| match normalize_code(c) {
            UNKNOWN_AMINO_ACID => UNKNOWN_ID,
            code => CANONICAL_AMINO_ACIDS
                .find(code)
                .expect("normalized code is canonical") as u32,
        })
        .collect();
    Ok(ResidueTokenIds { ids })
}

pub fn detokenize_residues(toks: &ResidueTokenIds) -> String {
    toks.ids
        .iter()
        .map(|&id| match id {
            0..=19 => CANONICAL_AMINO_ACIDS.as_bytes()[id as usize] as char,
            MASK_ID => '#',
            PAD_ID => '-',
            _ => UNKNOWN_AMINO_ACID,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceEncoderConfig {
    pub d_seq: usize,
    pub num_layers: usize,
    pub num_heads: usize,
}

impl Default for SequenceEncoderConfig {
    fn default() -> Self {
        Self::preset("esm-s").expect("known preset")
    }
}

impl SequenceEncoderConfig {
    /// Size presets for encoder-scaling experiments: `esm-xs`, `esm-s`, `esm-m`.
    pub fn preset(name: &str) -> Option<Self> {
        let (d_seq, num_layers, num_heads) = match name {
            "esm-xs" => (32, 1, 2),
            "esm-s" => (64, 2, 4),
            "esm-m" => (128, 3, 4),
            _ => return None,
        };
        Some(Self {
            d_seq,
            num_layers,
            num_heads,
        })
    }

    pub fn vocab_size(&self) -> usize {
        RESIDUE_VOCAB_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_seq == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("sequence encoder sizes must be positive".into()));
        }
        if self.d_seq % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_seq {} is not divisible by num_heads {}",
                self.d_seq, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_seq;
        let mut specs = vec![ParamSpec::new("embed", RESIDUE_VOCAB_SIZE, d, Init::Uniform(1.0))];
        for l in 0..self.num_layers {
            specs.extend(block_specs(&format!("layer{l}"), d));
        }
        specs.extend(ParamSpec::layer_norm("final_ln", d));
        specs.extend(ParamSpec::linear("mlm_head", d, RESIDUE_VOCAB_SIZE));
        specs
    }
}

pub fn init_sequence_params(cfg: &SequenceEncoderConfig, seed: u64) -> ParamSet {
    ParamSet::init(&cfg.param_specs(), seed)
}

/// Encoder output node plus every layer's per-head attention matrices.
pub struct SequenceTrace {
    pub output: Var,
    pub attention: Vec<Vec<Var>>,
}

pub fn encode_sequence_on(
    tape: &mut Tape,
    toks: &ResidueTokenIds,
    cfg: &SequenceEncoderConfig,
    params: &BoundParams,
) -> SequenceTrace {
    let rows: Vec<usize> = toks.ids.iter().map(|&i| i as usize).collect();
    let emb = tape.gather_rows(params.var("embed"), &rows);
    let pos = tape.leaf(sinusoidal_positions(rows.len(), cfg.d_seq));
    let mut x = tape.add(emb, pos);
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (next, probs) =
            transformer_block(tape, x, params, &format!("layer{l}"), cfg.num_heads, false);
        x = next;
        attention.push(probs);
    }
    let output = layer_norm(tape, x, params, "final_ln");
    SequenceTrace { output, attention }
}

fn check(toks: &ResidueTokenIds, cfg: &SequenceEncoderConfig, params: &ParamSet) -> Result<()> {
    cfg.validate()?;
    params.check_shapes(&cfg.param_specs(), "sequence encoder")?;
    if toks.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = toks.ids.iter().find(|&&i| i as usize >= RESIDUE_VOCAB_SIZE) {
        return Err(Error::ShapeMismatch(format!("residue token id {bad} out of range")));
    }
    Ok(())
}

pub fn encode_sequence(
    toks: &ResidueTokenIds,
    cfg: &SequenceEncoderConfig,
    params: &ParamSet,
) -> Result<ResidueFeatures> {
    check(toks, cfg, params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = encode_sequence_on(&mut tape, toks, cfg, &bound);
    Ok(ResidueFeatures {
        values: tape.value(trace.output).clone(),
    })
}

/// Attention matrices of every layer and head (row-stochastic, `L × L`).
pub fn attention_maps(
    toks: &ResidueTokenIds,
    cfg: &SequenceEncoderConfig,
    params: &ParamSet,
) -> Result<Vec<Vec<Matrix>>> {
    check(toks, cfg, params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = encode_sequence_on(&mut tape, toks, cfg, &bound);
    Ok(trace
        .attention
        .iter()
        .map(|layer| layer.iter().map(|&p| tape.value(p).clone()).collect())
        .collect())
}

pub struct MlmOutput {
    pub loss: f64,
    pub grads: ParamSet,
}

/// Positions masked for a sequence of length `len`: `ceil(rate · len)`, at least one.
pub fn masked_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).ceil() as usize).clamp(1, len)
}

/// Masked-residue cross-entropy over a batch, averaged per sequence then over
/// the batch, with gradients for every encoder array.
pub fn mlm_step<R: Rng>(
    batch: &[ResidueTokenIds],
    mask_rate: f64,
    cfg: &SequenceEncoderConfig,
    params: &ParamSet,
    rng: &mut R,
) -> Result<MlmOutput> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for toks in batch {
        check(toks, cfg, params)?;
        let n = masked_count(toks.len(), mask_rate);
        let positions = sample(rng, toks.len(), n).into_vec();
        let mut masked = toks.clone();
        let mut targets = Vec::with_capacity(n);
        for &p in &positions {
            targets.push((p, toks.ids[p] as usize));
            masked.ids[p] = MASK_ID;
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let trace = encode_sequence_on(&mut tape, &masked, cfg, &bound);
        let logits = linear(&mut tape, trace.output, &bound, "mlm_head");
        let loss = tape.cross_entropy(logits, &targets);
        total += tape.scalar(loss);
        let g = tape.backward(loss);
        grads.add_scaled(&bound.grads(&g), 1.0 / batch.len() as f64);
    }
    Ok(MlmOutput {
        loss: total / batch.len() as f64,
        grads,
    })
}
