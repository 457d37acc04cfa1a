//! The assembled model: both encoders, both projectors, fusion and the
//! decoder, with per-example loss, gradients and generation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape};
use crate::decoder::{self, DecoderConfig};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams, ParamSet, Partition};
use crate::projector::{fuse_on, project_on, FusedProteinEmbedding, FusionMode, ModalityFlags, ProjectorConfig};
use crate::protein_io::{build_residue_graph, derive_sequence, GraphConfig, ProteinStructure, ResidueGraph};
use crate::sequence_encoder::{encode_sequence_on, tokenize_residues, ResidueTokenIds, SequenceEncoderConfig};
use crate::structure_encoder::{encode_structure_on, StructureEncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub structure: StructureEncoderConfig,
    pub sequence: SequenceEncoderConfig,
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            structure: StructureEncoderConfig::default(),
            sequence: SequenceEncoderConfig::default(),
            projector: ProjectorConfig::default(),
            decoder: DecoderConfig::default(),
            fusion: FusionMode::Add,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        self.sequence.validate()?;
        self.projector.validate()?;
        self.decoder.validate()?;
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::Config(format!("{what}: {a} does not match {b}")))
        };
        if self.graph.k == 0 {
            return Err(Error::Config("graph k must be positive".into()));
        }
        if self.graph.rbf_count != self.structure.d_edge {
            return mismatch("graph rbf_count vs structure d_edge", self.graph.rbf_count, self.structure.d_edge);
        }
        if self.projector.d_in_seq != self.sequence.d_seq {
            return mismatch("projector d_in_seq vs sequence d_seq", self.projector.d_in_seq, self.sequence.d_seq);
        }
        if self.projector.d_in_struct != self.structure.d_struct {
            return mismatch(
                "projector d_in_struct vs structure d_struct",
                self.projector.d_in_struct,
                self.structure.d_struct,
            );
        }
        if self.projector.d_model != self.decoder.d_model {
            return mismatch("projector d_model vs decoder d_model", self.projector.d_model, self.decoder.d_model);
        }
        Ok(())
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let specs = [
            (Partition::StructEncoder, self.structure.param_specs()),
            (Partition::SeqEncoder, self.sequence.param_specs()),
            (Partition::ProjStruct, self.projector.struct_specs()),
            (Partition::ProjSeq, self.projector.seq_specs()),
            (Partition::Decoder, self.decoder.param_specs()),
            (Partition::EmbedTable, self.decoder.embed_specs()),
        ];
        for (p, s) in specs {
            params.partition(p).check_shapes(&s, p.name())?;
        }
        Ok(())
    }
}

fn partition_seed(seed: u64, p: Partition) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(p as u64 + 1)
}

/// Fresh parameters for every partition; each partition has its own stream.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let init = |p: Partition, specs: Vec<crate::params::ParamSpec>| {
        ParamSet::init(&specs, partition_seed(seed, p))
    };
    Ok(ModelParams {
        struct_encoder: init(Partition::StructEncoder, cfg.structure.param_specs()),
        seq_encoder: init(Partition::SeqEncoder, cfg.sequence.param_specs()),
        proj_struct: init(Partition::ProjStruct, cfg.projector.struct_specs()),
        proj_seq: init(Partition::ProjSeq, cfg.projector.seq_specs()),
        decoder: init(Partition::Decoder, cfg.decoder.param_specs()),
        embed_table: init(Partition::EmbedTable, cfg.decoder.embed_specs()),
    })
}

/// Encoder inputs derived once per protein.
#[derive(Debug, Clone, PartialEq)]
pub struct ProteinInput {
    pub id: String,
    pub tokens: ResidueTokenIds,
    pub graph: ResidueGraph,
}

impl ProteinInput {
    pub fn from_structure(s: &ProteinStructure, graph: GraphConfig) -> Result<Self> {
        Ok(Self {
            id: s.id.clone(),
            tokens: tokenize_residues(&derive_sequence(s))?,
            graph: build_residue_graph(s, graph),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An instruction example with text tokenized and proteins resolved.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub proteins: Vec<Arc<ProteinInput>>,
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

struct BoundModel<'a> {
    parts: Vec<BoundParams<'a>>,
}

impl<'a> BoundModel<'a> {
    fn new(params: &'a ModelParams, tape: &mut Tape) -> Self {
        Self {
            parts: Partition::ALL.iter().map(|&p| params.partition(p).bind(tape)).collect(),
        }
    }

    fn get(&self, p: Partition) -> &BoundParams<'a> {
        &self.parts[p as usize]
    }
}

fn protein_on(
    tape: &mut Tape,
    protein: &ProteinInput,
    cfg: &ModelConfig,
    bound: &BoundModel,
) -> Result<crate::autograd::Var> {
    let seq = if cfg.fusion.uses_seq() {
        let z = encode_sequence_on(tape, &protein.tokens, &cfg.sequence, bound.get(Partition::SeqEncoder)).output;
        Some(project_on(tape, z, cfg.projector.depth, bound.get(Partition::ProjSeq)))
    } else {
        None
    };
    let structure = if cfg.fusion.uses_struct() {
        let z = encode_structure_on(tape, &protein.graph, &cfg.structure, bound.get(Partition::StructEncoder));
        Some(project_on(tape, z, cfg.projector.depth, bound.get(Partition::ProjStruct)))
    } else {
        None
    };
    fuse_on(tape, seq, structure, cfg.fusion)
}

fn check_inputs(cfg: &ModelConfig, proteins: &[Arc<ProteinInput>]) -> Result<()> {
    for p in proteins {
        if p.is_empty() {
            return Err(Error::EmptySequence);
        }
        if p.graph.rbf_count() != cfg.structure.d_edge {
            return Err(Error::ShapeMismatch(format!(
                "protein {} graph has {} edge features, encoder expects {}",
                p.id,
                p.graph.rbf_count(),
                cfg.structure.d_edge
            )));
        }
    }
    Ok(())
}

/// Per-example loss with gradients for the partitions in `keep`; the other
/// partitions of the returned set are empty.
pub fn example_loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    ex: &PreparedExample,
    keep: &[Partition],
) -> Result<(f64, ModelParams)> {
    check_inputs(cfg, &ex.proteins)?;
    let mut tape = Tape::new();
    let bound = BoundModel::new(params, &mut tape);
    let proteins = ex
        .proteins
        .iter()
        .map(|p| protein_on(&mut tape, p, cfg, &bound))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<usize> = proteins.iter().map(|&v| tape.value(v).nrows()).collect();
    let layout = decoder::SpliceLayout::new(&ex.question_ids, &rows, &ex.answer_ids)?;
    if layout.len() > cfg.decoder.max_positions {
        return Err(Error::ContextOverflow {
            len: layout.len(),
            max: cfg.decoder.max_positions,
        });
    }
    let x = layout.embed_on(&mut tape, bound.get(Partition::EmbedTable).var("tokens"), &proteins);
    let logits = decoder::decoder_logits_on(&mut tape, x, &cfg.decoder, bound.get(Partition::Decoder));
    let loss = tape.cross_entropy(logits, &layout.loss_targets());
    let value = tape.scalar(loss);
    let g = tape.backward(loss);
    let mut grads = ModelParams::default();
    for &p in keep {
        *grads.partition_mut(p) = bound.get(p).grads(&g);
    }
    Ok((value, grads))
}

/// Next-token loss over every text position of `ex`, with each protein
/// replaced by the given filler rows; gradients for the decoder and the
/// embedding table. Used to warm-start the decoder as a language model
/// before any protein-conditioned training.
pub fn filler_loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    ex: &PreparedExample,
    fillers: &[Matrix],
) -> Result<(f64, ModelParams)> {
    let rows: Vec<usize> = fillers.iter().map(Matrix::nrows).collect();
    let layout = decoder::SpliceLayout::new(&ex.question_ids, &rows, &ex.answer_ids)?;
    if layout.len() > cfg.decoder.max_positions {
        return Err(Error::ContextOverflow {
            len: layout.len(),
            max: cfg.decoder.max_positions,
        });
    }
    let mut tape = Tape::new();
    let dec = params.decoder.bind(&mut tape);
    let emb = params.embed_table.bind(&mut tape);
    let filler_vars: Vec<_> = fillers.iter().map(|f| tape.leaf(f.clone())).collect();
    let x = layout.embed_on(&mut tape, emb.var("tokens"), &filler_vars);
    let logits = decoder::decoder_logits_on(&mut tape, x, &cfg.decoder, &dec);
    let loss = tape.cross_entropy(logits, &layout.loss_targets());
    let value = tape.scalar(loss);
    let g = tape.backward(loss);
    let grads = ModelParams {
        decoder: dec.grads(&g),
        embed_table: emb.grads(&g),
        ..ModelParams::default()
    };
    Ok((value, grads))
}

/// Per-example loss without gradients.
pub fn example_loss(cfg: &ModelConfig, params: &ModelParams, ex: &PreparedExample) -> Result<f64> {
    let embeddings = embed_proteins(cfg, params, &ex.proteins)?;
    let x = decoder::assemble(&ex.question_ids, &embeddings, &ex.answer_ids, &cfg.decoder, &params.embed_table)?;
    decoder::forward_loss(&x, &cfg.decoder, &params.decoder)
}

/// Fused protein embeddings under the configured fusion mode.
pub fn embed_proteins(
    cfg: &ModelConfig,
    params: &ModelParams,
    proteins: &[Arc<ProteinInput>],
) -> Result<Vec<FusedProteinEmbedding>> {
    check_inputs(cfg, proteins)?;
    let mut tape = Tape::new();
    let bound = BoundModel::new(params, &mut tape);
    proteins
        .iter()
        .map(|p| {
            let v = protein_on(&mut tape, p, cfg, &bound)?;
            Ok(FusedProteinEmbedding {
                values: tape.value(v).clone(),
                length: p.len(),
                modality: ModalityFlags {
                    seq: cfg.fusion.uses_seq(),
                    structure: cfg.fusion.uses_struct(),
                },
            })
        })
        .collect()
}

/// Greedy answer ids for a question over the given proteins.
pub fn generate_answer(
    cfg: &ModelConfig,
    params: &ModelParams,
    proteins: &[Arc<ProteinInput>],
    question_ids: &[u32],
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let embeddings = embed_proteins(cfg, params, proteins)?;
    decoder::generate(
        question_ids,
        &embeddings,
        &cfg.decoder,
        &params.decoder,
        &params.embed_table,
        max_new_tokens,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{text_to_ids, tokenize_text};
    use crate::fixtures::random_structure;
    use crate::structure_encoder::StructureVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            graph: GraphConfig { k: 4, rbf_count: 4 },
            structure: StructureEncoderConfig {
                d_struct: 6,
                num_layers: 1,
                variant: StructureVariant::MpnnStyle,
                d_edge: 4,
            },
            sequence: SequenceEncoderConfig {
                d_seq: 8,
                num_layers: 1,
                num_heads: 2,
            },
            projector: ProjectorConfig {
                d_in_seq: 8,
                d_in_struct: 6,
                d_model: 8,
                hidden: 8,
                depth: 2,
            },
            decoder: DecoderConfig {
                d_model: 8,
                num_layers: 1,
                num_heads: 2,
                vocab_size: decoder::TEXT_VOCAB_SIZE,
                max_positions: 64,
            },
            fusion: FusionMode::Add,
        }
    }

    fn example(cfg: &ModelConfig, seed: u64) -> PreparedExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_structure("p", 5, &mut rng);
        PreparedExample {
            proteins: vec![Arc::new(ProteinInput::from_structure(&s, cfg.graph).unwrap())],
            question_ids: tokenize_text("What is <protein>?"),
            answer_ids: text_to_ids("ok"),
        }
    }

    #[test]
    fn default_config_is_consistent() {
        ModelConfig::default().validate().unwrap();
        let cfg = toy_config();
        let p = init_model(&cfg, 1).unwrap();
        cfg.check_params(&p).unwrap();
        assert_ne!(p.proj_seq, init_model(&cfg, 2).unwrap().proj_seq);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut cfg = toy_config();
        cfg.projector.d_model = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tape_loss_matches_inference_loss() {
        for fusion in [FusionMode::Add, FusionMode::ConcatTokens, FusionMode::SeqOnly, FusionMode::StructOnly] {
            let cfg = ModelConfig { fusion, ..toy_config() };
            let p = init_model(&cfg, 3).unwrap();
            let ex = example(&cfg, 4);
            let (a, grads) = example_loss_and_grads(&cfg, &p, &ex, &Partition::ALL).unwrap();
            let b = example_loss(&cfg, &p, &ex).unwrap();
            assert!((a - b).abs() < 1e-12, "{fusion:?}");
            assert!(grads.all_finite());
            let struct_grad = grads.struct_encoder.sum_squares();
            assert_eq!(struct_grad > 0.0, fusion.uses_struct(), "{fusion:?}");
        }
    }

    #[test]
    fn protein_embedding_conditions_the_loss() {
        let cfg = toy_config();
        let mut changed = 0;
        for draw in 0..20 {
            let p = init_model(&cfg, draw).unwrap();
            let ex = example(&cfg, 100 + draw);
            let emb = embed_proteins(&cfg, &p, &ex.proteins).unwrap();
            let loss = |e: &[FusedProteinEmbedding]| {
                let x = decoder::assemble(&ex.question_ids, e, &ex.answer_ids, &cfg.decoder, &p.embed_table).unwrap();
                decoder::forward_loss(&x, &cfg.decoder, &p.decoder).unwrap()
            };
            let mut moved = emb.clone();
            moved[0].values.mapv_inplace(|v| v * 1.5 + 0.1);
            if loss(&moved) != loss(&emb) {
                changed += 1;
            }
        }
        assert!(changed >= 19, "{changed}/20");
    }

    #[test]
    fn rows_after_the_last_loss_position_are_ignored() {
        let cfg = toy_config();
        let p = init_model(&cfg, 7).unwrap();
        let ex = example(&cfg, 8);
        let emb = embed_proteins(&cfg, &p, &ex.proteins).unwrap();
        let x = decoder::assemble(&ex.question_ids, &emb, &ex.answer_ids, &cfg.decoder, &p.embed_table).unwrap();
        let n = x.len();
        assert!(x.loss_mask[n - 1], "final row predicts EOS");
        let mut y = x.clone();
        let mut rows = Matrix::zeros((n + 3, cfg.decoder.d_model));
        rows.slice_mut(ndarray::s![..n, ..]).assign(&x.embedding_rows);
        y.embedding_rows = rows;
        y.loss_mask.extend([false; 3]);
        y.targets.extend([None; 3]);
        y.segment_tags.extend([*x.segment_tags.last().unwrap(); 3]);
        let mut z = y.clone();
        z.embedding_rows.slice_mut(ndarray::s![n.., ..]).fill(9.0);
        let a = decoder::forward_loss(&y, &cfg.decoder, &p.decoder).unwrap();
        let b = decoder::forward_loss(&z, &cfg.decoder, &p.decoder).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn concat_mode_doubles_protein_rows() {
        let base = toy_config();
        let ex = example(&base, 5);
        let rows = |fusion| {
            let cfg = ModelConfig { fusion, ..base };
            let p = init_model(&cfg, 1).unwrap();
            embed_proteins(&cfg, &p, &ex.proteins).unwrap()[0].rows()
        };
        assert_eq!(rows(FusionMode::Add), 5);
        assert_eq!(rows(FusionMode::ConcatTokens), 10);
    }
}
