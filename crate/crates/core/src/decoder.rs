//! Causal text decoder with protein rows spliced in at `<protein>` placeholders.
//!
//! Text is byte-level: ids `0..256` are raw bytes, followed by four reserved
//! ids. A question is tokenized as `BOS … EOS`; its closing `EOS` doubles as
//! the answer-start marker. The answer bytes follow it directly, and every
//! position from that marker on predicts the next answer byte, the last one
//! predicting `EOS`. A causal mask covers the whole spliced sequence,
//! protein rows included.

use serde::{Deserialize, Serialize};

use crate::autograd::{gelu_scalar, softmax_rows, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{block_specs, layer_norm, linear, sinusoidal_positions, transformer_block};
use crate::params::{BoundParams, Init, ParamSet, ParamSpec};
use crate::projector::FusedProteinEmbedding;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const PROTEIN_PLACEHOLDER: u32 = 259;
pub const TEXT_VOCAB_SIZE: usize = 260;
pub const PLACEHOLDER: &str = "<protein>";

/// Byte ids with each `<protein>` literal mapped to the placeholder id; no BOS/EOS.
pub fn text_to_ids(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(PLACEHOLDER) {
        ids.extend(rest[..pos].bytes().map(u32::from));
        ids.push(PROTEIN_PLACEHOLDER);
        rest = &rest[pos + PLACEHOLDER.len()..];
    }
    ids.extend(rest.bytes().map(u32::from));
    ids
}

/// `BOS`, the text ids, `EOS`.
pub fn tokenize_text(text: &str) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(text_to_ids(text));
    ids.push(EOS);
    ids
}

/// Bytes back to text; reserved ids are dropped.
pub fn detokenize_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            vocab_size: TEXT_VOCAB_SIZE,
            max_positions: 512,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config("decoder d_model must be divisible by num_heads".into()));
        }
        if self.vocab_size < TEXT_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "decoder vocabulary must hold at least {TEXT_VOCAB_SIZE} ids"
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for l in 0..self.num_layers {
            specs.extend(block_specs(&format!("layer{l}"), self.d_model));
        }
        specs.extend(ParamSpec::layer_norm("final_ln", self.d_model));
        specs.extend(ParamSpec::linear("lm_head", self.d_model, self.vocab_size));
        specs
    }

    pub fn embed_specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::new(
            "tokens",
            self.vocab_size,
            self.d_model,
            Init::Uniform(1.0),
        )]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    QuestionText,
    Protein,
    AnswerText,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(Vec<u32>),
    Protein(usize),
}

/// Positions, segment tags and next-token targets of a spliced sequence,
/// before any embedding happens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpliceLayout {
    pieces: Vec<(Piece, Segment)>,
    pub protein_rows: Vec<usize>,
    /// Token id at each position, `None` on protein rows.
    pub ids: Vec<Option<u32>>,
    /// Target of each position, `None` outside the answer span.
    pub targets: Vec<Option<u32>>,
    pub segments: Vec<Segment>,
}

impl SpliceLayout {
    pub fn new(question_ids: &[u32], protein_rows: &[usize], answer_ids: &[u32]) -> Result<Self> {
        let placeholders = question_ids
            .iter()
            .filter(|&&t| t == PROTEIN_PLACEHOLDER)
            .count();
        if placeholders != protein_rows.len() {
            return Err(Error::PlaceholderMismatch {
                placeholders,
                proteins: protein_rows.len(),
            });
        }
        let question = match question_ids.last() {
            Some(&EOS) => &question_ids[..question_ids.len() - 1],
            _ => question_ids,
        };
        let mut pieces = Vec::new();
        let mut segments = Vec::new();
        let mut text = Vec::new();
        let mut next_protein = 0;
        for &t in question {
            if t == PROTEIN_PLACEHOLDER {
                if !text.is_empty() {
                    pieces.push((Piece::Text(std::mem::take(&mut text)), Segment::QuestionText));
                }
                pieces.push((Piece::Protein(next_protein), Segment::Protein));
                segments.extend(std::iter::repeat_n(Segment::Protein, protein_rows[next_protein]));
                next_protein += 1;
            } else {
                text.push(t);
                segments.push(Segment::QuestionText);
            }
        }
        if !text.is_empty() {
            pieces.push((Piece::Text(text), Segment::QuestionText));
        }
        let mut answer = vec![EOS];
        answer.extend_from_slice(answer_ids);
        segments.extend(std::iter::repeat_n(Segment::AnswerText, answer.len()));
        pieces.push((Piece::Text(answer), Segment::AnswerText));

        let mut ids = Vec::with_capacity(segments.len());
        for (piece, _) in &pieces {
            match piece {
                Piece::Text(t) => ids.extend(t.iter().map(|&i| Some(i))),
                Piece::Protein(i) => ids.extend(std::iter::repeat_n(None, protein_rows[*i])),
            }
        }
        let mut targets = vec![None; segments.len()];
        if !answer_ids.is_empty() {
            let start = segments.len() - answer_ids.len() - 1;
            for (i, &t) in answer_ids.iter().chain(std::iter::once(&EOS)).enumerate() {
                targets[start + i] = Some(t);
            }
        }
        Ok(Self {
            pieces,
            protein_rows: protein_rows.to_vec(),
            ids,
            targets,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Every position followed by a text token, paired with that token.
    pub fn text_targets(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .ids
            .windows(2)
            .enumerate()
            .filter_map(|(p, w)| w[1].map(|t| (p, t as usize)))
            .collect();
        if let Some(&Some(t)) = self.targets.last() {
            out.push((self.len() - 1, t as usize));
        }
        out
    }

    pub fn loss_targets(&self) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(p, t)| t.map(|t| (p, t as usize)))
            .collect()
    }

    /// Embeds text pieces through `embed` and splices `proteins` in order.
    pub fn embed_on(&self, tape: &mut Tape, embed: Var, proteins: &[Var]) -> Var {
        let parts: Vec<Var> = self
            .pieces
            .iter()
            .map(|(piece, _)| match piece {
                Piece::Text(ids) => {
                    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                    tape.gather_rows(embed, &rows)
                }
                Piece::Protein(i) => proteins[*i],
            })
            .collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        }
    }
}

/// A fully embedded decoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct SplicedInput {
    pub embedding_rows: Matrix,
    pub loss_mask: Vec<bool>,
    pub targets: Vec<Option<u32>>,
    pub segment_tags: Vec<Segment>,
}

impl SplicedInput {
    pub fn len(&self) -> usize {
        self.embedding_rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embedding_rows.nrows() == 0
    }
}

/// Replaces each placeholder by its protein's rows and embeds all text.
pub fn assemble(
    question_ids: &[u32],
    proteins: &[FusedProteinEmbedding],
    answer_ids: &[u32],
    cfg: &DecoderConfig,
    embed_table: &ParamSet,
) -> Result<SplicedInput> {
    embed_table.check_shapes(&cfg.embed_specs(), "embedding table")?;
    if let Some(p) = proteins.iter().find(|p| p.values.ncols() != cfg.d_model) {
        return Err(Error::ShapeMismatch(format!(
            "protein embedding width {} does not match d_model {}",
            p.values.ncols(),
            cfg.d_model
        )));
    }
    let rows: Vec<usize> = proteins.iter().map(FusedProteinEmbedding::rows).collect();
    let layout = SpliceLayout::new(question_ids, &rows, answer_ids)?;
    let mut tape = Tape::new();
    let embed = tape.leaf(embed_table.get("tokens").unwrap().clone());
    let protein_vars: Vec<Var> = proteins.iter().map(|p| tape.leaf(p.values.clone())).collect();
    let x = layout.embed_on(&mut tape, embed, &protein_vars);
    Ok(SplicedInput {
        embedding_rows: tape.value(x).clone(),
        loss_mask: layout.targets.iter().map(Option::is_some).collect(),
        targets: layout.targets.clone(),
        segment_tags: layout.segments.clone(),
    })
}

/// Causal decoder over `T × d_model` input rows; returns `T × vocab` logits.
pub fn decoder_logits_on(
    tape: &mut Tape,
    rows: Var,
    cfg: &DecoderConfig,
    params: &BoundParams,
) -> Var {
    let t = tape.value(rows).nrows();
    let pos = tape.leaf(sinusoidal_positions(t, cfg.d_model));
    let mut x = tape.add(rows, pos);
    for l in 0..cfg.num_layers {
        x = transformer_block(tape, x, params, &format!("layer{l}"), cfg.num_heads, true).0;
    }
    let x = layer_norm(tape, x, params, "final_ln");
    linear(tape, x, params, "lm_head")
}

fn check_decoder(cfg: &DecoderConfig, params: &ParamSet, len: usize) -> Result<()> {
    cfg.validate()?;
    params.check_shapes(&cfg.param_specs(), "decoder")?;
    if len > cfg.max_positions {
        return Err(Error::ContextOverflow {
            len,
            max: cfg.max_positions,
        });
    }
    Ok(())
}

pub fn logits(x: &SplicedInput, cfg: &DecoderConfig, params: &ParamSet) -> Result<Matrix> {
    check_decoder(cfg, params, x.len())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let rows = tape.leaf(x.embedding_rows.clone());
    let out = decoder_logits_on(&mut tape, rows, cfg, &bound);
    Ok(tape.value(out).clone())
}

/// Mean next-token negative log-likelihood over the loss positions.
pub fn forward_loss(x: &SplicedInput, cfg: &DecoderConfig, params: &ParamSet) -> Result<f64> {
    check_decoder(cfg, params, x.len())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let rows = tape.leaf(x.embedding_rows.clone());
    let out = decoder_logits_on(&mut tape, rows, cfg, &bound);
    let targets: Vec<(usize, usize)> = x
        .targets
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| (p, t as usize)))
        .collect();
    let loss = tape.cross_entropy(out, &targets);
    Ok(tape.scalar(loss))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct LayerCache {
    keys: Matrix,
    values: Matrix,
}

/// Incremental inference state: per-layer keys and values of every position
/// seen so far.
pub struct DecoderCache<'a> {
    cfg: &'a DecoderConfig,
    params: &'a ParamSet,
    layers: Vec<LayerCache>,
    positions: Matrix,
    len: usize,
}

fn p<'a>(params: &'a ParamSet, name: &str) -> &'a Matrix {
    params.get(name).expect("decoder params validated")
}

fn dense(x: &Matrix, params: &ParamSet, prefix: &str) -> Matrix {
    x.dot(p(params, &format!("{prefix}.w"))) + p(params, &format!("{prefix}.b"))
}

fn norm(x: &Matrix, params: &ParamSet, prefix: &str) -> Matrix {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(p(params, &format!("{prefix}.g")).clone());
    let b = tape.leaf(p(params, &format!("{prefix}.b")).clone());
    let out = tape.layer_norm(xv, g, b);
    tape.value(out).clone()
}

impl<'a> DecoderCache<'a> {
    pub fn new(cfg: &'a DecoderConfig, params: &'a ParamSet) -> Result<Self> {
        check_decoder(cfg, params, 0)?;
        let empty = || Matrix::zeros((0, cfg.d_model));
        Ok(Self {
            cfg,
            params,
            layers: (0..cfg.num_layers)
                .map(|_| LayerCache {
                    keys: empty(),
                    values: empty(),
                })
                .collect(),
            positions: sinusoidal_positions(cfg.max_positions, cfg.d_model),
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds `rows` after everything already cached; returns their logits.
    pub fn extend(&mut self, rows: &Matrix) -> Result<Matrix> {
        let n = rows.nrows();
        if self.len + n > self.cfg.max_positions {
            return Err(Error::ContextOverflow {
                len: self.len + n,
                max: self.cfg.max_positions,
            });
        }
        let start = self.len;
        let mut x = rows + &self.positions.slice(ndarray::s![start..start + n, ..]);
        let heads = self.cfg.num_heads;
        let hw = self.cfg.d_model / heads;
        let scale = 1.0 / (hw as f64).sqrt();
        for l in 0..self.cfg.num_layers {
            let pre = format!("layer{l}");
            let n1 = norm(&x, self.params, &format!("{pre}.ln1"));
            let q = dense(&n1, self.params, &format!("{pre}.attn.q"));
            let k = dense(&n1, self.params, &format!("{pre}.attn.k"));
            let v = dense(&n1, self.params, &format!("{pre}.attn.v"));
            let cache = &mut self.layers[l];
            cache.keys = ndarray::concatenate![ndarray::Axis(0), cache.keys, k];
            cache.values = ndarray::concatenate![ndarray::Axis(0), cache.values, v];
            let total = cache.keys.nrows();
            let mut joined = Matrix::zeros((n, self.cfg.d_model));
            for h in 0..heads {
                let cols = ndarray::s![.., h * hw..(h + 1) * hw];
                let mut scores = q.slice(cols).dot(&cache.keys.slice(cols).t()) * scale;
                for i in 0..n {
                    for j in (start + i + 1)..total {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                let probs = softmax_rows(&scores);
                joined
                    .slice_mut(cols)
                    .assign(&probs.dot(&cache.values.slice(cols)));
            }
            x = x + dense(&joined, self.params, &format!("{pre}.attn.o"));
            let n2 = norm(&x, self.params, &format!("{pre}.ln2"));
            let h = dense(&n2, self.params, &format!("{pre}.ff1")).mapv(gelu_scalar);
            x = x + dense(&h, self.params, &format!("{pre}.ff2"));
        }
        self.len += n;
        let x = norm(&x, self.params, "final_ln");
        Ok(dense(&x, self.params, "lm_head"))
    }
}

/// Greedy continuation of the assembled question until `EOS` or
/// `max_new_tokens`. The returned ids exclude the terminating `EOS`.
pub fn generate(
    question_ids: &[u32],
    proteins: &[FusedProteinEmbedding],
    cfg: &DecoderConfig,
    decoder: &ParamSet,
    embed_table: &ParamSet,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let prefix = assemble(question_ids, proteins, &[], cfg, embed_table)?;
    generate_from_rows(&prefix.embedding_rows, cfg, decoder, embed_table, max_new_tokens)
}

pub fn generate_from_rows(
    prefix: &Matrix,
    cfg: &DecoderConfig,
    decoder: &ParamSet,
    embed_table: &ParamSet,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let needed = prefix.nrows() + max_new_tokens;
    if needed > cfg.max_positions {
        return Err(Error::ContextOverflow {
            len: needed,
            max: cfg.max_positions,
        });
    }
    let table = embed_table.get("tokens").expect("embedding table validated");
    let mut cache = DecoderCache::new(cfg, decoder)?;
    let mut logits = cache.extend(prefix)?;
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let next = argmax(logits.row(logits.nrows() - 1)) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        let row = table.slice(ndarray::s![next as usize..next as usize + 1, ..]).to_owned();
        logits = cache.extend(&row)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{jitter, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            vocab_size: TEXT_VOCAB_SIZE,
            max_positions: 64,
        }
    }

    fn protein(rows: usize, d: usize, seed: u64) -> FusedProteinEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusedProteinEmbedding {
            values: Matrix::from_shape_simple_fn((rows, d), || rng.gen_range(-1.0..1.0)),
            length: rows,
            modality: crate::projector::ModalityFlags {
                seq: true,
                structure: true,
            },
        }
    }

    fn params(cfg: &DecoderConfig, seed: u64) -> (ParamSet, ParamSet) {
        (
            ParamSet::init(&cfg.param_specs(), seed),
            ParamSet::init(&cfg.embed_specs(), seed + 1),
        )
    }

    #[test]
    fn tokenizer_specials() {
        assert_eq!(tokenize_text(""), vec![BOS, EOS]);
        assert_eq!(tokenize_text("<protein>"), vec![BOS, PROTEIN_PLACEHOLDER, EOS]);
        assert_eq!(tokenize_text("a<protein>b"), vec![BOS, 97, PROTEIN_PLACEHOLDER, 98, EOS]);
    }

    #[test]
    fn tokenizer_round_trips_ascii() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let len = rng.gen_range(0..40);
            let s: String = (0..len).map(|_| rng.gen_range(32u8..127) as char).collect();
            if s.contains(PLACEHOLDER) {
                continue;
            }
            assert_eq!(detokenize_text(&tokenize_text(&s)), s);
        }
    }

    #[test]
    fn splice_arithmetic() {
        let cfg = tiny();
        let (_, embed) = params(&cfg, 0);
        let q = tokenize_text("Describe <protein>.");
        let x = assemble(&q, &[protein(4, 8, 1)], &[1, 2, 3], &cfg, &embed).unwrap();
        assert_eq!(x.len(), q.len() - 1 + 4 + 3);
        assert_eq!(x.loss_mask.iter().filter(|&&m| m).count(), 4);
        for (tag, &m) in x.segment_tags.iter().zip(&x.loss_mask) {
            if *tag != Segment::AnswerText {
                assert!(!m);
            }
        }
        assert_eq!(x.targets.iter().flatten().copied().collect::<Vec<_>>(), vec![1, 2, 3, EOS]);
        let protein_rows = x.segment_tags.iter().filter(|&&t| t == Segment::Protein).count();
        assert_eq!(protein_rows, 4);
    }

    #[test]
    fn two_proteins_are_spliced_in_order() {
        let cfg = tiny();
        let (_, embed) = params(&cfg, 0);
        let q = tokenize_text("Do <protein> and <protein> interact?");
        let a = protein(3, 8, 1);
        let b = protein(5, 8, 2);
        let x = assemble(&q, &[a.clone(), b.clone()], &[65], &cfg, &embed).unwrap();
        let mut runs = Vec::new();
        let mut start = None;
        for (i, t) in x.segment_tags.iter().enumerate() {
            match (t, start) {
                (Segment::Protein, None) => start = Some(i),
                (Segment::Protein, Some(_)) => {}
                (_, Some(s)) => {
                    runs.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        assert_eq!(runs.iter().map(|r| r.1).collect::<Vec<_>>(), vec![3, 5]);
        assert_eq!(x.embedding_rows.row(runs[0].0), a.values.row(0));
        assert_eq!(x.embedding_rows.row(runs[1].0), b.values.row(0));
    }

    #[test]
    fn placeholder_count_must_match() {
        let cfg = tiny();
        let (_, embed) = params(&cfg, 0);
        let q = tokenize_text("<protein> and <protein>");
        assert!(matches!(
            assemble(&q, &[protein(3, 8, 1)], &[65], &cfg, &embed),
            Err(Error::PlaceholderMismatch { placeholders: 2, proteins: 1 })
        ));
    }

    #[test]
    fn empty_answer_has_no_loss_positions() {
        let cfg = tiny();
        let (_, embed) = params(&cfg, 0);
        let x = assemble(&tokenize_text("q <protein>"), &[protein(2, 8, 1)], &[], &cfg, &embed)
            .unwrap();
        assert!(x.loss_mask.iter().all(|&m| !m));
    }

    #[test]
    fn context_overflow() {
        let cfg = DecoderConfig {
            max_positions: 10,
            ..tiny()
        };
        let (dec, embed) = params(&cfg, 0);
        let x = assemble(&tokenize_text("a long question"), &[], &[65], &cfg, &embed).unwrap();
        assert!(matches!(forward_loss(&x, &cfg, &dec), Err(Error::ContextOverflow { .. })));
        assert!(matches!(
            generate(&tokenize_text("abc"), &[], &cfg, &dec, &embed, 8),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn future_positions_do_not_change_logits() {
        let cfg = tiny();
        let (dec, embed) = params(&cfg, 3);
        let x = assemble(&tokenize_text("ab<protein>cd"), &[protein(3, 8, 4)], &[70, 71, 72], &cfg, &embed)
            .unwrap();
        let base = logits(&x, &cfg, &dec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 0..x.len() {
            let mut y = x.clone();
            for v in y.embedding_rows.row_mut(t) {
                *v += rng.gen_range(-1.0..1.0);
            }
            let changed = logits(&y, &cfg, &dec).unwrap();
            for r in 0..t {
                assert_eq!(base.row(r), changed.row(r), "row {r} moved after perturbing {t}");
            }
        }
    }

    #[test]
    fn cached_inference_matches_full_forward() {
        let cfg = tiny();
        let (dec, embed) = params(&cfg, 5);
        let x = assemble(&tokenize_text("q<protein>"), &[protein(4, 8, 6)], &[80, 81, 82], &cfg, &embed)
            .unwrap();
        let full = logits(&x, &cfg, &dec).unwrap();
        let mut cache = DecoderCache::new(&cfg, &dec).unwrap();
        let split = 5;
        let a = cache
            .extend(&x.embedding_rows.slice(ndarray::s![..split, ..]).to_owned())
            .unwrap();
        let b = cache
            .extend(&x.embedding_rows.slice(ndarray::s![split.., ..]).to_owned())
            .unwrap();
        let cached = ndarray::concatenate![ndarray::Axis(0), a, b];
        for (u, v) in full.iter().zip(cached.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn constructed_head_always_emits_seven() {
        let cfg = tiny();
        let (mut dec, embed) = params(&cfg, 0);
        dec.get_mut("lm_head.w").unwrap().fill(0.0);
        let b = dec.get_mut("lm_head.b").unwrap();
        b.fill(0.0);
        b[[0, 7]] = 10.0;
        let out = generate(&tokenize_text("hi"), &[], &cfg, &dec, &embed, 6).unwrap();
        assert_eq!(out, vec![7; 6]);
    }

    #[test]
    fn argmax_ties_go_low() {
        let row = ndarray::array![0.5, 2.0, 2.0, 1.0];
        assert_eq!(argmax(row.view()), 1);
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let cfg = tiny();
        let (mut dec, embed) = params(&cfg, 0);
        dec.get_mut("lm_head.w").unwrap().fill(0.0);
        let x = assemble(&tokenize_text("q"), &[], &[65, 66], &cfg, &embed).unwrap();
        let loss = forward_loss(&x, &cfg, &dec).unwrap();
        assert!((loss - (TEXT_VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        let (dec, _) = params(&cfg, 1);
        let random = forward_loss(&x, &cfg, &dec).unwrap();
        let uniform = (TEXT_VOCAB_SIZE as f64).ln();
        assert!((random - uniform).abs() / uniform < 0.05, "{random}");
    }

    #[test]
    fn loss_is_mean_of_independent_cross_entropies() {
        let cfg = tiny();
        let (dec, embed) = params(&cfg, 2);
        let x = assemble(&tokenize_text("z<protein>"), &[protein(2, 8, 3)], &[90, 91, 92, 93], &cfg, &embed)
            .unwrap();
        let l = logits(&x, &cfg, &dec).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for (pos, t) in x.targets.iter().enumerate() {
            if let Some(t) = t {
                let row = l.row(pos);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                sum += lse - row[*t as usize];
                n += 1;
            }
        }
        let loss = forward_loss(&x, &cfg, &dec).unwrap();
        assert!((loss - sum / n as f64).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DecoderConfig {
            vocab_size: TEXT_VOCAB_SIZE,
            ..tiny()
        };
        let (dec, embed) = params(&cfg, 6);
        let dec = jitter(&dec, 0.1, 2);
        let x = assemble(&tokenize_text("ab<protein>"), &[protein(2, 8, 1)], &[70, 71], &cfg, &embed)
            .unwrap();
        let err = max_relative_error(&dec, |tape, bound| {
            let rows = tape.leaf(x.embedding_rows.clone());
            let logits = decoder_logits_on(tape, rows, &cfg, bound);
            tape.cross_entropy(logits, &[(3, 70), (4, 71), (5, EOS as usize)])
        });
        assert!(err <= 1e-3, "relative error {err}");
    }
}
