//! Two-stage training with partition freezing, and checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"PFCK" | version u32 | config hash u64 | payload length u64 | sha256(payload) [32]
//! payload = meta length u64 | meta JSON | array data
//! ```
//!
//! The meta JSON holds the model config, counters and the name and shape of
//! every array; array data follows in that order as `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::{example_loss_and_grads, ModelConfig, PreparedExample};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, Moments};
use crate::params::{ModelParams, ParamSet, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ProjectionTuning,
    SupervisedFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::ProjectionTuning => "projection_tuning",
            Stage::SupervisedFinetune => "supervised_finetune",
        }
    }

    /// Accepts the full names and the short forms `stage1` / `stage2`.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "projection_tuning" | "stage1" | "1" => Some(Stage::ProjectionTuning),
            "supervised_finetune" | "stage2" | "2" => Some(Stage::SupervisedFinetune),
            _ => None,
        }
    }

    pub fn trainable(self) -> Vec<Partition> {
        match self {
            Stage::ProjectionTuning => vec![Partition::ProjStruct, Partition::ProjSeq],
            Stage::SupervisedFinetune => vec![
                Partition::StructEncoder,
                Partition::SeqEncoder,
                Partition::ProjStruct,
                Partition::ProjSeq,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<Partition>,
    pub lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub duration: Duration,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

/// Learning rate of the desk preset, both stages.
pub const DESK_LR: f64 = 3e-3;
pub const DESK_STEPS: usize = 300;
pub const DESK_BATCH: usize = 8;

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidOverride {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn positive<T: std::str::FromStr + PartialOrd + Default>(key: &str, value: &str) -> Result<T> {
    let v: T = value
        .trim()
        .parse()
        .map_err(|_| bad(key, format!("cannot parse {value:?}")))?;
    if v <= T::default() {
        return Err(bad(key, "must be positive"));
    }
    Ok(v)
}

/// Full-scale defaults for `stage`, then `overrides` applied in order.
///
/// Keys: `preset` (`standard` or `desk`), `lr`, `batch_size`, `steps`, `epochs`,
/// `schedule`, `weight_decay`, `clip_norm`.
pub fn make_stage_plan(stage: Stage, overrides: &[(String, String)]) -> Result<StagePlan> {
    let (lr, batch_size, duration) = match stage {
        Stage::ProjectionTuning => (2e-4, 64, Duration::Epochs(2)),
        Stage::SupervisedFinetune => (2e-5, 32, Duration::Steps(25_000)),
    };
    let mut plan = StagePlan {
        stage,
        trainable: stage.trainable(),
        lr,
        schedule: Schedule::Cosine,
        batch_size,
        duration,
        weight_decay: AdamWConfig::default().weight_decay,
        clip_norm: 1.0,
    };
    for (key, value) in overrides {
        let key = key.as_str();
        match key {
            "preset" => match value.as_str() {
                "standard" => {
                    let fresh = make_stage_plan(stage, &[])?;
                    plan.lr = fresh.lr;
                    plan.batch_size = fresh.batch_size;
                    plan.duration = fresh.duration;
                }
                "desk" => {
                    plan.lr = DESK_LR;
                    plan.batch_size = DESK_BATCH;
                    plan.duration = Duration::Steps(DESK_STEPS);
                }
                other => return Err(bad(key, format!("unknown preset {other:?}"))),
            },
            "lr" => plan.lr = positive(key, value)?,
            "batch_size" => plan.batch_size = positive(key, value)?,
            "steps" => plan.duration = Duration::Steps(positive(key, value)?),
            "epochs" => plan.duration = Duration::Epochs(positive(key, value)?),
            "schedule" => {
                if value != "cosine" {
                    return Err(bad(key, format!("unsupported schedule {value:?}")));
                }
            }
            "weight_decay" => {
                plan.weight_decay = value
                    .parse()
                    .ok()
                    .filter(|v: &f64| *v >= 0.0 && v.is_finite())
                    .ok_or_else(|| bad(key, "must be a non-negative number"))?;
            }
            "clip_norm" => plan.clip_norm = positive(key, value)?,
            _ => return Err(bad(key, "unknown stage-plan key")),
        }
    }
    if !plan.lr.is_finite() {
        return Err(bad("lr", "must be finite"));
    }
    Ok(plan)
}

impl StagePlan {
    pub fn total_steps(&self, corpus_len: usize) -> usize {
        match self.duration {
            Duration::Steps(n) => n,
            Duration::Epochs(e) => e * corpus_len.div_ceil(self.batch_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Moments for every partition; frozen partitions keep all-zero moments.
    pub moments: BTreeMap<Partition, Moments>,
    /// Optimizer steps across all stages.
    pub step: u64,
    /// Steps taken in the current stage.
    pub stage_step: u64,
    pub stage: Option<Stage>,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

fn zero_moments(params: &ModelParams) -> BTreeMap<Partition, Moments> {
    Partition::ALL
        .iter()
        .map(|&p| (p, Moments::zeros_like(params.partition(p))))
        .collect()
}

impl TrainState {
    pub fn new(config: ModelConfig, params: ModelParams, seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        let moments = zero_moments(&params);
        Ok(Self {
            config,
            params,
            moments,
            step: 0,
            stage_step: 0,
            stage: None,
            seed,
            loss_history: Vec::new(),
        })
    }
}

/// Indices of the examples in batch `step`: batches are consecutive slices of
/// a stream of per-epoch seeded permutations.
pub fn batch_indices(seed: u64, stage: Stage, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    for slot in step * batch..(step + 1) * batch {
        let epoch = slot / n;
        if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let stream = seed
                .wrapping_mul(0x2545_f491_4f6c_dd1d)
                .wrapping_add((stage as u64) << 32 | epoch as u64);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
            epoch_cache = Some((epoch, order));
        }
        out.push(epoch_cache.as_ref().unwrap().1[slot % n]);
    }
    out
}

/// Mean loss of one batch and the batch-averaged gradients of `keep`.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    examples: &[&PreparedExample],
    keep: &[Partition],
) -> Result<(f64, ModelParams)> {
    let results: Vec<(f64, ModelParams)> = examples
        .par_iter()
        .map(|ex| example_loss_and_grads(cfg, params, ex, keep))
        .collect::<Result<_>>()?;
    let scale = 1.0 / examples.len() as f64;
    let mut grads = ModelParams::default();
    for &p in keep {
        *grads.partition_mut(p) = params.partition(p).zeros_like();
    }
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l * scale;
        for &p in keep {
            grads.partition_mut(p).add_scaled(g.partition(p), scale);
        }
    }
    Ok((loss, grads))
}

fn clip(grads: &mut ModelParams, keep: &[Partition], max_norm: f64) -> f64 {
    let norm = keep
        .iter()
        .map(|&p| grads.partition(p).sum_squares())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for &p in keep {
            for (_, g) in grads.partition_mut(p).iter_mut() {
                g.mapv_inplace(|v| v * s);
            }
        }
    }
    norm
}

/// Runs up to `max_steps` more steps of `plan`, stopping at its end.
/// Entering a new stage resets the optimizer moments.
pub fn train_steps(
    plan: &StagePlan,
    corpus: &[PreparedExample],
    mut state: TrainState,
    max_steps: usize,
) -> Result<TrainState> {
    if corpus.is_empty() {
        return Err(Error::TooFewExamples { needed: 1, got: 0 });
    }
    if plan.batch_size == 0 {
        return Err(bad("batch_size", "must be positive"));
    }
    state.config.check_params(&state.params)?;
    if state.stage != Some(plan.stage) {
        state.stage = Some(plan.stage);
        state.stage_step = 0;
        state.moments = zero_moments(&state.params);
    }
    let total = plan.total_steps(corpus.len());
    let adam = AdamWConfig {
        weight_decay: plan.weight_decay,
        ..AdamWConfig::default()
    };
    let start = state.stage_step as usize;
    let end = total.min(start.saturating_add(max_steps));
    for step in start..end {
        let idx = batch_indices(state.seed, plan.stage, step, plan.batch_size, corpus.len());
        let batch: Vec<&PreparedExample> = idx.iter().map(|&i| &corpus[i]).collect();
        let (loss, mut grads) = batch_loss_and_grads(&state.config, &state.params, &batch, &plan.trainable)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch: idx });
        }
        clip(&mut grads, &plan.trainable, plan.clip_norm);
        let lr = cosine_lr(plan.lr, step, total);
        for &p in &plan.trainable {
            let moments = state.moments.get_mut(&p).expect("moments for every partition");
            adamw_step(&adam, state.params.partition_mut(p), grads.partition(p), moments, lr);
        }
        if !state.params.all_finite() {
            return Err(Error::NonFiniteLoss { step, batch: idx });
        }
        state.loss_history.push(loss);
        state.step += 1;
        state.stage_step += 1;
        log::debug!("{} step {step} loss {loss:.4} lr {lr:.2e}", plan.stage.name());
    }
    Ok(state)
}

/// Runs the whole plan (or its remainder when resuming mid-stage).
pub fn train_stage(plan: &StagePlan, corpus: &[PreparedExample], state: TrainState) -> Result<TrainState> {
    train_steps(plan, corpus, state, usize::MAX)
}

/// Language-model warm start of the decoder and embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStartPlan {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Filler rows are uniform on `[-a, a]`.
    pub filler_amplitude: f64,
}

impl Default for WarmStartPlan {
    fn default() -> Self {
        Self {
            steps: 6000,
            lr: 3e-3,
            batch_size: 1,
            filler_amplitude: 0.2,
        }
    }
}

/// Uniform filler rows standing in for a protein of `rows` positions.
pub fn filler_rows(rows: usize, width: usize, amp: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_simple_fn((rows, width), || amp * rng.gen_range(-1.0..1.0))
}

/// Trains the decoder and embedding table as a plain language model over the
/// corpus text, with random filler rows at every placeholder. This supplies
/// the pretrained language model that both stages then keep frozen. Returns
/// the updated parameters and the loss history.
pub fn warm_start_decoder(
    cfg: &ModelConfig,
    mut params: ModelParams,
    corpus: &[PreparedExample],
    plan: &WarmStartPlan,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::TooFewExamples { needed: 1, got: 0 });
    }
    cfg.check_params(&params)?;
    let parts = [Partition::Decoder, Partition::EmbedTable];
    let mut moments: Vec<Moments> = parts.iter().map(|&p| Moments::zeros_like(params.partition(p))).collect();
    let adam = AdamWConfig::default();
    let mut history = Vec::with_capacity(plan.steps);
    let stream = seed ^ 0x5741_524d;
    for step in 0..plan.steps {
        let idx = batch_indices(stream, Stage::ProjectionTuning, step, plan.batch_size, corpus.len());
        let results: Vec<(f64, ModelParams)> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let ex = &corpus[i];
                let fillers: Vec<Matrix> = ex
                    .proteins
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let s = stream
                            .wrapping_mul(31)
                            .wrapping_add(((step * plan.batch_size + slot) * 4 + j) as u64);
                        filler_rows(cfg.fusion.token_count(p.len()), cfg.decoder.d_model, plan.filler_amplitude, s)
                    })
                    .collect();
                crate::model::filler_loss_and_grads(cfg, &params, ex, &fillers)
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        let mut grads = ModelParams::default();
        for &p in &parts {
            *grads.partition_mut(p) = params.partition(p).zeros_like();
        }
        for (l, g) in &results {
            loss += l * scale;
            for &p in &parts {
                grads.partition_mut(p).add_scaled(g.partition(p), scale);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch: idx });
        }
        clip(&mut grads, &parts, 1.0);
        let lr = cosine_lr(plan.lr, step, plan.steps);
        for (k, &p) in parts.iter().enumerate() {
            adamw_step(&adam, params.partition_mut(p), grads.partition(p), &mut moments[k], lr);
        }
        history.push(loss);
        log::debug!("warm start step {step} loss {loss:.4}");
    }
    Ok((params, history))
}

/// Exponential moving average, used to compare noisy loss curves.
pub fn smoothed(history: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len());
    let mut acc = None;
    for &v in history {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PFCK";

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    step: u64,
    stage_step: u64,
    stage: Option<Stage>,
    seed: u64,
    moment_steps: BTreeMap<Partition, u64>,
    arrays: Vec<ArrayMeta>,
}

pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn named_arrays(state: &TrainState) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    for p in Partition::ALL {
        for (name, m) in state.params.partition(p).iter() {
            out.push((format!("params/{p}/{name}"), m));
        }
    }
    for (p, m) in &state.moments {
        if m.is_zero() {
            continue;
        }
        for (name, a) in m.first.iter() {
            out.push((format!("m1/{p}/{name}"), a));
        }
        for (name, a) in m.second.iter() {
            out.push((format!("m2/{p}/{name}"), a));
        }
    }
    out
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let history = Matrix::from_shape_vec((1, state.loss_history.len()), state.loss_history.clone())
        .expect("row vector");
    let mut arrays = named_arrays(state);
    arrays.push(("loss_history".to_string(), &history));
    let meta = CheckpointMeta {
        config: state.config,
        step: state.step,
        stage_step: state.stage_step,
        stage: state.stage,
        seed: state.seed,
        moment_steps: state.moments.iter().map(|(&p, m)| (p, m.steps)).collect(),
        arrays: arrays
            .iter()
            .map(|(name, m)| ArrayMeta {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("meta serializes");
    let mut payload = Vec::new();
    payload.extend((meta.len() as u64).to_le_bytes());
    payload.extend(&meta);
    for (_, m) in &arrays {
        for v in m.iter() {
            payload.extend(v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 56);
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(config_hash(&state.config).to_le_bytes());
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend(Sha256::digest(&payload));
    out.extend(payload);
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, checkpoint_bytes(state)).map_err(|e| Error::io(path.display().to_string(), e))
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(reason.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(corrupt("truncated"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().unwrap()))
}

pub fn checkpoint_from_bytes(mut bytes: &[u8]) -> Result<TrainState> {
    let b = &mut bytes;
    if take(b, 4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(b, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash = take_u64(b)?;
    let len = take_u64(b)? as usize;
    let checksum = take(b, 32)?;
    let mut payload = take(b, len)?;
    if !b.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(corrupt("checksum mismatch"));
    }
    let p = &mut payload;
    let meta_len = take_u64(p)? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(take(p, meta_len)?).map_err(|e| corrupt(format!("meta: {e}")))?;
    if config_hash(&meta.config) != hash {
        return Err(Error::CheckpointConfig);
    }
    let mut params = ModelParams::default();
    let mut firsts: BTreeMap<Partition, ParamSet> = BTreeMap::new();
    let mut seconds: BTreeMap<Partition, ParamSet> = BTreeMap::new();
    let mut history = Vec::new();
    for a in &meta.arrays {
        let raw = take(p, a.rows * a.cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::from_shape_vec((a.rows, a.cols), values).map_err(|e| corrupt(e.to_string()))?;
        if a.name == "loss_history" {
            history = m.into_raw_vec_and_offset().0;
            continue;
        }
        let mut parts = a.name.splitn(3, '/');
        let (kind, part, name) = match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(p), Some(n)) => (k, p, n),
            _ => return Err(corrupt(format!("bad array name {}", a.name))),
        };
        let part = Partition::from_name(part).ok_or_else(|| corrupt(format!("unknown partition {part}")))?;
        let target = match kind {
            "params" => params.partition_mut(part),
            "m1" => firsts.entry(part).or_default(),
            "m2" => seconds.entry(part).or_default(),
            _ => return Err(corrupt(format!("bad array name {}", a.name))),
        };
        target.insert(name.to_string(), m);
    }
    if !p.is_empty() {
        return Err(corrupt("array data length mismatch"));
    }
    meta.config.check_params(&params).map_err(|e| corrupt(e.to_string()))?;
    let mut moments = zero_moments(&params);
    for (part, m) in moments.iter_mut() {
        m.steps = meta.moment_steps.get(part).copied().unwrap_or(0);
        if let Some(f) = firsts.remove(part) {
            m.first = f;
        }
        if let Some(s) = seconds.remove(part) {
            m.second = s;
        }
    }
    Ok(TrainState {
        config: meta.config,
        params,
        moments,
        step: meta.step,
        stage_step: meta.stage_step,
        stage: meta.stage,
        seed: meta.seed,
        loss_history: history,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes)
}
