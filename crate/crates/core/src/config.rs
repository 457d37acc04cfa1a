//! Run configuration: one TOML file drives every command, with dotted-key
//! overrides from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::projector::FusionMode;
use crate::training::{make_stage_plan, Stage, StagePlan, WarmStartPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Directory of `.pdb` files, one protein each, named by protein id.
    pub structures: PathBuf,
    pub annotations: PathBuf,
    /// Holds `<task>.tsv` manifests; missing tasks are skipped.
    pub peer_dir: PathBuf,
    /// Holds `<task>.jsonl` Mol-Instructions records; missing tasks are skipped.
    pub molinst_dir: PathBuf,
    /// Compare manifest split counts with the published sizes.
    pub reference_data: bool,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            structures: "structures".into(),
            annotations: "annotations.tsv".into(),
            peer_dir: "peer".into(),
            molinst_dir: "molinst".into(),
            reference_data: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Stage2Only,
    Stage1Stage2,
}

impl Recipe {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            Recipe::Stage2Only => vec![Stage::SupervisedFinetune],
            Recipe::Stage1Stage2 => vec![Stage::ProjectionTuning, Stage::SupervisedFinetune],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub recipe: Recipe,
    /// Stage-plan overrides, e.g. `preset = "desk"`, `lr = 1e-3`.
    pub stage1: BTreeMap<String, toml::Value>,
    pub stage2: BTreeMap<String, toml::Value>,
    pub warm_start: WarmStartPlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Stage1Stage2,
            stage1: BTreeMap::new(),
            stage2: BTreeMap::new(),
            warm_start: WarmStartPlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Which split of the fine-tuning data to answer: `test`, `valid` or `train`.
    pub split: String,
    pub max_new_tokens: usize,
    /// Cap on examples per task; 0 keeps all.
    pub max_per_task: usize,
    /// Number of seed runs a report must aggregate.
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            max_new_tokens: 96,
            max_per_task: 0,
            runs: crate::evaluation::DEFAULT_RUNS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Full,
    NoStructure,
    NoSequence,
    NoFusion,
    NoStage1,
}

impl AblationRow {
    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoStructure => "no_structure",
            AblationRow::NoSequence => "no_sequence",
            AblationRow::NoFusion => "no_fusion",
            AblationRow::NoStage1 => "no_stage1",
        }
    }

    /// The base config with this row's change applied.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            AblationRow::Full => {}
            AblationRow::NoStructure => cfg.model.fusion = FusionMode::SeqOnly,
            AblationRow::NoSequence => cfg.model.fusion = FusionMode::StructOnly,
            AblationRow::NoFusion => cfg.model.fusion = FusionMode::ConcatTokens,
            AblationRow::NoStage1 => cfg.train.recipe = Recipe::Stage2Only,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rows: Vec<AblationRow>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rows: vec![
                AblationRow::Full,
                AblationRow::NoStructure,
                AblationRow::NoSequence,
                AblationRow::NoFusion,
                AblationRow::NoStage1,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Seed of the shared language-model warm start.
    pub base_seed: u64,
    /// Seed of template choice and dataset splitting.
    pub data_seed: u64,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: "out".into(),
            seeds: vec![0, 1, 2],
            base_seed: 1234,
            data_seed: 7,
            data: DataPaths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn value_to_override(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if crate::instruction_data::Split::from_name(&self.eval.split).is_none() {
            return Err(Error::Config(format!("unknown eval split {:?}", self.eval.split)));
        }
        for stage in [Stage::ProjectionTuning, Stage::SupervisedFinetune] {
            self.stage_plan(stage)?;
        }
        let ws = &self.train.warm_start;
        if ws.batch_size == 0 || !(ws.lr.is_finite() && ws.lr >= 0.0) {
            return Err(Error::Config("warm_start needs batch_size >= 1 and a finite lr >= 0".into()));
        }
        if !(ws.filler_amplitude.is_finite() && ws.filler_amplitude >= 0.0) {
            return Err(Error::Config("warm_start.filler_amplitude must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn stage_plan(&self, stage: Stage) -> Result<StagePlan> {
        let table = match stage {
            Stage::ProjectionTuning => &self.train.stage1,
            Stage::SupervisedFinetune => &self.train.stage2,
        };
        let mut overrides: Vec<(String, String)> = Vec::new();
        // The preset goes first so explicit keys win over it.
        if let Some(p) = table.get("preset") {
            overrides.push(("preset".into(), value_to_override(p)));
        }
        for (k, v) in table {
            if k != "preset" {
                overrides.push((k.clone(), value_to_override(v)));
            }
        }
        make_stage_plan(stage, &overrides)
    }

    /// Relative paths are taken from `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.structures);
        fix(&mut self.data.annotations);
        fix(&mut self.data.peer_dir);
        fix(&mut self.data.molinst_dir);
    }
}

/// Parses `key.path=value`; the value is read as TOML and falls back to a
/// plain string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::InvalidOverride {
        key: spec.to_string(),
        reason: "expected key=value".into(),
    })?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::InvalidOverride {
            key: key.to_string(),
            reason: "empty key segment".into(),
        });
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::InvalidOverride {
            key: path.join("."),
            reason: format!("{seg} is not a table"),
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses config text with overrides applied; paths are left as written.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        apply_override(&mut table, &path, value)?;
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file; relative paths resolve against its directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cfg = parse_config(&text, overrides)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

/// Commented config for the synthetic desk corpus.
pub const DESK_CONFIG: &str = r#"# Run configuration. Relative paths resolve against this file's directory.
# Any key can be overridden on the command line, e.g.
#   --set train.stage2.steps=100 --set model.fusion=concat_tokens

output_dir = "out"
# One model is trained and evaluated per seed; reports aggregate over them.
seeds = [0, 1, 2]
# Seed of the language-model warm start shared by all seeds.
base_seed = 1234
# Seed of template choice and of the Mol-Instructions 8:1:1 split.
data_seed = 7

[data]
structures = "structures"
annotations = "annotations.tsv"
peer_dir = "peer"
molinst_dir = "molinst"
reference_data = false

[model]
# add | concat_tokens | seq_only | struct_only
fusion = "add"

[model.graph]
k = 8
rbf_count = 16

[model.decoder]
d_model = 64
num_layers = 2
num_heads = 4
max_positions = 512

[train]
# stage1_stage2 | stage2_only
recipe = "stage1_stage2"

# Language-model pretraining of the decoder, cached under base/ and shared
# by every seed. Placeholders hold uniform noise of this amplitude.
[train.warm_start]
steps = 6000
lr = 3e-3
batch_size = 1
filler_amplitude = 0.2

# Stage plans start from full-scale defaults; `preset = "desk"` switches
# to short CPU-sized runs. Keys: preset, lr, batch_size, steps, epochs,
# schedule, weight_decay, clip_norm.
[train.stage1]
preset = "desk"
steps = 100

[train.stage2]
preset = "desk"

[eval]
# test | valid | train
split = "test"
max_new_tokens = 96
max_per_task = 0
# Reports must aggregate exactly this many seed runs.
runs = 3

[ablation]
rows = ["full", "no_structure", "no_sequence", "no_fusion", "no_stage1"]
"#;
