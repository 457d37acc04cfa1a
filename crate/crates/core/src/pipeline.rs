//! The commands behind the CLI: dataset building, training, evaluation,
//! generation and ablations. Everything is written under the configured
//! output directory:
//!
//! ```text
//! structures/<id>.struct          parsed structure cache
//! data/projection_train.jsonl     description pairs for stage 1
//! data/finetune_<split>.jsonl     task instructions for stage 2 and evaluation
//! data/summary.json               per-task counts
//! base/<key>.ckpt                 warm-started language model shared by all seeds
//! runs/seed<s>/model.ckpt         one checkpoint per seed
//! runs/seed<s>/metrics.jsonl      per-step losses
//! eval/seed<s>/predictions.jsonl  generated answers
//! eval/report.txt                 JSON lines plus a summary table
//! ablate/<row>/...                one tree per ablation row
//! ablate/report.txt
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AblationRow, RunConfig};
use crate::decoder::{detokenize_text, text_to_ids, tokenize_text};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_runs, format_report, EvalReport, PredictionRecord};
use crate::instruction_data::{
    filter_leakage, load_peer_splits, parse_annotations, read_dataset, read_jsonl, split_dataset, task_counts,
    template_for, test_protein_ids, verbalize_description, verbalize_peer, write_jsonl, InstructionExample,
    MolInstRecord, PeerSplits, Split, TaskTag,
};
use crate::model::{generate_answer, init_model, ModelConfig, PreparedExample, ProteinInput};
use crate::params::Partition;
use crate::protein_io::{deserialize_structure, parse_structure, serialize_structure, ProteinStructure};
use crate::training::{
    load_checkpoint, save_checkpoint, train_stage, warm_start_decoder, Stage, TrainState,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("{what} {}", path.display())));
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

pub fn structures_dir(out: &Path) -> PathBuf {
    out.join("structures")
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn finetune_path(out: &Path, split: Split) -> PathBuf {
    data_dir(out).join(format!("finetune_{}.jsonl", split.name()))
}

pub fn projection_path(out: &Path) -> PathBuf {
    data_dir(out).join("projection_train.jsonl")
}

pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join("runs").join(format!("seed{seed}")).join("model.ckpt")
}

/// Parses every `.pdb` file of `dir`; the file stem is the protein id.
pub fn read_structure_dir(dir: &Path) -> Result<BTreeMap<String, ProteinStructure>> {
    require_path(dir, "structure store")?;
    let files = sorted_files(dir, "pdb")?;
    if files.is_empty() {
        return Err(Error::MissingInput(format!("no .pdb files in {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for f in files {
        let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = fs::read_to_string(&f).map_err(io_err(&f))?;
        let s = parse_structure(&text, &id).map_err(|e| match e {
            Error::MalformedRecord { line, reason } => Error::MalformedRecord {
                line,
                reason: format!("{}: {reason}", f.display()),
            },
            other => other,
        })?;
        if s.dropped_residues > 0 {
            log::warn!("{id}: dropped {} incomplete residues", s.dropped_residues);
        }
        out.insert(id, s);
    }
    Ok(out)
}

/// Reads the structure cache written by [`cmd_build_data`].
pub fn read_structure_cache(out: &Path) -> Result<BTreeMap<String, ProteinStructure>> {
    let dir = structures_dir(out);
    require_path(&dir, "structure cache (run build-data first)")?;
    let mut map = BTreeMap::new();
    for f in sorted_files(&dir, "struct")? {
        let s = deserialize_structure(&fs::read_to_string(&f).map_err(io_err(&f))?)?;
        map.insert(s.id.clone(), s);
    }
    Ok(map)
}

pub type ProteinStore = BTreeMap<String, Arc<ProteinInput>>;

pub fn protein_store(structures: &BTreeMap<String, ProteinStructure>, model: &ModelConfig) -> Result<ProteinStore> {
    structures
        .iter()
        .map(|(id, s)| Ok((id.clone(), Arc::new(ProteinInput::from_structure(s, model.graph)?))))
        .collect()
}

/// Resolves proteins and tokenizes the question and answer.
pub fn prepare(ex: &InstructionExample, store: &ProteinStore) -> Result<PreparedExample> {
    ex.validate()?;
    let proteins = ex
        .protein_ids
        .iter()
        .map(|id| store.get(id).cloned().ok_or_else(|| Error::UnknownProtein(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedExample {
        proteins,
        question_ids: tokenize_text(&ex.question),
        answer_ids: text_to_ids(&ex.answer),
    })
}

pub fn prepare_all(examples: &[InstructionExample], store: &ProteinStore) -> Result<Vec<PreparedExample>> {
    examples.iter().map(|e| prepare(e, store)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub proteins: usize,
    pub projection_train: usize,
    pub leaked_annotations: usize,
    /// Per task: (train, valid, test).
    pub finetune: BTreeMap<TaskTag, (usize, usize, usize)>,
}

impl BuildSummary {
    pub fn table(&self) -> String {
        let mut out = format!(
            "proteins {}\nprojection tuning examples {} ({} annotations removed as test proteins)\n",
            self.proteins, self.projection_train, self.leaked_annotations
        );
        out.push_str(&format!("{:<24} {:>7} {:>7} {:>7}\n", "task", "train", "valid", "test"));
        for (task, (a, b, c)) in &self.finetune {
            out.push_str(&format!("{:<24} {a:>7} {b:>7} {c:>7}\n", task.name()));
        }
        out
    }
}

fn check_ids(ids: &[String], structures: &BTreeMap<String, ProteinStructure>) -> Result<()> {
    for id in ids {
        if !structures.contains_key(id) {
            return Err(Error::UnknownProtein(id.clone()));
        }
    }
    Ok(())
}

fn sort_examples(examples: &mut [InstructionExample]) {
    examples.sort_by(|a, b| {
        (a.task_tag, &a.protein_ids, &a.question, &a.answer).cmp(&(b.task_tag, &b.protein_ids, &b.question, &b.answer))
    });
}

/// Builds the projection-tuning and fine-tuning datasets.
pub fn cmd_build_data(cfg: &RunConfig) -> Result<BuildSummary> {
    let structures = read_structure_dir(&cfg.data.structures)?;
    require_path(&cfg.data.annotations, "annotation file")?;
    let out = &cfg.output_dir;

    let mut peer: BTreeMap<TaskTag, PeerSplits> = BTreeMap::new();
    for task in TaskTag::PEER {
        let path = cfg.data.peer_dir.join(format!("{task}.tsv"));
        if path.exists() {
            let splits = load_peer_splits(task, &path, cfg.data.reference_data)?;
            for split in Split::ALL {
                for inst in splits.get(split) {
                    check_ids(&inst.protein_ids, &structures)?;
                }
            }
            peer.insert(task, splits);
        }
    }
    let mut molinst: BTreeMap<TaskTag, (Vec<MolInstRecord>, Vec<MolInstRecord>, Vec<MolInstRecord>)> = BTreeMap::new();
    for (k, task) in TaskTag::MOLINST.into_iter().enumerate() {
        let path = cfg.data.molinst_dir.join(format!("{task}.jsonl"));
        if path.exists() {
            let records: Vec<MolInstRecord> = read_jsonl(&path)?;
            for r in &records {
                if r.task != task {
                    return Err(Error::ManifestSchema {
                        path: path.clone(),
                        reason: format!("record for {} in the {task} file", r.task),
                    });
                }
                check_ids(std::slice::from_ref(&r.protein_id), &structures)?;
            }
            molinst.insert(task, split_dataset(&records, cfg.data_seed.wrapping_add(k as u64))?);
        }
    }

    let mut test_ids: HashSet<String> = test_protein_ids(peer.values());
    test_ids.extend(molinst.values().flat_map(|(_, _, t)| t.iter().map(|r| r.protein_id.clone())));
    let ann_text = fs::read_to_string(&cfg.data.annotations).map_err(io_err(&cfg.data.annotations))?;
    let annotations = parse_annotations(&ann_text, &cfg.data.annotations)?;
    for a in &annotations {
        check_ids(std::slice::from_ref(&a.protein_id), &structures)?;
    }
    let total_annotations = annotations.len();
    let kept = filter_leakage(annotations, &test_ids);
    let leaked = total_annotations - kept.len();
    let mut projection = Vec::new();
    for rec in &kept {
        match verbalize_description(rec, template_for(&rec.protein_id, cfg.data_seed)) {
            Ok(ex) => projection.push(ex),
            Err(Error::EmptyRecord(id)) => log::warn!("{id}: no annotation fields, skipped"),
            Err(e) => return Err(e),
        }
    }
    sort_examples(&mut projection);

    let mut finetune: BTreeMap<Split, Vec<InstructionExample>> = BTreeMap::new();
    for (task, splits) in &peer {
        for split in Split::ALL {
            for inst in splits.get(split) {
                let key = format!("{task}:{}", inst.protein_ids.join(","));
                finetune
                    .entry(split)
                    .or_default()
                    .push(verbalize_peer(*task, inst, template_for(&key, cfg.data_seed))?);
            }
        }
    }
    for (train, valid, test) in molinst.values() {
        for (split, records) in [(Split::Train, train), (Split::Valid, valid), (Split::Test, test)] {
            for r in records {
                finetune.entry(split).or_default().push(r.to_example()?);
            }
        }
    }

    let _ = fs::remove_dir_all(structures_dir(out));
    for (id, s) in &structures {
        write_text(&structures_dir(out).join(format!("{id}.struct")), &serialize_structure(s))?;
    }
    write_jsonl(&projection, &projection_path(out))?;
    let mut summary = BuildSummary {
        proteins: structures.len(),
        projection_train: projection.len(),
        leaked_annotations: leaked,
        finetune: BTreeMap::new(),
    };
    for split in Split::ALL {
        let mut list = finetune.remove(&split).unwrap_or_default();
        sort_examples(&mut list);
        for (task, n) in task_counts(&list) {
            let e = summary.finetune.entry(task).or_default();
            match split {
                Split::Train => e.0 = n,
                Split::Valid => e.1 = n,
                Split::Test => e.2 = n,
            }
        }
        write_jsonl(&list, &finetune_path(out, split))?;
    }
    write_text(
        &data_dir(out).join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(summary)
}

fn read_split(out: &Path, split: Split) -> Result<Vec<InstructionExample>> {
    let path = finetune_path(out, split);
    if !path.exists() {
        return Err(Error::ManifestSchema {
            path,
            reason: format!("{} split is missing (run build-data first)", split.name()),
        });
    }
    read_dataset(&path)
}

/// Warm start cache key: everything the warm-started weights depend on.
fn warm_start_key(cfg: &RunConfig, model: &ModelConfig, texts: &[&InstructionExample]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.decoder)?);
    h.update(model.fusion.token_count(1).to_le_bytes());
    h.update(serde_json::to_vec(&cfg.train.warm_start)?);
    h.update(cfg.base_seed.to_le_bytes());
    for ex in texts {
        h.update(serde_json::to_vec(ex)?);
    }
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// The language model every seed starts from, trained once and cached.
pub fn base_model(cfg: &RunConfig, model: &ModelConfig, data_root: &Path, store: &ProteinStore) -> Result<TrainState> {
    let projection = read_dataset(&projection_path(data_root))?;
    let train = read_split(data_root, Split::Train)?;
    let texts: Vec<&InstructionExample> = projection.iter().chain(&train).collect();
    let key = warm_start_key(cfg, model, &texts)?;
    let path = data_root.join("base").join(format!("{key}.ckpt"));
    let fresh = init_model(model, cfg.base_seed)?;
    if path.exists() {
        let mut state = load_checkpoint(&path)?;
        // Encoders and projectors depend on the caller's config; only the
        // language-model partitions are reused.
        let mut params = fresh;
        params.decoder = std::mem::take(&mut state.params.decoder);
        params.embed_table = std::mem::take(&mut state.params.embed_table);
        return TrainState::new(*model, params, cfg.base_seed);
    }
    let corpus: Vec<PreparedExample> = texts.iter().map(|e| prepare(e, store)).collect::<Result<_>>()?;
    log::info!("warm-starting the language model on {} examples", corpus.len());
    let (params, history) = warm_start_decoder(model, fresh, &corpus, &cfg.train.warm_start, cfg.base_seed)?;
    let mut state = TrainState::new(*model, params, cfg.base_seed)?;
    state.loss_history = history;
    save_checkpoint(&state, &path)?;
    state.loss_history.clear();
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub losses: BTreeMap<Stage, Vec<f64>>,
}

/// Trains one model per seed from the shared warm start.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainOutcome>> {
    train_into(cfg, &cfg.output_dir, &cfg.output_dir)
}

fn train_into(cfg: &RunConfig, data_root: &Path, run_root: &Path) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let structures = read_structure_cache(data_root)?;
    let store = protein_store(&structures, &cfg.model)?;
    let base = base_model(cfg, &cfg.model, data_root, &store)?;
    let stages = cfg.train.recipe.stages();
    let mut corpora: BTreeMap<Stage, Vec<PreparedExample>> = BTreeMap::new();
    for &stage in &stages {
        let examples = match stage {
            Stage::ProjectionTuning => read_dataset(&projection_path(data_root))?,
            Stage::SupervisedFinetune => read_split(data_root, Split::Train)?,
        };
        corpora.insert(stage, prepare_all(&examples, &store)?);
    }
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let mut params = init_model(&cfg.model, seed)?;
        params.decoder = base.params.decoder.clone();
        params.embed_table = base.params.embed_table.clone();
        let mut state = TrainState::new(cfg.model, params, seed)?;
        let mut losses = BTreeMap::new();
        let mut metrics = String::new();
        for &stage in &stages {
            let plan = cfg.stage_plan(stage)?;
            let start = state.loss_history.len();
            log::info!("seed {seed}: {} for {} steps", stage.name(), plan.total_steps(corpora[&stage].len()));
            state = train_stage(&plan, &corpora[&stage], state)?;
            let stage_losses = state.loss_history[start..].to_vec();
            for (step, &loss) in stage_losses.iter().enumerate() {
                metrics.push_str(&serde_json::to_string(&MetricLine { stage, step, loss })?);
                metrics.push('\n');
            }
            losses.insert(stage, stage_losses);
        }
        let ckpt = checkpoint_path(run_root, seed);
        save_checkpoint(&state, &ckpt)?;
        write_text(&ckpt.with_file_name("metrics.jsonl"), &metrics)?;
        outcomes.push(TrainOutcome {
            seed,
            checkpoint: ckpt,
            losses,
        });
    }
    Ok(outcomes)
}

/// Greedy answer text, with the new-token budget trimmed to the context.
pub fn answer(
    model: &ModelConfig,
    state: &TrainState,
    proteins: &[Arc<ProteinInput>],
    question: &str,
    max_new_tokens: usize,
) -> Result<String> {
    let question_ids = tokenize_text(question);
    let placeholders = question_ids.iter().filter(|&&i| i == crate::decoder::PROTEIN_PLACEHOLDER).count();
    if placeholders != proteins.len() {
        return Err(Error::PlaceholderMismatch {
            placeholders,
            proteins: proteins.len(),
        });
    }
    let prefix = question_ids.len() - placeholders
        + proteins.iter().map(|p| model.fusion.token_count(p.len())).sum::<usize>();
    let budget = max_new_tokens.min(model.decoder.max_positions.saturating_sub(prefix));
    let ids = generate_answer(model, &state.params, proteins, &question_ids, budget)?;
    Ok(detokenize_text(&ids))
}

/// Evaluation examples of the configured split, capped per task.
pub fn eval_examples(cfg: &RunConfig, data_root: &Path) -> Result<Vec<InstructionExample>> {
    let split = Split::from_name(&cfg.eval.split)
        .ok_or_else(|| Error::Config(format!("unknown eval split {:?}", cfg.eval.split)))?;
    let all = read_split(data_root, split)?;
    if cfg.eval.max_per_task == 0 {
        return Ok(all);
    }
    let mut seen: BTreeMap<TaskTag, usize> = BTreeMap::new();
    Ok(all
        .into_iter()
        .filter(|ex| {
            let n = seen.entry(ex.task_tag).or_default();
            *n += 1;
            *n <= cfg.eval.max_per_task
        })
        .collect())
}

pub fn predict(
    cfg: &RunConfig,
    state: &TrainState,
    examples: &[InstructionExample],
    store: &ProteinStore,
) -> Result<Vec<PredictionRecord>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let prepared = prepare(ex, store)?;
            let text = answer(&state.config, state, &prepared.proteins, &ex.question, cfg.eval.max_new_tokens)?;
            Ok(PredictionRecord {
                example_id: format!("{}-{i}", cfg.eval.split),
                task_tag: ex.task_tag,
                prediction: text,
                reference: ex.answer.clone(),
            })
        })
        .collect()
}

/// Answers the evaluation split with every checkpoint (one per seed by
/// default) and aggregates the scores.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: Option<&[PathBuf]>) -> Result<Vec<EvalReport>> {
    eval_into(cfg, &cfg.output_dir, &cfg.output_dir, checkpoints)
}

fn eval_into(
    cfg: &RunConfig,
    data_root: &Path,
    run_root: &Path,
    checkpoints: Option<&[PathBuf]>,
) -> Result<Vec<EvalReport>> {
    let paths: Vec<PathBuf> = match checkpoints {
        Some(p) => p.to_vec(),
        None => cfg.seeds.iter().map(|&s| checkpoint_path(run_root, s)).collect(),
    };
    if paths.len() != cfg.eval.runs {
        return Err(Error::Arity {
            expected: cfg.eval.runs,
            got: paths.len(),
        });
    }
    let examples = eval_examples(cfg, data_root)?;
    let structures = read_structure_cache(data_root)?;
    let mut runs = Vec::new();
    let mut stores: BTreeMap<String, ProteinStore> = BTreeMap::new();
    for path in &paths {
        require_path(path, "checkpoint")?;
        let state = load_checkpoint(path)?;
        let key = serde_json::to_string(&state.config.graph)?;
        if !stores.contains_key(&key) {
            stores.insert(key.clone(), protein_store(&structures, &state.config)?);
        }
        let preds = predict(cfg, &state, &examples, &stores[&key])?;
        let mut lines = Vec::new();
        for p in &preds {
            lines.push(serde_json::to_string(p)?);
        }
        write_text(
            &run_root.join("eval").join(format!("seed{}", state.seed)).join("predictions.jsonl"),
            &(lines.join("\n") + "\n"),
        )?;
        runs.push(preds);
    }
    let reports = evaluate_runs(&runs, cfg.eval.runs)?;
    write_text(&run_root.join("eval").join("report.txt"), &format_report(&reports))?;
    Ok(reports)
}

/// Answers one question about stored proteins.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, protein_ids: &[String], question: &str) -> Result<String> {
    require_path(checkpoint, "checkpoint")?;
    let state = load_checkpoint(checkpoint)?;
    let structures = read_structure_cache(&cfg.output_dir)?;
    let proteins = protein_ids
        .iter()
        .map(|id| {
            let s = structures.get(id).ok_or_else(|| Error::UnknownProtein(id.clone()))?;
            Ok(Arc::new(ProteinInput::from_structure(s, state.config.graph)?))
        })
        .collect::<Result<Vec<_>>>()?;
    answer(&state.config, &state, &proteins, question, cfg.eval.max_new_tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub fusion: String,
    pub recipe: String,
    /// Protein rows handed to the decoder for each evaluation example.
    pub protein_tokens: Vec<usize>,
    pub reports: Vec<EvalReport>,
}

impl AblationResult {
    pub fn total_protein_tokens(&self) -> usize {
        self.protein_tokens.iter().sum()
    }
}

pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut metrics: Vec<(TaskTag, String)> = Vec::new();
    for r in results {
        for rep in &r.reports {
            let k = (rep.task_tag, rep.metric.clone());
            if !metrics.contains(&k) {
                metrics.push(k);
            }
        }
    }
    let mut out = format!("{:<34}", "task / metric");
    for r in results {
        out.push_str(&format!(" {:>17}", r.row.name()));
    }
    out.push('\n');
    out.push_str(&format!("{:<34}", "protein tokens"));
    for r in results {
        out.push_str(&format!(" {:>17}", r.total_protein_tokens()));
    }
    out.push('\n');
    for (task, metric) in &metrics {
        out.push_str(&format!("{:<34}", format!("{} {}", task.name(), metric)));
        for r in results {
            let cell = r
                .reports
                .iter()
                .find(|rep| rep.task_tag == *task && &rep.metric == metric)
                .map_or("-".to_string(), |rep| format!("{:.4} ± {:.4}", rep.mean, rep.std));
            out.push_str(&format!(" {cell:>17}"));
        }
        out.push('\n');
    }
    out
}

/// Trains and evaluates every configured ablation row on shared data and
/// seeds; rows are reported in config order.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationResult>> {
    let data_root = &cfg.output_dir;
    let examples = eval_examples(cfg, data_root)?;
    let structures = read_structure_cache(data_root)?;
    let mut results = Vec::new();
    for &row in &cfg.ablation.rows {
        let row_cfg = row.apply(cfg);
        row_cfg.validate()?;
        let run_root = data_root.join("ablate").join(row.name());
        log::info!("ablation row {}", row.name());
        train_into(&row_cfg, data_root, &run_root)?;
        let reports = eval_into(&row_cfg, data_root, &run_root, None)?;
        let protein_tokens = examples
            .iter()
            .map(|ex| {
                ex.protein_ids
                    .iter()
                    .map(|id| {
                        structures
                            .get(id)
                            .map(|s| row_cfg.model.fusion.token_count(s.len()))
                            .ok_or_else(|| Error::UnknownProtein(id.clone()))
                    })
                    .sum::<Result<usize>>()
            })
            .collect::<Result<Vec<_>>>()?;
        results.push(AblationResult {
            row,
            fusion: row_cfg.model.fusion.name().to_string(),
            recipe: format!("{:?}", row_cfg.train.recipe),
            protein_tokens,
            reports,
        });
    }
    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    write_text(&data_root.join("ablate").join("results.jsonl"), &jsonl)?;
    write_text(&data_root.join("ablate").join("report.txt"), &ablation_table(&results))?;
    Ok(results)
}

/// Partitions whose values differ between two parameter sets.
pub fn changed_partitions(a: &crate::params::ModelParams, b: &crate::params::ModelParams) -> Vec<Partition> {
    Partition::ALL
        .into_iter()
        .filter(|&p| a.partition(p) != b.partition(p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config, DESK_CONFIG};
    use crate::fixtures::{write_corpus, CorpusSpec};

    #[test]
    fn build_data_counts_follow_fixture_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::default();
        write_corpus(dir.path(), &spec).unwrap();
        let mut cfg = parse_config(DESK_CONFIG, &[]).unwrap();
        cfg.resolve_paths(dir.path());
        let summary = cmd_build_data(&cfg).unwrap();
        let n = 6 * spec.proteins_per_family;
        assert_eq!(summary.proteins, n);
        assert_eq!(summary.finetune[&TaskTag::Solubility], (n - 12, 6, 6));
        let tenth = n / 10;
        assert_eq!(summary.finetune[&TaskTag::DomainMotif], (n - 2 * tenth, tenth, tenth));
        assert_eq!(summary.projection_train + summary.leaked_annotations, n);
        assert!(summary.leaked_annotations >= 6);

        let first = fs::read(finetune_path(&cfg.output_dir, Split::Train)).unwrap();
        let proj = fs::read(projection_path(&cfg.output_dir)).unwrap();
        cmd_build_data(&cfg).unwrap();
        assert_eq!(fs::read(finetune_path(&cfg.output_dir, Split::Train)).unwrap(), first);
        assert_eq!(fs::read(projection_path(&cfg.output_dir)).unwrap(), proj);

        let test = read_dataset(&finetune_path(&cfg.output_dir, Split::Test)).unwrap();
        let test_ids: HashSet<_> = test.iter().flat_map(|e| e.protein_ids.clone()).collect();
        let projection = read_dataset(&projection_path(&cfg.output_dir)).unwrap();
        assert!(projection.iter().all(|e| !test_ids.contains(&e.protein_ids[0])));
    }

    #[test]
    fn empty_store_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("structures")).unwrap();
        let mut cfg = parse_config(DESK_CONFIG, &[]).unwrap();
        cfg.resolve_paths(dir.path());
        assert!(matches!(cmd_build_data(&cfg), Err(Error::MissingInput(_))));
    }

    #[test]
    fn missing_split_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(DESK_CONFIG, &[]).unwrap();
        cfg.resolve_paths(dir.path());
        assert!(matches!(eval_examples(&cfg, &cfg.output_dir), Err(Error::ManifestSchema { .. })));
    }
}
