//! Instruction examples: description pairs for projection tuning, verbalized
//! property-prediction tasks, adapted Mol-Instructions prompts, splits,
//! manifests and dataset files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::decoder::PLACEHOLDER;
use crate::error::{Error, Result};

const TEMPLATES_TOML: &str = include_str!("../data/templates.toml");
const MOLINST_RULES_TOML: &str = include_str!("../data/molinst_rules.toml");

pub const NUM_TEMPLATES: usize = 10;
pub const NUM_FOLD_CLASSES: u32 = 1195;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    ProteinDescription,
    Solubility,
    SubcellularLocalization,
    BinaryLocalization,
    FoldClassification,
    YeastPpi,
    HumanPpi,
    ProteinFunction,
    CatalyticActivity,
    DomainMotif,
    FunctionalDescription,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Description,
    Classification,
    Understanding,
}

impl TaskTag {
    pub const ALL: [TaskTag; 11] = [
        TaskTag::ProteinDescription,
        TaskTag::Solubility,
        TaskTag::SubcellularLocalization,
        TaskTag::BinaryLocalization,
        TaskTag::FoldClassification,
        TaskTag::YeastPpi,
        TaskTag::HumanPpi,
        TaskTag::ProteinFunction,
        TaskTag::CatalyticActivity,
        TaskTag::DomainMotif,
        TaskTag::FunctionalDescription,
    ];

    pub const PEER: [TaskTag; 6] = [
        TaskTag::Solubility,
        TaskTag::SubcellularLocalization,
        TaskTag::BinaryLocalization,
        TaskTag::FoldClassification,
        TaskTag::YeastPpi,
        TaskTag::HumanPpi,
    ];

    pub const MOLINST: [TaskTag; 4] = [
        TaskTag::ProteinFunction,
        TaskTag::CatalyticActivity,
        TaskTag::DomainMotif,
        TaskTag::FunctionalDescription,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::ProteinDescription => "protein_description",
            TaskTag::Solubility => "solubility",
            TaskTag::SubcellularLocalization => "subcellular_localization",
            TaskTag::BinaryLocalization => "binary_localization",
            TaskTag::FoldClassification => "fold_classification",
            TaskTag::YeastPpi => "yeast_ppi",
            TaskTag::HumanPpi => "human_ppi",
            TaskTag::ProteinFunction => "protein_function",
            TaskTag::CatalyticActivity => "catalytic_activity",
            TaskTag::DomainMotif => "domain_motif",
            TaskTag::FunctionalDescription => "functional_description",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TaskTag::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Number of proteins per instance.
    pub fn arity(self) -> usize {
        match self {
            TaskTag::YeastPpi | TaskTag::HumanPpi => 2,
            _ => 1,
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskTag::ProteinDescription => TaskKind::Description,
            t if TaskTag::PEER.contains(&t) => TaskKind::Classification,
            _ => TaskKind::Understanding,
        }
    }

    pub fn is_classification(self) -> bool {
        self.kind() == TaskKind::Classification
    }

    /// Class count of a classification task.
    pub fn num_labels(self) -> Option<u32> {
        match self {
            TaskTag::FoldClassification => Some(NUM_FOLD_CLASSES),
            t if t.is_classification() => Some(templates().get(t)?.labels.len() as u32),
            _ => None,
        }
    }

    /// Natural-language word of `label`; fold classes are their integer.
    pub fn label_text(self, label: u32) -> Result<String> {
        let unknown = || Error::UnknownLabel {
            task: self.name().to_string(),
            label: label.to_string(),
        };
        match self {
            TaskTag::FoldClassification if label < NUM_FOLD_CLASSES => Ok(label.to_string()),
            t if t.is_classification() => templates()
                .get(t)
                .and_then(|s| s.labels.get(label as usize))
                .cloned()
                .ok_or_else(unknown),
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplateSet {
    pub tag: TaskTag,
    pub questions: Vec<String>,
    pub answer: String,
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateLibrary {
    sets: BTreeMap<TaskTag, TaskTemplateSet>,
}

#[derive(Deserialize)]
struct TemplateFile {
    task: Vec<TaskTemplateSet>,
}

impl TemplateLibrary {
    /// Parses and validates a template file: ten questions per task, each
    /// with one placeholder per protein.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("templates: {e}")))?;
        let mut sets = BTreeMap::new();
        for set in file.task {
            if set.questions.len() != NUM_TEMPLATES {
                return Err(Error::Config(format!(
                    "templates: {} has {} questions, expected {NUM_TEMPLATES}",
                    set.tag,
                    set.questions.len()
                )));
            }
            for q in &set.questions {
                if q.matches(PLACEHOLDER).count() != set.tag.arity() {
                    return Err(Error::Config(format!(
                        "templates: {} question {q:?} needs {} placeholder(s)",
                        set.tag,
                        set.tag.arity()
                    )));
                }
            }
            if set.tag.is_classification() && set.tag != TaskTag::FoldClassification && set.labels.is_empty() {
                return Err(Error::Config(format!("templates: {} has no labels", set.tag)));
            }
            sets.insert(set.tag, set);
        }
        Ok(Self { sets })
    }

    pub fn get(&self, tag: TaskTag) -> Option<&TaskTemplateSet> {
        self.sets.get(&tag)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskTemplateSet> {
        self.sets.values()
    }
}

/// The built-in template library.
pub fn templates() -> &'static TemplateLibrary {
    static LIB: OnceLock<TemplateLibrary> = OnceLock::new();
    LIB.get_or_init(|| TemplateLibrary::from_toml(TEMPLATES_TOML).expect("built-in templates are valid"))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub protein_id: String,
    pub name: Option<String>,
    pub subcellular_location: Option<String>,
    pub function_text: Option<String>,
    pub families: Option<String>,
}

fn clean(field: &Option<String>) -> Option<String> {
    field
        .as_deref()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
}

impl AnnotationRecord {
    /// Fields with whitespace collapsed and blanks treated as missing.
    pub fn normalized(&self) -> Self {
        Self {
            protein_id: self.protein_id.clone(),
            name: clean(&self.name),
            subcellular_location: clean(&self.subcellular_location),
            function_text: clean(&self.function_text),
            families: clean(&self.families),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub protein_ids: Vec<String>,
    pub question: String,
    pub answer: String,
    pub task_tag: TaskTag,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        let placeholders = self.question.matches(PLACEHOLDER).count();
        if placeholders != self.protein_ids.len() || !(1..=2).contains(&placeholders) {
            return Err(Error::PlaceholderMismatch {
                placeholders,
                proteins: self.protein_ids.len(),
            });
        }
        if self.answer.trim().is_empty() {
            return Err(Error::EmptyRecord(format!(
                "empty answer for {}",
                self.protein_ids.join(",")
            )));
        }
        Ok(())
    }
}

fn check_template_id(template_id: usize) -> Result<()> {
    if template_id >= NUM_TEMPLATES {
        return Err(Error::Config(format!(
            "template id {template_id} outside 0..{NUM_TEMPLATES}"
        )));
    }
    Ok(())
}

const DESCRIPTION_SLOTS: [&str; 4] = ["{name}", "{location}", "{function}", "{families}"];

/// Description question plus an answer with one clause per present field.
pub fn verbalize_description(rec: &AnnotationRecord, template_id: usize) -> Result<InstructionExample> {
    check_template_id(template_id)?;
    let rec = rec.normalized();
    let values = [&rec.name, &rec.subcellular_location, &rec.function_text, &rec.families];
    if values.iter().all(|v| v.is_none()) {
        return Err(Error::EmptyRecord(rec.protein_id));
    }
    let set = templates().get(TaskTag::ProteinDescription).expect("description templates");
    let lines: Vec<String> = set
        .answer
        .lines()
        .filter_map(|line| {
            let slot = DESCRIPTION_SLOTS.iter().position(|s| line.contains(s))?;
            values[slot].as_ref().map(|v| line.replace(DESCRIPTION_SLOTS[slot], v))
        })
        .collect();
    Ok(InstructionExample {
        protein_ids: vec![rec.protein_id.clone()],
        question: set.questions[template_id].clone(),
        answer: lines.join("\n"),
        task_tag: TaskTag::ProteinDescription,
    })
}

/// Inverse of the description answer template. `protein_id` is left empty.
pub fn extract_description_fields(answer: &str) -> AnnotationRecord {
    let set = templates().get(TaskTag::ProteinDescription).expect("description templates");
    let prefixes: Vec<(usize, &str)> = set
        .answer
        .lines()
        .filter_map(|line| {
            let slot = DESCRIPTION_SLOTS.iter().position(|s| line.contains(s))?;
            Some((slot, line.split(DESCRIPTION_SLOTS[slot]).next().unwrap_or("")))
        })
        .collect();
    let mut fields: [Option<String>; 4] = Default::default();
    for line in answer.lines() {
        for &(slot, prefix) in &prefixes {
            if let Some(rest) = line.strip_prefix(prefix) {
                if fields[slot].is_none() && !rest.trim().is_empty() {
                    fields[slot] = Some(rest.trim().to_string());
                }
                break;
            }
        }
    }
    let [name, subcellular_location, function_text, families] = fields;
    AnnotationRecord {
        protein_id: String::new(),
        name,
        subcellular_location,
        function_text,
        families,
    }
}

/// One labeled instance of a property-prediction task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerInstance {
    pub protein_ids: Vec<String>,
    pub label: u32,
}

pub fn verbalize_peer(task: TaskTag, instance: &PeerInstance, template_id: usize) -> Result<InstructionExample> {
    check_template_id(template_id)?;
    if !task.is_classification() {
        return Err(Error::UnsupportedTask(task.name().to_string()));
    }
    if instance.protein_ids.len() != task.arity() {
        return Err(Error::PlaceholderMismatch {
            placeholders: task.arity(),
            proteins: instance.protein_ids.len(),
        });
    }
    let set = templates()
        .get(task)
        .ok_or_else(|| Error::UnsupportedTask(task.name().to_string()))?;
    let word = task.label_text(instance.label)?;
    Ok(InstructionExample {
        protein_ids: instance.protein_ids.clone(),
        question: set.questions[template_id].clone(),
        answer: set.answer.replace("{label}", &word),
        task_tag: task,
    })
}

#[derive(Debug, Clone)]
pub struct RewriteRule {
    pub pattern: Regex,
    pub replacement: String,
}

#[derive(Deserialize)]
struct RuleFile {
    rule: Vec<RawRule>,
}

#[derive(Deserialize)]
struct RawRule {
    pattern: String,
    replacement: String,
}

pub fn parse_rewrite_rules(text: &str) -> Result<Vec<RewriteRule>> {
    let file: RuleFile = toml::from_str(text).map_err(|e| Error::Config(format!("prompt rules: {e}")))?;
    file.rule
        .into_iter()
        .map(|r| {
            Ok(RewriteRule {
                pattern: Regex::new(&r.pattern)
                    .map_err(|e| Error::Config(format!("prompt rule {:?}: {e}", r.pattern)))?,
                replacement: r.replacement,
            })
        })
        .collect()
}

fn builtin_rules() -> &'static [RewriteRule] {
    static RULES: OnceLock<Vec<RewriteRule>> = OnceLock::new();
    RULES.get_or_init(|| parse_rewrite_rules(MOLINST_RULES_TOML).expect("built-in prompt rules are valid"))
}

const MIN_RESIDUE_BLOCK: usize = 10;

fn is_residue_char(c: char) -> bool {
    c.is_ascii_uppercase() || c == '*'
}

fn residue_count(s: &str) -> Option<usize> {
    let mut n = 0;
    for line in s.lines() {
        let line = line.trim();
        if line.starts_with('>') {
            continue;
        }
        for c in line.chars() {
            if is_residue_char(c) {
                n += 1;
            } else if !c.is_whitespace() {
                return None;
            }
        }
    }
    Some(n)
}

/// Byte range of the residue block: the first ``` fence holding only an
/// optional `>` header and residue letters, else a trailing run of
/// uppercase residue tokens.
fn find_residue_block(prompt: &str) -> Option<(usize, usize)> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let fence = FENCE.get_or_init(|| Regex::new(r"(?s)```(?:[a-zA-Z]*\n)?(.*?)```").unwrap());
    for caps in fence.captures_iter(prompt) {
        let body = caps.get(1).unwrap().as_str();
        if residue_count(body).is_some_and(|n| n >= MIN_RESIDUE_BLOCK) {
            let m = caps.get(0).unwrap();
            return Some((m.start(), m.end()));
        }
    }
    let trimmed = prompt.trim_end();
    let mut start = trimmed.len();
    let mut letters = 0;
    for (idx, token) in token_starts(trimmed).into_iter().rev() {
        if token.chars().all(is_residue_char) {
            letters += token.len();
            start = idx;
        } else {
            break;
        }
    }
    if letters < MIN_RESIDUE_BLOCK {
        return None;
    }
    let before = &prompt[..start];
    let header_start = before
        .trim_end()
        .rfind('\n')
        .map_or(0, |i| i + 1);
    if before[header_start..].trim_start().starts_with('>') {
        start = header_start;
    }
    Some((start, prompt.len()))
}

fn token_starts(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(st)) => {
                out.push((st, &s[st..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(st) = start {
        out.push((st, &s[st..]));
    }
    out
}

fn apply_rules(text: &str, rules: &[RewriteRule]) -> String {
    let mut out = text.to_string();
    for rule in rules {
        out = rule
            .pattern
            .replace_all(&out, |caps: &regex::Captures| {
                let mut rep = String::new();
                caps.expand(&rule.replacement, &mut rep);
                let capital = caps
                    .get(0)
                    .and_then(|m| m.as_str().chars().next())
                    .is_some_and(char::is_uppercase);
                if capital {
                    let mut chars = rep.chars();
                    if let Some(first) = chars.next() {
                        rep = first.to_uppercase().chain(chars).collect();
                    }
                }
                rep
            })
            .into_owned();
    }
    out
}

/// Removes the residue block, rewrites listed expressions and leaves exactly
/// one `<protein>` on its own line where the block was (appended at the end
/// when there was none).
pub fn adapt_molinst_prompt(prompt: &str) -> String {
    adapt_molinst_prompt_with(prompt, builtin_rules())
}

pub fn adapt_molinst_prompt_with(prompt: &str, rules: &[RewriteRule]) -> String {
    let without_placeholders = prompt.replace(PLACEHOLDER, "");
    let (before, after) = match find_residue_block(&without_placeholders) {
        Some((s, e)) => (&without_placeholders[..s], &without_placeholders[e..]),
        None => (without_placeholders.as_str(), ""),
    };
    let before = apply_rules(before, rules);
    let after = apply_rules(after, rules);
    let mut out = before.trim_end().to_string();
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(PLACEHOLDER);
    let after = after.trim();
    if !after.is_empty() {
        out.push('\n');
        out.push_str(after);
    }
    out
}

/// A Mol-Instructions style record before adaptation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MolInstRecord {
    pub protein_id: String,
    pub task: TaskTag,
    pub instruction: String,
    pub output: String,
}

impl MolInstRecord {
    pub fn to_example(&self) -> Result<InstructionExample> {
        if self.task.kind() != TaskKind::Understanding {
            return Err(Error::UnsupportedTask(self.task.name().to_string()));
        }
        let ex = InstructionExample {
            protein_ids: vec![self.protein_id.clone()],
            question: adapt_molinst_prompt(&self.instruction),
            answer: self.output.trim().to_string(),
            task_tag: self.task,
        };
        ex.validate()?;
        Ok(ex)
    }
}

/// Seeded shuffle, then contiguous 8:1:1 slices (validation and test each
/// get `floor(n/10)`).
pub fn split_dataset<T: Clone>(examples: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if examples.len() < 10 {
        return Err(Error::TooFewExamples {
            needed: 10,
            got: examples.len(),
        });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = examples.len() / 10;
    let train_n = examples.len() - 2 * tenth;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..train_n]),
        pick(&order[train_n..train_n + tenth]),
        pick(&order[train_n + tenth..]),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" | "validation" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PeerSplits {
    pub train: Vec<PeerInstance>,
    pub valid: Vec<PeerInstance>,
    pub test: Vec<PeerInstance>,
}

impl PeerSplits {
    pub fn get(&self, split: Split) -> &[PeerInstance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Published split sizes of the real benchmark data.
pub fn reference_split_counts(task: TaskTag) -> Option<(usize, usize, usize)> {
    Some(match task {
        TaskTag::Solubility => (62_478, 6_942, 1_999),
        TaskTag::SubcellularLocalization => (8_420, 2_811, 2_773),
        TaskTag::BinaryLocalization => (5_184, 1_749, 1_749),
        TaskTag::FoldClassification => (12_312, 736, 718),
        TaskTag::YeastPpi => (9_890, 190, 788),
        TaskTag::HumanPpi => (71_338, 630, 474),
        _ => return None,
    })
}

pub const MANIFEST_HEADER: [&str; 3] = ["protein_ids", "label", "split"];

/// Parses a tab-separated manifest (`protein_ids`, `label`, `split`; pair
/// ids comma-separated).
pub fn parse_manifest(task: TaskTag, text: &str, path: &Path) -> Result<PeerSplits> {
    let schema = |reason: String| Error::ManifestSchema {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .map(|(_, l)| l.split('\t').map(str::trim).collect())
        .ok_or_else(|| schema("empty manifest".into()))?;
    if header != MANIFEST_HEADER {
        return Err(schema(format!("header {header:?}, expected {MANIFEST_HEADER:?}")));
    }
    let mut out = PeerSplits::default();
    for (i, line) in lines {
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(schema(format!("line {}: {} columns", i + 1, cols.len())));
        }
        let protein_ids: Vec<String> = cols[0].split(',').map(|s| s.trim().to_string()).collect();
        if protein_ids.len() != task.arity() || protein_ids.iter().any(String::is_empty) {
            return Err(schema(format!(
                "line {}: {} needs {} protein id(s)",
                i + 1,
                task,
                task.arity()
            )));
        }
        let label: u32 = cols[1]
            .parse()
            .map_err(|_| schema(format!("line {}: label {:?} is not an integer", i + 1, cols[1])))?;
        task.label_text(label)?;
        let split = Split::from_name(cols[2])
            .ok_or_else(|| schema(format!("line {}: unknown split {:?}", i + 1, cols[2])))?;
        let inst = PeerInstance { protein_ids, label };
        match split {
            Split::Train => out.train.push(inst),
            Split::Valid => out.valid.push(inst),
            Split::Test => out.test.push(inst),
        }
    }
    Ok(out)
}

/// Loads the fixed splits of a manifest. With `reference_data` set, counts
/// that differ from the published sizes are logged as warnings.
pub fn load_peer_splits(task: TaskTag, manifest: &Path, reference_data: bool) -> Result<PeerSplits> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    let splits = parse_manifest(task, &text, manifest)?;
    if reference_data {
        if let Some(expected) = reference_split_counts(task) {
            if splits.counts() != expected {
                log::warn!(
                    "{task}: split counts {:?} differ from the published {:?}",
                    splits.counts(),
                    expected
                );
            }
        }
    }
    Ok(splits)
}

pub fn write_manifest(splits: &PeerSplits) -> String {
    let mut out = MANIFEST_HEADER.join("\t");
    out.push('\n');
    for split in Split::ALL {
        for inst in splits.get(split) {
            out.push_str(&format!("{}\t{}\t{}\n", inst.protein_ids.join(","), inst.label, split.name()));
        }
    }
    out
}

pub const ANNOTATION_HEADER: [&str; 5] = ["protein_id", "name", "subcellular_location", "function", "families"];

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let schema = |reason: String| Error::ManifestSchema {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .map(|(_, l)| l.split('\t').map(str::trim).collect())
        .ok_or_else(|| schema("empty annotation file".into()))?;
    if header != ANNOTATION_HEADER {
        return Err(schema(format!("header {header:?}, expected {ANNOTATION_HEADER:?}")));
    }
    lines
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != ANNOTATION_HEADER.len() {
                return Err(schema(format!("line {}: {} columns", i + 1, cols.len())));
            }
            let opt = |s: &str| Some(s.trim().to_string()).filter(|s| !s.is_empty());
            Ok(AnnotationRecord {
                protein_id: cols[0].trim().to_string(),
                name: opt(cols[1]),
                subcellular_location: opt(cols[2]),
                function_text: opt(cols[3]),
                families: opt(cols[4]),
            })
        })
        .collect()
}

pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = ANNOTATION_HEADER.join("\t");
    out.push('\n');
    for r in records {
        let f = |v: &Option<String>| v.clone().unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.protein_id,
            f(&r.name),
            f(&r.subcellular_location),
            f(&r.function_text),
            f(&r.families)
        ));
    }
    out
}

/// Drops records whose protein appears in any downstream test set.
pub fn filter_leakage(records: Vec<AnnotationRecord>, test_ids: &HashSet<String>) -> Vec<AnnotationRecord> {
    records
        .into_iter()
        .filter(|r| !test_ids.contains(&r.protein_id))
        .collect()
}

/// Protein ids of every test instance.
pub fn test_protein_ids<'a>(splits: impl IntoIterator<Item = &'a PeerSplits>) -> HashSet<String> {
    splits
        .into_iter()
        .flat_map(|s| s.test.iter().flat_map(|i| i.protein_ids.iter().cloned()))
        .collect()
}

/// Deterministic template choice for an instance.
pub fn template_for(key: &str, seed: u64) -> usize {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(format!("{seed}:{key}").as_bytes());
    (u64::from_le_bytes(digest[..8].try_into().unwrap()) % NUM_TEMPLATES as u64) as usize
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                reason: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

/// Reads and validates an instruction dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<InstructionExample>> {
    let examples: Vec<InstructionExample> = read_jsonl(path)?;
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

/// Per-task example counts, in task order.
pub fn task_counts(examples: &[InstructionExample]) -> BTreeMap<TaskTag, usize> {
    let mut out = BTreeMap::new();
    for ex in examples {
        *out.entry(ex.task_tag).or_insert(0) += 1;
    }
    out
}

/// Protein ids referenced by `examples`, sorted.
pub fn referenced_proteins(examples: &[InstructionExample]) -> BTreeSet<String> {
    examples
        .iter()
        .flat_map(|e| e.protein_ids.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn full_record() -> AnnotationRecord {
        AnnotationRecord {
            protein_id: "P1".into(),
            name: Some("Lysozyme C".into()),
            subcellular_location: Some("Secreted".into()),
            function_text: Some("Hydrolyzes bacterial cell walls.".into()),
            families: Some("Glycosyl hydrolase 22 family".into()),
        }
    }

    #[test]
    fn builtin_templates_cover_description_and_peer() {
        let lib = templates();
        assert!(lib.get(TaskTag::ProteinDescription).is_some());
        for t in TaskTag::PEER {
            let set = lib.get(t).unwrap();
            assert_eq!(set.questions.len(), 10);
            for q in &set.questions {
                assert_eq!(q.matches(PLACEHOLDER).count(), t.arity());
            }
        }
    }

    #[test]
    fn bad_template_file_rejected() {
        let text = "[[task]]\ntag = \"solubility\"\nanswer = \"{label}\"\nlabels = [\"a\"]\nquestions = [\"x\"]\n";
        assert!(matches!(TemplateLibrary::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn description_with_all_fields() {
        let ex = verbalize_description(&full_record(), 0).unwrap();
        assert_eq!(
            ex.answer,
            "Protein name: Lysozyme C\nSubcellular location: Secreted\nFunction: Hydrolyzes bacterial cell walls.\nSimilarity: Glycosyl hydrolase 22 family"
        );
        assert_eq!(ex.question.matches(PLACEHOLDER).count(), 1);
        ex.validate().unwrap();
    }

    #[test]
    fn description_with_only_name() {
        let rec = AnnotationRecord {
            protein_id: "P2".into(),
            name: Some("Kinase A".into()),
            ..Default::default()
        };
        assert_eq!(verbalize_description(&rec, 3).unwrap().answer, "Protein name: Kinase A");
        let empty = AnnotationRecord {
            protein_id: "P3".into(),
            ..Default::default()
        };
        assert!(matches!(verbalize_description(&empty, 0), Err(Error::EmptyRecord(_))));
        assert!(verbalize_description(&rec, 10).is_err());
    }

    #[test]
    fn description_round_trips_through_extractor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let words = ["alpha", "beta", "kinase", "membrane", "binds", "ATP", "(+)", "family", "2", "Function:"];
        let field = |rng: &mut ChaCha8Rng| -> Option<String> {
            if rng.gen_bool(0.3) {
                return None;
            }
            let n = rng.gen_range(1..6);
            Some((0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        };
        let mut checked = 0;
        for i in 0..1000 {
            let rec = AnnotationRecord {
                protein_id: format!("P{i}"),
                name: field(&mut rng),
                subcellular_location: field(&mut rng),
                function_text: field(&mut rng),
                families: field(&mut rng),
            };
            let Ok(ex) = verbalize_description(&rec, i % 10) else {
                continue;
            };
            let back = extract_description_fields(&ex.answer);
            assert_eq!(
                AnnotationRecord {
                    protein_id: rec.protein_id.clone(),
                    ..back
                },
                rec.normalized()
            );
            checked += 1;
        }
        assert!(checked > 900);
    }

    #[test]
    fn peer_answers() {
        let sol = PeerInstance {
            protein_ids: vec!["A".into()],
            label: 1,
        };
        let ex = verbalize_peer(TaskTag::Solubility, &sol, 0).unwrap();
        assert!(ex.answer.contains("soluble"));
        let fold = PeerInstance {
            protein_ids: vec!["A".into()],
            label: 1194,
        };
        assert!(verbalize_peer(TaskTag::FoldClassification, &fold, 2)
            .unwrap()
            .answer
            .contains("1194"));
        let bad = PeerInstance {
            protein_ids: vec!["A".into()],
            label: 1195,
        };
        assert!(matches!(
            verbalize_peer(TaskTag::FoldClassification, &bad, 0),
            Err(Error::UnknownLabel { .. })
        ));
        let pair = PeerInstance {
            protein_ids: vec!["A".into(), "B".into()],
            label: 0,
        };
        let ex = verbalize_peer(TaskTag::YeastPpi, &pair, 4).unwrap();
        assert_eq!(ex.question.matches(PLACEHOLDER).count(), 2);
        assert!(verbalize_peer(TaskTag::YeastPpi, &sol, 0).is_err());
    }

    #[test]
    fn prompt_with_trailing_block() {
        let seq = "MKTAYIAKQRQISFVKSHFSRQLEERLGLIEVQAPILSRV";
        assert_eq!(seq.len(), 40);
        let out = adapt_molinst_prompt(&format!("Describe the function of this protein: {seq}"));
        assert!(!out.contains(seq));
        assert_eq!(out.matches(PLACEHOLDER).count(), 1);
        assert_eq!(out, "Describe the function of this protein:\n<protein>");
    }

    #[test]
    fn prompt_without_block_gets_placeholder_only() {
        assert_eq!(
            adapt_molinst_prompt("What does it do?"),
            "What does it do?\n<protein>"
        );
    }

    #[test]
    fn fenced_block_is_replaced_in_place() {
        let p = "Analyze the sequence below:\n```\nMKVLAAGIVGLLLAQ\n```\nList its domains.";
        assert_eq!(
            adapt_molinst_prompt(p),
            "Analyze the protein below:\n<protein>\nList its domains."
        );
    }

    #[test]
    fn split_is_partition() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_dataset(&items, 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        assert_eq!(split_dataset(&items, 5).unwrap(), (a.clone(), b.clone(), c.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(10..200);
            let items: Vec<usize> = (0..n).collect();
            let (a, b, c) = split_dataset(&items, rng.gen()).unwrap();
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort();
            assert_eq!(all, items);
        }
        assert!(matches!(
            split_dataset(&items[..9], 0),
            Err(Error::TooFewExamples { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn manifest_round_trip_and_schema_errors() {
        let mut splits = PeerSplits::default();
        for (i, split) in Split::ALL.iter().enumerate() {
            for j in 0..30 {
                let inst = PeerInstance {
                    protein_ids: vec![format!("P{i}_{j}"), format!("Q{i}_{j}")],
                    label: (j % 2) as u32,
                };
                match split {
                    Split::Train => splits.train.push(inst),
                    Split::Valid => splits.valid.push(inst),
                    Split::Test => splits.test.push(inst),
                }
            }
        }
        let text = write_manifest(&splits);
        let back = parse_manifest(TaskTag::HumanPpi, &text, Path::new("m.tsv")).unwrap();
        assert_eq!(back.counts(), (30, 30, 30));
        assert_eq!(back, splits);
        assert!(matches!(
            parse_manifest(TaskTag::Solubility, &text, Path::new("m.tsv")),
            Err(Error::ManifestSchema { .. })
        ));
        assert!(matches!(
            parse_manifest(TaskTag::Solubility, "id\tlabel\n", Path::new("m.tsv")),
            Err(Error::ManifestSchema { .. })
        ));
    }

    #[test]
    fn leakage_filter_drops_test_proteins() {
        let splits = PeerSplits {
            test: vec![PeerInstance {
                protein_ids: vec!["P1".into()],
                label: 0,
            }],
            ..Default::default()
        };
        let ids = test_protein_ids([&splits]);
        let mut other = full_record();
        other.protein_id = "P9".into();
        let kept = filter_leakage(vec![full_record(), other], &ids);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].protein_id, "P9");
    }

    #[test]
    fn molinst_record_to_example() {
        let rec = MolInstRecord {
            protein_id: "P1".into(),
            task: TaskTag::CatalyticActivity,
            instruction: "Please evaluate the following protein sequence and explain the reaction it catalyzes: ```\nMSTNPKPQRKTKRNTNRRPQDVKFPGG\n```".into(),
            output: "The enzyme catalyzes ATP + H2O = ADP + phosphate.".into(),
        };
        let ex = rec.to_example().unwrap();
        assert_eq!(
            ex.question,
            "Please evaluate the following protein and explain the reaction it catalyzes:\n<protein>"
        );
    }
}
