//! Scoring of generated answers: ROUGE-L, critical-part extraction,
//! classification parsing and accuracy, multi-seed aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruction_data::{templates, TaskKind, TaskTag, NUM_FOLD_CLASSES};

const CRITICAL_RULES_TOML: &str = include_str!("../data/critical_rules.toml");

/// Lowercased whitespace tokens with surrounding punctuation removed.
/// Characters inside a token (parentheses, `+`, `-`, digits) are kept so
/// formulas survive intact.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_end_matches(['.', ',', ';', ':', '!', '?', '"', '\''])
                .trim_start_matches(['"', '\''])
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced F1 over the longest common token subsequence.
pub fn rouge_l(reference: &str, hypothesis: &str) -> f64 {
    let r = rouge_tokens(reference);
    let h = rouge_tokens(hypothesis);
    match (r.is_empty(), h.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&r, &h) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / h.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Debug, Clone)]
pub struct CriticalRules {
    rules: BTreeMap<TaskTag, Vec<Regex>>,
}

#[derive(Deserialize)]
struct CriticalFile {
    task: Vec<CriticalTask>,
}

#[derive(Deserialize)]
struct CriticalTask {
    tag: TaskTag,
    patterns: Vec<String>,
}

impl CriticalRules {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: CriticalFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("critical rules: {e}")))?;
        let mut rules = BTreeMap::new();
        for task in file.task {
            let compiled = task
                .patterns
                .iter()
                .map(|p| {
                    let re = Regex::new(p).map_err(|e| Error::Config(format!("critical rule {p:?}: {e}")))?;
                    if !re.capture_names().any(|n| n == Some("span")) {
                        return Err(Error::Config(format!("critical rule {p:?} has no `span` group")));
                    }
                    Ok(re)
                })
                .collect::<Result<Vec<_>>>()?;
            rules.insert(task.tag, compiled);
        }
        Ok(Self { rules })
    }

    pub fn extract(&self, text: &str, task: TaskTag) -> Result<String> {
        let patterns = self
            .rules
            .get(&task)
            .ok_or_else(|| Error::UnsupportedTask(task.name().to_string()))?;
        for re in patterns {
            // Each search resumes at the end of the previous span, so a
            // delimiter closing one span can open the next.
            let mut spans: Vec<&str> = Vec::new();
            let mut at = 0;
            while at <= text.len() {
                let Some(span) = re.captures_at(text, at).and_then(|c| c.name("span")) else {
                    break;
                };
                let s = span.as_str().trim();
                if !s.is_empty() {
                    spans.push(s);
                }
                at = if span.end() > at {
                    span.end()
                } else {
                    text[at..].chars().next().map_or(text.len() + 1, |c| at + c.len_utf8())
                };
            }
            if !spans.is_empty() {
                return Ok(spans.join(" "));
            }
        }
        Ok(String::new())
    }
}

fn critical_rules() -> &'static CriticalRules {
    static RULES: OnceLock<CriticalRules> = OnceLock::new();
    RULES.get_or_init(|| CriticalRules::from_toml(CRITICAL_RULES_TOML).expect("built-in critical rules are valid"))
}

/// Critical part of an answer for catalytic activity, domain/motif and
/// functional description tasks.
pub fn extract_critical(text: &str, task: TaskTag) -> Result<String> {
    critical_rules().extract(text, task)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parsed {
    Label(u32),
    Unparseable,
}

impl Parsed {
    pub fn label(self) -> Option<u32> {
        match self {
            Parsed::Label(l) => Some(l),
            Parsed::Unparseable => None,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-'
}

fn bounded(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
    let after = text[end..].chars().next().is_none_or(|c| !is_word_char(c));
    before && after
}

fn parse_fold(text: &str) -> Parsed {
    static INT: OnceLock<Regex> = OnceLock::new();
    let re = INT.get_or_init(|| Regex::new(r"\d+").unwrap());
    for m in re.find_iter(text) {
        if !bounded(text, m.start(), m.end()) {
            continue;
        }
        let s = m.as_str();
        if s.len() > 1 && s.starts_with('0') {
            continue;
        }
        if let Ok(v) = s.parse::<u32>() {
            if v < NUM_FOLD_CLASSES {
                return Parsed::Label(v);
            }
        }
    }
    Parsed::Unparseable
}

/// Maps generated text to a class label: the label keyword found earliest
/// in the lowercased text wins, the longer keyword on ties. Fold answers
/// take the first standalone integer in range.
pub fn parse_classification(answer: &str, task: TaskTag) -> Parsed {
    let text = answer.to_lowercase();
    if task == TaskTag::FoldClassification {
        return parse_fold(&text);
    }
    let Some(set) = templates().get(task) else {
        return Parsed::Unparseable;
    };
    let mut best: Option<(usize, usize, u32)> = None;
    for (label, word) in set.labels.iter().enumerate() {
        let word = word.to_lowercase();
        for (start, _) in text.match_indices(&word) {
            if !bounded(&text, start, start + word.len()) {
                continue;
            }
            let better = match best {
                None => true,
                Some((s, len, _)) => start < s || (start == s && word.len() > len),
            };
            if better {
                best = Some((start, word.len(), label as u32));
            }
            break;
        }
    }
    best.map_or(Parsed::Unparseable, |(_, _, l)| Parsed::Label(l))
}

pub fn accuracy(predictions: &[Parsed], golds: &[u32]) -> Result<f64> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.label() == Some(**g))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

pub const DEFAULT_RUNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_tag: TaskTag,
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub num_examples: usize,
}

/// Mean and population std over exactly `expected` runs.
pub fn aggregate_runs(
    task_tag: TaskTag,
    metric: &str,
    per_seed: &[f64],
    num_examples: usize,
    expected: usize,
) -> Result<EvalReport> {
    if per_seed.len() != expected || expected == 0 {
        return Err(Error::Arity {
            expected,
            got: per_seed.len(),
        });
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        task_tag,
        metric: metric.to_string(),
        per_seed: per_seed.to_vec(),
        mean,
        std: var.sqrt(),
        num_examples,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds: Vec<String> = self.per_seed.iter().map(|s| format!("{s:.4}")).collect();
        write!(
            f,
            "{:<24} {:<18} {:>7.4} ± {:<7.4} {:>6}  [{}]",
            self.task_tag.name(),
            self.metric,
            self.mean,
            self.std,
            self.num_examples,
            seeds.join(", ")
        )
    }
}

/// JSON lines followed by a summary table.
pub fn format_report(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<24} {:<18} {:>7}   {:<7} {:>6}  {}\n",
        "task", "metric", "mean", "std", "n", "per-seed"
    ));
    for r in reports {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// One generated answer paired with its reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub task_tag: TaskTag,
    pub prediction: String,
    pub reference: String,
}

/// Metric scores of one run's predictions for one task, keyed by metric
/// name. Classification references are parsed the same way as predictions.
pub fn score_task(task: TaskTag, records: &[&PredictionRecord]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if records.is_empty() {
        return Ok(out);
    }
    let n = records.len() as f64;
    match task.kind() {
        TaskKind::Classification => {
            let preds: Vec<Parsed> = records.iter().map(|r| parse_classification(&r.prediction, task)).collect();
            let golds = records
                .iter()
                .map(|r| {
                    parse_classification(&r.reference, task).label().ok_or_else(|| Error::UnknownLabel {
                        task: task.name().to_string(),
                        label: r.reference.clone(),
                    })
                })
                .collect::<Result<Vec<u32>>>()?;
            out.insert("accuracy".to_string(), accuracy(&preds, &golds)?);
        }
        TaskKind::Understanding | TaskKind::Description => {
            let full = records.iter().map(|r| rouge_l(&r.reference, &r.prediction)).sum::<f64>() / n;
            out.insert("rouge_l".to_string(), full);
            if matches!(
                task,
                TaskTag::CatalyticActivity | TaskTag::DomainMotif | TaskTag::FunctionalDescription
            ) {
                let mut total = 0.0;
                for r in records {
                    total += rouge_l(&extract_critical(&r.reference, task)?, &extract_critical(&r.prediction, task)?);
                }
                out.insert("rouge_l_critical".to_string(), total / n);
            }
        }
    }
    Ok(out)
}

/// Scores each seed's predictions and aggregates per task and metric.
pub fn evaluate_runs(runs: &[Vec<PredictionRecord>], expected_runs: usize) -> Result<Vec<EvalReport>> {
    let mut per: BTreeMap<(TaskTag, String), (Vec<f64>, usize)> = BTreeMap::new();
    for run in runs {
        let mut by_task: BTreeMap<TaskTag, Vec<&PredictionRecord>> = BTreeMap::new();
        for r in run {
            by_task.entry(r.task_tag).or_default().push(r);
        }
        for (task, records) in by_task {
            for (metric, score) in score_task(task, &records)? {
                let e = per.entry((task, metric)).or_default();
                e.0.push(score);
                e.1 = records.len();
            }
        }
    }
    per.into_iter()
        .map(|((task, metric), (scores, n))| aggregate_runs(task, &metric, &scores, n, expected_runs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction_data::{verbalize_peer, PeerInstance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
            if sub.len() <= best {
                continue;
            }
            let mut it = b.iter();
            if sub.iter().all(|t| it.any(|x| x == *t)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn rouge_trivial_cases() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b c", "d e"), 0.0);
        assert_eq!(rouge_l("", ""), 1.0);
        assert_eq!(rouge_l("a", ""), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
        assert_eq!(rouge_l("The cat.", "the CAT"), 1.0);
    }

    #[test]
    fn rouge_the_cat_sat() {
        let r = rouge_tokens("the cat sat");
        let h = rouge_tokens("cat the sat");
        let lcs = brute_lcs(&r, &h);
        assert_eq!(lcs, 2);
        let p = lcs as f64 / 3.0;
        let rc = lcs as f64 / 3.0;
        assert!((rouge_l("the cat sat", "cat the sat") - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
    }

    #[test]
    fn rouge_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = ["a", "b", "c", "d", "atp", "h2o"];
        for _ in 0..300 {
            let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
                let n = rng.gen_range(1..=10);
                (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect()
            };
            let a = sentence(&mut rng);
            let b = sentence(&mut rng);
            assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
            let (sa, sb) = (a.join(" "), b.join(" "));
            let f = rouge_l(&sa, &sb);
            assert!((0.0..=1.0).contains(&f));
            assert!((f - rouge_l(&sb, &sa)).abs() < 1e-12);
        }
    }

    #[test]
    fn formulas_survive_tokenization() {
        assert_eq!(rouge_tokens("ATP + H2O = ADP + phosphate + H(+)."), [
            "atp", "+", "h2o", "=", "adp", "+", "phosphate", "+", "h(+)"
        ]);
    }

    #[test]
    fn critical_extraction_basics() {
        assert_eq!(
            extract_critical("Catalyzes the reaction: ATP + H2O = ADP + phosphate.", TaskTag::CatalyticActivity).unwrap(),
            "ATP + H2O = ADP + phosphate"
        );
        assert_eq!(extract_critical("nothing here", TaskTag::CatalyticActivity).unwrap(), "");
        assert!(matches!(
            extract_critical("x", TaskTag::ProteinFunction),
            Err(Error::UnsupportedTask(_))
        ));
    }

    #[test]
    fn classification_examples() {
        assert_eq!(parse_classification("The protein is soluble.", TaskTag::Solubility), Parsed::Label(1));
        assert_eq!(parse_classification("The protein is insoluble.", TaskTag::Solubility), Parsed::Label(0));
        assert_eq!(parse_classification("it is 42 at fold level", TaskTag::FoldClassification), Parsed::Label(42));
        assert_eq!(parse_classification("C5H9NO2 fold 1195 or 7", TaskTag::FoldClassification), Parsed::Label(7));
        assert_eq!(parse_classification("no idea", TaskTag::Solubility), Parsed::Unparseable);
        assert_eq!(
            parse_classification("The two proteins do not interact.", TaskTag::YeastPpi),
            Parsed::Label(0)
        );
    }

    #[test]
    fn verbalize_parse_bijection() {
        for task in TaskTag::PEER {
            let n = task.num_labels().unwrap();
            for label in 0..n {
                for t in 0..10 {
                    let ids = (0..task.arity()).map(|i| format!("P{i}")).collect();
                    let ex = verbalize_peer(task, &PeerInstance { protein_ids: ids, label }, t).unwrap();
                    assert_eq!(parse_classification(&ex.answer, task), Parsed::Label(label), "{task} {label}");
                }
            }
        }
    }

    #[test]
    fn accuracy_oracle() {
        assert_eq!(accuracy(&[Parsed::Label(1), Parsed::Label(0)], &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[Parsed::Unparseable; 3], &[0, 1, 0]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[Parsed::Label(0)], &[0, 1]), Err(Error::LengthMismatch(_))));
        assert!(accuracy(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let golds: Vec<u32> = (0..100).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<Parsed> = (0..100)
            .map(|_| if rng.gen_bool(0.2) { Parsed::Unparseable } else { Parsed::Label(rng.gen_range(0..3)) })
            .collect();
        let mut hits = 0;
        for i in 0..100 {
            if let Parsed::Label(l) = preds[i] {
                if l == golds[i] {
                    hits += 1;
                }
            }
        }
        assert_eq!(accuracy(&preds, &golds).unwrap(), hits as f64 / 100.0);
    }

    #[test]
    fn aggregation() {
        let r = aggregate_runs(TaskTag::Solubility, "accuracy", &[0.5, 0.5, 0.5], 10, 3).unwrap();
        assert_eq!((r.mean, r.std), (0.5, 0.0));
        let r = aggregate_runs(TaskTag::Solubility, "accuracy", &[0.0, 1.0, 0.5], 10, 3).unwrap();
        assert_eq!(r.mean, 0.5);
        assert!((r.std - (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!((r.std - 0.4082).abs() < 1e-4);
        assert!(matches!(
            aggregate_runs(TaskTag::Solubility, "accuracy", &[0.1, 0.2], 10, 3),
            Err(Error::Arity { expected: 3, got: 2 })
        ));
        assert!(aggregate_runs(TaskTag::Solubility, "accuracy", &[0.1, 0.2], 10, 2).is_ok());
    }
}
