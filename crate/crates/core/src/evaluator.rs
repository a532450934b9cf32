//! Accuracy reports, the scorer-argmax and rule baselines, and report files.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Corpus, McqItem, OptionLabel};
use crate::score_bridge::ScoreBundle;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for unknown item `{0}`")]
    UnknownItem(String),
    #[error("duplicate prediction for `{0}`")]
    DuplicatePrediction(String),
    #[error("no confidence vector for `{0}`")]
    MissingScore(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Llm,
    ScorerArgmax,
    RuleBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub mode: String,
    pub predicted: Option<OptionLabel>,
    pub source: PredictionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Wrong,
    Unextracted,
    SkippedNoGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub gold: Option<OptionLabel>,
    pub predicted: Option<OptionLabel>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub wrong: usize,
    pub unextracted: usize,
    pub skipped_no_gold: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.correct + self.wrong + self.unextracted + self.skipped_no_gold
    }

    /// correct / (correct + wrong + unextracted); 0 when nothing is scored.
    pub fn accuracy(&self) -> f64 {
        let scored = self.correct + self.wrong + self.unextracted;
        if scored == 0 {
            0.0
        } else {
            self.correct as f64 / scored as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub counts: Counts,
    pub accuracy: f64,
    pub items: Vec<ItemResult>,
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    mode: String,
    counts: Counts,
    accuracy: f64,
}

impl EvalReport {
    /// Machine-readable form: a summary line followed by one line per item.
    pub fn to_jsonl(&self) -> String {
        let header = ReportHeader { mode: self.mode.clone(), counts: self.counts, accuracy: self.accuracy };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("item serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ReportHeader = serde_json::from_str(lines.next().ok_or_else(|| EvalError::MalformedReport("empty".into()))?)
            .map_err(|e| EvalError::MalformedReport(e.to_string()))?;
        let items = lines
            .map(|l| serde_json::from_str(l).map_err(|e| EvalError::MalformedReport(e.to_string())))
            .collect::<Result<Vec<ItemResult>, _>>()?;
        Ok(EvalReport { mode: header.mode, counts: header.counts, accuracy: header.accuracy, items })
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        comparison_table(std::slice::from_ref(self))
    }

    /// Recomputes counts and accuracy from the per-item table.
    pub fn recount(&self) -> Counts {
        let mut counts = Counts::default();
        for item in &self.items {
            match item.outcome {
                Outcome::Correct => counts.correct += 1,
                Outcome::Wrong => counts.wrong += 1,
                Outcome::Unextracted => counts.unextracted += 1,
                Outcome::SkippedNoGold => counts.skipped_no_gold += 1,
            }
        }
        counts
    }

    /// One `id<TAB>letter` line per item. Items without a prediction take
    /// the fallback's letter when one is given, else are left blank.
    pub fn submission(&self, fallback: Option<&HashMap<String, OptionLabel>>) -> String {
        let mut out = String::new();
        for item in &self.items {
            let letter = item.predicted.or_else(|| fallback.and_then(|f| f.get(&item.item_id).copied()));
            let _ = writeln!(out, "{}\t{}", item.item_id, letter.map(|l| l.to_string()).unwrap_or_default());
        }
        out
    }
}

/// Table with one row per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.mode.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>7}  {:>5}  {:>11}  {:>7}\n",
        "mode", "accuracy", "correct", "wrong", "unextracted", "skipped"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>7}  {:>5}  {:>11}  {:>7}",
            r.mode, r.accuracy, r.counts.correct, r.counts.wrong, r.counts.unextracted, r.counts.skipped_no_gold
        );
    }
    out
}

/// Scores predictions against gold labels. Items without a prediction count
/// as unextracted; items without gold are skipped.
pub fn accuracy(mode: &str, predictions: &[Prediction], corpus: &Corpus) -> Result<EvalReport, EvalError> {
    let ids: HashSet<&str> = corpus.iter().map(|i| i.id.as_str()).collect();
    let mut by_id: HashMap<&str, Option<OptionLabel>> = HashMap::new();
    for p in predictions {
        if !ids.contains(p.item_id.as_str()) {
            return Err(EvalError::UnknownItem(p.item_id.clone()));
        }
        if by_id.insert(p.item_id.as_str(), p.predicted).is_some() {
            return Err(EvalError::DuplicatePrediction(p.item_id.clone()));
        }
    }
    let mut counts = Counts::default();
    let items = corpus
        .iter()
        .map(|item| {
            let predicted = by_id.get(item.id.as_str()).copied().flatten();
            let outcome = match (item.gold, predicted) {
                (None, _) => Outcome::SkippedNoGold,
                (Some(_), None) => Outcome::Unextracted,
                (Some(g), Some(p)) if g == p => Outcome::Correct,
                (Some(_), Some(_)) => Outcome::Wrong,
            };
            match outcome {
                Outcome::Correct => counts.correct += 1,
                Outcome::Wrong => counts.wrong += 1,
                Outcome::Unextracted => counts.unextracted += 1,
                Outcome::SkippedNoGold => counts.skipped_no_gold += 1,
            }
            ItemResult { item_id: item.id.clone(), gold: item.gold, predicted, outcome }
        })
        .collect();
    Ok(EvalReport { mode: mode.to_string(), counts, accuracy: counts.accuracy(), items })
}

/// Track 2 predictions: the highest-confidence option, earlier label on ties.
pub fn scorer_argmax(bundle: &ScoreBundle, corpus: &Corpus) -> Result<Vec<Prediction>, EvalError> {
    corpus
        .iter()
        .map(|item| {
            let p = bundle.confidence(&item.id).ok_or_else(|| EvalError::MissingScore(item.id.clone()))?;
            Ok(Prediction {
                item_id: item.id.clone(),
                mode: "scorer_argmax".into(),
                predicted: Some(p.argmax()),
                source: PredictionSource::ScorerArgmax,
            })
        })
        .collect()
}

/// Comparator words linking tenor and vehicle, longest first.
pub const COMPARATORS: [&str; 9] = ["好像", "仿佛", "宛如", "犹如", "如同", "像", "如", "似", "是"];

const SPAN_WIDTH: usize = 6;

fn is_break(c: char) -> bool {
    matches!(c, '，' | '。' | '！' | '？' | '；' | '：' | '、' | ',' | '.' | '!' | '?' | ';' | ':' | '“' | '”' | '"' | '\n')
}

fn longest_common_substring(a: &[char], b: &[char]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    for &ca in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            if ca == cb {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

/// Text spans immediately before and after each comparator, cut at punctuation.
fn comparator_spans(sentence: &[char]) -> Vec<Vec<char>> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < sentence.len() {
        let hit = COMPARATORS.iter().map(|c| c.chars().collect::<Vec<_>>()).find(|c| sentence[i..].starts_with(c));
        if let Some(comp) = hit {
            let end = i + comp.len();
            let left: Vec<char> = sentence[i.saturating_sub(SPAN_WIDTH)..i]
                .iter()
                .rev()
                .take_while(|c| !is_break(**c))
                .copied()
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            let right: Vec<char> = sentence[end..(end + SPAN_WIDTH).min(sentence.len())]
                .iter()
                .take_while(|c| !is_break(**c))
                .copied()
                .collect();
            spans.push(left);
            spans.push(right);
            i = end;
        } else {
            i += 1;
        }
    }
    spans
}

/// Language-rule baseline.
///
/// Each option is ranked by: whether it overlaps a span adjacent to a
/// comparator word (by at least two characters, or fully when shorter), then
/// the fraction of the option covered by its longest common substring with the
/// sentence, then that substring's length, then the earlier label. No option
/// sharing any character with the sentence gives `None`.
pub fn rule_baseline(item: &McqItem) -> Option<OptionLabel> {
    let sentence: Vec<char> = item.question.chars().collect();
    let spans = comparator_spans(&sentence);
    let mut best: Option<(bool, usize, usize, OptionLabel)> = None;
    for label in OptionLabel::ALL {
        let option: Vec<char> = item.option(label).chars().filter(|c| !c.is_whitespace()).collect();
        if option.is_empty() {
            continue;
        }
        let overlap = longest_common_substring(&option, &sentence);
        if overlap == 0 {
            continue;
        }
        let need = option.len().min(2);
        let anchored = spans.iter().any(|s| longest_common_substring(&option, s) >= need);
        let better = match best {
            None => true,
            Some((b_anchor, b_overlap, b_len, _)) => {
                // compare overlap / len as exact fractions
                let cov = overlap * b_len;
                let b_cov = b_overlap * option.len();
                (anchored, cov, overlap) > (b_anchor, b_cov, b_overlap)
            }
        };
        if better {
            best = Some((anchored, overlap, option.len(), label));
        }
    }
    best.map(|(_, _, _, label)| label)
}

pub fn rule_predictions(corpus: &Corpus) -> Vec<Prediction> {
    corpus
        .iter()
        .map(|item| Prediction {
            item_id: item.id.clone(),
            mode: "rule_baseline".into(),
            predicted: rule_baseline(item),
            source: PredictionSource::RuleBaseline,
        })
        .collect()
}
