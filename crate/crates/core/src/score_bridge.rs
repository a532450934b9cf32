//! Wire schema for confidence vectors and question embeddings produced by
//! the external scorer.
//!
//! A score file is line-delimited JSON. The first line is a header
//! `{"dimension": d, "scorer_id": "...", "checkpoint": "..."}`, every
//! following line is `{"id": "...", "confidence": [p1, p2, p3, p4], "embedding": [..d..]}`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Corpus, OptionLabel};

/// Maximum deviation of Σp from 1 that is silently renormalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("failed to read score file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to fetch scores from {url}: {message}")]
    Fetch { url: String, message: String },
    #[error("score file is empty (missing header)")]
    MissingHeader,
    #[error("malformed score record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("score record `{0}` does not match any corpus item")]
    UnknownId(String),
    #[error("score record `{0}` appears twice")]
    DuplicateId(String),
    #[error("confidence for `{id}` sums to {sum}, outside 1 ± {NORMALIZATION_TOLERANCE}")]
    Normalization { id: String, sum: f64 },
    #[error("confidence for `{id}` has invalid score {value}")]
    InvalidScore { id: String, value: f64 },
    #[error("embedding for `{id}` has dimension {found}, header declares {expected}")]
    Dimension { id: String, expected: usize, found: usize },
    #[error("embedding for `{0}` contains a non-finite component")]
    NonFinite(String),
    #[error("no scores for {} corpus item(s), first `{}`", .0.len(), .0[0])]
    MissingScores(Vec<String>),
}

/// Per-option confidence `p = [p1, p2, p3, p4]`, non-negative and summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct ConfidenceVector([f64; 4]);

impl ConfidenceVector {
    pub const UNIFORM: ConfidenceVector = ConfidenceVector([0.25; 4]);

    /// Validates the vector, renormalizing exactly when the sum is within tolerance.
    pub fn new(scores: [f64; 4]) -> Result<Self, ScoreError> {
        Self::checked(scores, "")
    }

    fn checked(scores: [f64; 4], id: &str) -> Result<Self, ScoreError> {
        for &value in &scores {
            if !value.is_finite() || !(0.0..=1.0 + NORMALIZATION_TOLERANCE).contains(&value) {
                return Err(ScoreError::InvalidScore { id: id.to_string(), value });
            }
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ScoreError::Normalization { id: id.to_string(), sum });
        }
        if sum == 1.0 {
            return Ok(ConfidenceVector(scores));
        }
        Ok(ConfidenceVector(scores.map(|s| (s / sum).min(1.0))))
    }

    pub fn scores(&self) -> [f64; 4] {
        self.0
    }

    pub fn get(&self, label: OptionLabel) -> f64 {
        self.0[label.index()]
    }

    /// Label with the highest score; ties go to the earlier label.
    pub fn argmax(&self) -> OptionLabel {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        OptionLabel::ALL[best]
    }
}

impl TryFrom<[f64; 4]> for ConfidenceVector {
    type Error = ScoreError;

    fn try_from(scores: [f64; 4]) -> Result<Self, Self::Error> {
        ConfidenceVector::new(scores)
    }
}

impl From<ConfidenceVector> for [f64; 4] {
    fn from(p: ConfidenceVector) -> Self {
        p.0
    }
}

/// Top score minus the runner-up score.
pub fn confidence_margin(p: &ConfidenceVector) -> f64 {
    let mut sorted = p.scores();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted[0] - sorted[1]).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEmbedding {
    pub item_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHeader {
    pub dimension: usize,
    pub scorer_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRecord {
    id: String,
    confidence: [f64; 4],
    embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub confidence: ConfidenceVector,
    pub embedding: QuestionEmbedding,
}

/// Validated scores keyed by corpus item id, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    pub header: ScoreHeader,
    entries: Vec<ScoreEntry>,
    index: HashMap<String, usize>,
}

impl ScoreBundle {
    pub fn get(&self, id: &str) -> Option<&ScoreEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn confidence(&self, id: &str) -> Option<&ConfidenceVector> {
        self.get(id).map(|e| &e.confidence)
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.header.dimension
    }

    /// Embeddings for the given corpus, in corpus order.
    pub fn embeddings_for(&self, corpus: &Corpus) -> Result<Vec<QuestionEmbedding>, ScoreError> {
        self.ensure_coverage(corpus)?;
        Ok(corpus.iter().map(|item| self.get(&item.id).expect("covered").embedding.clone()).collect())
    }

    pub fn ensure_coverage(&self, corpus: &Corpus) -> Result<(), ScoreError> {
        let missing: Vec<String> =
            corpus.iter().filter(|item| !self.index.contains_key(&item.id)).map(|item| item.id.clone()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ScoreError::MissingScores(missing))
        }
    }

    /// Serializes to the score file format.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for entry in &self.entries {
            let record = ScoreRecord {
                id: entry.embedding.item_id.clone(),
                confidence: entry.confidence.scores(),
                embedding: entry.embedding.vector.clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Builds a bundle from already-validated parts, ordering entries as in `corpus`.
    pub fn from_entries(header: ScoreHeader, corpus: &Corpus, entries: Vec<ScoreEntry>) -> Result<Self, ScoreError> {
        let ids: HashSet<&str> = corpus.iter().map(|item| item.id.as_str()).collect();
        let mut by_id = HashMap::new();
        for entry in entries {
            let id = entry.embedding.item_id.clone();
            if !ids.contains(id.as_str()) {
                return Err(ScoreError::UnknownId(id));
            }
            if entry.embedding.vector.len() != header.dimension {
                return Err(ScoreError::Dimension {
                    id,
                    expected: header.dimension,
                    found: entry.embedding.vector.len(),
                });
            }
            if entry.embedding.vector.iter().any(|x| !x.is_finite()) {
                return Err(ScoreError::NonFinite(id));
            }
            if by_id.insert(id.clone(), entry).is_some() {
                return Err(ScoreError::DuplicateId(id));
            }
        }
        let mut ordered = Vec::with_capacity(by_id.len());
        let mut index = HashMap::new();
        for item in corpus {
            if let Some(entry) = by_id.remove(&item.id) {
                index.insert(item.id.clone(), ordered.len());
                ordered.push(entry);
            }
        }
        let bundle = ScoreBundle { header, entries: ordered, index };
        bundle.ensure_coverage(corpus)?;
        Ok(bundle)
    }
}

/// Parses and validates score file contents against `corpus`.
pub fn parse_scores(text: &str, corpus: &Corpus) -> Result<ScoreBundle, ScoreError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or(ScoreError::MissingHeader)?;
    let header: ScoreHeader =
        serde_json::from_str(header_line).map_err(|e| ScoreError::Malformed { line: 1, message: e.to_string() })?;
    let mut entries = Vec::new();
    for (i, line) in lines {
        let record: ScoreRecord =
            serde_json::from_str(line).map_err(|e| ScoreError::Malformed { line: i + 1, message: e.to_string() })?;
        let confidence = ConfidenceVector::checked(record.confidence, &record.id)?;
        entries.push(ScoreEntry {
            confidence,
            embedding: QuestionEmbedding { item_id: record.id, vector: record.embedding },
        });
    }
    ScoreBundle::from_entries(header, corpus, entries)
}

pub fn load_scores(path: impl AsRef<Path>, corpus: &Corpus) -> Result<ScoreBundle, ScoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScoreError::Io { path: path.to_path_buf(), source })?;
    parse_scores(&text, corpus)
}

/// Pulls a score file over HTTP; the body uses the same schema as on disk.
pub fn fetch_scores(url: &str, corpus: &Corpus) -> Result<ScoreBundle, ScoreError> {
    let fetch_err = |message: String| ScoreError::Fetch { url: url.to_string(), message };
    #[cfg(not(feature = "http"))]
    {
        let _ = corpus;
        Err(fetch_err("built without the `http` feature".into()))
    }
    #[cfg(feature = "http")]
    {
        use std::io::Read;
        let response = ureq::get(url).call().map_err(|e| fetch_err(e.to_string()))?;
        let mut text = String::new();
        response.into_body().into_reader().read_to_string(&mut text).map_err(|e| fetch_err(e.to_string()))?;
        parse_scores(&text, corpus)
    }
}

/// Uniform confidences and zero embeddings for scorer-free runs.
pub fn uniform_fallback(corpus: &Corpus, dimension: usize) -> ScoreBundle {
    let header = ScoreHeader {
        dimension,
        scorer_id: "uniform-fallback".to_string(),
        checkpoint: "none".to_string(),
    };
    let entries = corpus
        .iter()
        .map(|item| ScoreEntry {
            confidence: ConfidenceVector::UNIFORM,
            embedding: QuestionEmbedding { item_id: item.id.clone(), vector: vec![0.0; dimension] },
        })
        .collect();
    ScoreBundle::from_entries(header, corpus, entries).expect("fallback covers the corpus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{McqItem, Split, Subtask};
    use proptest::prelude::*;

    fn corpus(ids: &[&str]) -> Corpus {
        Corpus::new(
            ids.iter()
                .map(|id| McqItem {
                    id: id.to_string(),
                    question: "问".into(),
                    options: ["a".into(), "b".into(), "c".into(), "d".into()],
                    gold: None,
                    subtask: Subtask::Components,
                    split: Split::Test,
                })
                .collect(),
        )
        .unwrap()
    }

    const HEADER: &str = r#"{"dimension":2,"scorer_id":"t","checkpoint":"c"}"#;

    #[test]
    fn accepts_uniform_record() {
        let text = format!("{HEADER}\n{{\"id\":\"q1\",\"confidence\":[0.25,0.25,0.25,0.25],\"embedding\":[1.0,2.0]}}\n");
        let bundle = parse_scores(&text, &corpus(&["q1"])).unwrap();
        assert_eq!(bundle.confidence("q1"), Some(&ConfidenceVector::UNIFORM));
    }

    #[test]
    fn rejects_unnormalized_vector() {
        let text = format!("{HEADER}\n{{\"id\":\"q1\",\"confidence\":[0.3,0.3,0.3,0.03],\"embedding\":[1.0,2.0]}}\n");
        assert!(matches!(parse_scores(&text, &corpus(&["q1"])), Err(ScoreError::Normalization { .. })));
    }

    #[test]
    fn renormalizes_within_tolerance() {
        let p = ConfidenceVector::new([0.4, 0.3, 0.2, 0.1000004]).unwrap();
        assert!((p.scores().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_duplicate_dimension_and_missing() {
        let rec = |id: &str, emb: &str| {
            format!("{{\"id\":\"{id}\",\"confidence\":[0.25,0.25,0.25,0.25],\"embedding\":{emb}}}")
        };
        let c = corpus(&["q1", "q2"]);
        let unknown = format!("{HEADER}\n{}\n{}\n{}\n", rec("q1", "[0,0]"), rec("q2", "[0,0]"), rec("zz", "[0,0]"));
        assert!(matches!(parse_scores(&unknown, &c), Err(ScoreError::UnknownId(_))));
        let dup = format!("{HEADER}\n{}\n{}\n", rec("q1", "[0,0]"), rec("q1", "[0,0]"));
        assert!(matches!(parse_scores(&dup, &c), Err(ScoreError::DuplicateId(_))));
        let dim = format!("{HEADER}\n{}\n{}\n", rec("q1", "[0,0]"), rec("q2", "[0,0,0]"));
        assert!(matches!(parse_scores(&dim, &c), Err(ScoreError::Dimension { found: 3, .. })));
        let missing = format!("{HEADER}\n{}\n", rec("q1", "[0,0]"));
        assert!(matches!(parse_scores(&missing, &c), Err(ScoreError::MissingScores(ids)) if ids == ["q2"]));
        assert!(matches!(parse_scores("", &c), Err(ScoreError::MissingHeader)));
    }

    #[test]
    fn margins() {
        let m = |s| confidence_margin(&ConfidenceVector::new(s).unwrap());
        assert_eq!(m([0.25; 4]), 0.0);
        assert!((m([0.7, 0.1, 0.1, 0.1]) - 0.6).abs() < 1e-12);
        assert!((m([0.4, 0.35, 0.15, 0.10]) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn fallback_is_uniform_and_reloads() {
        let c = corpus(&["a", "b", "c"]);
        let bundle = uniform_fallback(&c, 4);
        assert_eq!(bundle.len(), 3);
        assert!(bundle.entries().iter().all(|e| e.confidence == ConfidenceVector::UNIFORM));
        assert_eq!(parse_scores(&bundle.to_jsonl(), &c).unwrap(), bundle);
    }

    fn simplex() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(0.001f64..1.0).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.map(|x| x / s)
        })
    }

    proptest! {
        #[test]
        fn margin_ignores_permutation_of_non_top(p in simplex()) {
            let v = ConfidenceVector::new(p).unwrap();
            let top = v.argmax().index();
            let mut rest: Vec<usize> = (0..4).filter(|&i| i != top).collect();
            rest.rotate_left(1);
            let mut permuted = p;
            for (slot, src) in (0..4).filter(|&i| i != top).zip(rest) {
                permuted[slot] = p[src];
            }
            let w = ConfidenceVector::new(permuted).unwrap();
            prop_assert!((confidence_margin(&v) - confidence_margin(&w)).abs() < 1e-12);
            let m = confidence_margin(&v);
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn file_round_trip_is_exact(p in simplex(), e in prop::collection::vec(-1e3f64..1e3, 3)) {
            let c = corpus(&["q"]);
            let header = ScoreHeader { dimension: 3, scorer_id: "s".into(), checkpoint: "k".into() };
            let entry = ScoreEntry {
                confidence: ConfidenceVector::new(p).unwrap(),
                embedding: QuestionEmbedding { item_id: "q".into(), vector: e },
            };
            let bundle = ScoreBundle::from_entries(header, &c, vec![entry]).unwrap();
            let back = parse_scores(&bundle.to_jsonl(), &c).unwrap();
            for (a, b) in back.entries()[0].confidence.scores().iter().zip(bundle.entries()[0].confidence.scores()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            prop_assert_eq!(&back.entries()[0].embedding, &bundle.entries()[0].embedding);
        }
    }
}
