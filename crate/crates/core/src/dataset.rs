//! Multiple-choice corpus loading, validation and splitting.
//!
//! The native interchange format is one JSON record per line:
//! `{"id": "q1", "question": "...", "options": ["..", "..", "..", ".."], "gold": "B", "subtask": "components"}`.
//! Option array order defines labels A-D. The shared-task release format is
//! mapped into the same shape by [`CorpusFormat::TaskNative`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}` has {count} options, expected 4")]
    OptionCount { id: String, count: usize },
    #[error("item `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
}

/// One of the four answer options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptionLabel {
    A,
    B,
    C,
    D,
}

impl OptionLabel {
    pub const ALL: [OptionLabel; 4] = [OptionLabel::A, OptionLabel::B, OptionLabel::C, OptionLabel::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }

    /// Accepts ASCII and fullwidth letters in either case.
    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'A' | 'a' | 'Ａ' | 'ａ' => Some(OptionLabel::A),
            'B' | 'b' | 'Ｂ' | 'ｂ' => Some(OptionLabel::B),
            'C' | 'c' | 'Ｃ' | 'ｃ' => Some(OptionLabel::C),
            'D' | 'd' | 'Ｄ' | 'ｄ' => Some(OptionLabel::D),
            _ => None,
        }
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for OptionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::from_char(c).ok_or_else(|| format!("invalid option label `{s}`")),
            _ => Err(format!("invalid option label `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    /// Ground (shared property) generation, posed as multiple choice.
    Generation,
    /// Tenor / vehicle identification.
    #[default]
    Components,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub options: [String; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<OptionLabel>,
    #[serde(default)]
    pub subtask: Subtask,
    #[serde(default)]
    pub split: Split,
}

impl McqItem {
    pub fn option(&self, label: OptionLabel) -> &str {
        &self.options[label.index()]
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |message: &str| DatasetError::Invalid { id: self.id.clone(), message: message.to_string() };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("empty question"));
        }
        if let Some(i) = self.options.iter().position(|o| o.trim().is_empty()) {
            return Err(invalid(&format!("option {} is empty", OptionLabel::ALL[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// Shared-task release files: a JSON array (or JSON lines) of task records.
    TaskNative,
    /// Line-delimited native records.
    #[default]
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task-native" => Ok(CorpusFormat::TaskNative),
            "jsonl" | "line-delimited" => Ok(CorpusFormat::Jsonl),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    pub source: Option<PathBuf>,
    pub counts: SplitCounts,
}

/// An ordered, id-unique collection of items.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    items: Vec<McqItem>,
    pub metadata: CorpusMetadata,
}

impl Corpus {
    pub fn new(items: Vec<McqItem>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for item in &items {
            item.validate()?;
            if !seen.insert(item.id.as_str()) {
                return Err(DatasetError::DuplicateId(item.id.clone()));
            }
        }
        let mut counts = SplitCounts::default();
        for item in &items {
            match item.split {
                Split::Train => counts.train += 1,
                Split::Validation => counts.validation += 1,
                Split::Test => counts.test += 1,
            }
        }
        Ok(Corpus { items, metadata: CorpusMetadata { source: None, counts } })
    }

    pub fn items(&self) -> &[McqItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&McqItem> {
        self.items.iter().find(|item| item.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, McqItem> {
        self.items.iter()
    }

    /// Serializes to the native line-delimited format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("item serializes"));
            out.push('\n');
        }
        out
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a McqItem;
    type IntoIter = std::slice::Iter<'a, McqItem>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Raw native record; options stay a vector so a wrong count is reported, not a parse error.
#[derive(Deserialize)]
struct NativeRecord {
    id: String,
    question: String,
    options: Vec<String>,
    #[serde(default)]
    gold: Option<String>,
    #[serde(default)]
    subtask: Subtask,
    #[serde(default)]
    split: Split,
}

/// Shared-task record. Field names follow the public task repository; the
/// answer may be a letter or a 0-based index.
#[derive(Deserialize)]
struct TaskRecord {
    #[serde(alias = "qid", alias = "ID")]
    id: serde_json::Value,
    #[serde(alias = "sentence", alias = "context", alias = "text")]
    question: String,
    #[serde(default, alias = "question_prompt")]
    prompt: Option<String>,
    #[serde(alias = "choices", alias = "candidates")]
    options: Vec<String>,
    #[serde(default, alias = "label", alias = "gold")]
    answer: Option<serde_json::Value>,
    #[serde(default, alias = "task")]
    subtask: Option<serde_json::Value>,
}

fn parse_gold(raw: Option<&str>, id: &str) -> Result<Option<OptionLabel>, DatasetError> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|message| DatasetError::Invalid { id: id.to_string(), message }),
    }
}

fn into_options(id: &str, options: Vec<String>) -> Result<[String; 4], DatasetError> {
    let count = options.len();
    options
        .try_into()
        .map_err(|_| DatasetError::OptionCount { id: id.to_string(), count })
}

fn native_item(line: usize, text: &str) -> Result<McqItem, DatasetError> {
    let record: NativeRecord =
        serde_json::from_str(text).map_err(|e| DatasetError::Malformed { line, message: e.to_string() })?;
    let gold = parse_gold(record.gold.as_deref(), &record.id)?;
    let options = into_options(&record.id, record.options)?;
    Ok(McqItem {
        id: record.id,
        question: record.question,
        options,
        gold,
        subtask: record.subtask,
        split: record.split,
    })
}

fn task_item(line: usize, record: TaskRecord) -> Result<McqItem, DatasetError> {
    let id = match record.id {
        serde_json::Value::String(s) => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(DatasetError::Malformed { line, message: format!("unsupported id {other}") }),
    };
    let gold = match record.answer {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::Number(n)) => {
            let index = n.as_u64().and_then(|i| OptionLabel::from_index(i as usize));
            Some(index.ok_or_else(|| DatasetError::Invalid { id: id.clone(), message: format!("answer index {n}") })?)
        }
        Some(serde_json::Value::String(s)) => parse_gold(Some(&s), &id)?,
        Some(other) => {
            return Err(DatasetError::Invalid { id, message: format!("unsupported answer {other}") });
        }
    };
    let subtask = match record.subtask {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(1) => Subtask::Generation,
        Some(serde_json::Value::String(s)) if s.contains('1') || s.eq_ignore_ascii_case("generation") => {
            Subtask::Generation
        }
        _ => Subtask::Components,
    };
    let question = match record.prompt {
        Some(prompt) if !prompt.trim().is_empty() => format!("{}{}", record.question, prompt),
        _ => record.question,
    };
    let options = into_options(&id, record.options)?;
    let split = if gold.is_some() { Split::Validation } else { Split::Test };
    Ok(McqItem { id, question, options, gold, subtask, split })
}

/// Parses corpus text already read into memory.
pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Corpus, DatasetError> {
    let items = match format {
        CorpusFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| native_item(i + 1, l))
            .collect::<Result<Vec<_>, _>>()?,
        CorpusFormat::TaskNative => {
            let trimmed = text.trim_start();
            if trimmed.starts_with('[') {
                let records: Vec<serde_json::Value> = serde_json::from_str(trimmed)
                    .map_err(|e| DatasetError::Malformed { line: e.line(), message: e.to_string() })?;
                records
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let record = serde_json::from_value(v)
                            .map_err(|e| DatasetError::Malformed { line: i + 1, message: e.to_string() })?;
                        task_item(i + 1, record)
                    })
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                text.lines()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| {
                        let record = serde_json::from_str(l)
                            .map_err(|e| DatasetError::Malformed { line: i + 1, message: e.to_string() })?;
                        task_item(i + 1, record)
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        }
    };
    Corpus::new(items)
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut corpus = parse_corpus(&text, format)?;
    corpus.metadata.source = Some(path.to_path_buf());
    Ok(corpus)
}

/// Seeded partition into (train, held-out). The train side holds
/// `floor(fraction * N)` items; both sides keep the input order.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Fraction(train_fraction));
    }
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let n = corpus.len();
    let train_len = (train_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..train_len] {
        in_train[i] = true;
    }
    let (train, held): (Vec<_>, Vec<_>) = corpus.items.iter().cloned().zip(in_train).partition(|(_, t)| *t);
    let strip = |v: Vec<(McqItem, bool)>| {
        let mut c = Corpus::new(v.into_iter().map(|(item, _)| item).collect()).expect("subset of a valid corpus");
        c.metadata.source = corpus.metadata.source.clone();
        c
    };
    Ok((strip(train), strip(held)))
}
