//! Zero-shot reasoning chains and per-cluster demonstration sampling.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{nearest_member, ClusterError, ClusterModel};
use crate::dataset::{Corpus, McqItem, OptionLabel};
use crate::llm_client::{extract_answer, prompt_hash, ChatRequest, LlmClient};
use crate::prompt::{answer_line, question_block};

/// Default zero-shot trigger phrase.
pub const COT_TRIGGER: &str = "Let's think step by step.";

#[derive(Debug, Error)]
pub enum CotError {
    #[error("no cluster has a valid reasoning chain; no demonstrations available")]
    NoDemonstrations,
    #[error("token-count length requested but no tokenizer sidecar was provided")]
    MissingSidecar,
    #[error("tokenizer sidecar has no entry for `{0}`")]
    SidecarGap(String),
    #[error("chain cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("chain for unknown item `{0}`")]
    UnknownItem(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub item_id: String,
    pub chain_text: String,
    pub extracted: Option<OptionLabel>,
    /// `extracted == gold`.
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    ShortestQuestion,
    ShortestChain,
    ClusterCenter,
    ShortestBoth,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::ShortestQuestion,
        SelectionStrategy::ShortestChain,
        SelectionStrategy::ClusterCenter,
        SelectionStrategy::ShortestBoth,
    ];
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "shortest_question" => Ok(SelectionStrategy::ShortestQuestion),
            "shortest_chain" => Ok(SelectionStrategy::ShortestChain),
            "cluster_center" => Ok(SelectionStrategy::ClusterCenter),
            "shortest_both" => Ok(SelectionStrategy::ShortestBoth),
            other => Err(format!("unknown selection strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMeasure {
    #[default]
    ScalarCount,
    TokenCount,
}

impl FromStr for LengthMeasure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "scalar_count" => Ok(LengthMeasure::ScalarCount),
            "token_count" => Ok(LengthMeasure::TokenCount),
            other => Err(format!("unknown length measure `{other}`")),
        }
    }
}

/// Per-item question token counts produced by the scorer's tokenizer.
/// File format: one `{"id": "...", "tokens": n}` record per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenSidecar(HashMap<String, usize>);

impl TokenSidecar {
    pub fn new(counts: HashMap<String, usize>) -> Self {
        TokenSidecar(counts)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CotError> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            tokens: usize,
        }
        let path = path.as_ref();
        let err = |message: String| CotError::Cache { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut counts = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            counts.insert(row.id, row.tokens);
        }
        Ok(TokenSidecar(counts))
    }
}

pub fn question_length(item: &McqItem, measure: LengthMeasure, sidecar: Option<&TokenSidecar>) -> Result<usize, CotError> {
    match measure {
        LengthMeasure::ScalarCount => Ok(item.question.chars().count()),
        LengthMeasure::TokenCount => {
            let sidecar = sidecar.ok_or(CotError::MissingSidecar)?;
            sidecar.0.get(&item.id).copied().ok_or_else(|| CotError::SidecarGap(item.id.clone()))
        }
    }
}

/// Zero-shot chain-of-thought prompt for one item.
pub fn chain_prompt(item: &McqItem, trigger: &str) -> String {
    format!("{}\nA: {trigger}", question_block(item))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainCacheRecord {
    item_id: String,
    prompt_hash: String,
    backend: String,
    chain_text: String,
    extracted: Option<OptionLabel>,
    valid: bool,
}

/// Chain results keyed by (item id, prompt hash, backend id), appended to disk.
pub struct ChainCache {
    entries: HashMap<(String, String, String), ReasoningChain>,
    path: Option<PathBuf>,
    hits: usize,
}

impl ChainCache {
    pub fn in_memory() -> Self {
        ChainCache { entries: HashMap::new(), path: None, hits: 0 }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, CotError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let err = |message: String| CotError::Cache { path: path.clone(), message };
            let text = fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: ChainCacheRecord =
                    serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                let chain = ReasoningChain {
                    item_id: r.item_id.clone(),
                    chain_text: r.chain_text,
                    extracted: r.extracted,
                    valid: r.valid,
                    error: None,
                };
                entries.insert((r.item_id, r.prompt_hash, r.backend), chain);
            }
        }
        Ok(ChainCache { entries, path: Some(path), hits: 0 })
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&mut self, key: &(String, String, String)) -> Option<ReasoningChain> {
        let hit = self.entries.get(key).cloned();
        if hit.is_some() {
            self.hits += 1;
        }
        hit
    }

    fn store(&mut self, key: (String, String, String), chain: &ReasoningChain) -> Result<(), CotError> {
        if let Some(path) = &self.path {
            let record = ChainCacheRecord {
                item_id: key.0.clone(),
                prompt_hash: key.1.clone(),
                backend: key.2.clone(),
                chain_text: chain.chain_text.clone(),
                extracted: chain.extracted,
                valid: chain.valid,
            };
            let err = |e: std::io::Error| CotError::Cache { path: path.clone(), message: e.to_string() };
            let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
            writeln!(file, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(err)?;
        }
        self.entries.insert(key, chain.clone());
        Ok(())
    }
}

/// Generates one chain per item, reusing cached chains. Client failures mark
/// the item failed and the run continues.
pub fn generate_chains(
    corpus: &Corpus,
    client: &LlmClient,
    cache: &mut ChainCache,
    trigger: &str,
) -> Result<Vec<ReasoningChain>, CotError> {
    let backend = client.backend_id().to_string();
    let keys: Vec<_> = corpus
        .iter()
        .map(|item| (item.id.clone(), prompt_hash(&chain_prompt(item, trigger)), backend.clone()))
        .collect();
    let mut results: Vec<Option<ReasoningChain>> = keys.iter().map(|k| cache.lookup(k)).collect();
    let pending: Vec<usize> = (0..results.len()).filter(|&i| results[i].is_none()).collect();

    let fresh = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = client.concurrency().min(pending.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(slot) else { break };
                let item = &corpus.items()[i];
                let request = ChatRequest::new(chain_prompt(item, trigger), format!("{}/cot", item.id));
                let chain = match client.complete(&request) {
                    Ok(response) => {
                        let extracted = extract_answer(&response.text);
                        ReasoningChain {
                            item_id: item.id.clone(),
                            chain_text: response.text.trim().to_string(),
                            extracted,
                            valid: extracted.is_some() && extracted == item.gold,
                            error: None,
                        }
                    }
                    Err(e) => {
                        log::warn!("chain generation for `{}` failed: {e}", item.id);
                        ReasoningChain {
                            item_id: item.id.clone(),
                            chain_text: String::new(),
                            extracted: None,
                            valid: false,
                            error: Some(e.to_string()),
                        }
                    }
                };
                fresh.lock().expect("results lock").push((i, chain));
            });
        }
    });
    let mut fresh = fresh.into_inner().expect("results lock");
    fresh.sort_by_key(|(i, _)| *i);
    for (i, chain) in fresh {
        if chain.error.is_none() {
            cache.store(keys[i].clone(), &chain)?;
        }
        results[i] = Some(chain);
    }
    Ok(results.into_iter().map(|c| c.expect("every item resolved")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub item_id: String,
    pub cluster: usize,
    pub question: String,
    pub options: [String; 4],
    pub chain_text: String,
    pub answer: OptionLabel,
}

impl Demonstration {
    /// Builds a demonstration from a valid chain; `None` for invalid chains.
    pub fn from_chain(item: &McqItem, chain: &ReasoningChain, cluster: usize) -> Option<Self> {
        if !chain.valid || item.gold.is_none() || chain.extracted != item.gold {
            return None;
        }
        let answer = item.gold?;
        let trimmed = chain.chain_text.trim();
        let body = trimmed.strip_suffix(answer_line(answer).as_str()).unwrap_or(trimmed).trim_end();
        Some(Demonstration {
            item_id: item.id.clone(),
            cluster,
            question: item.question.clone(),
            options: item.options.clone(),
            chain_text: body.to_string(),
            answer,
        })
    }

    pub fn final_answer_line(&self) -> String {
        answer_line(self.answer)
    }
}

/// Demonstrations in cluster order plus warnings for skipped clusters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoSelection {
    pub demonstrations: Vec<Demonstration>,
    pub warnings: Vec<String>,
}

pub struct SamplingInputs<'a> {
    pub model: &'a ClusterModel,
    pub chains: &'a [ReasoningChain],
    pub corpus: &'a Corpus,
    pub measure: LengthMeasure,
    pub sidecar: Option<&'a TokenSidecar>,
}

pub fn sample_demonstrations(inputs: &SamplingInputs<'_>, strategy: SelectionStrategy) -> Result<DemoSelection, CotError> {
    let chains: HashMap<&str, &ReasoningChain> = inputs.chains.iter().map(|c| (c.item_id.as_str(), c)).collect();
    let item_of = |id: &str| inputs.corpus.get(id).ok_or_else(|| CotError::UnknownItem(id.to_string()));
    let valid = |id: &str| chains.get(id).is_some_and(|c| c.valid);
    let mut selection = DemoSelection::default();

    for cluster in 0..inputs.model.k {
        let pool: Vec<&str> = inputs
            .model
            .members(cluster)
            .into_iter()
            .map(|i| inputs.model.item_ids[i].as_str())
            .filter(|id| valid(id))
            .collect();
        if pool.is_empty() {
            let warning = format!("cluster {cluster} has no valid reasoning chain; skipped");
            log::warn!("{warning}");
            selection.warnings.push(warning);
            continue;
        }
        let winner = match strategy {
            SelectionStrategy::ClusterCenter => nearest_member(inputs.model, cluster, valid)?.to_string(),
            _ => {
                let mut scored = Vec::with_capacity(pool.len());
                for id in pool {
                    let chain_len = chains[id].chain_text.chars().count();
                    let key = match strategy {
                        SelectionStrategy::ShortestQuestion => {
                            question_length(item_of(id)?, inputs.measure, inputs.sidecar)?
                        }
                        SelectionStrategy::ShortestChain => chain_len,
                        _ => question_length(item_of(id)?, inputs.measure, inputs.sidecar)? + chain_len,
                    };
                    scored.push((key, id));
                }
                scored.into_iter().min().expect("non-empty pool").1.to_string()
            }
        };
        let item = item_of(&winner)?;
        let demo = Demonstration::from_chain(item, chains[winner.as_str()], cluster).expect("pool holds valid chains");
        selection.demonstrations.push(demo);
    }
    if selection.demonstrations.is_empty() {
        return Err(CotError::NoDemonstrations);
    }
    Ok(selection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans;
    use crate::dataset::{Split, Subtask};
    use crate::llm_client::{ReplayBackend, TranscriptRecord};
    use crate::score_bridge::QuestionEmbedding;

    fn item(id: &str, question: &str, gold: OptionLabel) -> McqItem {
        McqItem {
            id: id.into(),
            question: question.into(),
            options: ["甲".into(), "乙".into(), "丙".into(), "丁".into()],
            gold: Some(gold),
            subtask: Subtask::Components,
            split: Split::Validation,
        }
    }

    fn chain(id: &str, text: &str, valid: bool) -> ReasoningChain {
        ReasoningChain {
            item_id: id.into(),
            chain_text: text.into(),
            extracted: Some(if valid { OptionLabel::A } else { OptionLabel::B }),
            valid,
            error: None,
        }
    }

    #[test]
    fn question_lengths() {
        let i = item("x", "闪电像火蛇", OptionLabel::A);
        assert_eq!(question_length(&i, LengthMeasure::ScalarCount, None).unwrap(), 5);
        let empty = McqItem { question: String::new(), ..i.clone() };
        assert_eq!(question_length(&empty, LengthMeasure::ScalarCount, None).unwrap(), 0);
        assert!(matches!(question_length(&i, LengthMeasure::TokenCount, None), Err(CotError::MissingSidecar)));
        let sidecar = TokenSidecar::new(HashMap::from([("x".to_string(), 7)]));
        assert_eq!(question_length(&i, LengthMeasure::TokenCount, Some(&sidecar)).unwrap(), 7);
    }

    #[test]
    fn shortest_valid_question_wins() {
        let corpus = Corpus::new(vec![
            item("a", &"字".repeat(12), OptionLabel::A),
            item("b", &"字".repeat(8), OptionLabel::A),
            item("c", &"字".repeat(15), OptionLabel::A),
        ])
        .unwrap();
        let embs: Vec<_> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, id)| QuestionEmbedding { item_id: id.to_string(), vector: vec![i as f64, 0.0] })
            .collect();
        let model = kmeans(&embs, 1, 0, 1).unwrap();
        let chains = vec![chain("a", "x", true), chain("b", "x", false), chain("c", "x", true)];
        let inputs = SamplingInputs { model: &model, chains: &chains, corpus: &corpus, measure: LengthMeasure::ScalarCount, sidecar: None };
        let sel = sample_demonstrations(&inputs, SelectionStrategy::ShortestQuestion).unwrap();
        assert_eq!(sel.demonstrations.len(), 1);
        assert_eq!(sel.demonstrations[0].item_id, "a");
    }

    #[test]
    fn all_invalid_is_an_error() {
        let corpus = Corpus::new(vec![item("a", "q", OptionLabel::A)]).unwrap();
        let embs = vec![QuestionEmbedding { item_id: "a".into(), vector: vec![0.0, 0.0] }];
        let model = kmeans(&embs, 1, 0, 1).unwrap();
        let chains = vec![chain("a", "x", false)];
        let inputs = SamplingInputs { model: &model, chains: &chains, corpus: &corpus, measure: LengthMeasure::ScalarCount, sidecar: None };
        assert!(matches!(sample_demonstrations(&inputs, SelectionStrategy::ShortestChain), Err(CotError::NoDemonstrations)));
    }

    #[test]
    fn demonstration_strips_restated_answer() {
        let i = item("a", "q", OptionLabel::A);
        let c = chain("a", "因为……\nThe answer is A.", true);
        let d = Demonstration::from_chain(&i, &c, 0).unwrap();
        assert_eq!(d.chain_text, "因为……");
        assert!(Demonstration::from_chain(&i, &chain("a", "x", false), 0).is_none());
    }

    #[test]
    fn generation_marks_validity_and_caches() {
        let corpus = Corpus::new(vec![item("a", "甲像乙", OptionLabel::B), item("b", "丙像丁", OptionLabel::C)]).unwrap();
        let records = [("a", "步骤…… The answer is B"), ("b", "不知道")].map(|(id, text)| TranscriptRecord {
            backend: "replay".into(),
            prompt_hash: prompt_hash(&chain_prompt(corpus.get(id).unwrap(), COT_TRIGGER)),
            response_text: text.into(),
            finish_reason: "stop".into(),
        });
        let client = LlmClient::replay(ReplayBackend::new(records));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chains.jsonl");
        let mut cache = ChainCache::open(&path).unwrap();
        let chains = generate_chains(&corpus, &client, &mut cache, COT_TRIGGER).unwrap();
        assert!(chains[0].valid);
        assert_eq!(chains[1].extracted, None);
        assert!(!chains[1].valid);

        let mut reopened = ChainCache::open(&path).unwrap();
        let empty = LlmClient::replay(ReplayBackend::new([]));
        // replay backend ids match, so every chain comes from the cache
        let again = generate_chains(&corpus, &empty, &mut reopened, COT_TRIGGER).unwrap();
        assert_eq!(again, chains);
        assert_eq!(reopened.hits(), 2);
    }

    #[test]
    fn client_failure_marks_item_failed() {
        let corpus = Corpus::new(vec![item("a", "q", OptionLabel::A)]).unwrap();
        let client = LlmClient::replay(ReplayBackend::new([]));
        let mut cache = ChainCache::in_memory();
        let chains = generate_chains(&corpus, &client, &mut cache, COT_TRIGGER).unwrap();
        assert!(chains[0].error.is_some() && !chains[0].valid);
        assert!(cache.is_empty());
    }
}
