//! End-to-end runs: load → scores → cluster → chains → demonstrations →
//! prompts → completions → extraction → accuracy.
//!
//! Every stage persists its output under the run's output directory and can
//! be resumed from there. A `manifest.json` records the configuration and the
//! SHA-256 of every artifact.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{
    elbow_select, inertia_curve, kmeans, pca_project, ClusterModel, InertiaCurve, Normalization, PcaProjection,
    DEFAULT_RESTARTS,
};
use crate::cot::{
    generate_chains, sample_demonstrations, ChainCache, DemoSelection, Demonstration, LengthMeasure, ReasoningChain,
    SamplingInputs, SelectionStrategy, TokenSidecar, COT_TRIGGER,
};
use crate::dataset::{load_corpus, parse_corpus, Corpus, CorpusFormat, OptionLabel};
use crate::evaluator::{accuracy, comparison_table, rule_baseline, scorer_argmax, EvalReport, Prediction, PredictionSource};
use crate::llm_client::{extract_answer, ChatRequest, LiveConfig, LlmClient, ReplayBackend};
use crate::prompt::{build_prompt, CandidateStyle, HeuristicPrompt, PromptConfig, PromptInputs, PromptMode, Suggestion, Track};
#[cfg(feature = "http")]
use crate::llm_client::{OpenAiBackend, RetryPolicy, TranscriptCache};
use crate::score_bridge::{fetch_scores, load_scores, parse_scores, uniform_fallback, ScoreBundle, ScoreEntry};

pub const DEFAULT_FALLBACK_DIMENSION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Config,
    Ingest,
    Scores,
    Cluster,
    Chains,
    Demos,
    Prompts,
    Completions,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "dataset",
            Stage::Scores => "score_bridge",
            Stage::Cluster => "clustering",
            Stage::Chains => "cot_engine/chains",
            Stage::Demos => "cot_engine/demonstrations",
            Stage::Prompts => "prompt_builder",
            Stage::Completions => "llm_client",
            Stage::Report => "evaluator",
        })
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(Box<dyn std::error::Error + Send + Sync>) -> PipelineError {
        move |source| PipelineError { stage, source }
    }

    pub fn config(message: impl Into<String>) -> Self {
        PipelineError { stage: Stage::Config, source: message.into().into() }
    }
}

trait StageResult<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageResult<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::at(stage)(Box::new(e)))
    }
}

/// Fixed k or elbow selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(KChoice::Auto);
        }
        s.parse().map(KChoice::Fixed).map_err(|_| format!("k must be `auto` or a positive integer, got `{s}`"))
    }
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Auto => f.write_str("auto"),
            KChoice::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KChoice {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => serializer.serialize_str("auto"),
            KChoice::Fixed(k) => serializer.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(k) => Ok(KChoice::Fixed(k as usize)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub k: KChoice,
    pub k_max: usize,
    pub seed: u64,
    pub restarts: usize,
    pub normalize: Normalization,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig { k: KChoice::Auto, k_max: 10, seed: 0, restarts: DEFAULT_RESTARTS, normalize: Normalization::None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Replay { transcript: PathBuf },
    Live(LiveConfig),
}

/// Where reference-answer modes take their suggestions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSource {
    /// Argmax of the scorer's confidences.
    Scorer,
    /// The language-rule baseline.
    Rules,
    /// The item's own zero-shot chain and its answer, as reasons.
    Llm,
}

impl FromStr for ReferenceSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scorer" => Ok(ReferenceSource::Scorer),
            "rules" => Ok(ReferenceSource::Rules),
            "llm" => Ok(ReferenceSource::Llm),
            other => Err(format!("unknown reference source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub format: CorpusFormat,
    /// Score file from the external scorer.
    pub scores: Option<PathBuf>,
    /// HTTP location serving a score file.
    pub scores_url: Option<String>,
    /// Replace confidences with the uniform vector. Embeddings still come from
    /// `scores` when given, otherwise they are zero vectors.
    pub uniform_fallback: bool,
    pub fallback_dimension: usize,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub mode: PromptMode,
    pub strategy: SelectionStrategy,
    pub candidate_style: CandidateStyle,
    pub track: Track,
    pub clustering: ClusteringConfig,
    pub backend: Option<BackendConfig>,
    pub length_measure: LengthMeasure,
    pub token_sidecar: Option<PathBuf>,
    pub trigger: String,
    pub reference_sources: Vec<ReferenceSource>,
    /// Reuse persisted stage artifacts instead of recomputing.
    pub resume: bool,
    /// Write one text file per rendered prompt.
    pub dump_prompts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::new(),
            format: CorpusFormat::Jsonl,
            scores: None,
            scores_url: None,
            uniform_fallback: false,
            fallback_dimension: DEFAULT_FALLBACK_DIMENSION,
            output_dir: PathBuf::from("out"),
            cache_dir: None,
            mode: PromptMode::Full,
            strategy: SelectionStrategy::ShortestQuestion,
            candidate_style: CandidateStyle::Scores,
            track: Track::Track1,
            clustering: ClusteringConfig::default(),
            backend: None,
            length_measure: LengthMeasure::ScalarCount,
            token_sidecar: None,
            trigger: COT_TRIGGER.to_string(),
            reference_sources: vec![ReferenceSource::Scorer],
            resume: false,
            dump_prompts: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if let KChoice::Fixed(0) = self.clustering.k {
            return Err(PipelineError::config("k must be at least 1"));
        }
        if self.clustering.k == KChoice::Auto && self.clustering.k_max < 3 {
            return Err(PipelineError::config("k_max must be at least 3 with automatic k"));
        }
        if self.trigger.trim().is_empty() {
            return Err(PipelineError::config("trigger phrase is empty"));
        }
        if self.length_measure == LengthMeasure::TokenCount && self.token_sidecar.is_none() {
            return Err(PipelineError::config("token_count length needs a token sidecar"));
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    fn prompt_config(&self) -> PromptConfig {
        PromptConfig { trigger: self.trigger.clone(), candidate_style: self.candidate_style, track: self.track }
    }
}

/// Clustering stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStage {
    pub model: ClusterModel,
    pub curve: Option<InertiaCurve>,
    pub pca: Option<PcaProjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompletionRecord {
    item_id: String,
    response_text: Option<String>,
    extracted: Option<OptionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

const CORPUS_FILE: &str = "corpus.jsonl";
const SCORES_FILE: &str = "scores.jsonl";
const CLUSTERS_FILE: &str = "clusters.json";
const INERTIA_FILE: &str = "inertia.tsv";
const PCA_FILE: &str = "pca.jsonl";
const CHAINS_FILE: &str = "chains.jsonl";
const DEMOS_FILE: &str = "demos.jsonl";
const DEMOS_TEXT_FILE: &str = "demos.txt";
const MANIFEST_FILE: &str = "manifest.json";

fn write_file(path: &Path, contents: &str, stage: Stage) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).stage(stage)?;
    }
    fs::write(path, contents).stage(stage)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).stage(stage)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).stage(stage))
        .collect()
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}

pub struct Pipeline {
    config: RunConfig,
    client: Option<LlmClient>,
    fresh: Vec<&'static str>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline { config, client: None, fresh: Vec::new() })
    }

    /// Uses `client` instead of building one from the backend config.
    pub fn with_client(config: RunConfig, client: LlmClient) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline { config, client: Some(client), fresh: Vec::new() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn reuse(&self, name: &str) -> bool {
        self.config.resume && !self.fresh.contains(&name) && self.out(name).exists()
    }

    /// Recomputes `stage` even when resuming.
    pub fn refresh(&mut self, stage: Stage) {
        let name = match stage {
            Stage::Ingest => CORPUS_FILE,
            Stage::Scores => SCORES_FILE,
            Stage::Cluster => CLUSTERS_FILE,
            Stage::Chains => CHAINS_FILE,
            Stage::Demos => DEMOS_FILE,
            _ => return,
        };
        self.fresh.push(name);
    }

    fn client(&mut self) -> Result<&LlmClient, PipelineError> {
        if self.client.is_none() {
            let backend = self
                .config
                .backend
                .as_ref()
                .ok_or_else(|| PipelineError::config("no LLM backend configured (use --transcript or --base-url)"))?;
            let client = match backend {
                BackendConfig::Replay { transcript } => {
                    LlmClient::replay(ReplayBackend::from_file(transcript).stage(Stage::Completions)?)
                }
                #[cfg(not(feature = "http"))]
                BackendConfig::Live(_) => {
                    return Err(PipelineError::config("live backend needs the `http` feature"));
                }
                #[cfg(feature = "http")]
                BackendConfig::Live(live) => {
                    fs::create_dir_all(self.config.cache_dir()).stage(Stage::Completions)?;
                    let cache = TranscriptCache::persistent(self.config.cache_dir().join("transcript.jsonl"))
                        .stage(Stage::Completions)?;
                    LlmClient::new(Box::new(OpenAiBackend::from_env(live)), cache)
                        .with_retry(RetryPolicy { attempts: live.retries.max(1), ..RetryPolicy::default() })
                        .with_concurrency(live.concurrency)
                }
            };
            self.client = Some(client);
        }
        Ok(self.client.as_ref().expect("client initialized"))
    }

    fn decoding(&self) -> (f64, u32) {
        match &self.config.backend {
            Some(BackendConfig::Live(live)) => (live.temperature, live.max_tokens),
            _ => (0.0, crate::llm_client::DEFAULT_MAX_TOKENS),
        }
    }

    /// Loads and validates the corpus, persisting it in native format.
    pub fn ingest(&self) -> Result<Corpus, PipelineError> {
        if self.reuse(CORPUS_FILE) {
            let text = fs::read_to_string(self.out(CORPUS_FILE)).stage(Stage::Ingest)?;
            return parse_corpus(&text, CorpusFormat::Jsonl).stage(Stage::Ingest);
        }
        let corpus = load_corpus(&self.config.corpus, self.config.format).stage(Stage::Ingest)?;
        write_file(&self.out(CORPUS_FILE), &corpus.to_jsonl(), Stage::Ingest)?;
        log::info!("loaded {} items from {}", corpus.len(), self.config.corpus.display());
        Ok(corpus)
    }

    pub fn scores(&self, corpus: &Corpus) -> Result<ScoreBundle, PipelineError> {
        if self.reuse(SCORES_FILE) {
            return load_scores(self.out(SCORES_FILE), corpus).stage(Stage::Scores);
        }
        let real = match (&self.config.scores, &self.config.scores_url) {
            (Some(path), _) => Some(load_scores(path, corpus).stage(Stage::Scores)?),
            (None, Some(url)) => Some(fetch_scores(url, corpus).stage(Stage::Scores)?),
            (None, None) => None,
        };
        let bundle = match (real, self.config.uniform_fallback) {
            (Some(bundle), false) => bundle,
            (Some(bundle), true) => {
                let mut header = bundle.header.clone();
                header.scorer_id = format!("uniform-fallback+{}", header.scorer_id);
                let entries = bundle
                    .entries()
                    .iter()
                    .map(|e| ScoreEntry { confidence: crate::score_bridge::ConfidenceVector::UNIFORM, embedding: e.embedding.clone() })
                    .collect();
                ScoreBundle::from_entries(header, corpus, entries).stage(Stage::Scores)?
            }
            (None, true) => uniform_fallback(corpus, self.config.fallback_dimension),
            (None, false) => {
                return Err(PipelineError::at(Stage::Scores)(
                    "no score file given; pass --scores or --uniform-fallback".into(),
                ))
            }
        };
        write_file(&self.out(SCORES_FILE), &bundle.to_jsonl(), Stage::Scores)?;
        Ok(bundle)
    }

    pub fn cluster(&self, corpus: &Corpus, scores: &ScoreBundle) -> Result<ClusterStage, PipelineError> {
        if self.reuse(CLUSTERS_FILE) {
            let text = fs::read_to_string(self.out(CLUSTERS_FILE)).stage(Stage::Cluster)?;
            return serde_json::from_str(&text).stage(Stage::Cluster);
        }
        let cfg = &self.config.clustering;
        let mut embeddings = scores.embeddings_for(corpus).stage(Stage::Cluster)?;
        let mut points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
        cfg.normalize.apply(&mut points);
        for (e, p) in embeddings.iter_mut().zip(&points) {
            e.vector = p.clone();
        }
        let distinct = {
            let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
            keys.sort();
            keys.dedup();
            keys.len()
        };
        let (k, curve) = match cfg.k {
            KChoice::Fixed(k) => (k, None),
            KChoice::Auto if distinct < 3 => {
                log::warn!("only {distinct} distinct embedding(s); using k = {distinct}");
                (distinct.max(1), None)
            }
            KChoice::Auto => {
                let curve = inertia_curve(&points, cfg.k_max.min(distinct), cfg.seed, cfg.restarts).stage(Stage::Cluster)?;
                (elbow_select(&curve).stage(Stage::Cluster)?, Some(curve))
            }
        };
        let model = kmeans(&embeddings, k, cfg.seed, cfg.restarts).stage(Stage::Cluster)?;
        let pca = match pca_project(&model.item_ids, &points) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("PCA projection skipped: {e}");
                None
            }
        };
        let stage = ClusterStage { model, curve, pca };
        write_file(&self.out(CLUSTERS_FILE), &serde_json::to_string(&stage).expect("serializes"), Stage::Cluster)?;
        if let Some(curve) = &stage.curve {
            write_file(&self.out(INERTIA_FILE), &curve.to_tsv(), Stage::Cluster)?;
        }
        if let Some(pca) = &stage.pca {
            write_file(&self.out(PCA_FILE), &pca.to_jsonl(Some(&stage.model.assignment)), Stage::Cluster)?;
        }
        log::info!("clustered {} items into k = {} (sizes {:?})", corpus.len(), k, stage.model.cluster_sizes());
        Ok(stage)
    }

    pub fn chains(&mut self, corpus: &Corpus) -> Result<Vec<ReasoningChain>, PipelineError> {
        if self.reuse(CHAINS_FILE) {
            return read_jsonl(&self.out(CHAINS_FILE), Stage::Chains);
        }
        let cache_dir = self.config.cache_dir();
        fs::create_dir_all(&cache_dir).stage(Stage::Chains)?;
        let mut cache = ChainCache::open(cache_dir.join("chain_cache.jsonl")).stage(Stage::Chains)?;
        let trigger = self.config.trigger.clone();
        let client = self.client()?;
        let chains = generate_chains(corpus, client, &mut cache, &trigger).stage(Stage::Chains)?;
        write_file(&self.out(CHAINS_FILE), &to_jsonl(&chains), Stage::Chains)?;
        log::info!(
            "{} chains ({} valid, {} cached)",
            chains.len(),
            chains.iter().filter(|c| c.valid).count(),
            cache.hits()
        );
        Ok(chains)
    }

    pub fn demos(&self, corpus: &Corpus, clusters: &ClusterStage, chains: &[ReasoningChain]) -> Result<DemoSelection, PipelineError> {
        if self.reuse(DEMOS_FILE) {
            let demonstrations = read_jsonl(&self.out(DEMOS_FILE), Stage::Demos)?;
            return Ok(DemoSelection { demonstrations, warnings: Vec::new() });
        }
        let sidecar = match &self.config.token_sidecar {
            Some(path) => Some(TokenSidecar::load(path).stage(Stage::Demos)?),
            None => None,
        };
        let inputs = SamplingInputs {
            model: &clusters.model,
            chains,
            corpus,
            measure: self.config.length_measure,
            sidecar: sidecar.as_ref(),
        };
        let selection = sample_demonstrations(&inputs, self.config.strategy).stage(Stage::Demos)?;
        write_file(&self.out(DEMOS_FILE), &to_jsonl(&selection.demonstrations), Stage::Demos)?;
        let text = selection
            .demonstrations
            .iter()
            .map(|d| format!("# cluster {} / {}\n{}\n", d.cluster, d.item_id, crate::prompt::render_demonstration(d, &self.config.trigger)))
            .collect::<Vec<_>>()
            .join("\n");
        write_file(&self.out(DEMOS_TEXT_FILE), &text, Stage::Demos)?;
        Ok(selection)
    }

    fn suggestions(&self, item: &crate::dataset::McqItem, scores: &ScoreBundle, chains: &HashMap<&str, &ReasoningChain>) -> Vec<Suggestion> {
        let mut out = Vec::new();
        for source in &self.config.reference_sources {
            match source {
                ReferenceSource::Scorer => {
                    if let Some(p) = scores.confidence(&item.id) {
                        out.push(Suggestion { source: "the fine-tuned scorer".into(), answer: p.argmax(), reasons: None });
                    }
                }
                ReferenceSource::Rules => {
                    if let Some(answer) = rule_baseline(item) {
                        out.push(Suggestion { source: "language rules".into(), answer, reasons: None });
                    }
                }
                ReferenceSource::Llm => {
                    if let Some(chain) = chains.get(item.id.as_str()) {
                        if let Some(answer) = chain.extracted {
                            out.push(Suggestion {
                                source: "a previous model answer".into(),
                                answer,
                                reasons: Some(chain.chain_text.clone()),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Renders prompts for `mode`; items whose prompt cannot be built are returned separately.
    pub fn prompts(
        &self,
        mode: PromptMode,
        corpus: &Corpus,
        scores: &ScoreBundle,
        demos: &[Demonstration],
        chains: &[ReasoningChain],
    ) -> Result<(Vec<HeuristicPrompt>, Vec<String>), PipelineError> {
        let dir = self.out(mode.as_str());
        let file = dir.join("prompts.jsonl");
        let config = self.config.prompt_config();
        let chain_index: HashMap<&str, &ReasoningChain> = chains.iter().map(|c| (c.item_id.as_str(), c)).collect();
        let mut prompts = Vec::new();
        let mut skipped = Vec::new();
        for item in corpus {
            let suggestions = if mode.uses_suggestions() { self.suggestions(item, scores, &chain_index) } else { Vec::new() };
            let inputs = PromptInputs {
                item,
                demonstrations: demos,
                candidates: scores.confidence(&item.id),
                suggestions: &suggestions,
            };
            match build_prompt(&inputs, mode, &config) {
                Ok(p) => prompts.push(p),
                Err(e) if mode.uses_suggestions() => {
                    log::warn!("no prompt for `{}`: {e}", item.id);
                    skipped.push(item.id.clone());
                }
                Err(e) => return Err(PipelineError::at(Stage::Prompts)(Box::new(e))),
            }
        }
        write_file(&file, &to_jsonl(&prompts), Stage::Prompts)?;
        if self.config.dump_prompts {
            for p in &prompts {
                write_file(&dir.join("prompts").join(format!("{}.txt", p.item_id)), &p.rendered_text, Stage::Prompts)?;
            }
        }
        Ok((prompts, skipped))
    }

    pub fn complete(&mut self, mode: PromptMode, prompts: &[HeuristicPrompt]) -> Result<Vec<Prediction>, PipelineError> {
        let (temperature, max_tokens) = self.decoding();
        let client = self.client()?;
        let results: Mutex<Vec<Option<CompletionRecord>>> = Mutex::new(vec![None; prompts.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..client.concurrency().min(prompts.len()).max(1) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(prompt) = prompts.get(i) else { break };
                    let mut request = ChatRequest::new(prompt.rendered_text.clone(), format!("{}/{}", prompt.item_id, mode));
                    request.temperature = temperature;
                    request.max_tokens = max_tokens;
                    let record = match client.complete(&request) {
                        Ok(response) => CompletionRecord {
                            item_id: prompt.item_id.clone(),
                            extracted: extract_answer(&response.text),
                            response_text: Some(response.text),
                            error: None,
                        },
                        Err(e) => {
                            log::warn!("completion for `{}` failed: {e}", prompt.item_id);
                            CompletionRecord { item_id: prompt.item_id.clone(), response_text: None, extracted: None, error: Some(e.to_string()) }
                        }
                    };
                    results.lock().expect("results lock")[i] = Some(record);
                });
            }
        });
        let records: Vec<CompletionRecord> =
            results.into_inner().expect("results lock").into_iter().map(|r| r.expect("completed")).collect();
        write_file(&self.out(mode.as_str()).join("completions.jsonl"), &to_jsonl(&records), Stage::Completions)?;
        Ok(records
            .into_iter()
            .map(|r| Prediction { item_id: r.item_id, mode: mode.to_string(), predicted: r.extracted, source: PredictionSource::Llm })
            .collect())
    }

    /// Scores predictions and writes `report.jsonl`, `report.txt` and the submission file for `name`.
    pub fn report(&self, name: &str, predictions: &[Prediction], corpus: &Corpus, fallback: Option<&ScoreBundle>) -> Result<EvalReport, PipelineError> {
        let report = accuracy(name, predictions, corpus).stage(Stage::Report)?;
        let dir = self.out(name);
        write_file(&dir.join("predictions.jsonl"), &to_jsonl(predictions), Stage::Report)?;
        write_file(&dir.join("report.jsonl"), &report.to_jsonl(), Stage::Report)?;
        write_file(&dir.join("report.txt"), &report.to_table(), Stage::Report)?;
        let fallback_letters: Option<HashMap<String, OptionLabel>> =
            fallback.map(|b| corpus.iter().filter_map(|i| Some((i.id.clone(), b.confidence(&i.id)?.argmax()))).collect());
        write_file(&dir.join("submission.tsv"), &report.submission(fallback_letters.as_ref()), Stage::Report)?;
        Ok(report)
    }

    fn needs_chains(&self, modes: &[PromptMode]) -> bool {
        modes.iter().any(|m| {
            m.uses_demonstrations()
                || (*m == PromptMode::ReferenceAnswerWithReasons && self.config.reference_sources.contains(&ReferenceSource::Llm))
        })
    }

    fn run_modes(&mut self, modes: &[PromptMode]) -> Result<Vec<EvalReport>, PipelineError> {
        let corpus = self.ingest()?;
        let scores = self.scores(&corpus)?;
        let uses_demos = modes.iter().any(|m| m.uses_demonstrations());
        let clusters = if uses_demos { Some(self.cluster(&corpus, &scores)?) } else { None };
        let chains = if self.needs_chains(modes) { self.chains(&corpus)? } else { Vec::new() };
        let demos = match &clusters {
            Some(c) => self.demos(&corpus, c, &chains)?.demonstrations,
            None => Vec::new(),
        };
        let mut reports = Vec::new();
        for &mode in modes {
            let (prompts, _skipped) = self.prompts(mode, &corpus, &scores, &demos, &chains)?;
            let predictions = self.complete(mode, &prompts)?;
            let fallback = (!self.config.uniform_fallback).then_some(&scores);
            reports.push(self.report(mode.as_str(), &predictions, &corpus, fallback)?);
        }
        if modes.len() > 1 {
            write_file(&self.out("ablation.txt"), &comparison_table(&reports), Stage::Report)?;
        }
        self.write_manifest()?;
        Ok(reports)
    }

    pub fn run(&mut self) -> Result<EvalReport, PipelineError> {
        let mode = self.config.mode;
        Ok(self.run_modes(&[mode])?.remove(0))
    }

    pub fn ablate(&mut self) -> Result<Vec<EvalReport>, PipelineError> {
        self.run_modes(&PromptMode::ABLATION)
    }

    /// Track 2 report from the scorer's argmax.
    pub fn scorer_report(&self) -> Result<EvalReport, PipelineError> {
        let corpus = self.ingest()?;
        let scores = self.scores(&corpus)?;
        let predictions = scorer_argmax(&scores, &corpus).stage(Stage::Report)?;
        self.report("scorer_argmax", &predictions, &corpus, None)
    }

    pub fn rule_report(&self) -> Result<EvalReport, PipelineError> {
        let corpus = self.ingest()?;
        self.report("rule_baseline", &crate::evaluator::rule_predictions(&corpus), &corpus, None)
    }

    /// Writes `manifest.json`: the config snapshot plus a hash of every artifact.
    pub fn write_manifest(&self) -> Result<PathBuf, PipelineError> {
        let root = &self.config.output_dir;
        let mut artifacts = BTreeMap::new();
        let mut stack = vec![root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).stage(Stage::Report)? {
                let path = entry.stage(Stage::Report)?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                    let bytes = fs::read(&path).stage(Stage::Report)?;
                    let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                    artifacts.insert(rel, hex::encode(Sha256::digest(&bytes)));
                }
            }
        }
        let manifest = serde_json::json!({ "config": self.config, "artifacts": artifacts });
        let path = self.out(MANIFEST_FILE);
        write_file(&path, &serde_json::to_string_pretty(&manifest).expect("serializes"), Stage::Report)?;
        Ok(path)
    }
}

/// Reads the config snapshot from a manifest written by an earlier run.
pub fn config_from_manifest(path: impl AsRef<Path>) -> Result<RunConfig, PipelineError> {
    let text = fs::read_to_string(path).stage(Stage::Config)?;
    let value: serde_json::Value = serde_json::from_str(&text).stage(Stage::Config)?;
    serde_json::from_value(value["config"].clone()).stage(Stage::Config)
}

pub fn run_pipeline(config: RunConfig) -> Result<EvalReport, PipelineError> {
    Pipeline::new(config)?.run()
}

pub fn run_ablation(config: RunConfig) -> Result<Vec<EvalReport>, PipelineError> {
    Pipeline::new(config)?.ablate()
}

/// Parses a score file against an already persisted corpus artifact.
pub fn load_stage_scores(output_dir: &Path) -> Result<(Corpus, ScoreBundle), PipelineError> {
    let corpus = parse_corpus(&fs::read_to_string(output_dir.join(CORPUS_FILE)).stage(Stage::Ingest)?, CorpusFormat::Jsonl)
        .stage(Stage::Ingest)?;
    let scores = parse_scores(&fs::read_to_string(output_dir.join(SCORES_FILE)).stage(Stage::Scores)?, &corpus)
        .stage(Stage::Scores)?;
    Ok((corpus, scores))
}
