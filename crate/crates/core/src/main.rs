use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use metaphor_prompt::clustering::Normalization;
use metaphor_prompt::cot::{LengthMeasure, SelectionStrategy};
use metaphor_prompt::dataset::CorpusFormat;
use metaphor_prompt::evaluator::{comparison_table, EvalReport, Prediction};
use metaphor_prompt::llm_client::{LiveConfig, API_KEY_ENV};
use metaphor_prompt::pipeline::{config_from_manifest, BackendConfig, KChoice, Pipeline, ReferenceSource, RunConfig, Stage};
use metaphor_prompt::prompt::{CandidateStyle, PromptMode, Track};

#[derive(Parser)]
#[command(
    name = "metaphor-prompt",
    version,
    about = "Heuristic-enhanced prompting pipeline for Chinese metaphor multiple-choice questions",
    after_help = format!("The API key for live backends is read from ${API_KEY_ENV}.")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a corpus, writing corpus.jsonl.
    Ingest(RunArgs),
    /// Validate a score file (or build the uniform fallback) against the corpus.
    ScoreImport(RunArgs),
    /// Cluster question embeddings and emit inertia-curve / PCA plot data.
    Cluster {
        #[command(flatten)]
        run: RunArgs,
        /// Copy the inertia curve (TSV) here.
        #[arg(long)]
        inertia_out: Option<PathBuf>,
        /// Copy the PCA scatter records (JSON lines) here.
        #[arg(long)]
        pca_out: Option<PathBuf>,
    },
    /// Generate zero-shot reasoning chains for every item.
    GenCot(RunArgs),
    /// Pick one demonstration per cluster.
    SampleDemos(RunArgs),
    /// Render prompts for the selected mode.
    BuildPrompts(RunArgs),
    /// Run every stage for one prompt mode and write the report.
    Run(RunArgs),
    /// Run full, no_candidates, no_demonstrations and plain_zero_shot.
    Ablate(RunArgs),
    /// Report for a source: LLM predictions of a finished run, scorer argmax, or language rules.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = ReportSource::Llm)]
        source: ReportSource,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportSource {
    Llm,
    Scorer,
    Rules,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Replay,
    Live,
}

#[derive(Args, Default)]
struct RunArgs {
    /// Declarative TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rerun from the config snapshot in a previous run's manifest.json.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Corpus file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus adapter: `jsonl` (native records) or `task-native`.
    #[arg(long)]
    format: Option<CorpusFormat>,
    /// Score file exported by the scorer.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// URL serving a score file.
    #[arg(long)]
    scores_url: Option<String>,
    /// Use uniform confidences (embeddings from --scores if given, else zeros).
    #[arg(long)]
    uniform_fallback: bool,
    /// Embedding dimension of the zero-embedding fallback.
    #[arg(long)]
    fallback_dim: Option<usize>,
    /// Output directory for stage artifacts and reports.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Cache directory for chain and transcript caches (default: <output>/cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Prompt mode.
    #[arg(long)]
    mode: Option<PromptMode>,
    /// Demonstration selection strategy.
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    /// Candidate rendering: `scores` or `ranked`.
    #[arg(long)]
    candidate_style: Option<CandidateStyle>,
    /// Evaluation track: 1 (LLM answer sentence) or 2.
    #[arg(long)]
    track: Option<Track>,
    /// Number of clusters, or `auto` for the elbow rule.
    #[arg(long)]
    k: Option<KChoice>,
    /// Largest k tried by the elbow rule.
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// k-means restarts.
    #[arg(long)]
    restarts: Option<usize>,
    /// Embedding normalization before clustering: `none` or `cosine`.
    #[arg(long)]
    normalize: Option<Normalization>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Transcript file for the replay backend.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API (live backend).
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Maximum in-flight live requests.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Attempts per live request.
    #[arg(long)]
    retries: Option<u32>,
    /// Question length: `scalar_count` or `token_count`.
    #[arg(long)]
    length_measure: Option<LengthMeasure>,
    /// Token counts per item (`{"id":..,"tokens":..}` lines).
    #[arg(long)]
    token_sidecar: Option<PathBuf>,
    /// Chain-of-thought trigger phrase.
    #[arg(long)]
    trigger: Option<String>,
    /// Suggestion sources for reference-answer modes (repeatable): scorer, rules, llm.
    #[arg(long = "reference-source")]
    reference_sources: Vec<ReferenceSource>,
    /// Reuse persisted stage artifacts.
    #[arg(long)]
    resume: bool,
    /// Write each rendered prompt to <output>/<mode>/prompts/<id>.txt.
    #[arg(long)]
    dump_prompts: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut config = match (&self.config, &self.manifest) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            (None, Some(path)) => config_from_manifest(path)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(v) = self.corpus {
            config.corpus = v;
        }
        if let Some(v) = self.format {
            config.format = v;
        }
        if let Some(v) = self.scores {
            config.scores = Some(v);
        }
        if let Some(v) = self.scores_url {
            config.scores_url = Some(v);
        }
        config.uniform_fallback |= self.uniform_fallback;
        if let Some(v) = self.fallback_dim {
            config.fallback_dimension = v;
        }
        if let Some(v) = self.output {
            config.output_dir = v;
        }
        if let Some(v) = self.cache_dir {
            config.cache_dir = Some(v);
        }
        if let Some(v) = self.mode {
            config.mode = v;
        }
        if let Some(v) = self.strategy {
            config.strategy = v;
        }
        if let Some(v) = self.candidate_style {
            config.candidate_style = v;
        }
        if let Some(v) = self.track {
            config.track = v;
        }
        if let Some(v) = self.k {
            config.clustering.k = v;
        }
        if let Some(v) = self.k_max {
            config.clustering.k_max = v;
        }
        if let Some(v) = self.seed {
            config.clustering.seed = v;
        }
        if let Some(v) = self.restarts {
            config.clustering.restarts = v;
        }
        if let Some(v) = self.normalize {
            config.clustering.normalize = v;
        }
        if let Some(v) = self.length_measure {
            config.length_measure = v;
        }
        if let Some(v) = self.token_sidecar {
            config.token_sidecar = Some(v);
        }
        if let Some(v) = self.trigger {
            config.trigger = v;
        }
        if !self.reference_sources.is_empty() {
            config.reference_sources = self.reference_sources;
        }
        config.resume |= self.resume;
        config.dump_prompts |= self.dump_prompts;

        let kind = self.backend.or(match (&self.transcript, &self.base_url) {
            (Some(_), _) => Some(BackendKind::Replay),
            (None, Some(_)) => Some(BackendKind::Live),
            _ => None,
        });
        match kind {
            Some(BackendKind::Replay) => {
                let transcript = match (self.transcript, &config.backend) {
                    (Some(t), _) => t,
                    (None, Some(BackendConfig::Replay { transcript })) => transcript.clone(),
                    _ => bail!("the replay backend needs --transcript"),
                };
                config.backend = Some(BackendConfig::Replay { transcript });
            }
            Some(BackendKind::Live) => {
                let mut live = match &config.backend {
                    Some(BackendConfig::Live(live)) => live.clone(),
                    _ => LiveConfig {
                        base_url: String::new(),
                        model_name: "qwen2-plus".into(),
                        temperature: 0.0,
                        max_tokens: metaphor_prompt::llm_client::DEFAULT_MAX_TOKENS,
                        concurrency: 4,
                        retries: 3,
                    },
                };
                if let Some(v) = self.base_url {
                    live.base_url = v;
                }
                if let Some(v) = self.model_name {
                    live.model_name = v;
                }
                if let Some(v) = self.temperature {
                    live.temperature = v;
                }
                if let Some(v) = self.max_tokens {
                    live.max_tokens = v;
                }
                if let Some(v) = self.concurrency {
                    live.concurrency = v;
                }
                if let Some(v) = self.retries {
                    live.retries = v;
                }
                if live.base_url.is_empty() {
                    bail!("the live backend needs --base-url");
                }
                config.backend = Some(BackendConfig::Live(live));
            }
            None => {}
        }
        Ok(config)
    }
}

fn pipeline(args: RunArgs, resume_upstream: bool, refresh: &[Stage]) -> Result<Pipeline> {
    let mut config = args.into_config()?;
    config.resume |= resume_upstream;
    let mut pipeline = Pipeline::new(config)?;
    for &stage in refresh {
        pipeline.refresh(stage);
    }
    Ok(pipeline)
}

fn print_report(report: &EvalReport) {
    print!("{}", report.to_table());
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest(args) => {
            let p = pipeline(args, false, &[])?;
            let corpus = p.ingest()?;
            let c = &corpus.metadata.counts;
            println!("{} items (train {}, validation {}, test {})", corpus.len(), c.train, c.validation, c.test);
            p.write_manifest()?;
        }
        Command::ScoreImport(args) => {
            let p = pipeline(args, true, &[Stage::Scores])?;
            let corpus = p.ingest()?;
            let scores = p.scores(&corpus)?;
            println!("{} score records, dimension {}, scorer {}", scores.len(), scores.dimension(), scores.header.scorer_id);
            p.write_manifest()?;
        }
        Command::Cluster { run, inertia_out, pca_out } => {
            let p = pipeline(run, true, &[Stage::Cluster])?;
            let corpus = p.ingest()?;
            let scores = p.scores(&corpus)?;
            let stage = p.cluster(&corpus, &scores)?;
            println!("k = {}, inertia {:.6}, sizes {:?}", stage.model.k, stage.model.inertia, stage.model.cluster_sizes());
            if let Some(path) = inertia_out {
                let curve = stage.curve.as_ref().context("inertia curve is only computed with --k auto")?;
                fs::write(&path, curve.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = pca_out {
                let pca = stage.pca.as_ref().context("PCA projection unavailable for these embeddings")?;
                fs::write(&path, pca.to_jsonl(Some(&stage.model.assignment)))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            p.write_manifest()?;
        }
        Command::GenCot(args) => {
            let mut p = pipeline(args, true, &[Stage::Chains])?;
            let corpus = p.ingest()?;
            let chains = p.chains(&corpus)?;
            println!("{} chains, {} valid", chains.len(), chains.iter().filter(|c| c.valid).count());
            p.write_manifest()?;
        }
        Command::SampleDemos(args) => {
            let mut p = pipeline(args, true, &[Stage::Demos])?;
            let corpus = p.ingest()?;
            let scores = p.scores(&corpus)?;
            let clusters = p.cluster(&corpus, &scores)?;
            let chains = p.chains(&corpus)?;
            let selection = p.demos(&corpus, &clusters, &chains)?;
            for w in &selection.warnings {
                eprintln!("warning: {w}");
            }
            for d in &selection.demonstrations {
                println!("cluster {}: {}", d.cluster, d.item_id);
            }
            p.write_manifest()?;
        }
        Command::BuildPrompts(args) => {
            let mut p = pipeline(args, true, &[])?;
            let mode = p.config().mode;
            let corpus = p.ingest()?;
            let scores = p.scores(&corpus)?;
            let (chains, demos) = if mode.uses_demonstrations() || mode == PromptMode::ReferenceAnswerWithReasons {
                let chains = p.chains(&corpus)?;
                let demos = if mode.uses_demonstrations() {
                    let clusters = p.cluster(&corpus, &scores)?;
                    p.demos(&corpus, &clusters, &chains)?.demonstrations
                } else {
                    Vec::new()
                };
                (chains, demos)
            } else {
                (Vec::new(), Vec::new())
            };
            let (prompts, skipped) = p.prompts(mode, &corpus, &scores, &demos, &chains)?;
            println!("{} prompts rendered for mode {mode} ({} skipped)", prompts.len(), skipped.len());
            p.write_manifest()?;
        }
        Command::Run(args) => {
            let mut p = pipeline(args, false, &[])?;
            let report = p.run()?;
            print_report(&report);
        }
        Command::Ablate(args) => {
            let mut p = pipeline(args, false, &[])?;
            let reports = p.ablate()?;
            print!("{}", comparison_table(&reports));
        }
        Command::Report { run, source } => {
            let p = pipeline(run, true, &[])?;
            let report = match source {
                ReportSource::Scorer => p.scorer_report()?,
                ReportSource::Rules => p.rule_report()?,
                ReportSource::Llm => {
                    let mode = p.config().mode;
                    let dir = p.config().output_dir.join(mode.as_str());
                    let path = dir.join("predictions.jsonl");
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {} (run the `run` subcommand first)", path.display()))?;
                    let predictions = text
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(serde_json::from_str)
                        .collect::<Result<Vec<Prediction>, _>>()
                        .with_context(|| format!("parsing {}", path.display()))?;
                    let corpus = p.ingest()?;
                    let scores = p.scores(&corpus).ok();
                    p.report(mode.as_str(), &predictions, &corpus, scores.as_ref())?
                }
            };
            print_report(&report);
            p.write_manifest()?;
        }
    }
    Ok(())
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut previous = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !previous.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        previous = text;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::FAILURE
        }
    }
}
