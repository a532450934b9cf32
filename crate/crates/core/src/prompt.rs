//! Heuristic-enhanced prompt assembly.
//!
//! Full layout, newline separated:
//!
//! ```text
//! Demonstration:
//! <demo 1>
//!
//! <demo k>
//!
//! Q: <question>
//! A. <option> .. D. <option>
//! Answer candidates: A:0.7000, B:0.1000, C:0.1000, D:0.1000
//! A: Let's think step by step.
//! ```
//!
//! Ablation modes drop whole blocks; reference-answer modes swap the
//! candidates line for suggested answers.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot::{Demonstration, COT_TRIGGER};
use crate::dataset::{McqItem, OptionLabel};
use crate::score_bridge::ConfidenceVector;

pub const TRACK1_INSTRUCTION: &str = "Please state your final choice using the sentence \"The answer is {}.\"";
pub const REFERENCE_DISCLAIMER: &str = "Note: this reference may be wrong.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("mode {0} needs at least one demonstration")]
    MissingDemonstrations(PromptMode),
    #[error("mode {0} needs answer candidates")]
    MissingCandidates(PromptMode),
    #[error("mode {0} needs at least one suggested answer")]
    MissingSuggestion(PromptMode),
    #[error("mode {0} needs a suggestion with reasons")]
    MissingReasons(PromptMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Full,
    NoCandidates,
    NoDemonstrations,
    PlainZeroShot,
    ReferenceAnswer,
    ReferenceAnswerWithReasons,
}

impl PromptMode {
    /// Modes compared in the ablation study.
    pub const ABLATION: [PromptMode; 4] =
        [PromptMode::Full, PromptMode::NoCandidates, PromptMode::NoDemonstrations, PromptMode::PlainZeroShot];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Full => "full",
            PromptMode::NoCandidates => "no_candidates",
            PromptMode::NoDemonstrations => "no_demonstrations",
            PromptMode::PlainZeroShot => "plain_zero_shot",
            PromptMode::ReferenceAnswer => "reference_answer",
            PromptMode::ReferenceAnswerWithReasons => "reference_answer_with_reasons",
        }
    }

    pub fn uses_demonstrations(self) -> bool {
        !matches!(self, PromptMode::NoDemonstrations | PromptMode::PlainZeroShot)
    }

    pub fn uses_candidates(self) -> bool {
        matches!(self, PromptMode::Full | PromptMode::NoDemonstrations)
    }

    pub fn uses_suggestions(self) -> bool {
        matches!(self, PromptMode::ReferenceAnswer | PromptMode::ReferenceAnswerWithReasons)
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let normalized = s.replace('-', "_");
        [
            PromptMode::Full,
            PromptMode::NoCandidates,
            PromptMode::NoDemonstrations,
            PromptMode::PlainZeroShot,
            PromptMode::ReferenceAnswer,
            PromptMode::ReferenceAnswerWithReasons,
        ]
        .into_iter()
        .find(|m| m.as_str() == normalized)
        .ok_or_else(|| format!("unknown prompt mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStyle {
    /// `A:0.7000, B:0.1000, ...`
    #[default]
    Scores,
    /// `A > C > B > D`, highest confidence first.
    Ranked,
}

impl FromStr for CandidateStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scores" => Ok(CandidateStyle::Scores),
            "ranked" => Ok(CandidateStyle::Ranked),
            other => Err(format!("unknown candidate style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    /// LLM track: answers must use the shared answer sentence.
    #[default]
    Track1,
    /// Rule / ML track: direct option comparison.
    Track2,
}

impl FromStr for Track {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" | "track1" => Ok(Track::Track1),
            "2" | "track2" => Ok(Track::Track2),
            other => Err(format!("unknown track `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub trigger: String,
    pub candidate_style: CandidateStyle,
    pub track: Track,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { trigger: COT_TRIGGER.to_string(), candidate_style: CandidateStyle::Scores, track: Track::Track1 }
    }
}

/// A suggested answer for the reference-answer modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub source: String,
    pub answer: OptionLabel,
    #[serde(default)]
    pub reasons: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicPrompt {
    pub mode: PromptMode,
    pub item_id: String,
    pub demonstration_ids: Vec<String>,
    pub candidates: Option<ConfidenceVector>,
    pub rendered_text: String,
}

/// `The answer is X.`
pub fn answer_line(label: OptionLabel) -> String {
    format!("The answer is {label}.")
}

/// `Q:` line followed by one line per option.
pub fn question_block(item: &McqItem) -> String {
    let mut out = format!("Q: {}", item.question);
    for label in OptionLabel::ALL {
        let _ = write!(out, "\n{label}. {}", item.option(label));
    }
    out
}

pub fn render_demonstration(demo: &Demonstration, trigger: &str) -> String {
    let mut out = format!("Q: {}", demo.question);
    for label in OptionLabel::ALL {
        let _ = write!(out, "\n{label}. {}", demo.options[label.index()]);
    }
    if demo.chain_text.is_empty() {
        let _ = write!(out, "\nA: {trigger}");
    } else {
        let _ = write!(out, "\nA: {trigger} {}", demo.chain_text);
    }
    let _ = write!(out, "\n{}", demo.final_answer_line());
    out
}

/// Candidate list in A-D order with four decimals.
pub fn render_candidates(p: &ConfidenceVector) -> String {
    OptionLabel::ALL
        .iter()
        .map(|&l| format!("{l}:{:.4}", p.get(l)))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn render_candidates_ranked(p: &ConfidenceVector) -> String {
    let mut labels = OptionLabel::ALL.to_vec();
    labels.sort_by(|a, b| p.get(*b).total_cmp(&p.get(*a)).then(a.cmp(b)));
    labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" > ")
}

fn suggestion_line(s: &Suggestion, with_reasons: bool) -> String {
    match (&s.reasons, with_reasons) {
        (Some(reasons), true) => {
            let flat = reasons.split_whitespace().collect::<Vec<_>>().join(" ");
            format!("Reference answer from {}: {}. Reasons: {flat} {REFERENCE_DISCLAIMER}", s.source, s.answer)
        }
        _ => format!("Reference answer from {}: {}. {REFERENCE_DISCLAIMER}", s.source, s.answer),
    }
}

pub struct PromptInputs<'a> {
    pub item: &'a McqItem,
    pub demonstrations: &'a [Demonstration],
    pub candidates: Option<&'a ConfidenceVector>,
    pub suggestions: &'a [Suggestion],
}

pub fn build_prompt(inputs: &PromptInputs<'_>, mode: PromptMode, config: &PromptConfig) -> Result<HeuristicPrompt, PromptError> {
    if mode.uses_demonstrations() && inputs.demonstrations.is_empty() {
        return Err(PromptError::MissingDemonstrations(mode));
    }
    let candidates = if mode.uses_candidates() {
        Some(*inputs.candidates.ok_or(PromptError::MissingCandidates(mode))?)
    } else {
        None
    };
    if mode.uses_suggestions() && inputs.suggestions.is_empty() {
        return Err(PromptError::MissingSuggestion(mode));
    }
    let with_reasons = mode == PromptMode::ReferenceAnswerWithReasons;
    if with_reasons && inputs.suggestions.iter().all(|s| s.reasons.is_none()) {
        return Err(PromptError::MissingReasons(mode));
    }

    let mut lines: Vec<String> = Vec::new();
    let mut demonstration_ids = Vec::new();
    if mode.uses_demonstrations() {
        lines.push("Demonstration:".to_string());
        for demo in inputs.demonstrations {
            lines.push(render_demonstration(demo, &config.trigger));
            lines.push(String::new());
            demonstration_ids.push(demo.item_id.clone());
        }
    }
    lines.push(question_block(inputs.item));
    if let Some(p) = &candidates {
        let rendered = match config.candidate_style {
            CandidateStyle::Scores => render_candidates(p),
            CandidateStyle::Ranked => render_candidates_ranked(p),
        };
        lines.push(format!("Answer candidates: {rendered}"));
    }
    if mode.uses_suggestions() {
        lines.extend(inputs.suggestions.iter().map(|s| suggestion_line(s, with_reasons)));
    }
    if config.track == Track::Track1 {
        lines.push(TRACK1_INSTRUCTION.to_string());
    }
    lines.push(format!("A: {}", config.trigger));

    Ok(HeuristicPrompt {
        mode,
        item_id: inputs.item.id.clone(),
        demonstration_ids,
        candidates,
        rendered_text: lines.join("\n"),
    })
}
