//! Heuristic-enhanced prompting for Chinese metaphor multiple-choice questions.
//!
//! The pipeline combines per-option confidence scores from a fine-tuned
//! encoder (imported through [`score_bridge`]) with chain-of-thought
//! demonstrations sampled one per question cluster ([`clustering`], [`cot`]),
//! renders the final prompt ([`prompt`]), queries an LLM ([`llm_client`]) and
//! scores the extracted answers ([`evaluator`]). [`pipeline`] wires the stages
//! together with resumable on-disk artifacts.

pub mod clustering;
pub mod cot;
pub mod dataset;
pub mod evaluator;
pub mod llm_client;
pub mod pipeline;
pub mod prompt;
pub mod score_bridge;

pub use dataset::{Corpus, McqItem, OptionLabel};
pub use score_bridge::{ConfidenceVector, ScoreBundle};
