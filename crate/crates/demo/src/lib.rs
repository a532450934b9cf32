//! WebAssembly bindings for the browser demo.
//!
//! Every export takes and returns JSON strings so the page needs no glue
//! beyond the generated module. The `*_json` functions hold the logic and are
//! what the native tests exercise.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wasm_bindgen::prelude::*;

use metaphor_prompt::clustering::{elbow_select, inertia_curve, kmeans_points, pca_project, ClusterError};
use metaphor_prompt::cot::Demonstration;
use metaphor_prompt::dataset::McqItem;
use metaphor_prompt::prompt::{build_prompt, CandidateStyle, PromptConfig, PromptError, PromptInputs, PromptMode};
use metaphor_prompt::score_bridge::{ConfidenceVector, ScoreError};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("invalid input: {0}")]
    Input(#[from] serde_json::Error),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Scores(#[from] ScoreError),
    #[error("{0}")]
    Value(String),
}

#[derive(Debug, Serialize)]
pub struct Scatter {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Centroids and points projected on the first two principal axes.
    pub coords: Vec<[f64; 2]>,
    pub centroid_coords: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
}

#[derive(Debug, Serialize)]
pub struct Elbow {
    pub inertia: Vec<(usize, f64)>,
    pub elbow: usize,
}

#[derive(Debug, Deserialize)]
pub struct PromptRequest {
    pub item: McqItem,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
    pub candidates: Option<[f64; 4]>,
    pub mode: String,
    #[serde(default)]
    pub candidate_style: Option<String>,
}

fn parse_points(points: &str) -> Result<Vec<Vec<f64>>, DemoError> {
    Ok(serde_json::from_str(points)?)
}

fn project(axes: &[Vec<f64>; 2], mean: &[f64], p: &[f64]) -> [f64; 2] {
    let dot = |axis: &[f64]| axis.iter().zip(p.iter().zip(mean)).map(|(a, (x, m))| a * (x - m)).sum::<f64>();
    [dot(&axes[0]), dot(&axes[1])]
}

/// k-means on `points` (a JSON array of equal-length arrays), plus a 2-D PCA
/// projection of the points and centroids for plotting.
pub fn cluster_scatter_json(points: &str, k: usize, seed: u64) -> Result<String, DemoError> {
    let points = parse_points(points)?;
    let fit = kmeans_points(&points, k, seed, 10)?;
    let ids: Vec<String> = (0..points.len()).map(|i| i.to_string()).collect();
    let pca = pca_project(&ids, &points)?;
    let centroid_coords = fit.centroids.iter().map(|c| project(&pca.components, &pca.mean, c)).collect();
    let scatter = Scatter {
        k,
        assignment: fit.assignment,
        inertia: fit.inertia,
        iterations: fit.iterations,
        coords: pca.coords,
        centroid_coords,
        explained_variance_ratio: pca.explained_variance_ratio,
    };
    Ok(serde_json::to_string(&scatter)?)
}

/// Inertia for k = 1..=k_max and the elbow choice.
pub fn elbow_curve_json(points: &str, k_max: usize, seed: u64) -> Result<String, DemoError> {
    let points = parse_points(points)?;
    let curve = inertia_curve(&points, k_max, seed, 10)?;
    let elbow = elbow_select(&curve)?;
    Ok(serde_json::to_string(&Elbow { inertia: curve.points, elbow })?)
}

/// Renders one prompt; returns the text.
pub fn render_prompt_text(request: &str) -> Result<String, DemoError> {
    let request: PromptRequest = serde_json::from_str(request)?;
    let mode: PromptMode = request.mode.parse().map_err(DemoError::Value)?;
    let candidates = request.candidates.map(ConfidenceVector::new).transpose()?;
    let mut config = PromptConfig::default();
    if let Some(style) = &request.candidate_style {
        config.candidate_style = style.parse::<CandidateStyle>().map_err(DemoError::Value)?;
    }
    let inputs = PromptInputs {
        item: &request.item,
        demonstrations: &request.demonstrations,
        candidates: candidates.as_ref(),
        suggestions: &[],
    };
    Ok(build_prompt(&inputs, mode, &config)?.rendered_text)
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = clusterScatter)]
pub fn cluster_scatter(points: &str, k: usize, seed: u32) -> Result<String, JsError> {
    cluster_scatter_json(points, k, u64::from(seed)).map_err(js)
}

#[wasm_bindgen(js_name = elbowCurve)]
pub fn elbow_curve(points: &str, k_max: usize, seed: u32) -> Result<String, JsError> {
    elbow_curve_json(points, k_max, u64::from(seed)).map_err(js)
}

#[wasm_bindgen(js_name = renderPrompt)]
pub fn render_prompt(request: &str) -> Result<String, JsError> {
    render_prompt_text(request).map_err(js)
}
