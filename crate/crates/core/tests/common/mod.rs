#![allow(dead_code)]

use std::path::{Path, PathBuf};

use metaphor_prompt::clustering::kmeans;
use metaphor_prompt::cot::{LengthMeasure, ReasoningChain, SamplingInputs, SelectionStrategy};
use metaphor_prompt::dataset::{Corpus, McqItem, OptionLabel, Split, Subtask};
use metaphor_prompt::pipeline::{BackendConfig, RunConfig};
use metaphor_prompt::score_bridge::QuestionEmbedding;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn replay_config(output: &Path) -> RunConfig {
    let dir = fixtures().join("replay");
    RunConfig {
        corpus: dir.join("corpus.jsonl"),
        scores: Some(dir.join("scores.jsonl")),
        output_dir: output.to_path_buf(),
        backend: Some(BackendConfig::Replay { transcript: dir.join("transcript.jsonl") }),
        ..RunConfig::default()
    }
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("fixture line is JSON"))
        .collect()
}

/// Minimum within-cluster sum of squares over every partition of `points`
/// into exactly `k` non-empty groups.
pub fn brute_force_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    // Restricted growth strings enumerate each partition exactly once.
    fn recurse(i: usize, used: usize, k: usize, labels: &mut Vec<usize>, points: &[Vec<f64>], best: &mut f64) {
        let n = labels.len();
        if n - i < k - used {
            return;
        }
        if i == n {
            *best = best.min(partition_cost(points, labels, k));
            return;
        }
        for label in 0..=used.min(k - 1) {
            labels[i] = label;
            recurse(i + 1, used.max(label + 1), k, labels, points, best);
        }
    }
    recurse(0, 0, k, &mut labels, points, &mut best);
    best
}

fn partition_cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        let mut mean = vec![0.0; d];
        for p in &members {
            for (m, x) in mean.iter_mut().zip(p.iter()) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= members.len() as f64;
        }
        for p in &members {
            total += p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
    }
    total
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (arp, arq) = (row[p], row[q]);
                    row[p] = c * arp - s * arq;
                    row[q] = s * arp + c * arq;
                }
                let (row_p, row_q) = (a[p].clone(), a[q].clone());
                for (r, (apr, aqr)) in row_p.into_iter().zip(row_q).enumerate() {
                    a[p][r] = c * apr - s * aqr;
                    a[q][r] = s * apr + c * aqr;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    values.sort_by(|x, y| y.total_cmp(x));
    values
}

/// Hand-built sampling fixture: two well separated clusters whose members
/// differ in question length, chain length and distance to the centroid.
pub struct SamplingFixture {
    pub corpus: Corpus,
    pub embeddings: Vec<QuestionEmbedding>,
    pub chains: Vec<ReasoningChain>,
}

fn filler(n: usize) -> String {
    "喻".repeat(n)
}

pub fn sampling_fixture() -> SamplingFixture {
    // (id, x, y, question chars, chain chars, chain agrees with gold)
    let rows: [(&str, f64, f64, usize, usize, bool); 8] = [
        ("s1", -1.0, 0.0, 6, 40, true),
        ("s2", 0.1, 0.0, 12, 25, true),
        ("s3", 1.0, 0.0, 30, 10, true),
        ("s4", 0.0, -0.1, 3, 5, false),
        ("s5", -0.1, 0.1, 15, 15, true),
        ("t1", 9.5, 10.0, 8, 20, true),
        ("t2", 10.0, 10.0, 9, 18, true),
        ("t3", 10.5, 10.0, 8, 30, true),
    ];
    let mut items = Vec::new();
    let mut embeddings = Vec::new();
    let mut chains = Vec::new();
    for (i, &(id, x, y, q, c, agrees)) in rows.iter().enumerate() {
        let gold = OptionLabel::from_index(i % 4).unwrap();
        let wrong = OptionLabel::from_index((i + 1) % 4).unwrap();
        items.push(McqItem {
            id: id.into(),
            question: filler(q),
            options: ["甲".into(), "乙".into(), "丙".into(), "丁".into()],
            gold: Some(gold),
            subtask: Subtask::Components,
            split: Split::Validation,
        });
        embeddings.push(QuestionEmbedding { item_id: id.into(), vector: vec![x, y] });
        let extracted = if agrees { gold } else { wrong };
        chains.push(ReasoningChain {
            item_id: id.into(),
            chain_text: filler(c),
            extracted: Some(extracted),
            valid: agrees,
            error: None,
        });
    }
    SamplingFixture { corpus: Corpus::new(items).unwrap(), embeddings, chains }
}

/// Hand-derived winners per strategy, sorted by id.
///
/// Cluster s (centroid (0, 0), s4 excluded for its wrong chain):
/// - shortest question: s1 (6)
/// - shortest chain: s3 (10)
/// - nearest the centroid: s2 (0.1; s4 is as close but invalid)
/// - shortest question + chain: s5 (15 + 15 = 30)
///
/// Cluster t (centroid (10, 10)):
/// - shortest question: t1 and t3 tie at 8, t1 wins by id
/// - shortest chain: t2 (18)
/// - nearest the centroid: t2
/// - shortest question + chain: t2 (27)
pub fn expected_demonstrations(strategy: SelectionStrategy) -> [&'static str; 2] {
    match strategy {
        SelectionStrategy::ShortestQuestion => ["s1", "t1"],
        SelectionStrategy::ShortestChain => ["s3", "t2"],
        SelectionStrategy::ClusterCenter => ["s2", "t2"],
        SelectionStrategy::ShortestBoth => ["s5", "t2"],
    }
}

pub fn sample(fixture: &SamplingFixture, strategy: SelectionStrategy) -> metaphor_prompt::cot::DemoSelection {
    let model = kmeans(&fixture.embeddings, 2, 0, 10).unwrap();
    let inputs = SamplingInputs {
        model: &model,
        chains: &fixture.chains,
        corpus: &fixture.corpus,
        measure: LengthMeasure::ScalarCount,
        sidecar: None,
    };
    metaphor_prompt::cot::sample_demonstrations(&inputs, strategy).unwrap()
}

/// True when `long` equals `short` with exactly one contiguous run of lines inserted.
pub fn differs_by_one_block(short: &str, long: &str) -> bool {
    let a: Vec<&str> = short.lines().collect();
    let b: Vec<&str> = long.lines().collect();
    if b.len() <= a.len() {
        return false;
    }
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    prefix + suffix >= a.len()
}
