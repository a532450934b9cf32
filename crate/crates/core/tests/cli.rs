mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaphor-prompt")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> String {
    common::fixtures().join("replay").join(name).to_string_lossy().into_owned()
}

fn path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn run_full_auto_k_on_fixture() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(&[
        "run",
        "--corpus", &fixture("corpus.jsonl"),
        "--scores", &fixture("scores.jsonl"),
        "--transcript", &fixture("transcript.jsonl"),
        "--mode", "full",
        "--k", "auto",
        "-o", &path(out.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("full"), "{stdout}");
    for artifact in ["corpus.jsonl", "scores.jsonl", "clusters.json", "inertia.tsv", "pca.jsonl", "chains.jsonl", "demos.jsonl", "full/report.jsonl", "full/submission.tsv", "manifest.json"] {
        assert!(out.path().join(artifact).exists(), "missing {artifact}");
    }
    let clusters: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("clusters.json")).unwrap()).unwrap();
    assert_eq!(clusters["model"]["k"], 3);
    let demos = fs::read_to_string(out.path().join("demos.jsonl")).unwrap();
    assert_eq!(demos.lines().count(), 3);
    let submission = fs::read_to_string(out.path().join("full/submission.tsv")).unwrap();
    assert_eq!(submission.lines().filter(|l| l.contains('\t')).count(), 24);
}

#[test]
fn cluster_with_fixed_k_writes_plot_data() {
    let out = tempfile::tempdir().unwrap();
    let pca = out.path().join("scatter.jsonl");
    let o = cli(&[
        "cluster",
        "--corpus", &fixture("corpus.jsonl"),
        "--scores", &fixture("scores.jsonl"),
        "--k", "3",
        "-o", &path(&out.path().join("run")),
        "--pca-out", &path(&pca),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("k = 3"));
    let rows = common::read_jsonl(&pca);
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r["cluster"].as_u64().is_some_and(|c| c < 3)));
}

#[test]
fn missing_scores_names_the_stage() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(&[
        "run",
        "--corpus", &fixture("corpus.jsonl"),
        "--scores", &path(&out.path().join("absent.jsonl")),
        "--transcript", &fixture("transcript.jsonl"),
        "-o", &path(out.path()),
    ]);
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("[score_bridge]"), "{stderr}");
}

#[test]
fn toml_config_with_flag_override() {
    let out = tempfile::tempdir().unwrap();
    let config = out.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "corpus = {:?}\nscores = {:?}\noutput_dir = {:?}\nmode = \"plain_zero_shot\"\n\n[backend]\nkind = \"replay\"\ntranscript = {:?}\n",
            fixture("corpus.jsonl"),
            fixture("scores.jsonl"),
            path(&out.path().join("run")),
            fixture("transcript.jsonl"),
        ),
    )
    .unwrap();
    let o = cli(&["run", "--config", &path(&config), "--mode", "no_demonstrations"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.path().join("run/no_demonstrations/report.jsonl").exists());
    assert!(!out.path().join("run/plain_zero_shot").exists());
}

#[test]
fn scorer_and_rule_reports() {
    let out = tempfile::tempdir().unwrap();
    for source in ["scorer", "rules"] {
        let o = cli(&[
            "report",
            "--source", source,
            "--corpus", &fixture("corpus.jsonl"),
            "--scores", &fixture("scores.jsonl"),
            "-o", &path(out.path()),
        ]);
        assert!(o.status.success(), "{source}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let scorer = common::read_jsonl(&out.path().join("scorer_argmax/report.jsonl"));
    // The fixture scorer misses one item per group of eight.
    assert_eq!(scorer[0]["counts"]["correct"], 21);
    assert!(out.path().join("rule_baseline/report.jsonl").exists());
}

#[test]
fn ablate_prints_comparison() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(&[
        "ablate",
        "--corpus", &fixture("corpus.jsonl"),
        "--scores", &fixture("scores.jsonl"),
        "--transcript", &fixture("transcript.jsonl"),
        "-o", &path(out.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for mode in ["full", "no_candidates", "no_demonstrations", "plain_zero_shot"] {
        assert!(stdout.contains(mode), "{stdout}");
    }
    assert!(out.path().join("ablation.txt").exists());
}
