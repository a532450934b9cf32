//! Regenerates the replay fixture under `tests/fixtures/replay`.
//!
//! The corpus and score file are written from the table below. The transcript
//! is recorded by running the pipeline against a scripted backend whose
//! answers depend on what the prompt contains:
//! - chain prompts get a short analysis ending in the gold answer, except for
//!   a few items whose chain picks a wrong option;
//! - prompts carrying an `Answer candidates:` line follow the top candidate;
//! - reference-answer prompts follow the first suggestion;
//! - prompts with demonstrations but no candidates are right two times in three;
//! - plain prompts are right on every other item, and one gets no answer at all.
//!
//! Usage: `cargo run -p metaphor-prompt --example author_fixture [out_dir]`

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metaphor_prompt::cot::chain_prompt;
use metaphor_prompt::dataset::{Corpus, McqItem, OptionLabel, Split, Subtask};
use metaphor_prompt::llm_client::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, LlmClient, TranscriptCache, TranscriptRecord,
};
use metaphor_prompt::pipeline::{Pipeline, ReferenceSource, RunConfig};
use metaphor_prompt::prompt::PromptMode;
use metaphor_prompt::score_bridge::{ConfidenceVector, QuestionEmbedding, ScoreBundle, ScoreEntry, ScoreHeader};

const DIMENSION: usize = 8;

/// (sentence, tenor, vehicle, distractor, distractor)
type Row = (&'static str, &'static str, &'static str, &'static str, &'static str);

/// Eight sentences per theme.
const SENTENCES: [[Row; 8]; 3] = [
    [
        ("弯弯的月亮像一只小船。", "月亮", "小船", "星星", "河水"),
        ("春雨像一根根银丝。", "春雨", "银丝", "春风", "柳枝"),
        ("闪电宛如一条火蛇划过夜空。", "闪电", "火蛇", "夜空", "雷声"),
        ("白云好像一团团棉花。", "白云", "棉花", "蓝天", "羊群"),
        ("瀑布犹如一匹白练挂在山间。", "瀑布", "白练", "山间", "岩石"),
        ("秋天的枫叶仿佛燃烧的火焰。", "枫叶", "火焰", "秋风", "树枝"),
        ("满天的星星像无数眨眼的眼睛。", "星星", "眼睛", "月亮", "夜色"),
        ("远处的群山如同起伏的波浪。", "群山", "波浪", "云雾", "田野"),
    ],
    [
        ("老师像辛勤的园丁。", "老师", "园丁", "学生", "花朵"),
        ("她的笑容像春天的阳光。", "笑容", "阳光", "眼睛", "花园"),
        ("母亲的爱犹如一盏明灯。", "爱", "明灯", "母亲", "道路"),
        ("他的心情好像打翻了的五味瓶。", "心情", "五味瓶", "厨房", "声音"),
        ("孩子们的歌声如同清脆的铃铛。", "歌声", "铃铛", "孩子", "教室"),
        ("爷爷的手仿佛干枯的树皮。", "手", "树皮", "爷爷", "拐杖"),
        ("她的眼睛像两颗黑葡萄。", "眼睛", "葡萄", "头发", "脸庞"),
        ("战士的意志如同钢铁。", "意志", "钢铁", "战士", "枪炮"),
    ],
    [
        ("时间像流水一样一去不返。", "时间", "流水", "日历", "钟表"),
        ("书籍是人类进步的阶梯。", "书籍", "阶梯", "人类", "图书馆"),
        ("城市的高楼好像一片钢铁森林。", "高楼", "森林", "街道", "汽车"),
        ("知识犹如浩瀚的海洋。", "知识", "海洋", "学校", "书本"),
        ("青春好比一首激昂的歌。", "青春", "歌", "年华", "梦想"),
        ("长城像一条巨龙蜿蜒在群山之间。", "长城", "巨龙", "群山", "烽火台"),
        ("夜晚的街灯如同一串明珠。", "街灯", "明珠", "夜晚", "马路"),
        ("生活宛如一面镜子。", "生活", "镜子", "笑脸", "房间"),
    ],
];

struct Authored {
    corpus: Corpus,
    bundle: ScoreBundle,
    /// Item index by question text.
    index: HashMap<String, usize>,
}

fn author_items() -> Result<Authored> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240623);
    let mut items = Vec::new();
    let mut entries = Vec::new();
    let mut index = HashMap::new();
    for (group, rows) in SENTENCES.iter().enumerate() {
        for (j, &(sentence, tenor, vehicle, d1, d2)) in rows.iter().enumerate() {
            let i = group * 8 + j;
            let asks_vehicle = i % 2 == 1;
            let (role, answer, other) = if asks_vehicle { ("喻体", vehicle, tenor) } else { ("本体", tenor, vehicle) };
            let gold = OptionLabel::from_index(i % 4).expect("index below 4");
            let mut rest = vec![other, d1, d2];
            rest.rotate_left(i % 3);
            let mut options: Vec<String> = rest.into_iter().map(String::from).collect();
            options.insert(gold.index(), answer.to_string());
            let question = format!("“{sentence}”这句话中的{role}是？");
            index.insert(question.clone(), i);
            items.push(McqItem {
                id: format!("cmm-{:03}", i + 1),
                question,
                options: options.try_into().expect("four options"),
                gold: Some(gold),
                subtask: Subtask::Components,
                split: Split::Validation,
            });

            // The scorer misses item 5 of every group, preferring the next label.
            let top = if j == 5 { OptionLabel::from_index((gold.index() + 1) % 4).expect("label") } else { gold };
            let mut p = [0.0; 4];
            let mut rest_mass = 0.0;
            for (l, slot) in p.iter_mut().enumerate() {
                if l != top.index() {
                    *slot = rng.random_range(0.05..0.15);
                    rest_mass += *slot;
                }
            }
            p[top.index()] = 1.0 - rest_mass;
            let mut vector = vec![0.0; DIMENSION];
            vector[group] = 3.0;
            for x in vector.iter_mut() {
                *x += rng.random_range(-0.15..0.15);
            }
            entries.push(ScoreEntry {
                confidence: ConfidenceVector::new(p).context("confidence vector")?,
                embedding: QuestionEmbedding { item_id: format!("cmm-{:03}", i + 1), vector },
            });
        }
    }
    let corpus = Corpus::new(items)?;
    let header = ScoreHeader {
        dimension: DIMENSION,
        scorer_id: "fixture-scorer".into(),
        checkpoint: "fixture-v1".into(),
    };
    let bundle = ScoreBundle::from_entries(header, &corpus, entries)?;
    Ok(Authored { corpus, bundle, index })
}

struct Scripted {
    items: Vec<McqItem>,
    index: HashMap<String, usize>,
    chain_prompts: HashMap<String, usize>,
}

impl Scripted {
    fn target(&self, prompt: &str) -> Option<usize> {
        let q = prompt.lines().rev().find_map(|l| l.strip_prefix("Q: "))?;
        self.index.get(q).copied()
    }

    fn top_candidate(prompt: &str) -> Option<OptionLabel> {
        let line = prompt.lines().find_map(|l| l.strip_prefix("Answer candidates: "))?;
        let mut best: Option<(OptionLabel, f64)> = None;
        for part in line.split(", ") {
            let (label, value) = part.split_once(':')?;
            let label: OptionLabel = label.parse().ok()?;
            let value: f64 = value.parse().ok()?;
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((label, value));
            }
        }
        best.map(|(l, _)| l)
    }

    fn first_suggestion(prompt: &str) -> Option<OptionLabel> {
        let line = prompt.lines().find(|l| l.starts_with("Reference answer from "))?;
        let (_, rest) = line.split_once(": ")?;
        rest.chars().next().and_then(OptionLabel::from_char)
    }

    fn respond(&self, prompt: &str) -> Option<String> {
        if let Some(&i) = self.chain_prompts.get(prompt) {
            let item = &self.items[i];
            let gold = item.gold?;
            let pick = if i % 8 == 7 { OptionLabel::from_index((gold.index() + 2) % 4)? } else { gold };
            return Some(format!(
                "句子中用“{}”来描写事物，比较两者的相似之处，可以判断选项{}“{}”符合题意。The answer is {}.",
                item.options[pick.index()],
                pick,
                item.options[pick.index()],
                pick
            ));
        }
        let i = self.target(prompt)?;
        let gold = self.items[i].gold?;
        let wrong = OptionLabel::from_index((gold.index() + 1) % 4)?;
        let pick = if let Some(top) = Self::top_candidate(prompt) {
            top
        } else if let Some(suggested) = Self::first_suggestion(prompt) {
            suggested
        } else if prompt.starts_with("Demonstration:") {
            if i % 3 != 0 { gold } else { wrong }
        } else if i == 1 {
            return Some("这个句子里的比喻不太好判断，我无法确定。".into());
        } else if i % 2 == 0 {
            gold
        } else {
            wrong
        };
        Some(format!("先找出比喻句中被比喻的事物和用来打比方的事物，再对照选项。The answer is {pick}."))
    }
}

impl ChatBackend for Scripted {
    fn id(&self) -> &str {
        "scripted"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.respond(&request.prompt)
            .map(ChatResponse::text)
            .ok_or_else(|| BackendError::Fatal(format!("no scripted answer for prompt:\n{}", request.prompt)))
    }
}

fn record_run(authored: &Authored, dir: &Path, transcript: &Path, uniform: bool, reference: bool) -> Result<()> {
    let work = tempfile::tempdir()?;
    let chain_prompts = authored
        .corpus
        .iter()
        .enumerate()
        .map(|(i, item)| (chain_prompt(item, metaphor_prompt::cot::COT_TRIGGER), i))
        .collect();
    let backend = Scripted {
        items: authored.corpus.items().to_vec(),
        index: authored.index.clone(),
        chain_prompts,
    };
    let client = LlmClient::new(Box::new(backend), TranscriptCache::persistent(transcript)?);
    let mut config = RunConfig {
        corpus: dir.join("corpus.jsonl"),
        scores: Some(dir.join("scores.jsonl")),
        uniform_fallback: uniform,
        output_dir: work.path().to_path_buf(),
        ..RunConfig::default()
    };
    if reference {
        config.mode = PromptMode::ReferenceAnswer;
        config.reference_sources = vec![ReferenceSource::Scorer, ReferenceSource::Rules];
    }
    let mut pipeline = Pipeline::with_client(config, client)?;
    let reports = if reference { vec![pipeline.run()?] } else { pipeline.ablate()? };
    for r in &reports {
        println!("{}{}: {:.4}", r.mode, if uniform { " (uniform)" } else { "" }, r.accuracy);
    }
    Ok(())
}

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay"));
    fs::create_dir_all(&dir)?;
    let authored = author_items()?;
    fs::write(dir.join("corpus.jsonl"), authored.corpus.to_jsonl())?;
    fs::write(dir.join("scores.jsonl"), authored.bundle.to_jsonl())?;

    let transcript = dir.join("transcript.jsonl");
    if transcript.exists() {
        fs::remove_file(&transcript)?;
    }
    record_run(&authored, &dir, &transcript, false, false)?;
    record_run(&authored, &dir, &transcript, true, false)?;
    record_run(&authored, &dir, &transcript, false, true)?;

    // Sort records so the checked-in file does not depend on thread timing.
    let text = fs::read_to_string(&transcript)?;
    let mut records: Vec<TranscriptRecord> =
        text.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
    records.sort_by(|a, b| a.prompt_hash.cmp(&b.prompt_hash));
    records.dedup_by(|a, b| a.prompt_hash == b.prompt_hash);
    let out: String = records.iter().map(|r| serde_json::to_string(r).expect("serializes") + "\n").collect();
    fs::write(&transcript, out)?;
    println!("wrote {} transcript records to {}", records.len(), transcript.display());
    Ok(())
}
