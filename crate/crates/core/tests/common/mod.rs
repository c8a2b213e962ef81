#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use axum::routing::post;
use axum::{Form, Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use counterlens::conllu::{parse_conllu_strict, SentenceParse, Token};
use counterlens::engine::CounterfactualVector;
use counterlens::rules::RemovabilityRuleTable;
use counterlens::segment::{Removability, SegmentForest, SegmentId, SegmentKind};

pub const LISTED: [&str; 9] = [
    "medqa_01",
    "medqa_02",
    "multinews_01",
    "finqa_01",
    "finqa_02",
    "tinytextbooks_01",
    "tinytextbooks_02",
    "billsum_01",
    "billsum_02",
];

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn conllu(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join(format!("{name}.conllu"))).unwrap()
}

pub fn parse(name: &str) -> SentenceParse {
    parse_conllu_strict(&conllu(name)).unwrap().remove(0)
}

pub fn forest(name: &str) -> SegmentForest {
    SegmentForest::from_parse(&parse(name), &RemovabilityRuleTable::default()).unwrap()
}

pub fn expected(name: &str) -> BTreeSet<String> {
    std::fs::read_to_string(fixtures_dir().join("expected").join(format!("{name}.txt")))
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

const RELS: [(&str, u32); 14] = [
    ("amod", 5),
    ("advmod", 3),
    ("prep", 4),
    ("pobj", 3),
    ("det", 3),
    ("nsubj", 3),
    ("dobj", 3),
    ("compound", 2),
    ("conj", 4),
    ("cc", 2),
    ("punct", 2),
    ("acl", 1),
    ("nummod", 1),
    ("mark", 1),
];

fn pick_rel(rng: &mut ChaCha8Rng) -> &'static str {
    let total: u32 = RELS.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen_range(0..total);
    for (r, w) in RELS {
        if x < w {
            return r;
        }
        x -= w;
    }
    unreachable!()
}

/// A random single-rooted dependency tree over `n` tokens with a mix of
/// removable, unremovable, conjunct and punctuation relations.
pub fn random_parse(seed: u64, n: usize) -> SentenceParse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.max(1);
    let root = rng.gen_range(1..=n);
    let mut order: Vec<usize> = (1..=n).filter(|&i| i != root).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut placed = vec![root];
    let mut head = vec![0usize; n + 1];
    let mut rel = vec!["root"; n + 1];
    for t in order {
        head[t] = placed[rng.gen_range(0..placed.len())];
        rel[t] = pick_rel(&mut rng);
        placed.push(t);
    }
    let tokens = (1..=n)
        .map(|i| {
            let surface = match rel[i] {
                "punct" => ",".to_string(),
                "cc" => "and".to_string(),
                _ => format!("w{i}"),
            };
            Token::new(i, &surface, head[i], rel[i])
        })
        .collect();
    SentenceParse::new(tokens)
}

pub fn random_forest(seed: u64, n: usize) -> SegmentForest {
    SegmentForest::from_parse(&random_parse(seed, n), &RemovabilityRuleTable::default()).unwrap()
}

/// A root with `m` independent removable leaves: every subset is valid.
pub fn flat_forest(m: usize) -> SegmentForest {
    let mut tokens = vec![Token::new(1, "Run", 0, "root")];
    for i in 0..m {
        tokens.push(Token::new(i + 2, &format!("x{i}"), 1, "advmod"));
    }
    tokens.push(Token::new(m + 2, ".", 1, "punct"));
    let n = tokens.len();
    tokens[n - 2] = tokens[n - 2].clone().no_space();
    SegmentForest::from_parse(
        &SentenceParse::new(tokens),
        &RemovabilityRuleTable::default(),
    )
    .unwrap()
}

/// Checks R1 to R3 straight from the segment structure.
pub fn satisfies_rules(forest: &SegmentForest, bits: &[bool]) -> bool {
    let vars = forest.variable_ids();
    let mut on: BTreeMap<SegmentId, bool> =
        vars.iter().copied().zip(bits.iter().copied()).collect();
    on.insert(forest.root_id(), true);
    for s in forest.segments() {
        let here = on[&s.id];
        if let Some(p) = s.parent {
            if here && !on[&p] {
                return false;
            }
            if s.removability == Removability::Unremovable && on[&p] && !here {
                return false;
            }
        }
        if s.kind == SegmentKind::Dummy && here && !s.children.iter().any(|c| on[c]) {
            return false;
        }
        if let Some(lock) = s.lock {
            if here != (lock == counterlens::segment::Lock::Included) {
                return false;
            }
        }
    }
    true
}

/// Every valid vector found by filtering all `2^M` bit strings, with
/// replacement choices expanded for included segments.
pub fn brute_force_valid(forest: &SegmentForest) -> BTreeSet<CounterfactualVector> {
    let m = forest.dimension();
    assert!(m <= 20, "brute force limited to small forests");
    let all = forest.all_ids();
    let mut out = BTreeSet::new();
    for mask in 0u64..(1 << m) {
        let bits: Vec<bool> = (0..m).map(|i| mask >> (m - 1 - i) & 1 == 1).collect();
        if !satisfies_rules(forest, &bits) {
            continue;
        }
        let on = |id: SegmentId| {
            id == forest.root_id()
                || bits[forest.variable_ids().iter().position(|v| *v == id).unwrap()]
        };
        let mut choices: Vec<Vec<u32>> = vec![Vec::new()];
        for &id in &all {
            let k = if on(id) {
                forest.segment(id).unwrap().choice_count() as u32
            } else {
                1
            };
            choices = choices
                .into_iter()
                .flat_map(|c| {
                    (0..k).map(move |x| {
                        let mut c = c.clone();
                        c.push(x);
                        c
                    })
                })
                .collect();
        }
        for c in choices {
            out.insert(CounterfactualVector {
                bits: bits.clone(),
                choices: c,
            });
        }
    }
    out
}

/// Exact Shapley values of `f` over `m` players by subset enumeration.
pub fn shapley(m: usize, f: &dyn Fn(u32) -> f64) -> Vec<f64> {
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    (0..m)
        .map(|i| {
            let mut phi = 0.0;
            for s in 0u32..(1 << m) {
                if s >> i & 1 == 1 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let w = fact(size) * fact(m - size - 1) / fact(m);
                phi += w * (f(s | 1 << i) - f(s));
            }
            phi
        })
        .collect()
}

pub fn mask_of(bits: &[bool]) -> u32 {
    bits.iter().enumerate().map(|(i, &b)| (b as u32) << i).sum()
}

fn vowel(word: &str) -> bool {
    word.chars()
        .next()
        .is_some_and(|c| "aeiouAEIOU".contains(c))
}

/// A small rule set written against the LanguageTool rule ids it imitates.
pub fn lt_rules(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |id: &str| out.push(id.to_string());
    if text
        .chars()
        .find(|c| c.is_alphabetic())
        .is_some_and(|c| c.is_lowercase())
    {
        push("UPPERCASE_SENTENCE_START");
    }
    if text.contains("  ") {
        push("WHITESPACE_RULE");
    }
    if text.contains(" ,") || text.contains(" .") || text.trim_start().starts_with(',') {
        push("COMMA_PARENTHESIS_WHITESPACE");
    }
    if text.contains(",.") || text.contains(",,") || text.contains("..") {
        push("DOUBLE_PUNCTUATION");
    }
    if !text.trim_end().ends_with(['.', '!', '?', '"']) {
        push("PUNCTUATION_PARAGRAPH_END");
    }
    let words: Vec<String> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .collect();
    for pair in words.windows(2) {
        let (a, b) = (pair[0].to_lowercase(), pair[1].as_str());
        if !a.is_empty() && a == b.to_lowercase() {
            push("ENGLISH_WORD_REPEAT_RULE");
        }
        if (a == "a" && vowel(b)) || (a == "an" && !b.is_empty() && !vowel(b)) {
            push("EN_A_VS_AN");
        }
        if ["and", "or", "but"].contains(&a.as_str())
            && ["and", "or", "but"].contains(&b.to_lowercase().as_str())
        {
            push("CONJUNCTION_REPEAT");
        }
    }
    if let Some(last) = words.iter().rev().find(|w| !w.is_empty()) {
        if [
            "and", "or", "but", "the", "a", "an", "of", "in", "with", "to",
        ]
        .contains(&last.to_lowercase().as_str())
        {
            push("SENTENCE_FRAGMENT");
        }
    }
    out
}

#[derive(serde::Deserialize)]
struct CheckForm {
    text: String,
    language: String,
}

async fn lt_check(Form(f): Form<CheckForm>) -> Json<serde_json::Value> {
    assert_eq!(f.language, "en-US");
    let matches: Vec<_> = lt_rules(&f.text)
        .into_iter()
        .map(|id| serde_json::json!({ "message": id, "offset": 0, "length": 0, "rule": { "id": id } }))
        .collect();
    Json(serde_json::json!({ "matches": matches }))
}

/// Serves `router` on an ephemeral port from a background runtime and returns
/// its base URL.
pub fn spawn_server(router: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// A LanguageTool-protocol server backed by [`lt_rules`].
pub fn spawn_languagetool() -> String {
    spawn_server(Router::new().route("/v2/check", post(lt_check)))
}
