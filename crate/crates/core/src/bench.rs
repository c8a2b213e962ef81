//! Corpus benchmark: diversity (unique counterfactuals per sentence),
//! fluency (counterfactuals without new grammar errors) and engine timing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{parse_conllu_strict, SentenceParse};
use crate::engine::{
    count_valid, generate_vectors, realize_batch, ValidCount, DEFAULT_CAP, DEFAULT_SAMPLE,
};
use crate::gateway::write_atomic;
use crate::rules::RemovabilityRuleTable;
use crate::segment::SegmentForest;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("grammar checker unavailable: {0}")]
    CheckerUnavailable(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that reports the rule ids a text violates.
pub trait GrammarChecker: Send + Sync {
    fn rule_ids(&self, text: &str) -> Result<Vec<String>, BenchError>;
}

#[derive(Deserialize)]
struct LtResponse {
    matches: Vec<LtMatch>,
}

#[derive(Deserialize)]
struct LtMatch {
    rule: LtRule,
}

#[derive(Deserialize)]
struct LtRule {
    id: String,
}

/// Client for a LanguageTool server (`POST {base}/v2/check`).
pub struct LanguageToolClient {
    base_url: String,
    language: String,
    client: reqwest::blocking::Client,
}

impl LanguageToolClient {
    pub fn new(base_url: &str) -> Result<Self, BenchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| BenchError::CheckerUnavailable(e.to_string()))?;
        Ok(LanguageToolClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            language: "en-US".into(),
            client,
        })
    }

    pub fn with_language(mut self, language: &str) -> Self {
        self.language = language.into();
        self
    }
}

impl GrammarChecker for LanguageToolClient {
    fn rule_ids(&self, text: &str) -> Result<Vec<String>, BenchError> {
        let resp = self
            .client
            .post(format!("{}/v2/check", self.base_url))
            .form(&[("text", text), ("language", self.language.as_str())])
            .send()
            .map_err(|e| BenchError::CheckerUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(BenchError::CheckerUnavailable(format!(
                "status {}",
                resp.status()
            )));
        }
        let body: LtResponse = resp
            .json()
            .map_err(|e| BenchError::CheckerUnavailable(e.to_string()))?;
        Ok(body.matches.into_iter().map(|m| m.rule.id).collect())
    }
}

/// Errors in `counterfactual` not matched by a same-rule error in
/// `prototype`, counted as a multiset difference.
pub fn new_errors(prototype: &[String], counterfactual: &[String]) -> usize {
    let mut budget: BTreeMap<&str, usize> = BTreeMap::new();
    for id in prototype {
        *budget.entry(id.as_str()).or_default() += 1;
    }
    counterfactual
        .iter()
        .filter(|id| match budget.get_mut(id.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                false
            }
            _ => true,
        })
        .count()
}

pub fn grammar_new_errors(
    prototype: &str,
    counterfactual: &str,
    checker: &dyn GrammarChecker,
) -> Result<usize, BenchError> {
    Ok(new_errors(
        &checker.rule_ids(prototype)?,
        &checker.rule_ids(counterfactual)?,
    ))
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub cap: usize,
    pub sample: usize,
    pub seed: u64,
    pub rules: RemovabilityRuleTable,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            cap: DEFAULT_CAP,
            sample: DEFAULT_SAMPLE,
            seed: 0,
            rules: RemovabilityRuleTable::default(),
            workers: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchSentence {
    pub name: String,
    pub dataset: String,
    pub parse: SentenceParse,
}

/// `medqa_01` belongs to dataset `medqa`; names without a numeric suffix are
/// their own dataset.
fn dataset_of(stem: &str) -> String {
    match stem.rsplit_once('_') {
        Some((head, tail)) if !tail.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) => {
            head.to_string()
        }
        _ => stem.to_string(),
    }
}

/// Reads every `.conllu` file in `dir`, in file-name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<BenchSentence>, BenchError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "conllu"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sentence")
            .to_string();
        let parses = parse_conllu_strict(&std::fs::read_to_string(&path)?)
            .map_err(|e| BenchError::Corpus(format!("{}: {e}", path.display())))?;
        let many = parses.len() > 1;
        for (i, parse) in parses.into_iter().enumerate() {
            out.push(BenchSentence {
                name: if many {
                    format!("{stem}#{}", i + 1)
                } else {
                    stem.clone()
                },
                dataset: dataset_of(&stem),
                parse,
            });
        }
    }
    if out.is_empty() {
        return Err(BenchError::Corpus(format!(
            "no .conllu files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceReport {
    pub name: String,
    pub dataset: String,
    pub words: usize,
    pub valid_count: ValidCount,
    pub counterfactuals: usize,
    pub unique_counterfactuals: usize,
    /// Counterfactuals without new grammar errors; absent without a checker.
    pub grammatical: Option<usize>,
    /// Segmentation, generation and realization; parsing is precomputed.
    pub engine_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceFailure {
    pub name: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub sentences: usize,
    pub avg_sentence_length: f64,
    pub avg_perturbations_per_sentence: f64,
    pub grammatical_rate: Option<f64>,
    /// Engine-only time; parses are read from disk, not computed.
    pub avg_parse_sample_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub v: u32,
    pub datasets: Vec<DatasetRow>,
    pub overall: DatasetRow,
    pub sentences: Vec<SentenceReport>,
    pub failures: Vec<SentenceFailure>,
}

fn aggregate(dataset: &str, rows: &[&SentenceReport]) -> DatasetRow {
    let n = rows.len().max(1) as f64;
    let total: usize = rows.iter().map(|r| r.counterfactuals).sum();
    let grammatical = rows
        .iter()
        .map(|r| r.grammatical)
        .sum::<Option<usize>>()
        .filter(|_| total > 0)
        .map(|g| g as f64 / total as f64);
    DatasetRow {
        dataset: dataset.to_string(),
        sentences: rows.len(),
        avg_sentence_length: rows.iter().map(|r| r.words as f64).sum::<f64>() / n,
        avg_perturbations_per_sentence: rows
            .iter()
            .map(|r| r.unique_counterfactuals as f64)
            .sum::<f64>()
            / n,
        grammatical_rate: grammatical,
        avg_parse_sample_ms: rows.iter().map(|r| r.engine_ms).sum::<f64>() / n,
    }
}

struct Generated {
    report: SentenceReport,
    prototype: String,
    texts: Vec<String>,
}

fn generate(s: &BenchSentence, cfg: &BenchConfig) -> Result<Generated, String> {
    let start = Instant::now();
    let forest = SegmentForest::from_parse(&s.parse, &cfg.rules).map_err(|e| e.to_string())?;
    let valid_count = count_valid(&forest);
    let vectors =
        generate_vectors(&forest, cfg.cap, cfg.sample, cfg.seed).map_err(|e| e.to_string())?;
    let cfs = realize_batch(&forest, &vectors).map_err(|e| e.to_string())?;
    let engine_ms = start.elapsed().as_secs_f64() * 1e3;
    let texts: Vec<String> = cfs.into_iter().map(|c| c.text).collect();
    let unique = texts.iter().collect::<BTreeSet<_>>().len();
    let prototype = forest.doc().text.clone();
    Ok(Generated {
        report: SentenceReport {
            name: s.name.clone(),
            dataset: s.dataset.clone(),
            words: prototype.split_whitespace().count(),
            valid_count,
            counterfactuals: texts.len(),
            unique_counterfactuals: unique,
            grammatical: None,
            engine_ms,
        },
        prototype,
        texts,
    })
}

fn grade(g: &mut Generated, checker: &dyn GrammarChecker) -> Result<(), BenchError> {
    let proto = checker.rule_ids(&g.prototype)?;
    let mut seen: BTreeMap<&str, bool> = BTreeMap::new();
    let mut ok = 0;
    for t in &g.texts {
        let clean = match seen.get(t.as_str()) {
            Some(c) => *c,
            None => {
                let c = new_errors(&proto, &checker.rule_ids(t)?) == 0;
                seen.insert(t, c);
                c
            }
        };
        ok += clean as usize;
    }
    g.report.grammatical = Some(ok);
    Ok(())
}

/// Runs every sentence on a bounded pool. Engine failures are recorded per
/// sentence; an unreachable checker aborts the run.
pub fn run_benchmark(
    corpus: &[BenchSentence],
    cfg: &BenchConfig,
    checker: Option<&dyn GrammarChecker>,
) -> Result<BenchReport, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| BenchError::Corpus(e.to_string()))?;
    let results: Vec<Result<Result<SentenceReport, String>, BenchError>> = pool.install(|| {
        corpus
            .par_iter()
            .map(|s| match generate(s, cfg) {
                Ok(mut g) => {
                    if let Some(c) = checker {
                        grade(&mut g, c)?;
                    }
                    Ok(Ok(g.report))
                }
                Err(e) => Ok(Err(e)),
            })
            .collect()
    });
    let mut sentences = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in corpus.iter().zip(results) {
        match r? {
            Ok(rep) => sentences.push(rep),
            Err(error) => {
                tracing::warn!(sentence = %s.name, %error, "bench sentence failed");
                failures.push(SentenceFailure {
                    name: s.name.clone(),
                    error,
                });
            }
        }
    }
    sentences.sort_by(|a, b| a.name.cmp(&b.name));
    let mut by_dataset: BTreeMap<&str, Vec<&SentenceReport>> = BTreeMap::new();
    for r in &sentences {
        by_dataset.entry(r.dataset.as_str()).or_default().push(r);
    }
    let datasets = by_dataset
        .iter()
        .map(|(d, rows)| aggregate(d, rows))
        .collect();
    let overall = aggregate("all", &sentences.iter().collect::<Vec<_>>());
    Ok(BenchReport {
        v: crate::analysis::SCHEMA_VERSION,
        datasets,
        overall,
        sentences,
        failures,
    })
}

impl BenchReport {
    /// Aligned Markdown table, one row per dataset plus the total.
    pub fn to_markdown(&self) -> String {
        let header = [
            "Dataset",
            "Sent.",
            "Sent. length",
            "Pert./sent.",
            "Grammatical",
            "Engine ms/sent.",
        ];
        let mut rows: Vec<[String; 6]> = Vec::new();
        for d in self.datasets.iter().chain(std::iter::once(&self.overall)) {
            rows.push([
                d.dataset.clone(),
                d.sentences.to_string(),
                format!("{:.1}", d.avg_sentence_length),
                format!("{:.1}", d.avg_perturbations_per_sentence),
                d.grammatical_rate
                    .map(|g| format!("{:.1}%", g * 100.0))
                    .unwrap_or_else(|| "n/a".into()),
                format!("{:.2}", d.avg_parse_sample_ms),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: Vec<&str>| {
            let mut s = String::from("|");
            for (i, c) in cells.iter().enumerate() {
                let _ = write!(s, " {c:<w$} |", w = widths[i]);
            }
            s
        };
        let mut out = line(header.to_vec());
        out.push('\n');
        out.push('|');
        for w in &widths {
            out.push_str(&"-".repeat(w + 2));
            out.push('|');
        }
        for r in &rows {
            out.push('\n');
            out.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        if !self.failures.is_empty() {
            let _ = write!(
                out,
                "\n\n{} sentence(s) failed and were excluded.",
                self.failures.len()
            );
        }
        out.push('\n');
        out
    }

    /// Writes `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        write_atomic(&dir.join("report.json"), &json)?;
        write_atomic(&dir.join("report.md"), self.to_markdown().as_bytes())
    }
}
