//! Run execution shared by the HTTP service and the CLI.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::store::{read_json, read_jsonl, write_json, write_jsonl};
use super::ServiceError;
use crate::attribution::{kernel_shap, ShapResult};
use crate::engine::{
    generate_vectors, realize_batch, Counterfactual, CounterfactualLine, DEFAULT_CAP,
    DEFAULT_SAMPLE,
};
use crate::evaluator::{
    collect_responses, score_responses, Evaluator, OutcomeRecord, OutcomeStatus,
};
use crate::gateway::ChatModel;
use crate::segment::SegmentForest;

fn default_n() -> usize {
    5
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

fn default_sample() -> usize {
    DEFAULT_SAMPLE
}

fn default_concurrency() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_sample")]
    pub sample: usize,
    /// Evaluator names to bind; all of the task's evaluators when absent.
    #[serde(default)]
    pub evaluators: Option<Vec<String>>,
    /// Counterfactuals in flight at once.
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: default_n(),
            seed: 0,
            cap: default_cap(),
            sample: default_sample(),
            evaluators: None,
            max_concurrency: default_concurrency(),
        }
    }
}

/// Frozen copy of everything that determined a run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub v: u32,
    pub n: usize,
    pub seed: u64,
    pub cap: usize,
    pub sample: usize,
    pub model: String,
    pub judge_model: String,
    pub template: String,
    pub evaluators: Vec<Evaluator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseLine {
    pub cf_id: usize,
    pub sample_index: usize,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapEntry {
    pub evaluator: String,
    pub result: Option<ShapResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub config: ConfigSnapshot,
    pub forest: SegmentForest,
    pub counterfactuals: Vec<Counterfactual>,
    pub outcomes: Vec<OutcomeRecord>,
    pub responses: Vec<ResponseLine>,
    pub shap: Vec<ShapEntry>,
}

impl RunOutputs {
    /// Counterfactuals for which no sample came back.
    pub fn exhausted(&self) -> usize {
        let mut failed: BTreeMap<usize, bool> = BTreeMap::new();
        for o in &self.outcomes {
            *failed.entry(o.cf_id).or_insert(true) &= o.status == OutcomeStatus::AllFailed;
        }
        failed.values().filter(|f| **f).count()
    }
}

pub fn render_prompt(template: &str, text: &str) -> String {
    template.replacen("{input}", text, 1)
}

pub fn select_evaluators(
    all: &[Evaluator],
    names: Option<&[String]>,
) -> Result<Vec<Evaluator>, ServiceError> {
    match names {
        None => Ok(all.to_vec()),
        Some(names) => names
            .iter()
            .map(|n| {
                all.iter()
                    .find(|e| &e.name == n)
                    .cloned()
                    .ok_or_else(|| ServiceError::BadRequest(format!("unknown evaluator {n:?}")))
            })
            .collect(),
    }
}

/// Solves one attribution per evaluator from the available outcomes.
pub fn compute_shap(
    forest: &SegmentForest,
    counterfactuals: &[Counterfactual],
    outcomes: &[OutcomeRecord],
    evaluators: &[Evaluator],
) -> Vec<ShapEntry> {
    let bits: BTreeMap<usize, &Vec<bool>> = counterfactuals
        .iter()
        .map(|c| (c.id, &c.vector.bits))
        .collect();
    let ids = forest.variable_ids();
    evaluators
        .iter()
        .map(|ev| {
            let records: Vec<(Vec<bool>, f64)> = outcomes
                .iter()
                .filter(|o| o.evaluator == ev.name)
                .filter_map(|o| Some((bits.get(&o.cf_id)?.to_vec(), o.outcome?)))
                .collect();
            match kernel_shap(&records, &ids) {
                Ok(r) => ShapEntry {
                    evaluator: ev.name.clone(),
                    result: Some(r),
                    error: None,
                },
                Err(e) => ShapEntry {
                    evaluator: ev.name.clone(),
                    result: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Generates, realizes, queries and attributes. `progress` counts finished
/// counterfactuals.
pub async fn execute_run(
    forest: &SegmentForest,
    template: &str,
    evaluators: &[Evaluator],
    cfg: &RunConfig,
    llm: &dyn ChatModel,
    judge: &dyn ChatModel,
    progress: &AtomicUsize,
) -> Result<RunOutputs, ServiceError> {
    if cfg.n == 0 {
        return Err(ServiceError::BadRequest("n must be at least 1".into()));
    }
    let vectors = generate_vectors(forest, cfg.cap, cfg.sample, cfg.seed)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let counterfactuals =
        realize_batch(forest, &vectors).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let cfs = &counterfactuals;
    let per_cf: Vec<(Vec<OutcomeRecord>, Vec<ResponseLine>)> = stream::iter(0..cfs.len())
        .map(|i| async move {
            let cf = &cfs[i];
            let prompt = render_prompt(template, &cf.text);
            let responses = collect_responses(&prompt, cfg.n, llm, cfg.n).await;
            let mut records = Vec::with_capacity(evaluators.len());
            for ev in evaluators {
                records.push(score_responses(cf.id, ev, &responses, judge).await);
            }
            let lines = responses
                .into_iter()
                .enumerate()
                .map(|(k, r)| match r {
                    Ok(text) => ResponseLine {
                        cf_id: cf.id,
                        sample_index: k,
                        response: Some(text),
                        error: None,
                    },
                    Err(e) => ResponseLine {
                        cf_id: cf.id,
                        sample_index: k,
                        response: None,
                        error: Some(e.to_string()),
                    },
                })
                .collect();
            progress.fetch_add(1, Ordering::Relaxed);
            (records, lines)
        })
        .buffered(cfg.max_concurrency.max(1))
        .collect()
        .await;
    let mut outcomes = Vec::new();
    let mut responses = Vec::new();
    for (o, r) in per_cf {
        outcomes.extend(o);
        responses.extend(r);
    }
    let shap = compute_shap(forest, &counterfactuals, &outcomes, evaluators);
    Ok(RunOutputs {
        config: ConfigSnapshot {
            v: crate::analysis::SCHEMA_VERSION,
            n: cfg.n,
            seed: cfg.seed,
            cap: cfg.cap,
            sample: cfg.sample,
            model: llm.model_id().to_string(),
            judge_model: judge.model_id().to_string(),
            template: template.to_string(),
            evaluators: evaluators.to_vec(),
        },
        forest: forest.clone(),
        counterfactuals,
        outcomes,
        responses,
        shap,
    })
}

pub const ARTIFACT_FILES: [&str; 6] = [
    "config.json",
    "forest.json",
    "counterfactuals.jsonl",
    "outcomes.jsonl",
    "responses.jsonl",
    "shap.json",
];

/// Writes the artifact files. None of them carries a run id or a clock
/// reading, so equal inputs give equal bytes.
pub fn write_artifacts(dir: &Path, out: &RunOutputs) -> Result<(), ServiceError> {
    std::fs::create_dir_all(dir).map_err(|e| ServiceError::Internal(e.to_string()))?;
    write_json(&dir.join("config.json"), &out.config)?;
    write_json(&dir.join("forest.json"), &out.forest)?;
    let lines: Vec<CounterfactualLine> = out
        .counterfactuals
        .iter()
        .map(CounterfactualLine::from)
        .collect();
    write_jsonl(&dir.join("counterfactuals.jsonl"), &lines)?;
    write_jsonl(&dir.join("outcomes.jsonl"), &out.outcomes)?;
    write_jsonl(&dir.join("responses.jsonl"), &out.responses)?;
    write_shap(dir, &out.shap)
}

pub fn write_shap(dir: &Path, shap: &[ShapEntry]) -> Result<(), ServiceError> {
    write_json(&dir.join("shap.json"), &shap)
}

pub fn load_artifacts(dir: &Path) -> Result<RunOutputs, ServiceError> {
    let lines: Vec<CounterfactualLine> = read_jsonl(&dir.join("counterfactuals.jsonl"))?;
    Ok(RunOutputs {
        config: read_json(&dir.join("config.json"))?,
        forest: read_json(&dir.join("forest.json"))?,
        counterfactuals: lines
            .iter()
            .map(CounterfactualLine::to_counterfactual)
            .collect(),
        outcomes: read_jsonl(&dir.join("outcomes.jsonl"))?,
        responses: read_jsonl(&dir.join("responses.jsonl"))?,
        shap: read_json(&dir.join("shap.json"))?,
    })
}
