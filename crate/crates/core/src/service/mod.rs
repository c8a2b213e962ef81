//! Task and run orchestration with file-backed persistence, plus the REST
//! layer in [`api`].

pub mod api;
pub mod runner;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    filter_sort, group_by, occurrence, word_count_histogram, FilterSpec, GroupSummary,
    OutcomeRange, RunRow, SegmentState, SortDir, SortKey, SCHEMA_VERSION,
};
use crate::attribution::ShapDiagnostics;
use crate::conllu::{parse_conllu_strict, validate_tree, SentenceParse};
use crate::document::Document;
use crate::evaluator::{Evaluator, OutcomeRecord};
use crate::gateway::ChatModel;
use crate::rules::RemovabilityRuleTable;
use crate::segment::{
    suggest_alternatives, Lock, Removability, SegmentForest, SegmentId, SegmentKind, Suggestions,
};
pub use runner::{
    execute_run, load_artifacts, render_prompt, write_artifacts, RunConfig, RunOutputs,
};
pub use store::FileStore;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("template must contain {{input}} exactly once (found {0})")]
    TemplateInvalid(usize),
    #[error("no parse available: {0}")]
    ParseProviderUnavailable(String),
    #[error("parse does not match the prototype: {0}")]
    ParseMismatch(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("unknown counterfactual {0}")]
    UnknownCounterfactual(usize),
    #[error("segment edit rejected: {0}")]
    SegmentEdit(String),
    #[error("task {0} already has an active run")]
    RunInProgress(String),
    #[error("run {0} has no results yet")]
    RunNotReady(String),
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::TemplateInvalid(_) => "TemplateInvalid",
            ServiceError::ParseProviderUnavailable(_) => "ParseProviderUnavailable",
            ServiceError::ParseMismatch(_) => "ParseMismatch",
            ServiceError::UnknownTask(_) => "UnknownTask",
            ServiceError::UnknownRun(_) => "UnknownRun",
            ServiceError::UnknownCounterfactual(_) => "UnknownCounterfactual",
            ServiceError::SegmentEdit(_) => "SegmentEdit",
            ServiceError::RunInProgress(_) => "RunInProgress",
            ServiceError::RunNotReady(_) => "RunNotReady",
            ServiceError::GatewayUnavailable(_) => "GatewayUnavailable",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Internal(_) => "Internal",
        }
    }
}

/// Character range of the prototype that is never perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinnedSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Draft,
    Running,
    Done,
    Failed,
}

fn default_template() -> String {
    "{input}".into()
}

/// Everything needed to create a task. Without `conllu` the configured parse
/// provider is asked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub prototype: String,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub pinned: Vec<PinnedSpan>,
    #[serde(default)]
    pub evaluators: Vec<Evaluator>,
    #[serde(default)]
    pub conllu: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub v: u32,
    pub id: String,
    pub prototype_text: String,
    pub prompt_template: String,
    pub pinned: Vec<PinnedSpan>,
    pub evaluators: Vec<Evaluator>,
    pub forest: SegmentForest,
    pub status: TaskStatus,
    pub runs: Vec<String>,
}

pub fn validate_template(template: &str) -> Result<(), ServiceError> {
    match template.matches("{input}").count() {
        1 => Ok(()),
        n => Err(ServiceError::TemplateInvalid(n)),
    }
}

/// Checks the template, evaluators and parse, aligns the parse with the
/// prototype and segments the non-pinned sentences.
pub fn build_task_forest(
    spec: &TaskSpec,
    parses: &[SentenceParse],
    rules: &RemovabilityRuleTable,
) -> Result<SegmentForest, ServiceError> {
    validate_template(&spec.template)?;
    if spec.prototype.trim().is_empty() {
        return Err(ServiceError::BadRequest("prototype is empty".into()));
    }
    let mut names = BTreeSet::new();
    for ev in &spec.evaluators {
        ev.validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if !names.insert(ev.name.as_str()) {
            return Err(ServiceError::BadRequest(format!(
                "duplicate evaluator name {:?}",
                ev.name
            )));
        }
    }
    for p in parses {
        let diags = validate_tree(p);
        if !diags.is_empty() {
            let msg = diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(ServiceError::ParseMismatch(msg));
        }
    }
    let pinned: Vec<(usize, usize)> = spec.pinned.iter().map(|p| (p.start, p.end)).collect();
    let doc = Document::aligned(&spec.prototype, parses, &pinned)
        .map_err(|e| ServiceError::ParseMismatch(e.to_string()))?;
    SegmentForest::from_document(&doc, rules)
        .map_err(|e| ServiceError::ParseMismatch(e.to_string()))
}

/// Turns prototype text into sentence parses.
#[async_trait]
pub trait ParseProvider: Send + Sync {
    async fn parse(&self, text: &str) -> Result<Vec<SentenceParse>, String>;
}

/// Parse provider reached over HTTP: `POST {url}` with `{"text": …}`,
/// answered by `{"conllu": …}`.
pub struct HttpParseProvider {
    url: String,
    client: reqwest::Client,
}

impl HttpParseProvider {
    pub fn new(url: &str) -> Self {
        HttpParseProvider {
            url: url.to_string(),
            client: reqwest::Client::new(),
        }
    }
}

#[derive(Deserialize)]
struct ParseReply {
    conllu: String,
}

#[async_trait]
impl ParseProvider for HttpParseProvider {
    async fn parse(&self, text: &str) -> Result<Vec<SentenceParse>, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "text": text }))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        let reply: ParseReply = resp.json().await.map_err(|e| e.to_string())?;
        parse_conllu_strict(&reply.conllu).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SegmentOp {
    Merge {
        segment: SegmentId,
    },
    Expand {
        segment: SegmentId,
    },
    Alternatives {
        segment: SegmentId,
        options: Vec<String>,
    },
    Lock {
        segment: SegmentId,
        lock: Option<Lock>,
    },
}

pub fn apply_segment_op(
    forest: &SegmentForest,
    op: &SegmentOp,
) -> Result<SegmentForest, ServiceError> {
    let r = match op {
        SegmentOp::Merge { segment } => forest.merge_branch(*segment).map(|m| m.forest),
        SegmentOp::Expand { segment } => forest.expand(*segment),
        SegmentOp::Alternatives { segment, options } => {
            forest.configure_alternatives(*segment, options)
        }
        SegmentOp::Lock { segment, lock } => forest.set_lock(*segment, *lock),
    };
    r.map_err(|e| ServiceError::SegmentEdit(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub v: u32,
    pub run_id: String,
    pub task_id: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub progress: Progress,
    pub config: RunConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsQuery {
    pub evaluator: Option<String>,
    pub outcome_lo: Option<f64>,
    pub outcome_hi: Option<f64>,
    pub hi_inclusive: Option<bool>,
    pub wc_min: Option<usize>,
    pub wc_max: Option<usize>,
    /// Comma-separated segment ids every row must include.
    pub include: Option<String>,
    /// Comma-separated segment ids every row must exclude.
    pub exclude: Option<String>,
    pub sort: Option<SortKey>,
    pub dir: Option<SortDir>,
}

fn id_list(src: &Option<String>) -> Result<Vec<SegmentId>, ServiceError> {
    src.iter()
        .flat_map(|s| s.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| ServiceError::BadRequest(format!("bad segment id {s:?}")))
        })
        .collect()
}

impl ResultsQuery {
    pub fn to_filter(&self) -> Result<FilterSpec, ServiceError> {
        let outcome_range = match (self.outcome_lo, self.outcome_hi) {
            (None, None) => None,
            (lo, hi) => Some(OutcomeRange {
                lo: lo.unwrap_or(0.0),
                hi: hi.unwrap_or(1.0),
                hi_inclusive: self.hi_inclusive.unwrap_or(hi.is_none()),
            }),
        };
        let word_count_range = match (self.wc_min, self.wc_max) {
            (None, None) => None,
            (lo, hi) => Some((lo.unwrap_or(0), hi.unwrap_or(usize::MAX))),
        };
        let mut required: Vec<(SegmentId, SegmentState)> = id_list(&self.include)?
            .into_iter()
            .map(|id| (id, SegmentState::Included))
            .collect();
        required.extend(
            id_list(&self.exclude)?
                .into_iter()
                .map(|id| (id, SegmentState::Excluded)),
        );
        Ok(FilterSpec {
            outcome_range,
            word_count_range,
            required_patterns: required,
            evaluator: self.evaluator.clone(),
            sort_key: self.sort,
            dir: self.dir.unwrap_or_default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub id: SegmentId,
    pub text: String,
    pub parent: Option<SegmentId>,
    pub kind: SegmentKind,
    pub removability: Removability,
    pub alternatives: Vec<String>,
    pub lock: Option<Lock>,
    pub phi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBin {
    pub outcome: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsPayload {
    pub v: u32,
    pub run_id: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub evaluators: Vec<String>,
    pub evaluator: Option<String>,
    pub root: SegmentId,
    pub segments: Vec<SegmentView>,
    pub dependency_edges: Vec<(SegmentId, SegmentId, Removability)>,
    pub phi0: Option<f64>,
    pub shap_error: Option<String>,
    pub diagnostics: Option<ShapDiagnostics>,
    pub total_rows: usize,
    pub rows: Vec<RunRow>,
    pub occurrence: Vec<usize>,
    pub word_count_histogram: Vec<(usize, usize)>,
    pub outcome_histogram: Vec<OutcomeBin>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupByRequest {
    pub segments: Vec<SegmentId>,
    #[serde(default)]
    pub evaluator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupByPayload {
    pub v: u32,
    pub run_id: String,
    pub evaluator: Option<String>,
    pub groups: Vec<GroupSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfText {
    pub v: u32,
    pub cf_id: usize,
    pub text: String,
    pub prompt: String,
}

fn pick_evaluator(out: &RunOutputs, name: Option<&str>) -> Result<Option<String>, ServiceError> {
    match name {
        Some(n) if out.config.evaluators.iter().any(|e| e.name == n) => Ok(Some(n.to_string())),
        Some(n) => Err(ServiceError::BadRequest(format!("unknown evaluator {n:?}"))),
        None => Ok(out.config.evaluators.first().map(|e| e.name.clone())),
    }
}

/// Joins counterfactuals with one evaluator's outcomes.
pub fn run_rows(out: &RunOutputs, evaluator: Option<&str>) -> Vec<RunRow> {
    let outcomes: BTreeMap<usize, &OutcomeRecord> = out
        .outcomes
        .iter()
        .filter(|o| Some(o.evaluator.as_str()) == evaluator)
        .map(|o| (o.cf_id, o))
        .collect();
    out.counterfactuals
        .iter()
        .map(|c| RunRow {
            cf_id: c.id,
            bits: c.vector.bits.clone(),
            outcome: outcomes.get(&c.id).and_then(|o| o.outcome),
            word_count: c.word_count,
        })
        .collect()
}

/// Builds the analytics payload for one evaluator of a finished run.
pub fn results_payload(
    meta: &RunMeta,
    out: &RunOutputs,
    query: &ResultsQuery,
) -> Result<ResultsPayload, ServiceError> {
    let evaluator = pick_evaluator(out, query.evaluator.as_deref())?;
    let forest = &out.forest;
    let all_rows = run_rows(out, evaluator.as_deref());
    let rows = filter_sort(forest, &all_rows, &query.to_filter()?)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let entry = out
        .shap
        .iter()
        .find(|s| Some(&s.evaluator) == evaluator.as_ref());
    let result = entry.and_then(|e| e.result.as_ref());
    let phi: BTreeMap<SegmentId, f64> = result
        .map(|r| {
            r.segment_ids
                .iter()
                .copied()
                .zip(r.phi.iter().copied())
                .collect()
        })
        .unwrap_or_default();
    let segments = forest
        .segments()
        .map(|s| SegmentView {
            id: s.id,
            text: forest.text(s.id),
            parent: s.parent,
            kind: s.kind,
            removability: s.removability,
            alternatives: s.alternatives.clone(),
            lock: s.lock,
            phi: phi.get(&s.id).copied(),
        })
        .collect();
    let mut bins: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in &all_rows {
        if let Some(o) = r.outcome {
            bins.entry(o.to_bits()).or_insert((o, 0)).1 += 1;
        }
    }
    let mut outcome_histogram: Vec<OutcomeBin> = bins
        .into_values()
        .map(|(outcome, count)| OutcomeBin { outcome, count })
        .collect();
    outcome_histogram.sort_by(|a, b| a.outcome.total_cmp(&b.outcome));
    Ok(ResultsPayload {
        v: SCHEMA_VERSION,
        run_id: meta.run_id.clone(),
        status: meta.status,
        error: meta.error.clone(),
        evaluators: out
            .config
            .evaluators
            .iter()
            .map(|e| e.name.clone())
            .collect(),
        evaluator,
        root: forest.root_id(),
        segments,
        dependency_edges: forest.dependency_edges(),
        phi0: result.map(|r| r.phi0),
        shap_error: entry.and_then(|e| e.error.clone()),
        diagnostics: result.map(|r| r.diagnostics.clone()),
        total_rows: all_rows.len(),
        occurrence: occurrence(&all_rows, forest.dimension()),
        word_count_histogram: word_count_histogram(&all_rows),
        outcome_histogram,
        rows,
    })
}

/// Shared state behind the REST routes.
pub struct TaskService {
    store: FileStore,
    llm: Arc<dyn ChatModel>,
    judge: Arc<dyn ChatModel>,
    parser: Option<Arc<dyn ParseProvider>>,
    rules: RemovabilityRuleTable,
    active: Mutex<BTreeSet<String>>,
    progress: Mutex<BTreeMap<String, Arc<AtomicUsize>>>,
    edits: tokio::sync::Mutex<()>,
}

/// Counterfactuals a run will produce, when the count fits in `usize`.
fn planned_total(forest: &SegmentForest, cfg: &RunConfig) -> Option<usize> {
    let n = usize::try_from(crate::engine::count_valid(forest).exact()?).ok()?;
    Some(if n > cfg.cap {
        n.min(cfg.sample.max(1))
    } else {
        n
    })
}

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

impl TaskService {
    /// Opens the store and marks runs left `running` by a crash as failed.
    pub fn new(
        store: FileStore,
        llm: Arc<dyn ChatModel>,
        judge: Arc<dyn ChatModel>,
        parser: Option<Arc<dyn ParseProvider>>,
        rules: RemovabilityRuleTable,
    ) -> Result<Arc<Self>, ServiceError> {
        for id in store.run_ids()? {
            let mut meta = store.load_run(&id)?;
            if meta.status == RunStatus::Running {
                meta.status = RunStatus::Failed;
                meta.error = Some("interrupted".into());
                store.save_run(&meta)?;
            }
        }
        for id in store.task_ids()? {
            let mut task = store.load_task(&id)?;
            if task.status == TaskStatus::Running {
                task.status = TaskStatus::Failed;
                store.save_task(&task)?;
            }
        }
        Ok(Arc::new(TaskService {
            store,
            llm,
            judge,
            parser,
            rules,
            active: Mutex::new(BTreeSet::new()),
            progress: Mutex::new(BTreeMap::new()),
            edits: tokio::sync::Mutex::new(()),
        }))
    }

    pub fn store(&self) -> &FileStore {
        &self.store
    }

    pub async fn parse_text(&self, text: &str) -> Result<Vec<SentenceParse>, ServiceError> {
        match &self.parser {
            Some(p) => p
                .parse(text)
                .await
                .map_err(ServiceError::ParseProviderUnavailable),
            None => Err(ServiceError::ParseProviderUnavailable(
                "no parse provider configured and no CoNLL-U attached".into(),
            )),
        }
    }

    pub async fn create_task(&self, spec: TaskSpec) -> Result<Task, ServiceError> {
        validate_template(&spec.template)?;
        let parses = match &spec.conllu {
            Some(src) => {
                parse_conllu_strict(src).map_err(|e| ServiceError::ParseMismatch(e.to_string()))?
            }
            None => self.parse_text(&spec.prototype).await?,
        };
        let forest = build_task_forest(&spec, &parses, &self.rules)?;
        let task = Task {
            v: SCHEMA_VERSION,
            id: new_id(),
            prototype_text: spec.prototype,
            prompt_template: spec.template,
            pinned: spec.pinned,
            evaluators: spec.evaluators,
            forest,
            status: TaskStatus::Draft,
            runs: Vec::new(),
        };
        self.store.save_task(&task)?;
        Ok(task)
    }

    pub fn get_task(&self, id: &str) -> Result<Task, ServiceError> {
        self.store.load_task(id)
    }

    pub async fn edit_segments(&self, id: &str, ops: &[SegmentOp]) -> Result<Task, ServiceError> {
        let _guard = self.edits.lock().await;
        let mut task = self.store.load_task(id)?;
        if task.status == TaskStatus::Running {
            return Err(ServiceError::RunInProgress(id.into()));
        }
        let mut forest = task.forest.clone();
        for op in ops {
            forest = apply_segment_op(&forest, op)?;
        }
        task.forest = forest;
        self.store.save_task(&task)?;
        Ok(task)
    }

    pub async fn suggest(&self, id: &str, segment: SegmentId) -> Result<Suggestions, ServiceError> {
        let task = self.store.load_task(id)?;
        suggest_alternatives(&task.forest, segment, self.judge.as_ref())
            .await
            .map_err(|e| match e {
                crate::segment::SuggestError::GatewayUnavailable(g) => {
                    ServiceError::GatewayUnavailable(g.to_string())
                }
                other => ServiceError::BadRequest(other.to_string()),
            })
    }

    /// Registers a run and executes it in the background.
    pub async fn start_run(
        self: &Arc<Self>,
        task_id: &str,
        cfg: RunConfig,
    ) -> Result<RunMeta, ServiceError> {
        let _guard = self.edits.lock().await;
        let mut task = self.store.load_task(task_id)?;
        if cfg.n == 0 {
            return Err(ServiceError::BadRequest("n must be at least 1".into()));
        }
        let evaluators = runner::select_evaluators(&task.evaluators, cfg.evaluators.as_deref())?;
        {
            let mut active = self.active.lock().expect("lock");
            if !active.insert(task_id.to_string()) {
                return Err(ServiceError::RunInProgress(task_id.into()));
            }
        }
        let meta = RunMeta {
            v: SCHEMA_VERSION,
            run_id: new_id(),
            task_id: task_id.to_string(),
            status: RunStatus::Running,
            error: None,
            progress: Progress {
                done: 0,
                total: planned_total(&task.forest, &cfg),
            },
            config: cfg.clone(),
        };
        let saved = self.store.save_run(&meta).and_then(|_| {
            task.status = TaskStatus::Running;
            task.runs.push(meta.run_id.clone());
            self.store.save_task(&task)
        });
        if let Err(e) = saved {
            self.active.lock().expect("lock").remove(task_id);
            return Err(e);
        }
        let counter = Arc::new(AtomicUsize::new(0));
        self.progress
            .lock()
            .expect("lock")
            .insert(meta.run_id.clone(), counter.clone());
        let svc = Arc::clone(self);
        let run_meta = meta.clone();
        tokio::spawn(async move {
            let result = execute_run(
                &task.forest,
                &task.prompt_template,
                &evaluators,
                &cfg,
                svc.llm.as_ref(),
                svc.judge.as_ref(),
                &counter,
            )
            .await;
            svc.finish_run(run_meta, result, &counter).await;
        });
        Ok(meta)
    }

    async fn finish_run(
        &self,
        mut meta: RunMeta,
        result: Result<RunOutputs, ServiceError>,
        counter: &AtomicUsize,
    ) {
        let _guard = self.edits.lock().await;
        meta.progress.done = counter.load(Ordering::Relaxed);
        match result.and_then(|out| {
            write_artifacts(&self.store.run_dir(&meta.run_id)?, &out)?;
            Ok(out)
        }) {
            Ok(out) => {
                meta.progress.total = Some(out.counterfactuals.len());
                match out.exhausted() {
                    0 => meta.status = RunStatus::Done,
                    k => {
                        meta.status = RunStatus::Failed;
                        meta.error = Some(format!(
                            "GatewayExhausted: {k} of {} counterfactuals have no outcome",
                            out.counterfactuals.len()
                        ));
                    }
                }
            }
            Err(e) => {
                meta.status = RunStatus::Failed;
                meta.error = Some(e.to_string());
            }
        }
        if let Err(e) = self.store.save_run(&meta) {
            tracing::error!(run = %meta.run_id, error = %e, "could not persist run status");
        }
        match self.store.load_task(&meta.task_id) {
            Ok(mut task) => {
                task.status = if meta.status == RunStatus::Done {
                    TaskStatus::Done
                } else {
                    TaskStatus::Failed
                };
                if let Err(e) = self.store.save_task(&task) {
                    tracing::error!(task = %task.id, error = %e, "could not persist task status");
                }
            }
            Err(e) => tracing::error!(task = %meta.task_id, error = %e, "task vanished during run"),
        }
        self.progress.lock().expect("lock").remove(&meta.run_id);
        self.active.lock().expect("lock").remove(&meta.task_id);
    }

    pub fn get_run(&self, id: &str) -> Result<RunMeta, ServiceError> {
        let mut meta = self.store.load_run(id)?;
        if let Some(c) = self.progress.lock().expect("lock").get(id) {
            meta.progress.done = c.load(Ordering::Relaxed);
        }
        Ok(meta)
    }

    /// Polls until the run leaves `running`.
    pub async fn wait_run(&self, id: &str) -> Result<RunMeta, ServiceError> {
        loop {
            let meta = self.get_run(id)?;
            if meta.status != RunStatus::Running {
                return Ok(meta);
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    fn finished(&self, id: &str) -> Result<(RunMeta, RunOutputs), ServiceError> {
        let meta = self.get_run(id)?;
        let dir = self.store.run_dir(id)?;
        if meta.status == RunStatus::Running || !dir.join("shap.json").exists() {
            return Err(ServiceError::RunNotReady(id.into()));
        }
        Ok((meta, load_artifacts(&dir)?))
    }

    pub fn artifacts(&self, id: &str) -> Result<RunOutputs, ServiceError> {
        self.finished(id).map(|(_, out)| out)
    }

    pub fn results(&self, id: &str, query: &ResultsQuery) -> Result<ResultsPayload, ServiceError> {
        let (meta, out) = self.finished(id)?;
        results_payload(&meta, &out, query)
    }

    pub fn group_by(&self, id: &str, req: &GroupByRequest) -> Result<GroupByPayload, ServiceError> {
        let (_, out) = self.finished(id)?;
        let evaluator = pick_evaluator(&out, req.evaluator.as_deref())?;
        let rows = run_rows(&out, evaluator.as_deref());
        let groups = group_by(&out.forest, &rows, &req.segments)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Ok(GroupByPayload {
            v: SCHEMA_VERSION,
            run_id: id.to_string(),
            evaluator,
            groups,
        })
    }

    pub fn cf_text(&self, id: &str, cf_id: usize) -> Result<CfText, ServiceError> {
        let (_, out) = self.finished(id)?;
        let cf = out
            .counterfactuals
            .iter()
            .find(|c| c.id == cf_id)
            .ok_or(ServiceError::UnknownCounterfactual(cf_id))?;
        Ok(CfText {
            v: SCHEMA_VERSION,
            cf_id,
            text: cf.text.clone(),
            prompt: render_prompt(&out.config.template, &cf.text),
        })
    }
}
