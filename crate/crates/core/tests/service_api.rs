mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use axum::routing::post;
use axum::{Json, Router};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use counterlens::engine::count_valid;
use counterlens::gateway::{ChatModel, CompletionRequest, GatewayError, StubModel};
use counterlens::rules::RemovabilityRuleTable;
use counterlens::segment::SegmentKind;
use counterlens::service::api::router;
use counterlens::service::runner::ARTIFACT_FILES;
use counterlens::service::{
    FileStore, HttpParseProvider, ParseProvider, Progress, RunConfig, RunMeta, RunStatus, Task,
    TaskService,
};

const NECK_PAIN: &str = "The patient reports trouble sleeping and intense pain in the neck.";

/// Answers "pain" whenever the prompt mentions it, so outcomes are known
/// from the counterfactual text alone.
fn echo_model() -> Arc<dyn ChatModel> {
    Arc::new(StubModel::from_fn("echo", |r| {
        Ok(if r.prompt.contains("pain") {
            "Likely pain related.".into()
        } else {
            "Unclear.".into()
        })
    }))
}

/// Blocks every call until the gate gets permits.
struct Gated {
    gate: Arc<Semaphore>,
}

#[async_trait]
impl ChatModel for Gated {
    fn model_id(&self) -> &str {
        "gated"
    }

    async fn complete(&self, _: &CompletionRequest) -> Result<String, GatewayError> {
        self.gate.acquire().await.expect("gate open").forget();
        Ok("pain".into())
    }
}

struct Server {
    base: String,
    client: Client,
    _dir: Option<tempfile::TempDir>,
}

impl Server {
    fn start(dir: &Path, llm: Arc<dyn ChatModel>, parser: Option<Arc<dyn ParseProvider>>) -> Self {
        let store = FileStore::open(dir).unwrap();
        let svc = TaskService::new(
            store,
            llm.clone(),
            llm,
            parser,
            RemovabilityRuleTable::default(),
        )
        .unwrap();
        Server {
            base: format!("{}/api/v1", common::spawn_server(router(svc))),
            client: Client::new(),
            _dir: None,
        }
    }

    fn fresh(llm: Arc<dyn ChatModel>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Server::start(dir.path(), llm, None);
        s._dir = Some(dir);
        s
    }

    fn send(
        &self,
        method: reqwest::Method,
        path: &str,
        body: Option<&Value>,
    ) -> (StatusCode, Value) {
        let mut req = self.client.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().unwrap();
        let status = resp.status();
        let text = resp.text().unwrap();
        (
            status,
            serde_json::from_str(&text).unwrap_or(Value::String(text)),
        )
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        self.send(reqwest::Method::GET, path, None)
    }

    fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        self.send(reqwest::Method::POST, path, Some(body))
    }

    fn patch(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        self.send(reqwest::Method::PATCH, path, Some(body))
    }

    fn create_neck_pain(&self) -> Task {
        let (status, body) = self.post("/tasks", &neck_pain_spec());
        assert_eq!(status, StatusCode::CREATED, "{body}");
        serde_json::from_value(body).unwrap()
    }

    fn wait(&self, run_id: &str) -> RunMeta {
        let t0 = Instant::now();
        loop {
            let (status, body) = self.get(&format!("/runs/{run_id}"));
            assert_eq!(status, StatusCode::OK);
            let meta: RunMeta = serde_json::from_value(body).unwrap();
            if meta.status != RunStatus::Running {
                return meta;
            }
            assert!(t0.elapsed() < Duration::from_secs(20), "run did not finish");
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    fn run(&self, task_id: &str, cfg: &Value) -> RunMeta {
        let (status, body) = self.post(&format!("/tasks/{task_id}/runs"), cfg);
        assert_eq!(status, StatusCode::ACCEPTED, "{body}");
        self.wait(body["run_id"].as_str().unwrap())
    }
}

fn neck_pain_spec() -> Value {
    json!({
        "prototype": NECK_PAIN,
        "template": "Q: {input}\nWhat is the chief complaint?",
        "evaluators": [
            { "name": "mentions pain", "operator": "CONTAIN", "argument": "pain" },
            { "name": "starts likely", "operator": "STARTWITH", "argument": "likely" },
        ],
        "conllu": common::conllu("neck_pain"),
    })
}

fn assert_error(resp: (StatusCode, Value), status: StatusCode, code: &str) {
    assert_eq!(resp.0, status, "{}", resp.1);
    assert_eq!(resp.1["code"], code, "{}", resp.1);
    assert!(resp.1["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[test]
fn task_run_results_round_trip() {
    let s = Server::fresh(echo_model());
    let task = s.create_neck_pain();
    assert_eq!(task.forest.dimension(), 6);
    assert_eq!(
        task.forest
            .segments()
            .filter(|x| x.kind == SegmentKind::Dummy)
            .count(),
        1
    );
    let (status, fetched) = s.get(&format!("/tasks/{}", task.id));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<Task>(fetched).unwrap(), task);

    let meta = s.run(&task.id, &json!({ "n": 5, "seed": 3 }));
    assert_eq!(meta.status, RunStatus::Done, "{:?}", meta.error);
    let total = count_valid(&task.forest).exact().unwrap() as usize;
    assert_eq!(
        meta.progress,
        Progress {
            done: total,
            total: Some(total)
        }
    );

    let (status, task_after) = s.get(&format!("/tasks/{}", task.id));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(task_after["status"], "done");
    assert_eq!(task_after["runs"], json!([meta.run_id]));

    let (status, res) = s.get(&format!("/runs/{}/results", meta.run_id));
    assert_eq!(status, StatusCode::OK, "{res}");
    assert_eq!(res["total_rows"], total);
    assert_eq!(res["evaluator"], "mentions pain");
    assert_eq!(res["segments"].as_array().unwrap().len(), 7);
    assert!(res["phi0"].is_number());

    // Every outcome follows from the counterfactual text.
    for row in res["rows"].as_array().unwrap() {
        let cf = row["cf_id"].as_u64().unwrap();
        let (status, text) = s.get(&format!("/runs/{}/cf/{cf}/text", meta.run_id));
        assert_eq!(status, StatusCode::OK);
        let t = text["text"].as_str().unwrap();
        assert_eq!(
            text["prompt"],
            format!("Q: {t}\nWhat is the chief complaint?")
        );
        let want = if t.contains("pain") { 1.0 } else { 0.0 };
        assert_eq!(row["outcome"].as_f64().unwrap(), want, "{t}");
    }

    // The second evaluator is case-insensitive on the response prefix.
    let (_, other) = s.get(&format!(
        "/runs/{}/results?evaluator=starts%20likely",
        meta.run_id
    ));
    assert_eq!(other["evaluator"], "starts likely");
    assert_eq!(other["rows"], res["rows"]);

    let (status, filtered) = s.get(&format!(
        "/runs/{}/results?outcome_lo=0.5&sort=word_count&dir=desc",
        meta.run_id
    ));
    assert_eq!(status, StatusCode::OK, "{filtered}");
    let rows = filtered["rows"].as_array().unwrap();
    assert!(!rows.is_empty() && rows.len() < total);
    assert!(rows.iter().all(|r| r["outcome"] == 1.0));
    assert!(rows
        .windows(2)
        .all(|w| w[0]["word_count"].as_u64() >= w[1]["word_count"].as_u64()));

    let vars = task.forest.variable_ids();
    let (status, groups) = s.post(
        &format!("/runs/{}/groupby", meta.run_id),
        &json!({ "segments": [vars[1], vars[4]] }),
    );
    assert_eq!(status, StatusCode::OK, "{groups}");
    let groups = groups["groups"].as_array().unwrap();
    assert!(!groups.is_empty() && groups.len() <= 4);
    let members: usize = groups
        .iter()
        .map(|g| g["member_cf_ids"].as_array().unwrap().len())
        .sum();
    assert_eq!(members, total);
}

#[test]
fn errors_carry_code_and_message() {
    let s = Server::fresh(echo_model());
    let task = s.create_neck_pain();
    let mut spec = neck_pain_spec();
    spec["template"] = json!("no placeholder");
    assert_error(
        s.post("/tasks", &spec),
        StatusCode::BAD_REQUEST,
        "TemplateInvalid",
    );
    spec["template"] = json!("{input} and {input}");
    assert_error(
        s.post("/tasks", &spec),
        StatusCode::BAD_REQUEST,
        "TemplateInvalid",
    );

    let mut spec = neck_pain_spec();
    spec["prototype"] = json!("The patient reports nothing.");
    assert_error(
        s.post("/tasks", &spec),
        StatusCode::UNPROCESSABLE_ENTITY,
        "ParseMismatch",
    );

    let mut spec = neck_pain_spec();
    spec.as_object_mut().unwrap().remove("conllu");
    assert_error(
        s.post("/tasks", &spec),
        StatusCode::SERVICE_UNAVAILABLE,
        "ParseProviderUnavailable",
    );

    assert_error(
        s.post("/tasks", &json!("not a spec")),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
    assert_error(s.get("/tasks/nope"), StatusCode::NOT_FOUND, "UnknownTask");
    assert_error(s.get("/runs/nope"), StatusCode::NOT_FOUND, "UnknownRun");
    assert_error(
        s.get("/runs/nope/results"),
        StatusCode::NOT_FOUND,
        "UnknownRun",
    );
    assert_error(s.get("/nowhere"), StatusCode::NOT_FOUND, "NotFound");
    assert_error(
        s.get("/tasks/..%2Fescape"),
        StatusCode::NOT_FOUND,
        "UnknownTask",
    );

    assert_error(
        s.post(&format!("/tasks/{}/runs", task.id), &json!({ "n": 0 })),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
    assert_error(
        s.post(
            &format!("/tasks/{}/runs", task.id),
            &json!({ "evaluators": ["missing"] }),
        ),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );

    let meta = s.run(&task.id, &json!({}));
    assert_eq!(meta.config, RunConfig::default());
    assert_error(
        s.get(&format!("/runs/{}/cf/999/text", meta.run_id)),
        StatusCode::NOT_FOUND,
        "UnknownCounterfactual",
    );
    assert_error(
        s.post(
            &format!("/runs/{}/groupby", meta.run_id),
            &json!({ "segments": [1, 1] }),
        ),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
    assert_error(
        s.get(&format!("/runs/{}/results?include=x", meta.run_id)),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
}

#[test]
fn segment_edits() {
    let s = Server::fresh(echo_model());
    let task = s.create_neck_pain();
    let path = format!("/tasks/{}/segments", task.id);
    let inner = task
        .forest
        .variable_ids()
        .into_iter()
        .find(|&id| {
            let seg = task.forest.segment(id).unwrap();
            seg.kind == SegmentKind::Normal && !seg.children.is_empty()
        })
        .unwrap();

    let (status, merged) = s.patch(&path, &json!({ "op": "merge", "segment": inner }));
    assert_eq!(status, StatusCode::OK, "{merged}");
    let merged: Task = serde_json::from_value(merged).unwrap();
    assert!(merged.forest.dimension() < task.forest.dimension());

    let (status, back) = s.patch(&path, &json!({ "op": "expand", "segment": inner }));
    assert_eq!(status, StatusCode::OK, "{back}");
    assert_eq!(
        serde_json::from_value::<Task>(back).unwrap().forest,
        task.forest
    );

    let leaf = task
        .forest
        .segments()
        .find(|x| x.is_leaf() && !x.is_dummy() && x.parent.is_some())
        .unwrap()
        .id;
    let (status, edited) = s.patch(
        &path,
        &json!({ "ops": [
            { "op": "alternatives", "segment": leaf, "options": ["mild"] },
            { "op": "lock", "segment": leaf, "lock": "included" },
        ]}),
    );
    assert_eq!(status, StatusCode::OK, "{edited}");
    let edited: Task = serde_json::from_value(edited).unwrap();
    let seg = edited.forest.segment(leaf).unwrap();
    assert_eq!(seg.alternatives, vec!["mild".to_string()]);
    assert_eq!(seg.lock, Some(counterlens::segment::Lock::Included));

    // A failing batch leaves the stored task untouched.
    assert_error(
        s.patch(
            &path,
            &json!({ "ops": [
                { "op": "lock", "segment": leaf, "lock": null },
                { "op": "merge", "segment": 999 },
            ]}),
        ),
        StatusCode::UNPROCESSABLE_ENTITY,
        "SegmentEdit",
    );
    let (_, stored) = s.get(&format!("/tasks/{}", task.id));
    assert_eq!(
        serde_json::from_value::<Task>(stored).unwrap().forest,
        edited.forest
    );
    assert_error(
        s.patch(&path, &json!({ "op": "explode", "segment": 1 })),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
}

#[test]
fn pinned_sentence_survives_every_counterfactual() {
    let s = Server::fresh(echo_model());
    let prototype = format!("{NECK_PAIN} Answer briefly.");
    let extra = "# text = Answer briefly.\n1\tAnswer\t_\t_\t_\t_\t0\troot\t_\t_\n2\tbriefly\t_\t_\t_\t_\t1\tadvmod\t_\tSpaceAfter=No\n3\t.\t_\t_\t_\t_\t1\tpunct\t_\t_\n";
    let start = NECK_PAIN.chars().count() + 1;
    let spec = json!({
        "prototype": prototype,
        "pinned": [{ "start": start, "end": start + "Answer briefly.".len() }],
        "evaluators": [{ "name": "pain", "operator": "CONTAIN", "argument": "pain" }],
        "conllu": format!("{}\n\n{extra}", common::conllu("neck_pain").trim_end()),
    });
    let (status, task) = s.post("/tasks", &spec);
    assert_eq!(status, StatusCode::CREATED, "{task}");
    let task: Task = serde_json::from_value(task).unwrap();
    // The pinned sentence adds no variables.
    assert_eq!(task.forest.dimension(), 6);
    let meta = s.run(&task.id, &json!({ "n": 1 }));
    assert_eq!(meta.status, RunStatus::Done);
    for cf in 0..meta.progress.done {
        let (_, text) = s.get(&format!("/runs/{}/cf/{cf}/text", meta.run_id));
        assert!(
            text["text"]
                .as_str()
                .unwrap()
                .ends_with(". Answer briefly."),
            "{text}"
        );
    }
}

#[test]
fn parse_provider_supplies_missing_conllu() {
    let parses = Router::new().route(
        "/parse",
        post(|Json(body): Json<Value>| async move {
            assert_eq!(body["text"], NECK_PAIN);
            Json(json!({ "conllu": common::conllu("neck_pain") }))
        }),
    );
    let url = format!("{}/parse", common::spawn_server(parses));
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(
        dir.path(),
        echo_model(),
        Some(Arc::new(HttpParseProvider::new(&url))),
    );
    let mut spec = neck_pain_spec();
    spec.as_object_mut().unwrap().remove("conllu");
    let (status, task) = s.post("/tasks", &spec);
    assert_eq!(status, StatusCode::CREATED, "{task}");
    assert_eq!(
        serde_json::from_value::<Task>(task)
            .unwrap()
            .forest
            .dimension(),
        6
    );

    let (status, parsed) = s.post("/parse", &json!({ "text": NECK_PAIN }));
    assert_eq!(status, StatusCode::OK, "{parsed}");
}

#[test]
fn suggestions_come_from_the_judge() {
    let judge = StubModel::from_fn("judge", |r| {
        assert!(r.prompt.contains("intense"));
        Ok(
            "```json\n{\"preserving\": [\"severe\", \"sharp\"], \"altering\": [\"no\"]}\n```"
                .into(),
        )
    });
    let s = Server::fresh(Arc::new(judge));
    let task = s.create_neck_pain();
    let id = task
        .forest
        .segments()
        .find(|x| x.is_leaf() && task.forest.text(x.id) == "intense")
        .unwrap()
        .id;
    let (status, body) = s.post(
        &format!("/tasks/{}/segments/{id}/suggest", task.id),
        &json!({}),
    );
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(
        body,
        json!({ "preserving": ["severe", "sharp"], "altering": ["no"] })
    );
    assert_error(
        s.post(
            &format!(
                "/tasks/{}/segments/{}/suggest",
                task.id,
                task.forest.root_id()
            ),
            &json!({}),
        ),
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
}

#[test]
fn suggestion_gateway_failure_is_bad_gateway() {
    let s = Server::fresh(Arc::new(StubModel::from_fn("down", |_| {
        Err(GatewayError::Transport("refused".into()))
    })));
    let task = s.create_neck_pain();
    let id = task
        .forest
        .segments()
        .find(|x| x.is_leaf() && !x.is_dummy() && x.parent.is_some())
        .unwrap()
        .id;
    assert_error(
        s.post(
            &format!("/tasks/{}/segments/{id}/suggest", task.id),
            &json!({}),
        ),
        StatusCode::BAD_GATEWAY,
        "GatewayUnavailable",
    );
}

#[test]
fn one_active_run_per_task() {
    let gate = Arc::new(Semaphore::new(0));
    let s = Server::fresh(Arc::new(Gated { gate: gate.clone() }));
    let task = s.create_neck_pain();
    let (status, started) = s.post(&format!("/tasks/{}/runs", task.id), &json!({ "n": 2 }));
    assert_eq!(status, StatusCode::ACCEPTED);
    let run_id = started["run_id"].as_str().unwrap().to_string();
    assert_eq!(started["status"], "running");

    assert_error(
        s.post(&format!("/tasks/{}/runs", task.id), &json!({})),
        StatusCode::CONFLICT,
        "RunInProgress",
    );
    assert_error(
        s.patch(
            &format!("/tasks/{}/segments", task.id),
            &json!({ "op": "merge", "segment": 1 }),
        ),
        StatusCode::CONFLICT,
        "RunInProgress",
    );
    assert_error(
        s.get(&format!("/runs/{run_id}/results")),
        StatusCode::CONFLICT,
        "RunNotReady",
    );
    let (_, t) = s.get(&format!("/tasks/{}", task.id));
    assert_eq!(t["status"], "running");

    gate.add_permits(10_000);
    let meta = s.wait(&run_id);
    assert_eq!(meta.status, RunStatus::Done);
    let (status, _) = s.get(&format!("/runs/{run_id}/results"));
    assert_eq!(status, StatusCode::OK);
    // The task accepts a new run once the first one is over.
    let again = s.run(&task.id, &json!({ "n": 1 }));
    assert_eq!(again.status, RunStatus::Done);
}

#[test]
fn exhausted_gateway_fails_the_run() {
    let s = Server::fresh(Arc::new(StubModel::from_fn("down", |_| {
        Err(GatewayError::RateLimited(5))
    })));
    let task = s.create_neck_pain();
    let meta = s.run(&task.id, &json!({ "n": 2 }));
    assert_eq!(meta.status, RunStatus::Failed);
    assert!(
        meta.error
            .as_deref()
            .unwrap()
            .starts_with("GatewayExhausted"),
        "{:?}",
        meta.error
    );
    let (_, t) = s.get(&format!("/tasks/{}", task.id));
    assert_eq!(t["status"], "failed");
    // Rows are still inspectable, without outcomes.
    let (status, res) = s.get(&format!("/runs/{}/results", meta.run_id));
    assert_eq!(status, StatusCode::OK, "{res}");
    assert!(res["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["outcome"].is_null()));
    assert!(res["shap_error"].is_string());
}

#[test]
fn state_survives_restart_and_interrupted_runs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (task, run) = {
        let s = Server::start(dir.path(), echo_model(), None);
        let task = s.create_neck_pain();
        let run = s.run(&task.id, &json!({ "n": 2 }));
        (task, run)
    };
    let store = FileStore::open(dir.path()).unwrap();
    let mut stuck = run.clone();
    stuck.run_id = "stuck".into();
    stuck.status = RunStatus::Running;
    store.save_run(&stuck).unwrap();

    let s = Server::start(dir.path(), echo_model(), None);
    let (status, t) = s.get(&format!("/tasks/{}", task.id));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_value::<Task>(t).unwrap().forest,
        task.forest
    );
    let (status, r) = s.get(&format!("/runs/{}", run.run_id));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<RunMeta>(r).unwrap(), run);
    let (_, res) = s.get(&format!("/runs/{}/results", run.run_id));
    assert_eq!(
        res["total_rows"].as_u64().unwrap() as u128,
        count_valid(&task.forest).exact().unwrap()
    );

    let (_, stuck) = s.get("/runs/stuck");
    assert_eq!(stuck["status"], "failed");
    assert_eq!(stuck["error"], "interrupted");
}

#[test]
fn equal_runs_write_equal_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), echo_model(), None);
    let a = s.create_neck_pain();
    let b = s.create_neck_pain();
    let ra = s.run(&a.id, &json!({ "n": 3, "seed": 11 }));
    let rb = s.run(&b.id, &json!({ "n": 3, "seed": 11 }));
    let store = FileStore::open(dir.path()).unwrap();
    for f in ARTIFACT_FILES {
        let x = std::fs::read(store.run_dir(&ra.run_id).unwrap().join(f)).unwrap();
        let y = std::fs::read(store.run_dir(&rb.run_id).unwrap().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
}
