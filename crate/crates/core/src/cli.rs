//! Command-line entry point. Exit codes: 0 success, 1 runtime error,
//! 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bench::{load_corpus, run_benchmark, BenchConfig, GrammarChecker, LanguageToolClient};
use crate::conllu::{parse_conllu_strict, validate_tree, SentenceParse};
use crate::document::Document;
use crate::engine::{generate_vectors, realize_batch, write_jsonl, DEFAULT_CAP, DEFAULT_SAMPLE};
use crate::gateway::{model_from_spec, ChatModel, GatewayConfig};
use crate::rules::RemovabilityRuleTable;
use crate::segment::SegmentForest;
use crate::service::runner::{compute_shap, write_shap, RunConfig};
use crate::service::{
    build_task_forest, execute_run, load_artifacts, write_artifacts, FileStore, HttpParseProvider,
    ParseProvider, TaskService, TaskSpec,
};

#[derive(Parser, Debug)]
#[command(
    name = "counterlens",
    version,
    about = "Counterfactual prompt generation and attribution"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON file with defaults for any of the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Removability rule table file.
    #[arg(long, global = true)]
    pub rules: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Enumerate when the valid count is at most this, otherwise sample.
    #[arg(long, global = true)]
    pub cap: Option<usize>,
    /// Sample size used above the cap.
    #[arg(long, global = true)]
    pub sample: Option<usize>,
    /// LLM samples per counterfactual.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Model name, or `stub:<text>` for a constant offline model.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Model used for logic evaluators and suggestions; defaults to `--model`.
    #[arg(long, global = true)]
    pub judge_model: Option<String>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the segment tree of a CoNLL-U parse.
    Segment {
        input: PathBuf,
        /// Print the forest as JSON instead of an outline.
        #[arg(long)]
        json: bool,
    },
    /// Write counterfactuals as JSON lines.
    Generate {
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Execute a full run for a task file.
    Run {
        #[arg(long)]
        task: PathBuf,
        /// CoNLL-U parse of the prototype, if the task file has none inline.
        #[arg(long)]
        conllu: Option<PathBuf>,
        /// Directory receiving the run artifacts.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Recompute attributions for a run directory.
    Attribute { run_dir: PathBuf },
    /// Benchmark a directory of CoNLL-U files.
    Bench {
        corpus_dir: PathBuf,
        /// LanguageTool server base URL; grammar is not checked without it.
        #[arg(long)]
        checker_url: Option<String>,
        /// Directory receiving report.json and report.md.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Serve the REST API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Storage root for tasks and runs.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Parse provider endpoint (`POST {"text"}` answered by `{"conllu"}`).
        #[arg(long)]
        parser_url: Option<String>,
    },
}

/// Values a `--config` file may set.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub rules: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cap: Option<usize>,
    pub sample: Option<usize>,
    pub n: Option<usize>,
    pub model: Option<String>,
    pub judge_model: Option<String>,
    pub base_url: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub gateway: Option<GatewayConfig>,
}

/// Flags merged over the config file.
struct Settings {
    rules: RemovabilityRuleTable,
    seed: u64,
    cap: usize,
    sample: usize,
    n: usize,
    model: String,
    judge_model: String,
    gateway: GatewayConfig,
}

type CliResult<T> = Result<T, String>;

fn settings(c: &Common) -> CliResult<Settings> {
    let file: FileConfig = match &c.config {
        Some(p) => {
            let src = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&src).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let rules = match c.rules.clone().or(file.rules) {
        Some(p) => {
            let src = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            RemovabilityRuleTable::parse(&src).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => RemovabilityRuleTable::default(),
    };
    let mut gateway = file.gateway.unwrap_or_default();
    if let Some(u) = c.base_url.clone().or(file.base_url) {
        gateway.base_url = u;
    }
    if let Some(d) = c.cache_dir.clone().or(file.cache_dir) {
        gateway.cache_dir = Some(d);
    }
    let model = c
        .model
        .clone()
        .or(file.model)
        .unwrap_or_else(|| gateway.model.clone());
    let judge_model = c
        .judge_model
        .clone()
        .or(file.judge_model)
        .unwrap_or_else(|| model.clone());
    Ok(Settings {
        rules,
        seed: c.seed.or(file.seed).unwrap_or(0),
        cap: c.cap.or(file.cap).unwrap_or(DEFAULT_CAP),
        sample: c.sample.or(file.sample).unwrap_or(DEFAULT_SAMPLE),
        n: c.n.or(file.n).unwrap_or(5),
        model,
        judge_model,
        gateway,
    })
}

fn read_parses(path: &Path) -> CliResult<Vec<SentenceParse>> {
    let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_conllu_strict(&src).map_err(|e| format!("{}: {e}", path.display()))
}

/// One forest for the whole file; several sentences share a document root.
fn forest_from_file(path: &Path, rules: &RemovabilityRuleTable) -> CliResult<SegmentForest> {
    let parses = read_parses(path)?;
    for p in &parses {
        let diags = validate_tree(p);
        if !diags.is_empty() {
            let msg: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            return Err(format!("{}: {}", path.display(), msg.join("; ")));
        }
    }
    SegmentForest::from_document(&Document::from_sentences(&parses), rules)
        .map_err(|e| e.to_string())
}

fn models(s: &Settings) -> CliResult<(Arc<dyn ChatModel>, Arc<dyn ChatModel>)> {
    let llm = model_from_spec(&s.model, &s.gateway).map_err(|e| e.to_string())?;
    let judge = if s.judge_model == s.model {
        llm.clone()
    } else {
        model_from_spec(&s.judge_model, &s.gateway).map_err(|e| e.to_string())?
    };
    Ok((llm, judge))
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())
}

fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let s = settings(&cli.common)?;
    let io = |e: std::io::Error| e.to_string();
    match cli.command {
        Command::Segment { input, json } => {
            let forest = forest_from_file(&input, &s.rules)?;
            if json {
                let text = serde_json::to_string_pretty(&forest).map_err(|e| e.to_string())?;
                writeln!(out, "{text}").map_err(io)?;
            } else {
                write!(out, "{}", forest.outline()).map_err(io)?;
                writeln!(out, "M = {}", forest.dimension()).map_err(io)?;
            }
        }
        Command::Generate { input, out: dest } => {
            let forest = forest_from_file(&input, &s.rules)?;
            let vectors =
                generate_vectors(&forest, s.cap, s.sample, s.seed).map_err(|e| e.to_string())?;
            let cfs = realize_batch(&forest, &vectors).map_err(|e| e.to_string())?;
            match dest {
                Some(p) => {
                    let mut buf = Vec::new();
                    write_jsonl(&mut buf, &cfs).map_err(io)?;
                    crate::gateway::write_atomic(&p, &buf).map_err(io)?;
                }
                None => write_jsonl(&mut *out, &cfs).map_err(io)?,
            }
        }
        Command::Run {
            task,
            conllu,
            out: dir,
        } => {
            let src =
                std::fs::read_to_string(&task).map_err(|e| format!("{}: {e}", task.display()))?;
            let spec: TaskSpec =
                serde_json::from_str(&src).map_err(|e| format!("{}: {e}", task.display()))?;
            let parses = match (&spec.conllu, conllu) {
                (Some(inline), _) => parse_conllu_strict(inline).map_err(|e| e.to_string())?,
                (None, Some(p)) => read_parses(&p)?,
                (None, None) => {
                    return Err("task has no parse: add \"conllu\" or pass --conllu".into())
                }
            };
            let forest = build_task_forest(&spec, &parses, &s.rules).map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                n: s.n,
                seed: s.seed,
                cap: s.cap,
                sample: s.sample,
                evaluators: None,
                max_concurrency: s.gateway.max_concurrency,
            };
            let (llm, judge) = models(&s)?;
            let progress = AtomicUsize::new(0);
            let outputs = runtime()?
                .block_on(execute_run(
                    &forest,
                    &spec.template,
                    &spec.evaluators,
                    &cfg,
                    llm.as_ref(),
                    judge.as_ref(),
                    &progress,
                ))
                .map_err(|e| e.to_string())?;
            write_artifacts(&dir, &outputs).map_err(|e| e.to_string())?;
            writeln!(
                out,
                "{} counterfactuals, {} outcome records written to {}",
                outputs.counterfactuals.len(),
                outputs.outcomes.len(),
                dir.display()
            )
            .map_err(io)?;
            if outputs.exhausted() > 0 {
                return Err(format!(
                    "{} counterfactuals have no outcome",
                    outputs.exhausted()
                ));
            }
        }
        Command::Attribute { run_dir } => {
            let art = load_artifacts(&run_dir).map_err(|e| e.to_string())?;
            let shap = compute_shap(
                &art.forest,
                &art.counterfactuals,
                &art.outcomes,
                &art.config.evaluators,
            );
            write_shap(&run_dir, &shap).map_err(|e| e.to_string())?;
            let text = serde_json::to_string_pretty(&shap).map_err(|e| e.to_string())?;
            writeln!(out, "{text}").map_err(io)?;
        }
        Command::Bench {
            corpus_dir,
            checker_url,
            out: dest,
            workers,
        } => {
            let corpus = load_corpus(&corpus_dir).map_err(|e| e.to_string())?;
            let cfg = BenchConfig {
                cap: s.cap,
                sample: s.sample,
                seed: s.seed,
                rules: s.rules.clone(),
                workers,
            };
            let client = checker_url
                .as_deref()
                .map(LanguageToolClient::new)
                .transpose()
                .map_err(|e| e.to_string())?;
            let checker = client.as_ref().map(|c| c as &dyn GrammarChecker);
            let report = run_benchmark(&corpus, &cfg, checker).map_err(|e| e.to_string())?;
            if let Some(d) = dest {
                report.write(&d).map_err(io)?;
            }
            write!(out, "{}", report.to_markdown()).map_err(io)?;
        }
        Command::Serve {
            port,
            host,
            data,
            parser_url,
        } => {
            let (llm, judge) = models(&s)?;
            let store = FileStore::open(&data).map_err(|e| e.to_string())?;
            let parser =
                parser_url.map(|u| Arc::new(HttpParseProvider::new(&u)) as Arc<dyn ParseProvider>);
            let rt = runtime()?;
            rt.block_on(async {
                let svc = TaskService::new(store, llm, judge, parser, s.rules.clone())
                    .map_err(|e| e.to_string())?;
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(io)?;
                tracing::info!(addr = %listener.local_addr().map_err(io)?, "serving /api/v1");
                crate::service::api::serve(listener, svc).await.map_err(io)
            })?;
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}
