//! Single-rule evaluators that turn model responses into Booleans, and
//! outcome estimation from repeated queries.

use std::fmt;
use std::str::FromStr;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatModel, CompletionRequest, GatewayError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "CONTAIN")]
    Contain,
    #[serde(rename = "STARTWITH")]
    StartWith,
    #[serde(rename = "EQUAL")]
    Equal,
    #[serde(rename = "ENTAIL")]
    Entail,
    #[serde(rename = "CONTRADICT")]
    Contradict,
    #[serde(rename = "SEMANTICEQUAL")]
    SemanticEqual,
}

impl Operator {
    pub fn is_token_matching(self) -> bool {
        matches!(
            self,
            Operator::Contain | Operator::StartWith | Operator::Equal
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::Contain => "CONTAIN",
            Operator::StartWith => "STARTWITH",
            Operator::Equal => "EQUAL",
            Operator::Entail => "ENTAIL",
            Operator::Contradict => "CONTRADICT",
            Operator::SemanticEqual => "SEMANTICEQUAL",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operator {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "CONTAIN" => Operator::Contain,
            "STARTWITH" => Operator::StartWith,
            "EQUAL" => Operator::Equal,
            "ENTAIL" => Operator::Entail,
            "CONTRADICT" => Operator::Contradict,
            "SEMANTICEQUAL" => Operator::SemanticEqual,
            other => return Err(EvalError::UnknownOperator(other.to_string())),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalError {
    #[error("unknown operator {0}")]
    UnknownOperator(String),
    #[error("evaluator argument must be non-empty")]
    EmptyArgument,
    #[error("operator {0} needs a judge model")]
    NotTokenOperator(Operator),
    #[error("judge reply has no YES/NO verdict: {0:?}")]
    JudgeUnparseable(String),
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(GatewayError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluator {
    pub name: String,
    pub operator: Operator,
    pub argument: String,
}

impl Evaluator {
    pub fn new(operator: Operator, argument: impl Into<String>) -> Result<Self, EvalError> {
        let argument = argument.into();
        if argument.trim().is_empty() {
            return Err(EvalError::EmptyArgument);
        }
        Ok(Evaluator {
            name: format!("{operator} {argument}"),
            operator,
            argument,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.argument.trim().is_empty() {
            Err(EvalError::EmptyArgument)
        } else {
            Ok(())
        }
    }
}

/// Case-insensitive token matching.
pub fn eval_token(ev: &Evaluator, response: &str) -> Result<bool, EvalError> {
    let arg = ev.argument.to_lowercase();
    Ok(match ev.operator {
        Operator::Contain => response.to_lowercase().contains(&arg),
        Operator::StartWith => response.trim_start().to_lowercase().starts_with(&arg),
        Operator::Equal => response.trim().to_lowercase() == ev.argument.trim().to_lowercase(),
        op => return Err(EvalError::NotTokenOperator(op)),
    })
}

pub const ENTAIL_TEMPLATE: &str =
    "Premise: {A}\nHypothesis: {B}\nDoes the premise entail the hypothesis? Answer YES or NO.";
pub const CONTRADICT_TEMPLATE: &str =
    "Premise: {A}\nHypothesis: {B}\nDoes the premise contradict the hypothesis? Answer YES or NO.";

pub fn judge_prompt(template: &str, premise: &str, hypothesis: &str) -> String {
    template.replace("{A}", premise).replace("{B}", hypothesis)
}

/// Reads the verdict from the final word of the reply, falling back to the
/// first word.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let words: Vec<String> = reply
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_uppercase())
        .collect();
    let verdict = |w: &String| match w.as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    };
    words
        .last()
        .and_then(verdict)
        .or_else(|| words.first().and_then(verdict))
}

async fn judge(
    llm: &dyn ChatModel,
    template: &str,
    premise: &str,
    hypothesis: &str,
) -> Result<bool, EvalError> {
    let prompt = judge_prompt(template, premise, hypothesis);
    let reply = llm
        .complete(&CompletionRequest::judge(prompt))
        .await
        .map_err(EvalError::GatewayUnavailable)?;
    parse_verdict(&reply).ok_or(EvalError::JudgeUnparseable(reply))
}

/// Logic operators via a judge model: the response is the premise and the
/// evaluator argument the hypothesis.
pub async fn eval_logic(
    ev: &Evaluator,
    response: &str,
    judge_model: &dyn ChatModel,
) -> Result<bool, EvalError> {
    match ev.operator {
        Operator::Entail => judge(judge_model, ENTAIL_TEMPLATE, response, &ev.argument).await,
        Operator::Contradict => {
            judge(judge_model, CONTRADICT_TEMPLATE, response, &ev.argument).await
        }
        Operator::SemanticEqual => Ok(judge(judge_model, ENTAIL_TEMPLATE, response, &ev.argument)
            .await?
            && judge(judge_model, ENTAIL_TEMPLATE, &ev.argument, response).await?),
        _ => eval_token(ev, response),
    }
}

pub async fn evaluate(
    ev: &Evaluator,
    response: &str,
    judge_model: &dyn ChatModel,
) -> Result<bool, EvalError> {
    if ev.operator.is_token_matching() {
        eval_token(ev, response)
    } else {
        eval_logic(ev, response, judge_model).await
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Complete,
    PartialFailure,
    AllFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub cf_id: usize,
    pub evaluator: String,
    /// Verdict per successful sample, in sample-index order.
    pub samples: Vec<bool>,
    pub n_requested: usize,
    pub n_effective: usize,
    /// Fraction of true samples; `None` when every sample failed.
    pub outcome: Option<f64>,
    pub status: OutcomeStatus,
    pub failures: Vec<String>,
}

impl OutcomeRecord {
    pub fn from_verdicts(cf_id: usize, evaluator: &str, verdicts: &[Result<bool, String>]) -> Self {
        let samples: Vec<bool> = verdicts
            .iter()
            .filter_map(|v| v.as_ref().ok().copied())
            .collect();
        let failures: Vec<String> = verdicts
            .iter()
            .filter_map(|v| v.as_ref().err().cloned())
            .collect();
        let n = samples.len();
        let outcome = (n > 0).then(|| samples.iter().filter(|&&b| b).count() as f64 / n as f64);
        let status = if failures.is_empty() {
            OutcomeStatus::Complete
        } else if n == 0 {
            OutcomeStatus::AllFailed
        } else {
            OutcomeStatus::PartialFailure
        };
        OutcomeRecord {
            cf_id,
            evaluator: evaluator.to_string(),
            samples,
            n_requested: verdicts.len(),
            n_effective: n,
            outcome,
            status,
            failures,
        }
    }
}

/// The `n` raw responses for one prompt, sample-index aligned.
pub async fn collect_responses(
    prompt: &str,
    n: usize,
    llm: &dyn ChatModel,
    limit: usize,
) -> Vec<Result<String, GatewayError>> {
    let reqs: Vec<CompletionRequest> = (0..n as u32)
        .map(|i| CompletionRequest::sample(prompt, i))
        .collect();
    crate::gateway::batch_complete(llm, &reqs, limit).await
}

/// Applies `ev` to already collected responses.
pub async fn score_responses(
    cf_id: usize,
    ev: &Evaluator,
    responses: &[Result<String, GatewayError>],
    judge_model: &dyn ChatModel,
) -> OutcomeRecord {
    let verdicts: Vec<Result<bool, String>> = stream::iter(0..responses.len())
        .then(|i| async move {
            let r = &responses[i];
            match r {
                Ok(text) => evaluate(ev, text, judge_model)
                    .await
                    .map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect()
        .await;
    OutcomeRecord::from_verdicts(cf_id, &ev.name, &verdicts)
}

/// Queries `llm` `n` times with `prompt` and scores every response.
pub async fn estimate_outcome(
    cf_id: usize,
    prompt: &str,
    ev: &Evaluator,
    n: usize,
    llm: &dyn ChatModel,
    judge_model: &dyn ChatModel,
) -> (OutcomeRecord, Vec<Option<String>>) {
    let responses = collect_responses(prompt, n.max(1), llm, n.max(1)).await;
    let record = score_responses(cf_id, ev, &responses, judge_model).await;
    let raw = responses.into_iter().map(Result::ok).collect();
    (record, raw)
}
