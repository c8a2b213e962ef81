use serde::{Deserialize, Serialize};

use super::{SegmentError, SegmentForest, SegmentId};
use crate::gateway::{ChatModel, CompletionRequest, GatewayError};

/// Upper bound on each suggestion list.
pub const MAX_SUGGESTIONS: usize = 5;

/// Candidate replacements for a leaf segment. Never applied automatically.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestions {
    /// Options that keep the meaning (synonyms, paraphrases).
    pub preserving: Vec<String>,
    /// Options that change the meaning substantially.
    pub altering: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SuggestError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(#[from] GatewayError),
    #[error("could not parse suggestions: {0}")]
    Unparseable(String),
}

pub fn suggestion_prompt(sentence: &str, segment: &str) -> String {
    format!(
        "Sentence: {sentence}\n\
         Segment: {segment}\n\
         Propose replacements for the segment that fit grammatically in the sentence.\n\
         Return JSON only, in the form {{\"preserving\": [...], \"altering\": [...]}}, \
         where \"preserving\" holds up to {MAX_SUGGESTIONS} replacements with the same meaning \
         and \"altering\" holds up to {MAX_SUGGESTIONS} replacements that change the meaning significantly."
    )
}

/// Asks the model for meaning-preserving and meaning-altering replacements of
/// a leaf segment.
pub async fn suggest_alternatives(
    forest: &SegmentForest,
    id: SegmentId,
    llm: &dyn ChatModel,
) -> Result<Suggestions, SuggestError> {
    let seg = forest.get(id)?;
    if !seg.is_leaf() || seg.is_dummy() {
        return Err(SegmentError::NotALeaf(id).into());
    }
    let prompt = suggestion_prompt(&forest.doc().text, &forest.text(id));
    let reply = llm.complete(&CompletionRequest::judge(prompt)).await?;
    parse_suggestions(&reply)
}

fn parse_suggestions(reply: &str) -> Result<Suggestions, SuggestError> {
    let start = reply.find('{');
    let end = reply.rfind('}');
    let body = match (start, end) {
        (Some(s), Some(e)) if s < e => &reply[s..=e],
        _ => return Err(SuggestError::Unparseable(reply.to_string())),
    };
    let mut parsed: Suggestions =
        serde_json::from_str(body).map_err(|e| SuggestError::Unparseable(e.to_string()))?;
    for list in [&mut parsed.preserving, &mut parsed.altering] {
        list.retain(|s| !s.trim().is_empty());
        list.truncate(MAX_SUGGESTIONS);
    }
    Ok(parsed)
}
