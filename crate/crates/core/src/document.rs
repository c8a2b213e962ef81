//! Multi-sentence token layout shared by the segmenter and realizer.
//!
//! A [`Document`] flattens one or more sentence parses into a single token
//! sequence with global indices, the whitespace that follows each token and
//! character offsets into the original text.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::SentenceParse;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocToken {
    pub surface: String,
    pub deprel: String,
    /// Global index of the governor; `None` for a sentence root.
    pub head: Option<usize>,
    pub sentence: usize,
    /// Whitespace between this token and the next one in the text.
    pub trailing: String,
    /// Character (not byte) offsets into [`Document::text`].
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSentence {
    pub tokens: Range<usize>,
    /// Pinned sentences are never perturbed.
    pub pinned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub tokens: Vec<DocToken>,
    pub sentences: Vec<DocSentence>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("token {surface:?} not found at character {at} of the prototype")]
    Mismatch { surface: String, at: usize },
    #[error("prototype has unparsed text after character {at}")]
    TrailingText { at: usize },
    #[error("pinned span {start}..{end} is out of bounds")]
    PinnedOutOfBounds { start: usize, end: usize },
}

impl Document {
    pub fn from_sentence(parse: &SentenceParse) -> Self {
        Self::from_sentences(std::slice::from_ref(parse))
    }

    /// Joins sentences using their own spacing flags, with a single space
    /// between sentences.
    pub fn from_sentences(parses: &[SentenceParse]) -> Self {
        let mut text = String::new();
        let mut tokens = Vec::new();
        let mut sentences = Vec::new();
        let mut chars = 0usize;
        for (si, p) in parses.iter().enumerate() {
            let offset = tokens.len();
            for (i, t) in p.tokens.iter().enumerate() {
                let last_in_sentence = i + 1 == p.tokens.len();
                let last_overall = last_in_sentence && si + 1 == parses.len();
                let trailing = if last_overall {
                    String::new()
                } else if t.space_after || last_in_sentence {
                    " ".to_string()
                } else {
                    String::new()
                };
                let len = t.surface.chars().count();
                tokens.push(DocToken {
                    surface: t.surface.clone(),
                    deprel: t.deprel.clone(),
                    head: (t.head > 0).then(|| offset + t.head - 1),
                    sentence: si,
                    trailing: trailing.clone(),
                    char_start: chars,
                    char_end: chars + len,
                });
                text.push_str(&t.surface);
                text.push_str(&trailing);
                chars += len + trailing.chars().count();
            }
            sentences.push(DocSentence {
                tokens: offset..tokens.len(),
                pinned: false,
            });
        }
        Document {
            text,
            tokens,
            sentences,
        }
    }

    /// Aligns parsed sentences against the prototype text they came from,
    /// taking inter-token whitespace from the prototype itself. A sentence
    /// that overlaps any pinned character span is marked pinned.
    pub fn aligned(
        prototype: &str,
        parses: &[SentenceParse],
        pinned: &[(usize, usize)],
    ) -> Result<Self, AlignError> {
        let chars: Vec<char> = prototype.chars().collect();
        let total = chars.len();
        for &(s, e) in pinned {
            if s >= e || e > total {
                return Err(AlignError::PinnedOutOfBounds { start: s, end: e });
            }
        }
        let mut pos = 0usize;
        while pos < total && chars[pos].is_whitespace() {
            pos += 1;
        }
        let lead = pos;

        let mut tokens: Vec<DocToken> = Vec::new();
        let mut sentences = Vec::new();
        for (si, p) in parses.iter().enumerate() {
            let offset = tokens.len();
            for t in &p.tokens {
                let surface: Vec<char> = t.surface.chars().collect();
                if pos + surface.len() > total || chars[pos..pos + surface.len()] != surface[..] {
                    return Err(AlignError::Mismatch {
                        surface: t.surface.clone(),
                        at: pos,
                    });
                }
                let start = pos;
                pos += surface.len();
                let ws_start = pos;
                while pos < total && chars[pos].is_whitespace() {
                    pos += 1;
                }
                tokens.push(DocToken {
                    surface: t.surface.clone(),
                    deprel: t.deprel.clone(),
                    head: (t.head > 0).then(|| offset + t.head - 1),
                    sentence: si,
                    trailing: chars[ws_start..pos].iter().collect(),
                    char_start: start - lead,
                    char_end: ws_start - lead,
                });
            }
            let range = offset..tokens.len();
            let is_pinned = !range.is_empty() && {
                let s = tokens[range.start].char_start + lead;
                let e = tokens[range.end - 1].char_end + lead;
                pinned.iter().any(|&(ps, pe)| ps < e && s < pe)
            };
            sentences.push(DocSentence {
                tokens: range,
                pinned: is_pinned,
            });
        }
        if pos < total {
            return Err(AlignError::TrailingText { at: pos });
        }
        if let Some(last) = tokens.last_mut() {
            last.trailing.clear();
        }
        let text: String = tokens
            .iter()
            .flat_map(|t| [t.surface.as_str(), t.trailing.as_str()])
            .collect();
        Ok(Document {
            text,
            tokens,
            sentences,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whitespace preceding token `i` in the original text.
    pub fn gap_before(&self, i: usize) -> &str {
        if i == 0 {
            ""
        } else {
            &self.tokens[i - 1].trailing
        }
    }

    pub fn sentence_of(&self, token: usize) -> &DocSentence {
        &self.sentences[self.tokens[token].sentence]
    }

    /// Surfaces of the given tokens joined with their original spacing,
    /// collapsing gaps to a single space.
    pub fn span_text(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let mut prev: Option<usize> = None;
        for &t in tokens {
            if let Some(p) = prev {
                let ws = if t == p + 1 {
                    self.tokens[p].trailing.as_str()
                } else {
                    self.gap_before(t)
                };
                if !ws.is_empty() {
                    out.push(' ');
                }
            }
            out.push_str(&self.tokens[t].surface);
            prev = Some(t);
        }
        out
    }
}
