//! CoNLL-U ingestion and dependency-tree validation.
//!
//! Only the columns the segmenter needs are interpreted (ID, FORM, HEAD,
//! DEPREL and the `SpaceAfter=No` MISC flag). LEMMA and UPOS are kept so a
//! parse can be written back out unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One surface token of a sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 1-based position in the sentence.
    pub index: usize,
    pub surface: String,
    /// Index of the governor, `0` for the root.
    pub head: usize,
    pub deprel: String,
    pub space_after: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upos: Option<String>,
}

impl Token {
    pub fn new(index: usize, surface: &str, head: usize, deprel: &str) -> Self {
        Token {
            index,
            surface: surface.to_string(),
            head,
            deprel: deprel.to_string(),
            space_after: true,
            lemma: None,
            upos: None,
        }
    }

    pub fn no_space(mut self) -> Self {
        self.space_after = false;
        self
    }
}

/// A dependency-parsed sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceParse {
    pub sent_id: Option<String>,
    pub tokens: Vec<Token>,
    pub original_text: String,
}

impl SentenceParse {
    /// Builds a parse from tokens, reconstructing the sentence text from the
    /// surfaces and spacing flags. No tree validation is performed.
    pub fn new(tokens: Vec<Token>) -> Self {
        let original_text = realize_tokens(&tokens);
        SentenceParse {
            sent_id: None,
            tokens,
            original_text,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token with the given 1-based index.
    pub fn token(&self, index: usize) -> Option<&Token> {
        index.checked_sub(1).and_then(|i| self.tokens.get(i))
    }

    pub fn root(&self) -> Option<&Token> {
        self.tokens.iter().find(|t| t.head == 0)
    }

    /// Text obtained by emitting every token with its original spacing.
    pub fn realize(&self) -> String {
        realize_tokens(&self.tokens)
    }

    /// Dependents of the token at `head` (1-based; 0 for the virtual root).
    pub fn dependents(&self, head: usize) -> impl Iterator<Item = &Token> {
        self.tokens.iter().filter(move |t| t.head == head)
    }
}

fn realize_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        out.push_str(&t.surface);
        if t.space_after && i + 1 < tokens.len() {
            out.push(' ');
        }
    }
    out
}

/// A violation of the single-rooted-tree property.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Diagnostic {
    NoRoot,
    MultipleRoots { roots: Vec<usize> },
    DanglingHead { token: usize, head: usize },
    SelfLoop { token: usize },
    CycleDetected { tokens: Vec<usize> },
    Unreachable { token: usize },
    NonContiguousIds { expected: usize, found: usize },
    EmptySurface { token: usize },
}

impl Diagnostic {
    pub fn code(&self) -> &'static str {
        match self {
            Diagnostic::NoRoot => "NoRoot",
            Diagnostic::MultipleRoots { .. } => "MultipleRoots",
            Diagnostic::DanglingHead { .. } => "DanglingHead",
            Diagnostic::SelfLoop { .. } => "SelfLoop",
            Diagnostic::CycleDetected { .. } => "CycleDetected",
            Diagnostic::Unreachable { .. } => "Unreachable",
            Diagnostic::NonContiguousIds { .. } => "NonContiguousIds",
            Diagnostic::EmptySurface { .. } => "EmptySurface",
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoRoot => write!(f, "no token has head 0"),
            Diagnostic::MultipleRoots { roots } => write!(f, "multiple roots: {roots:?}"),
            Diagnostic::DanglingHead { token, head } => {
                write!(f, "token {token} points at missing head {head}")
            }
            Diagnostic::SelfLoop { token } => write!(f, "token {token} is its own head"),
            Diagnostic::CycleDetected { tokens } => write!(f, "head cycle through {tokens:?}"),
            Diagnostic::Unreachable { token } => {
                write!(f, "token {token} is not reachable from the root")
            }
            Diagnostic::NonContiguousIds { expected, found } => {
                write!(f, "expected token id {expected}, found {found}")
            }
            Diagnostic::EmptySurface { token } => write!(f, "token {token} has an empty form"),
        }
    }
}

/// Checks that the head links of `parse` form a single rooted tree over
/// contiguous indices. Returns every violation found; an empty list means the
/// parse is well formed.
pub fn validate_tree(parse: &SentenceParse) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let n = parse.tokens.len();

    for (i, t) in parse.tokens.iter().enumerate() {
        if t.index != i + 1 {
            diags.push(Diagnostic::NonContiguousIds {
                expected: i + 1,
                found: t.index,
            });
            // Positions are meaningless past this point.
            return diags;
        }
        if t.surface.is_empty() {
            diags.push(Diagnostic::EmptySurface { token: t.index });
        }
    }

    let roots: Vec<usize> = parse
        .tokens
        .iter()
        .filter(|t| t.head == 0)
        .map(|t| t.index)
        .collect();
    match roots.len() {
        0 => diags.push(Diagnostic::NoRoot),
        1 => {}
        _ => diags.push(Diagnostic::MultipleRoots {
            roots: roots.clone(),
        }),
    }

    for t in &parse.tokens {
        if t.head > n {
            diags.push(Diagnostic::DanglingHead {
                token: t.index,
                head: t.head,
            });
        } else if t.head == t.index {
            diags.push(Diagnostic::SelfLoop { token: t.index });
        }
    }

    // Walk head chains; 0 = unvisited, 1 = on the current path, 2 = done.
    let mut state = vec![0u8; n + 1];
    let mut reported_cycle = vec![false; n + 1];
    for start in 1..=n {
        if state[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            if cur == 0 || cur > n {
                break;
            }
            match state[cur] {
                2 => break,
                1 => {
                    let pos = path.iter().position(|&p| p == cur).unwrap_or(0);
                    let mut cycle: Vec<usize> = path[pos..].to_vec();
                    if cycle.len() > 1 && !cycle.iter().any(|&c| reported_cycle[c]) {
                        for &c in &cycle {
                            reported_cycle[c] = true;
                        }
                        cycle.sort_unstable();
                        diags.push(Diagnostic::CycleDetected { tokens: cycle });
                    }
                    break;
                }
                _ => {
                    state[cur] = 1;
                    path.push(cur);
                    let head = parse.tokens[cur - 1].head;
                    if head == cur {
                        break;
                    }
                    cur = head;
                }
            }
        }
        for p in path {
            state[p] = 2;
        }
    }

    if roots.len() == 1 {
        let root = roots[0];
        let mut reachable = vec![false; n + 1];
        reachable[root] = true;
        let mut stack = vec![root];
        while let Some(h) = stack.pop() {
            for t in parse.dependents(h) {
                if !reachable[t.index] {
                    reachable[t.index] = true;
                    stack.push(t.index);
                }
            }
        }
        for i in 1..=n {
            let in_cycle = reported_cycle[i];
            let dangling = parse.tokens[i - 1].head > n;
            if !reachable[i] && !in_cycle && !dangling {
                diags.push(Diagnostic::Unreachable { token: i });
            }
        }
    }

    diags
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("expected 10 tab-separated columns, found {found}")]
    MalformedLine { found: usize },
    #[error("token ids are not contiguous: expected {expected}, found {found}")]
    NonContiguousIds { expected: usize, found: usize },
    #[error("invalid {column} value {value:?}")]
    InvalidField { column: &'static str, value: String },
    #[error("head links form a cycle through tokens {tokens:?}")]
    CycleDetected { tokens: Vec<usize> },
    #[error("not a tree: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTree(Vec<Diagnostic>),
}

/// A per-sentence ingestion failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sentence {sentence} (line {line}): {kind}")]
pub struct ParseError {
    /// 0-based index of the sentence block in the document.
    pub sentence: usize,
    /// 1-based line number where the problem was detected.
    pub line: usize,
    pub kind: ParseErrorKind,
}

/// Parses a CoNLL-U document. Each blank-line-separated block yields either a
/// validated [`SentenceParse`] or the error that rejected it; one bad block
/// never aborts the rest of the batch.
pub fn parse_conllu(doc: &str) -> Vec<Result<SentenceParse, ParseError>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (lineno, line) in doc.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            if !block.is_empty() {
                out.push(parse_block(out.len(), &block));
                block.clear();
            }
        } else {
            block.push((lineno + 1, line));
        }
    }
    if !block.is_empty() {
        out.push(parse_block(out.len(), &block));
    }
    out
}

/// Like [`parse_conllu`] but fails on the first bad sentence.
pub fn parse_conllu_strict(doc: &str) -> Result<Vec<SentenceParse>, ParseError> {
    parse_conllu(doc).into_iter().collect()
}

fn parse_block(sentence: usize, lines: &[(usize, &str)]) -> Result<SentenceParse, ParseError> {
    let err = |line: usize, kind| ParseError {
        sentence,
        line,
        kind,
    };
    let mut sent_id = None;
    let mut tokens = Vec::new();
    let first_line = lines.first().map(|l| l.0).unwrap_or(0);

    for &(lineno, line) in lines {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("sent_id") {
                let id = id.trim_start().trim_start_matches('=').trim();
                sent_id = Some(id.to_string());
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(err(
                lineno,
                ParseErrorKind::MalformedLine { found: cols.len() },
            ));
        }
        // Multiword-token ranges ("3-4") and empty nodes ("5.1") are skipped.
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let index: usize = cols[0].parse().map_err(|_| {
            err(
                lineno,
                ParseErrorKind::InvalidField {
                    column: "ID",
                    value: cols[0].to_string(),
                },
            )
        })?;
        let expected = tokens.len() + 1;
        if index != expected {
            return Err(err(
                lineno,
                ParseErrorKind::NonContiguousIds {
                    expected,
                    found: index,
                },
            ));
        }
        let head: usize = cols[6].parse().map_err(|_| {
            err(
                lineno,
                ParseErrorKind::InvalidField {
                    column: "HEAD",
                    value: cols[6].to_string(),
                },
            )
        })?;
        let space_after = !cols[9].split('|').any(|kv| kv == "SpaceAfter=No");
        let opt = |s: &str| (s != "_").then(|| s.to_string());
        tokens.push(Token {
            index,
            surface: cols[1].to_string(),
            head,
            deprel: cols[7].to_string(),
            space_after,
            lemma: opt(cols[2]),
            upos: opt(cols[3]),
        });
    }

    let mut parse = SentenceParse::new(tokens);
    parse.sent_id = sent_id;
    let diags = validate_tree(&parse);
    if let Some(Diagnostic::CycleDetected { tokens }) = diags
        .iter()
        .find(|d| matches!(d, Diagnostic::CycleDetected { .. }))
    {
        return Err(err(
            first_line,
            ParseErrorKind::CycleDetected {
                tokens: tokens.clone(),
            },
        ));
    }
    if !diags.is_empty() {
        return Err(err(first_line, ParseErrorKind::InvalidTree(diags)));
    }
    Ok(parse)
}

/// Serializes parses back to CoNLL-U. Columns that are not tracked are
/// written as `_`.
pub fn to_conllu(parses: &[SentenceParse]) -> String {
    let mut out = String::new();
    for p in parses {
        if let Some(id) = &p.sent_id {
            out.push_str(&format!("# sent_id = {id}\n"));
        }
        out.push_str(&format!("# text = {}\n", p.original_text));
        for t in &p.tokens {
            let misc = if t.space_after { "_" } else { "SpaceAfter=No" };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t{}\n",
                t.index,
                t.surface,
                t.lemma.as_deref().unwrap_or("_"),
                t.upos.as_deref().unwrap_or("_"),
                t.head,
                t.deprel,
                misc
            ));
        }
        out.push('\n');
    }
    out
}
