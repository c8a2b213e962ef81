use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{inclusion_map, validate_vector, Counterfactual, CounterfactualVector, EngineError};
use crate::document::Document;
use crate::segment::{SegmentForest, SegmentId};

#[derive(Clone, Debug)]
struct Piece {
    /// Sort key: `2 * pos + 1` for text at token `pos`; a borrowed
    /// conjunction placed before token `pos` gets `2 * pos`.
    key: usize,
    first: usize,
    last: usize,
    text: String,
    punct: bool,
    comma: bool,
}

impl Piece {
    fn token(doc: &Document, t: usize) -> Self {
        let tok = &doc.tokens[t];
        Piece {
            key: 2 * t + 1,
            first: t,
            last: t,
            text: tok.surface.clone(),
            punct: tok.deprel.eq_ignore_ascii_case("punct")
                || tok.surface.chars().all(|c| c.is_ascii_punctuation()),
            comma: tok.surface == ",",
        }
    }
}

struct Realizer<'a> {
    forest: &'a SegmentForest,
    doc: &'a Document,
    included: BTreeMap<SegmentId, bool>,
    choice: BTreeMap<SegmentId, u32>,
    pieces: Vec<Piece>,
}

impl<'a> Realizer<'a> {
    /// Emits the subtree of an included segment and returns the emitted
    /// token span.
    fn emit(&mut self, id: SegmentId) -> Option<(usize, usize)> {
        let seg = self.forest.segment(id).expect("segment exists");
        let mut span: Option<(usize, usize)> = None;
        let widen = |span: &mut Option<(usize, usize)>, lo: usize, hi: usize| {
            *span = Some(match *span {
                None => (lo, hi),
                Some((a, b)) => (a.min(lo), b.max(hi)),
            });
        };
        let choice = self.choice[&id];
        if choice > 0 && !seg.tokens.is_empty() {
            let first = seg.tokens[0];
            let last = *seg.tokens.last().expect("non-empty");
            self.pieces.push(Piece {
                key: 2 * first + 1,
                first,
                last,
                text: seg.alternatives[choice as usize - 1].clone(),
                punct: false,
                comma: false,
            });
            widen(&mut span, first, last);
        } else {
            for &t in &seg.tokens {
                self.pieces.push(Piece::token(self.doc, t));
                widen(&mut span, t, t);
            }
        }
        let mut kids: Vec<(SegmentId, (usize, usize))> = Vec::new();
        for &c in &seg.children {
            if self.included[&c] {
                if let Some(s) = self.emit(c) {
                    kids.push((c, s));
                    widen(&mut span, s.0, s.1);
                }
            }
        }
        if seg.is_dummy() {
            self.emit_separators(id, &mut kids);
        }
        span
    }

    fn emit_separators(&mut self, id: SegmentId, kids: &mut [(SegmentId, (usize, usize))]) {
        let seg = self.forest.segment(id).expect("segment exists");
        if seg.separators.is_empty() || kids.len() < 2 {
            return;
        }
        kids.sort_by_key(|(_, s)| s.0);
        let is_cc = |t: usize| self.doc.tokens[t].deprel.eq_ignore_ascii_case("cc");
        let is_comma = |t: usize| self.doc.tokens[t].surface == ",";
        let all = kids.len() == seg.children.len();
        let k = kids.len();
        let last_cc = seg.separators.iter().copied().filter(|&t| is_cc(t)).max();
        let first_comma = seg.separators.iter().copied().find(|&t| is_comma(t));
        if all {
            // Every conjunct survives: keep every separator as written.
            let seps: Vec<Piece> = seg
                .separators
                .iter()
                .map(|&t| Piece::token(self.doc, t))
                .collect();
            self.pieces.extend(seps);
            return;
        }
        let mut emitted: Vec<Piece> = Vec::new();
        for g in 0..k - 1 {
            let lo = kids[g].1 .1;
            let hi = kids[g + 1].1 .0;
            let in_gap: Vec<usize> = seg
                .separators
                .iter()
                .copied()
                .filter(|&t| t > lo && t < hi)
                .collect();
            let borrow = |t: usize| {
                let mut p = Piece::token(self.doc, t);
                p.key = 2 * hi;
                p
            };
            if g == k - 2 {
                let ccs: Vec<usize> = in_gap.iter().copied().filter(|&t| is_cc(t)).collect();
                if !ccs.is_empty() {
                    for &t in &in_gap {
                        if is_cc(t) || (k >= 3 && is_comma(t)) {
                            emitted.push(Piece::token(self.doc, t));
                        }
                    }
                } else if let Some(cc) = last_cc {
                    emitted.push(borrow(cc));
                } else {
                    emitted.extend(in_gap.iter().map(|&t| Piece::token(self.doc, t)));
                }
            } else if let Some(&t) = in_gap.iter().find(|&&t| is_comma(t)) {
                emitted.push(Piece::token(self.doc, t));
            } else if let Some(&t) = in_gap.iter().find(|&&t| is_cc(t)) {
                emitted.push(Piece::token(self.doc, t));
            } else if let Some(t) = first_comma {
                emitted.push(borrow(t));
            }
        }
        self.pieces.extend(emitted);
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Drops commas left dangling at the start of a sentence, before other
/// punctuation or at the end.
fn repair_commas(pieces: &mut Vec<Piece>) {
    loop {
        let n = pieces.len();
        let drop =
            (0..n).find(|&i| pieces[i].comma && (i == 0 || i + 1 == n || pieces[i + 1].punct));
        match drop {
            Some(i) => {
                pieces.remove(i);
            }
            None => break,
        }
    }
}

/// Re-picks "a"/"an" when the word after the article is no longer the
/// original neighbor. Spelling-based: only the first letter is checked.
fn repair_articles(doc: &Document, pieces: &mut [Piece]) {
    for i in 0..pieces.len().saturating_sub(1) {
        let lower = pieces[i].text.to_ascii_lowercase();
        if lower != "a" && lower != "an" {
            continue;
        }
        let next = &pieces[i + 1];
        let original_next = doc
            .tokens
            .get(pieces[i].last + 1)
            .map(|t| t.surface.as_str());
        let next_word = next.text.split_whitespace().next().unwrap_or("");
        if next.punct || Some(next_word) == original_next {
            continue;
        }
        let vowel = next_word
            .chars()
            .next()
            .is_some_and(|c| "aeiouAEIOU".contains(c));
        let word = if vowel { "an" } else { "a" };
        pieces[i].text = if pieces[i].text.starts_with('A') {
            capitalize(word)
        } else {
            word.to_string()
        };
    }
}

fn assemble(forest: &SegmentForest, pieces: Vec<Piece>) -> String {
    let doc = forest.doc();
    let mut by_sentence: BTreeMap<usize, Vec<Piece>> = BTreeMap::new();
    for p in pieces {
        by_sentence
            .entry(doc.tokens[p.first].sentence)
            .or_default()
            .push(p);
    }
    let mut ordered: Vec<Piece> = Vec::new();
    for (s, mut ps) in by_sentence {
        ps.sort_by_key(|p| p.key);
        let sent = &doc.sentences[s];
        if !sent.pinned {
            repair_commas(&mut ps);
            repair_articles(doc, &mut ps);
            let head = sent.tokens.start;
            if let Some(first) = ps.first_mut() {
                let original_upper = doc.tokens[head]
                    .surface
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_uppercase());
                if first.first != head && original_upper {
                    first.text = capitalize(&first.text);
                }
            }
        }
        ordered.extend(ps);
    }
    let mut out = String::new();
    let mut prev: Option<&Piece> = None;
    for p in &ordered {
        if let Some(q) = prev {
            let ws = if p.first == q.last + 1 {
                doc.tokens[q.last].trailing.as_str()
            } else {
                doc.gap_before(p.first)
            };
            out.push_str(ws);
        }
        out.push_str(&p.text);
        prev = Some(p);
    }
    collapse_spaces(&out)
}

fn collapse_spaces(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_space = false;
    for c in s.chars() {
        if c == ' ' {
            if !last_space {
                out.push(c);
            }
            last_space = true;
        } else {
            out.push(c);
            last_space = false;
        }
    }
    out.trim().to_string()
}

/// Realizes a valid vector: included segments in original surface order
/// with original spacing, replacements inserted verbatim.
pub fn realize_text(
    forest: &SegmentForest,
    v: &CounterfactualVector,
) -> Result<Counterfactual, EngineError> {
    validate_vector(forest, v).map_err(EngineError::InvalidVector)?;
    let included = inclusion_map(forest, v);
    let choice = forest
        .all_ids()
        .into_iter()
        .zip(v.choices.iter().copied())
        .collect();
    let mut r = Realizer {
        forest,
        doc: forest.doc(),
        included,
        choice,
        pieces: Vec::new(),
    };
    r.emit(forest.root_id());
    let text = assemble(forest, r.pieces);
    Ok(Counterfactual {
        id: 0,
        word_count: text.split_whitespace().count(),
        vector: v.clone(),
        text,
    })
}

/// Realizes vectors in parallel; ids follow input order.
pub fn realize_batch(
    forest: &SegmentForest,
    vs: &[CounterfactualVector],
) -> Result<Vec<Counterfactual>, EngineError> {
    vs.par_iter()
        .enumerate()
        .map(|(i, v)| {
            realize_text(forest, v).map(|mut cf| {
                cf.id = i;
                cf
            })
        })
        .collect()
}
