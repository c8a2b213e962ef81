//! Interpretable segments of a prompt.
//!
//! A sentence's dependency tree is turned into a tree of *segments*: groups
//! of tokens that can be dropped (or replaced) as a unit without breaking the
//! sentence. Coordinations are represented by a Dummy segment whose children
//! are the conjuncts.

mod suggest;
mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{validate_tree, SentenceParse};
use crate::document::Document;
use crate::rules::RemovabilityRuleTable;

pub use suggest::{
    suggest_alternatives, suggestion_prompt, SuggestError, Suggestions, MAX_SUGGESTIONS,
};
pub use tree::{build_parse_tree, simplify, ParseTree, TreeNode};

pub type SegmentId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Normal,
    Dummy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Removability {
    Removable,
    Unremovable,
}

/// User override that fixes a segment's inclusion in every counterfactual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lock {
    Included,
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub kind: SegmentKind,
    /// Global token indices owned by the segment, ascending. For a Dummy these
    /// are tokens emitted whenever the coordination is present (e.g. a
    /// sentence-final period of a coordinated main clause).
    pub tokens: Vec<usize>,
    /// Dummy only: coordinating conjunctions and separator commas, emitted
    /// only between included conjuncts.
    pub separators: Vec<usize>,
    pub parent: Option<SegmentId>,
    /// Relation to the parent segment.
    pub removability: Removability,
    pub children: Vec<SegmentId>,
    /// Replacement strings, leaf segments only.
    pub alternatives: Vec<String>,
    pub merged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock: Option<Lock>,
}

impl Segment {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn is_dummy(&self) -> bool {
        self.kind == SegmentKind::Dummy
    }

    /// Number of ways the segment can appear when included: the original
    /// text plus each alternative.
    pub fn choice_count(&self) -> usize {
        1 + self.alternatives.len()
    }

    pub fn owned_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().chain(self.separators.iter()).copied()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("segment {0} is a coordination node and cannot be merged on its own")]
    CannotMergeDummy(SegmentId),
    #[error("segment {0} is not a leaf")]
    NotALeaf(SegmentId),
    #[error("segment {0} has no merge to undo")]
    NotMerged(SegmentId),
    #[error("alternative must be non-empty text")]
    InvalidAlternative,
    #[error("the root segment cannot be locked out")]
    CannotLockRoot,
    #[error("invalid parse: {0}")]
    InvalidParse(String),
    #[error("document has no tokens")]
    EmptyDocument,
}

/// Undo information for [`SegmentForest::merge_branch`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub segment: SegmentId,
    pub prior: Segment,
    pub absorbed: Vec<Segment>,
}

/// Result of a merge. Merging a leaf is a no-op that carries a warning.
#[derive(Clone, Debug)]
pub struct Merged {
    pub forest: SegmentForest,
    pub warning: Option<String>,
}

/// The interpretable representation of a prompt: a rooted tree of segments
/// over a [`Document`]. The root is always present in every counterfactual;
/// the remaining `M` segments each contribute one inclusion bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentForest {
    pub(crate) doc: Document,
    pub(crate) segments: BTreeMap<SegmentId, Segment>,
    pub(crate) root: SegmentId,
    #[serde(default)]
    pub(crate) merge_log: Vec<MergeRecord>,
}

impl SegmentForest {
    /// Segments a single validated sentence.
    pub fn from_parse(
        parse: &SentenceParse,
        rules: &RemovabilityRuleTable,
    ) -> Result<Self, SegmentError> {
        let diags = validate_tree(parse);
        if !diags.is_empty() {
            let msg = diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(SegmentError::InvalidParse(msg));
        }
        Self::from_document(&Document::from_sentence(parse), rules)
    }

    pub fn from_document(
        doc: &Document,
        rules: &RemovabilityRuleTable,
    ) -> Result<Self, SegmentError> {
        Ok(simplify(&build_parse_tree(doc, rules)?))
    }

    pub fn doc(&self) -> &Document {
        &self.doc
    }

    pub fn root_id(&self) -> SegmentId {
        self.root
    }

    pub fn segment(&self, id: SegmentId) -> Option<&Segment> {
        self.segments.get(&id)
    }

    pub fn get(&self, id: SegmentId) -> Result<&Segment, SegmentError> {
        self.segments
            .get(&id)
            .ok_or(SegmentError::UnknownSegment(id))
    }

    /// Segments in ascending id order.
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Number of inclusion bits `M` (every segment except the root).
    pub fn dimension(&self) -> usize {
        self.segments.len() - 1
    }

    /// Ids of the segments backing the inclusion bits, ascending.
    pub fn variable_ids(&self) -> Vec<SegmentId> {
        self.segments
            .keys()
            .copied()
            .filter(|&id| id != self.root)
            .collect()
    }

    /// Every id in ascending order; the root (id 0) comes first.
    pub fn all_ids(&self) -> Vec<SegmentId> {
        self.segments.keys().copied().collect()
    }

    pub fn merge_log(&self) -> &[MergeRecord] {
        &self.merge_log
    }

    /// Display text. Dummies render as their conjunction in brackets, e.g.
    /// `[and]`.
    pub fn text(&self, id: SegmentId) -> String {
        match self.segments.get(&id) {
            None => String::new(),
            Some(s) if s.is_dummy() => {
                let cc: Vec<&str> = s
                    .separators
                    .iter()
                    .filter(|&&t| self.doc.tokens[t].deprel.eq_ignore_ascii_case("cc"))
                    .map(|&t| self.doc.tokens[t].surface.as_str())
                    .collect();
                if cc.is_empty() {
                    "[text]".to_string()
                } else {
                    format!("[{}]", cc.join(" "))
                }
            }
            Some(s) => self.doc.span_text(&s.tokens),
        }
    }

    /// All descendants of `id` (excluding `id`), pre-order.
    pub fn descendants(&self, id: SegmentId) -> Vec<SegmentId> {
        let mut out = Vec::new();
        let mut stack: Vec<SegmentId> = match self.segments.get(&id) {
            Some(s) => s.children.iter().rev().copied().collect(),
            None => return out,
        };
        while let Some(s) = stack.pop() {
            out.push(s);
            stack.extend(self.segments[&s].children.iter().rev().copied());
        }
        out
    }

    pub fn ancestors(&self, id: SegmentId) -> Vec<SegmentId> {
        let mut out = Vec::new();
        let mut cur = self.segments.get(&id).and_then(|s| s.parent);
        while let Some(p) = cur {
            out.push(p);
            cur = self.segments[&p].parent;
        }
        out
    }

    /// Parent/child pairs with the child's removability, for rendering
    /// dependency underlines.
    pub fn dependency_edges(&self) -> Vec<(SegmentId, SegmentId, Removability)> {
        self.segments
            .values()
            .filter_map(|s| s.parent.map(|p| (p, s.id, s.removability)))
            .collect()
    }

    /// Joins a Normal non-leaf segment with every segment in its branch.
    pub fn merge_branch(&self, id: SegmentId) -> Result<Merged, SegmentError> {
        let seg = self.get(id)?;
        if seg.is_dummy() {
            return Err(SegmentError::CannotMergeDummy(id));
        }
        if seg.is_leaf() {
            return Ok(Merged {
                forest: self.clone(),
                warning: Some(format!("segment {id} is a leaf; nothing to merge")),
            });
        }
        let mut next = self.clone();
        let prior = seg.clone();
        let desc = self.descendants(id);
        let mut absorbed = Vec::with_capacity(desc.len());
        let mut tokens = prior.tokens.clone();
        for d in &desc {
            let s = next.segments.remove(d).expect("descendant exists");
            tokens.extend(s.owned_tokens());
            absorbed.push(s);
        }
        tokens.sort_unstable();
        let target = next.segments.get_mut(&id).expect("segment exists");
        target.tokens = tokens;
        target.children.clear();
        target.merged = true;
        next.merge_log.push(MergeRecord {
            segment: id,
            prior,
            absorbed,
        });
        Ok(Merged {
            forest: next,
            warning: None,
        })
    }

    /// Undoes the most recent merge of `id`, restoring the exact prior
    /// segments.
    pub fn expand(&self, id: SegmentId) -> Result<SegmentForest, SegmentError> {
        if !self.segments.contains_key(&id) {
            return Err(SegmentError::UnknownSegment(id));
        }
        let pos = self
            .merge_log
            .iter()
            .rposition(|r| r.segment == id)
            .ok_or(SegmentError::NotMerged(id))?;
        let mut next = self.clone();
        let record = next.merge_log.remove(pos);
        next.segments.insert(id, record.prior);
        for s in record.absorbed {
            next.segments.insert(s.id, s);
        }
        Ok(next)
    }

    /// Sets the replacement options of a leaf segment. An empty list clears
    /// them.
    pub fn configure_alternatives(
        &self,
        id: SegmentId,
        options: &[String],
    ) -> Result<SegmentForest, SegmentError> {
        let seg = self.get(id)?;
        if !seg.is_leaf() || seg.is_dummy() {
            return Err(SegmentError::NotALeaf(id));
        }
        if options.iter().any(|o| o.trim().is_empty()) {
            return Err(SegmentError::InvalidAlternative);
        }
        let mut next = self.clone();
        next.segments
            .get_mut(&id)
            .expect("segment exists")
            .alternatives = options.iter().map(|o| o.trim().to_string()).collect();
        Ok(next)
    }

    /// Forces a segment in or out of every counterfactual (`None` clears).
    pub fn set_lock(
        &self,
        id: SegmentId,
        lock: Option<Lock>,
    ) -> Result<SegmentForest, SegmentError> {
        self.get(id)?;
        if id == self.root && lock == Some(Lock::Excluded) {
            return Err(SegmentError::CannotLockRoot);
        }
        let mut next = self.clone();
        next.segments.get_mut(&id).expect("segment exists").lock = lock;
        Ok(next)
    }

    /// Structural invariant check; returns human-readable violations.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut seen = vec![0usize; self.doc.tokens.len()];
        for s in self.segments.values() {
            for t in s.owned_tokens() {
                if t < seen.len() {
                    seen[t] += 1;
                } else {
                    errs.push(format!("segment {} owns unknown token {t}", s.id));
                }
            }
            if s.is_dummy() {
                if s.children.len() < 2 {
                    errs.push(format!("dummy {} has {} children", s.id, s.children.len()));
                }
                for c in &s.children {
                    if self.segments[c].removability != Removability::Removable {
                        errs.push(format!("dummy {} has unremovable child {c}", s.id));
                    }
                }
            } else if s.id != self.root && s.removability == Removability::Unremovable {
                errs.push(format!(
                    "normal segment {} is unremovable w.r.t. its parent",
                    s.id
                ));
            }
            if s.id != self.root && s.parent.is_none() {
                errs.push(format!("segment {} has no parent", s.id));
            }
            for c in &s.children {
                match self.segments.get(c) {
                    Some(child) if child.parent == Some(s.id) => {}
                    _ => errs.push(format!("segment {} lists bad child {c}", s.id)),
                }
            }
            if !s.alternatives.is_empty() && !s.is_leaf() {
                errs.push(format!("non-leaf {} has alternatives", s.id));
            }
        }
        for (t, &count) in seen.iter().enumerate() {
            if count != 1 {
                errs.push(format!("token {t} owned by {count} segments"));
            }
        }
        let reachable = 1 + self.descendants(self.root).len();
        if reachable != self.segments.len() {
            errs.push(format!(
                "{} of {} segments reachable from root",
                reachable,
                self.segments.len()
            ));
        }
        errs
    }

    /// Indented outline of the segment tree.
    pub fn outline(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let s = &self.segments[&id];
            let mut tags = Vec::new();
            if id != self.root && s.removability == Removability::Unremovable {
                tags.push("required".to_string());
            }
            if s.merged {
                tags.push("merged".to_string());
            }
            if let Some(l) = s.lock {
                tags.push(format!("locked {l:?}").to_lowercase());
            }
            if !s.alternatives.is_empty() {
                tags.push(format!("alternatives: {}", s.alternatives.join(" | ")));
            }
            let suffix = if tags.is_empty() {
                String::new()
            } else {
                format!("  ({})", tags.join(", "))
            };
            out.push_str(&format!(
                "{}{}: {}{}\n",
                "  ".repeat(depth),
                id,
                self.text(id),
                suffix
            ));
            for c in s.children.iter().rev() {
                stack.push((*c, depth + 1));
            }
        }
        out
    }
}
