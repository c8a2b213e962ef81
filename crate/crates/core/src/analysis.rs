//! Group-by, filtering, distribution statistics and text annotations over a
//! run's counterfactuals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{count_valid_with, Constraints, ValidCount};
use crate::segment::{Lock, SegmentForest, SegmentId};

/// Payload schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnalysisError {
    #[error("unknown or non-variable segment {0}")]
    UnknownSegment(SegmentId),
    #[error("segment {0} selected twice")]
    DuplicateSelection(SegmentId),
    #[error("no values to summarize")]
    EmptyInput,
    #[error("row {row} has {got} bits, expected {expected}")]
    DimensionMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentState {
    Excluded,
    Included,
    Varies,
}

impl From<Lock> for SegmentState {
    fn from(l: Lock) -> Self {
        match l {
            Lock::Included => SegmentState::Included,
            Lock::Excluded => SegmentState::Excluded,
        }
    }
}

/// One counterfactual as seen by the analytics: bits plus the outcome under
/// the currently bound evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub cf_id: usize,
    pub bits: Vec<bool>,
    pub outcome: Option<f64>,
    pub word_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKey {
    pub selected: Vec<SegmentId>,
    pub pattern: Vec<SegmentState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    /// Indices into the summarized values.
    pub outliers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluencedSegment {
    pub id: SegmentId,
    pub state: SegmentState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub char_start: usize,
    pub char_end: usize,
    pub segment: SegmentId,
    pub state: SegmentState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub member_cf_ids: Vec<usize>,
    pub outcome_stats: Option<BoxStats>,
    pub outlier_ids: Vec<usize>,
    pub influenced_segments: Vec<InfluencedSegment>,
    pub annotation: Vec<AnnotationSpan>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Tukey box: interpolated quartiles, whiskers at the most extreme values
/// within 1.5 IQR of the box.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxStats, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|v| *v >= lo_fence && *v <= hi_fence)
        .collect();
    Ok(BoxStats {
        min: sorted[0],
        q1,
        median,
        q3,
        max: sorted[sorted.len() - 1],
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < lo_fence || **v > hi_fence)
            .map(|(i, _)| i)
            .collect(),
    })
}

fn check_selection(
    forest: &SegmentForest,
    selection: &[SegmentId],
) -> Result<Vec<usize>, AnalysisError> {
    let vars = forest.variable_ids();
    let mut seen = BTreeSet::new();
    selection
        .iter()
        .map(|id| {
            if !seen.insert(*id) {
                return Err(AnalysisError::DuplicateSelection(*id));
            }
            vars.iter()
                .position(|v| v == id)
                .ok_or(AnalysisError::UnknownSegment(*id))
        })
        .collect()
}

/// Non-selected variable segments whose state is fixed once the selected
/// segments take `pattern`.
pub fn influenced_segments(forest: &SegmentForest, key: &GroupKey) -> Vec<InfluencedSegment> {
    let mut base = Constraints::new();
    for (id, st) in key.selected.iter().zip(&key.pattern) {
        match st {
            SegmentState::Included => base.insert(*id, Lock::Included),
            SegmentState::Excluded => base.insert(*id, Lock::Excluded),
            SegmentState::Varies => None,
        };
    }
    let zero = |c: &Constraints| {
        count_valid_with(forest, c)
            .map(|n| n == ValidCount::Exact(0))
            .unwrap_or(true)
    };
    let mut out = Vec::new();
    for id in forest.variable_ids() {
        if key.selected.contains(&id) {
            continue;
        }
        let mut with_in = base.clone();
        with_in.insert(id, Lock::Included);
        let mut with_out = base.clone();
        with_out.insert(id, Lock::Excluded);
        match (zero(&with_in), zero(&with_out)) {
            (true, false) => out.push(InfluencedSegment {
                id,
                state: SegmentState::Excluded,
            }),
            (false, true) => out.push(InfluencedSegment {
                id,
                state: SegmentState::Included,
            }),
            _ => {}
        }
    }
    out
}

/// Partitions rows by the inclusion pattern of `selection`. Groups come out
/// ordered by pattern with Excluded before Included.
pub fn group_by(
    forest: &SegmentForest,
    rows: &[RunRow],
    selection: &[SegmentId],
) -> Result<Vec<GroupSummary>, AnalysisError> {
    let cols = check_selection(forest, selection)?;
    let m = forest.dimension();
    let mut groups: BTreeMap<Vec<bool>, Vec<&RunRow>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.bits.len() != m {
            return Err(AnalysisError::DimensionMismatch {
                row: i,
                got: r.bits.len(),
                expected: m,
            });
        }
        groups
            .entry(cols.iter().map(|&c| r.bits[c]).collect())
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(pat, members)| {
            let key = GroupKey {
                selected: selection.to_vec(),
                pattern: pat
                    .iter()
                    .map(|&b| {
                        if b {
                            SegmentState::Included
                        } else {
                            SegmentState::Excluded
                        }
                    })
                    .collect(),
            };
            let scored: Vec<(usize, f64)> = members
                .iter()
                .filter_map(|r| r.outcome.map(|o| (r.cf_id, o)))
                .collect();
            let values: Vec<f64> = scored.iter().map(|(_, o)| *o).collect();
            let outcome_stats = boxplot_stats(&values).ok();
            let outlier_ids = outcome_stats
                .as_ref()
                .map(|s| s.outliers.iter().map(|&i| scored[i].0).collect())
                .unwrap_or_default();
            let influenced = influenced_segments(forest, &key);
            let annotation = annotate_text(forest, &key, &influenced);
            GroupSummary {
                member_cf_ids: members.iter().map(|r| r.cf_id).collect(),
                outcome_stats,
                outlier_ids,
                influenced_segments: influenced,
                annotation,
                key,
            }
        })
        .collect())
}

/// Character spans over the prototype marking each segment's state within a
/// group. Adjacent tokens of the same segment share one span.
pub fn annotate_text(
    forest: &SegmentForest,
    key: &GroupKey,
    influenced: &[InfluencedSegment],
) -> Vec<AnnotationSpan> {
    let doc = forest.doc();
    let mut state_of: BTreeMap<SegmentId, SegmentState> = BTreeMap::new();
    state_of.insert(forest.root_id(), SegmentState::Included);
    for (id, st) in key.selected.iter().zip(&key.pattern) {
        state_of.insert(*id, *st);
    }
    for inf in influenced {
        state_of.insert(inf.id, inf.state);
    }
    let mut owner = vec![forest.root_id(); doc.tokens.len()];
    for s in forest.segments() {
        for t in s.owned_tokens() {
            owner[t] = s.id;
        }
    }
    let mut spans: Vec<AnnotationSpan> = Vec::new();
    for (t, tok) in doc.tokens.iter().enumerate() {
        let seg = owner[t];
        let state = state_of.get(&seg).copied().unwrap_or(SegmentState::Varies);
        match spans.last_mut() {
            Some(last) if t > 0 && owner[t - 1] == seg => last.char_end = tok.char_end,
            _ => spans.push(AnnotationSpan {
                char_start: tok.char_start,
                char_end: tok.char_end,
                segment: seg,
                state,
            }),
        }
    }
    spans
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRange {
    pub lo: f64,
    pub hi: f64,
    /// Whether `hi` itself is inside the range.
    #[serde(default)]
    pub hi_inclusive: bool,
}

impl OutcomeRange {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && (v < self.hi || (self.hi_inclusive && v == self.hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    Outcome,
    WordCount,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortDir {
    #[default]
    Asc,
    Desc,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub outcome_range: Option<OutcomeRange>,
    /// Inclusive word-count bounds.
    pub word_count_range: Option<(usize, usize)>,
    /// `(segment, state)` pairs every row must match.
    pub required_patterns: Vec<(SegmentId, SegmentState)>,
    pub evaluator: Option<String>,
    pub sort_key: Option<SortKey>,
    pub dir: SortDir,
}

/// Stable filter then stable sort. Rows without an outcome sort last.
pub fn filter_sort(
    forest: &SegmentForest,
    rows: &[RunRow],
    spec: &FilterSpec,
) -> Result<Vec<RunRow>, AnalysisError> {
    let vars = forest.variable_ids();
    let required: Vec<(usize, SegmentState)> = spec
        .required_patterns
        .iter()
        .map(|(id, st)| {
            vars.iter()
                .position(|v| v == id)
                .map(|c| (c, *st))
                .ok_or(AnalysisError::UnknownSegment(*id))
        })
        .collect::<Result<_, _>>()?;
    let mut out: Vec<RunRow> = rows
        .iter()
        .filter(|r| match (&spec.outcome_range, r.outcome) {
            (Some(range), Some(o)) => range.contains(o),
            (Some(_), None) => false,
            (None, _) => true,
        })
        .filter(|r| {
            spec.word_count_range
                .is_none_or(|(lo, hi)| r.word_count >= lo && r.word_count <= hi)
        })
        .filter(|r| {
            required.iter().all(|(c, st)| match st {
                SegmentState::Included => r.bits.get(*c) == Some(&true),
                SegmentState::Excluded => r.bits.get(*c) == Some(&false),
                SegmentState::Varies => true,
            })
        })
        .cloned()
        .collect();
    if let Some(key) = spec.sort_key {
        out.sort_by(|a, b| {
            let ord = match key {
                SortKey::WordCount => a.word_count.cmp(&b.word_count),
                SortKey::Outcome => match (a.outcome, b.outcome) {
                    (Some(x), Some(y)) => x.total_cmp(&y),
                    (Some(_), None) => return std::cmp::Ordering::Less,
                    (None, Some(_)) => return std::cmp::Ordering::Greater,
                    (None, None) => std::cmp::Ordering::Equal,
                },
            };
            match spec.dir {
                SortDir::Asc => ord,
                SortDir::Desc => ord.reverse(),
            }
        });
    }
    Ok(out)
}

/// Word-count histogram with unit-width bins, as `(word_count, rows)`.
pub fn word_count_histogram(rows: &[RunRow]) -> Vec<(usize, usize)> {
    let mut h: BTreeMap<usize, usize> = BTreeMap::new();
    for r in rows {
        *h.entry(r.word_count).or_default() += 1;
    }
    h.into_iter().collect()
}

/// How many rows include each variable segment.
pub fn occurrence(rows: &[RunRow], m: usize) -> Vec<usize> {
    let mut counts = vec![0; m];
    for r in rows {
        for (c, &b) in r.bits.iter().enumerate().take(m) {
            counts[c] += b as usize;
        }
    }
    counts
}
