//! Valid counterfactual vectors: counting, enumeration, uniform sampling and
//! realization as text.
//!
//! A vector holds one inclusion bit per non-root segment (ascending id) and a
//! replacement choice per segment (0 = original text). A vector is valid when
//!
//! * an included segment's parent is included (the root always is),
//! * an included segment keeps every child that is unremovable w.r.t. it,
//! * an included Dummy keeps at least one child,
//! * locks and caller-supplied constraints are respected.

mod count;
mod realize;
mod sample;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{Lock, Removability, SegmentForest, SegmentId};

pub use count::{
    count_valid, count_valid_with, enumerate_valid, enumerate_valid_with, CountTable, ValidCount,
};
pub use realize::{realize_batch, realize_text};
pub use sample::{sample_valid, sample_valid_with, VectorSampler};

/// Default ceiling for full enumeration.
pub const DEFAULT_CAP: usize = 4096;
/// Default sample size when the valid set exceeds the cap.
pub const DEFAULT_SAMPLE: usize = 512;

/// Extra per-segment requirements layered over the forest's own locks.
pub type Constraints = BTreeMap<SegmentId, Lock>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CounterfactualVector {
    /// Inclusion bit per variable segment, ascending segment id.
    pub bits: Vec<bool>,
    /// Replacement index per segment (ascending id, root first); 0 keeps the
    /// original text and excluded segments always carry 0.
    pub choices: Vec<u32>,
}

impl CounterfactualVector {
    /// Root-only vector with no replacements.
    pub fn empty(m: usize, segments: usize) -> Self {
        CounterfactualVector {
            bits: vec![false; m],
            choices: vec![0; segments],
        }
    }

    pub fn bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn included_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub id: usize,
    pub vector: CounterfactualVector,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("{count} valid counterfactuals exceed the enumeration cap of {cap}")]
    CapExceeded { count: ValidCount, cap: usize },
    #[error("invalid vector: {0}")]
    InvalidVector(Violation),
    #[error("no valid counterfactual satisfies the constraints")]
    Infeasible,
    #[error("unknown segment {0} in constraints")]
    UnknownSegment(SegmentId),
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    #[error("expected {expected} bits, got {got}")]
    BitLength { expected: usize, got: usize },
    #[error("expected {expected} choices, got {got}")]
    ChoiceLength { expected: usize, got: usize },
    #[error("segment {child} is included but its parent {parent} is not")]
    OrphanIncluded { child: SegmentId, parent: SegmentId },
    #[error("segment {child} is unremovable but dropped while {parent} is kept")]
    UnremovableDropped { child: SegmentId, parent: SegmentId },
    #[error("dummy segment {0} is included without any child")]
    EmptyDummy(SegmentId),
    #[error("segment {0} violates its lock")]
    LockViolated(SegmentId),
    #[error("segment {segment} has choice {choice} out of range")]
    BadChoice { segment: SegmentId, choice: u32 },
}

/// Lock in force for a segment: a constraint wins over the segment's own
/// lock only when they agree; conflicting requirements make the segment
/// both required and forbidden.
pub(crate) fn effective(
    forest: &SegmentForest,
    constraints: &Constraints,
    id: SegmentId,
) -> (bool, bool) {
    let seg = forest.segment(id).expect("segment exists");
    let mut must_in = false;
    let mut must_out = false;
    for l in [seg.lock, constraints.get(&id).copied()]
        .into_iter()
        .flatten()
    {
        match l {
            Lock::Included => must_in = true,
            Lock::Excluded => must_out = true,
        }
    }
    (must_in, must_out)
}

pub(crate) fn check_constraints(
    forest: &SegmentForest,
    constraints: &Constraints,
) -> Result<(), EngineError> {
    for id in constraints.keys() {
        if forest.segment(*id).is_none() {
            return Err(EngineError::UnknownSegment(*id));
        }
    }
    Ok(())
}

/// Checks a vector against the validity rules, the forest's locks and
/// `constraints`.
pub fn validate_vector_with(
    forest: &SegmentForest,
    v: &CounterfactualVector,
    constraints: &Constraints,
) -> Result<(), Violation> {
    let vars = forest.variable_ids();
    let all = forest.all_ids();
    if v.bits.len() != vars.len() {
        return Err(Violation::BitLength {
            expected: vars.len(),
            got: v.bits.len(),
        });
    }
    if v.choices.len() != all.len() {
        return Err(Violation::ChoiceLength {
            expected: all.len(),
            got: v.choices.len(),
        });
    }
    let included = inclusion_map(forest, v);
    for (i, &id) in all.iter().enumerate() {
        let seg = forest.segment(id).expect("segment exists");
        let inc = included[&id];
        if let Some(p) = seg.parent {
            if inc && !included[&p] {
                return Err(Violation::OrphanIncluded {
                    child: id,
                    parent: p,
                });
            }
            if !inc && included[&p] && seg.removability == Removability::Unremovable {
                return Err(Violation::UnremovableDropped {
                    child: id,
                    parent: p,
                });
            }
        }
        if inc && seg.is_dummy() && !seg.children.iter().any(|c| included[c]) {
            return Err(Violation::EmptyDummy(id));
        }
        let (must_in, must_out) = effective(forest, constraints, id);
        if (must_in && !inc) || (must_out && inc) {
            return Err(Violation::LockViolated(id));
        }
        let choice = v.choices[i];
        if (!inc && choice != 0) || choice as usize >= seg.choice_count() {
            return Err(Violation::BadChoice {
                segment: id,
                choice,
            });
        }
    }
    Ok(())
}

pub fn validate_vector(forest: &SegmentForest, v: &CounterfactualVector) -> Result<(), Violation> {
    validate_vector_with(forest, v, &Constraints::new())
}

/// Inclusion state per segment id, root included.
pub fn inclusion_map(
    forest: &SegmentForest,
    v: &CounterfactualVector,
) -> BTreeMap<SegmentId, bool> {
    let mut out = BTreeMap::new();
    out.insert(forest.root_id(), true);
    for (id, &b) in forest.variable_ids().into_iter().zip(v.bits.iter()) {
        out.insert(id, b);
    }
    out
}

/// Enumerates when the valid set fits under `cap`, otherwise draws `sample`
/// distinct vectors with `seed`.
pub fn generate_vectors(
    forest: &SegmentForest,
    cap: usize,
    sample: usize,
    seed: u64,
) -> Result<Vec<CounterfactualVector>, EngineError> {
    generate_vectors_with(forest, &Constraints::new(), cap, sample, seed)
}

pub fn generate_vectors_with(
    forest: &SegmentForest,
    constraints: &Constraints,
    cap: usize,
    sample: usize,
    seed: u64,
) -> Result<Vec<CounterfactualVector>, EngineError> {
    match enumerate_valid_with(forest, constraints, cap) {
        Err(EngineError::CapExceeded { .. }) => {
            sample_valid_with(forest, constraints, sample.max(1), seed)
        }
        other => other,
    }
}

/// One JSON-lines record of a counterfactual corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualLine {
    pub id: usize,
    /// `0`/`1` per variable segment, ascending segment id.
    pub bits: String,
    pub choices: Vec<u32>,
    pub text: String,
    pub word_count: usize,
}

impl From<&Counterfactual> for CounterfactualLine {
    fn from(cf: &Counterfactual) -> Self {
        CounterfactualLine {
            id: cf.id,
            bits: cf.vector.bit_string(),
            choices: cf.vector.choices.clone(),
            text: cf.text.clone(),
            word_count: cf.word_count,
        }
    }
}

impl CounterfactualLine {
    pub fn to_counterfactual(&self) -> Counterfactual {
        Counterfactual {
            id: self.id,
            vector: CounterfactualVector {
                bits: self.bits.chars().map(|c| c == '1').collect(),
                choices: self.choices.clone(),
            },
            text: self.text.clone(),
            word_count: self.word_count,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, cfs: &[Counterfactual]) -> std::io::Result<()> {
    for cf in cfs {
        serde_json::to_writer(&mut out, &CounterfactualLine::from(cf))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(src: &str) -> Result<Vec<Counterfactual>, serde_json::Error> {
    src.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<CounterfactualLine>(l).map(|c| c.to_counterfactual()))
        .collect()
}

#[cfg(test)]
mod tests;
