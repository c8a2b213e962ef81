use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_constraints, effective, Constraints, CounterfactualVector, EngineError};
use crate::segment::{Removability, SegmentForest, SegmentId};

/// Number of valid vectors. Counts beyond `u128` saturate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidCount {
    Exact(u128),
    Saturated,
}

impl ValidCount {
    pub fn exact(self) -> Option<u128> {
        match self {
            ValidCount::Exact(n) => Some(n),
            ValidCount::Saturated => None,
        }
    }

    pub fn exceeds(self, cap: usize) -> bool {
        match self {
            ValidCount::Exact(n) => n > cap as u128,
            ValidCount::Saturated => true,
        }
    }
}

impl fmt::Display for ValidCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidCount::Exact(n) => write!(f, "{n}"),
            ValidCount::Saturated => f.write_str(">= 2^128"),
        }
    }
}

/// Bottom-up counting tables.
///
/// `inner[s]` counts configurations of the subtree of `s` given `s` is
/// included; `opt[s]` counts them with `s` free to be absent as well.
#[derive(Clone, Debug)]
pub struct CountTable {
    pub(crate) ids: Vec<SegmentId>,
    pub(crate) pos: BTreeMap<SegmentId, usize>,
    pub(crate) children: Vec<Vec<usize>>,
    pub(crate) dummy: Vec<bool>,
    pub(crate) choices: Vec<u32>,
    pub(crate) allowed_in: Vec<bool>,
    pub(crate) allowed_out: Vec<bool>,
    /// Some segment in the subtree must be included.
    pub(crate) required: Vec<bool>,
    pub(crate) inner: Vec<Option<u128>>,
    pub(crate) opt: Vec<Option<u128>>,
    pub(crate) inner_f: Vec<f64>,
    pub(crate) opt_f: Vec<f64>,
    pub(crate) root: usize,
}

fn mul(a: Option<u128>, b: Option<u128>) -> Option<u128> {
    match (a, b) {
        (Some(0), _) | (_, Some(0)) => Some(0),
        (Some(x), Some(y)) => x.checked_mul(y),
        _ => None,
    }
}

fn add(a: Option<u128>, b: Option<u128>) -> Option<u128> {
    a.and_then(|x| b.and_then(|y| x.checked_add(y)))
}

impl CountTable {
    pub fn new(forest: &SegmentForest, constraints: &Constraints) -> Result<Self, EngineError> {
        check_constraints(forest, constraints)?;
        let ids = forest.all_ids();
        let pos: BTreeMap<SegmentId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let n = ids.len();
        let mut t = CountTable {
            children: vec![Vec::new(); n],
            dummy: vec![false; n],
            choices: vec![1; n],
            allowed_in: vec![true; n],
            allowed_out: vec![true; n],
            required: vec![false; n],
            inner: vec![Some(0); n],
            opt: vec![Some(0); n],
            inner_f: vec![0.0; n],
            opt_f: vec![0.0; n],
            root: pos[&forest.root_id()],
            ids,
            pos,
        };
        for (i, &id) in t.ids.iter().enumerate() {
            let seg = forest.segment(id).expect("segment exists");
            t.children[i] = seg.children.iter().map(|c| t.pos[c]).collect();
            t.dummy[i] = seg.is_dummy();
            t.choices[i] = seg.choice_count() as u32;
            let (must_in, must_out) = effective(forest, constraints, id);
            t.allowed_in[i] = !must_out;
            t.required[i] = must_in;
            t.allowed_out[i] =
                !must_in && seg.removability == Removability::Removable && i != t.root;
        }
        // A segment that must appear pins its whole ancestor chain.
        let order = t.postorder();
        for i in order {
            if t.children[i].iter().any(|&c| t.required[c]) {
                t.required[i] = true;
            }
            if t.required[i] {
                t.allowed_out[i] = false;
            }
            let mut prod = Some(1u128);
            let mut prod_f = 1.0f64;
            let mut all_out = true;
            for &c in &t.children[i] {
                prod = mul(prod, t.opt[c]);
                prod_f *= t.opt_f[c];
                all_out &= t.allowed_out[c];
            }
            let (inner, inner_f) = if t.dummy[i] {
                if all_out {
                    (prod.and_then(|p| p.checked_sub(1)), prod_f - 1.0)
                } else {
                    (prod, prod_f)
                }
            } else {
                let k = t.choices[i] as u128;
                (mul(Some(k), prod), prod_f * k as f64)
            };
            t.inner[i] = inner;
            t.inner_f[i] = inner_f;
            let out = if t.allowed_out[i] { Some(1) } else { Some(0) };
            let inn = if t.allowed_in[i] { inner } else { Some(0) };
            t.opt[i] = add(out, inn);
            t.opt_f[i] =
                t.allowed_out[i] as u8 as f64 + if t.allowed_in[i] { inner_f } else { 0.0 };
        }
        Ok(t)
    }

    fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ids.len());
        let mut stack = vec![(self.root, false)];
        while let Some((i, done)) = stack.pop() {
            if done {
                out.push(i);
            } else {
                stack.push((i, true));
                for &c in &self.children[i] {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    pub fn count(&self) -> ValidCount {
        if !self.allowed_in[self.root] {
            return ValidCount::Exact(0);
        }
        match self.inner[self.root] {
            Some(n) => ValidCount::Exact(n),
            None => ValidCount::Saturated,
        }
    }

    pub(crate) fn count_f(&self) -> f64 {
        if self.allowed_in[self.root] {
            self.inner_f[self.root]
        } else {
            0.0
        }
    }

    /// Segment ids in ascending order (root first).
    pub fn ids(&self) -> &[SegmentId] {
        &self.ids
    }

    pub(crate) fn to_vector(&self, state: &[u32]) -> CounterfactualVector {
        let mut bits = Vec::with_capacity(self.ids.len() - 1);
        let mut choices = Vec::with_capacity(self.ids.len());
        for (i, &s) in state.iter().enumerate() {
            if i != self.root {
                bits.push(s > 0);
            }
            choices.push(s.saturating_sub(1));
        }
        CounterfactualVector { bits, choices }
    }

    /// Every configuration of the subtree of `i` with `i` included, as sparse
    /// `(position, choice + 1)` lists.
    fn configs_in(&self, i: usize) -> Vec<Vec<(usize, u32)>> {
        let mut acc: Vec<Vec<(usize, u32)>> =
            (0..self.choices[i]).map(|c| vec![(i, c + 1)]).collect();
        for &c in &self.children[i] {
            let mut options: Vec<Vec<(usize, u32)>> = Vec::new();
            if self.allowed_out[c] {
                options.push(Vec::new());
            }
            if self.allowed_in[c] {
                options.extend(self.configs_in(c));
            }
            let mut next = Vec::with_capacity(acc.len() * options.len());
            for a in &acc {
                for o in &options {
                    let mut v = a.clone();
                    v.extend_from_slice(o);
                    next.push(v);
                }
            }
            acc = next;
        }
        if self.dummy[i] {
            acc.retain(|cfg| cfg.len() > 1);
        }
        acc
    }
}

pub fn count_valid(forest: &SegmentForest) -> ValidCount {
    CountTable::new(forest, &Constraints::new())
        .expect("no constraints")
        .count()
}

pub fn count_valid_with(
    forest: &SegmentForest,
    constraints: &Constraints,
) -> Result<ValidCount, EngineError> {
    Ok(CountTable::new(forest, constraints)?.count())
}

/// All valid vectors in lexicographic order of inclusion bits, then choices.
pub fn enumerate_valid(
    forest: &SegmentForest,
    cap: usize,
) -> Result<Vec<CounterfactualVector>, EngineError> {
    enumerate_valid_with(forest, &Constraints::new(), cap)
}

pub fn enumerate_valid_with(
    forest: &SegmentForest,
    constraints: &Constraints,
    cap: usize,
) -> Result<Vec<CounterfactualVector>, EngineError> {
    let table = CountTable::new(forest, constraints)?;
    let count = table.count();
    if count.exceeds(cap) {
        return Err(EngineError::CapExceeded { count, cap });
    }
    Ok(table.enumerate())
}

impl CountTable {
    pub(crate) fn enumerate(&self) -> Vec<CounterfactualVector> {
        if !self.allowed_in[self.root] {
            return Vec::new();
        }
        let mut out: Vec<CounterfactualVector> = self
            .configs_in(self.root)
            .into_iter()
            .map(|cfg| {
                let mut state = vec![0u32; self.ids.len()];
                for (p, s) in cfg {
                    state[p] = s;
                }
                self.to_vector(&state)
            })
            .collect();
        out.sort();
        out
    }
}
