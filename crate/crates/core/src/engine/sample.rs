use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::count::CountTable;
use super::{Constraints, CounterfactualVector, EngineError};
use crate::segment::SegmentForest;

/// Above this count, distinct sampling never falls back to enumeration.
const ENUMERATE_LIMIT: u128 = 1 << 16;

/// Uniform sampler over the valid set by weighted top-down descent.
#[derive(Clone, Debug)]
pub struct VectorSampler {
    table: CountTable,
}

impl VectorSampler {
    pub fn new(forest: &SegmentForest, constraints: &Constraints) -> Result<Self, EngineError> {
        let table = CountTable::new(forest, constraints)?;
        if table.count_f() <= 0.0 {
            return Err(EngineError::Infeasible);
        }
        Ok(VectorSampler { table })
    }

    pub fn table(&self) -> &CountTable {
        &self.table
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CounterfactualVector {
        let t = &self.table;
        let mut state = vec![0u32; t.ids.len()];
        let mut stack = vec![t.root];
        while let Some(i) = stack.pop() {
            state[i] = 1 + rng.gen_range(0..t.choices[i]);
            let kids = &t.children[i];
            if t.dummy[i] {
                // Suffix products of opt and of allowed_out.
                let k = kids.len();
                let mut p = vec![1.0f64; k + 1];
                let mut q = vec![1.0f64; k + 1];
                for j in (0..k).rev() {
                    p[j] = p[j + 1] * t.opt_f[kids[j]];
                    q[j] = q[j + 1] * t.allowed_out[kids[j]] as u8 as f64;
                }
                let mut any = false;
                for (j, &c) in kids.iter().enumerate() {
                    let rest = if any { p[j + 1] } else { p[j + 1] - q[j + 1] };
                    let w_out = t.allowed_out[c] as u8 as f64 * rest;
                    let w_in = if t.allowed_in[c] {
                        t.inner_f[c] * p[j + 1]
                    } else {
                        0.0
                    };
                    if pick_in(rng, w_in, w_out) {
                        any = true;
                        stack.push(c);
                    }
                }
            } else {
                for &c in kids {
                    let w_in = if t.allowed_in[c] { t.inner_f[c] } else { 0.0 };
                    let w_out = t.allowed_out[c] as u8 as f64;
                    if pick_in(rng, w_in, w_out) {
                        stack.push(c);
                    }
                }
            }
        }
        t.to_vector(&state)
    }
}

fn pick_in<R: Rng + ?Sized>(rng: &mut R, w_in: f64, w_out: f64) -> bool {
    if w_in <= 0.0 {
        return false;
    }
    if w_out <= 0.0 {
        return true;
    }
    rng.gen::<f64>() * (w_in + w_out) < w_in
}

/// `k` distinct valid vectors drawn uniformly, deterministic in `seed`. When
/// `k` reaches the number of valid vectors the full enumeration is returned.
pub fn sample_valid(
    forest: &SegmentForest,
    k: usize,
    seed: u64,
) -> Result<Vec<CounterfactualVector>, EngineError> {
    sample_valid_with(forest, &Constraints::new(), k, seed)
}

pub fn sample_valid_with(
    forest: &SegmentForest,
    constraints: &Constraints,
    k: usize,
    seed: u64,
) -> Result<Vec<CounterfactualVector>, EngineError> {
    let sampler = VectorSampler::new(forest, constraints)?;
    let table = sampler.table();
    let count = table.count().exact();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(n) = count {
        if k as u128 >= n {
            return Ok(table.enumerate());
        }
        if n <= ENUMERATE_LIMIT && (k as u128) * 2 >= n {
            let all = table.enumerate();
            let picked = index::sample(&mut rng, all.len(), k);
            return Ok(picked.into_iter().map(|i| all[i].clone()).collect());
        }
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let v = sampler.draw(&mut rng);
        if seen.insert(v.clone()) {
            out.push(v);
        }
    }
    Ok(out)
}
