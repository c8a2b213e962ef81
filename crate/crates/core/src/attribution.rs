//! KernelSHAP attributions by weighted least squares.
//!
//! Rows are (inclusion bits, outcome) pairs. Columns that never vary cannot be
//! attributed and are reported instead of solved. The all-zero and all-one
//! rows (over the varying columns) carry infinite kernel weight, so when
//! observed they are imposed exactly: `phi0 = f(empty)` and
//! `phi0 + sum(phi) = f(full)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::SegmentId;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapError {
    #[error("coalition size {s} has infinite weight for M = {m}")]
    DegenerateCoalition { m: usize, s: usize },
    #[error("need at least {needed} distinct interior rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("row {row} has {got} bits, expected {expected}")]
    DimensionMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("outcome {value} in row {row} is not a probability")]
    BadOutcome { row: usize, value: f64 },
    #[error("solver produced non-finite values")]
    NumericalFailure,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel `(M - 1) / (C(M, s) * s * (M - s))`.
pub fn kernel_weight(m: usize, s: usize) -> Result<f64, ShapError> {
    if m < 2 || s == 0 || s >= m {
        return Err(ShapError::DegenerateCoalition { m, s });
    }
    Ok((m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapProblem {
    pub m: usize,
    /// Columns whose bit varies across the rows.
    pub varying: Vec<usize>,
    /// Distinct interior rows restricted to `varying`.
    pub x: Vec<Vec<bool>>,
    /// Mean outcome per row of `x`.
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub f_empty: Option<f64>,
    pub f_full: Option<f64>,
    pub segment_ids: Vec<SegmentId>,
}

impl ShapProblem {
    pub fn non_identifiable(&self) -> Vec<usize> {
        (0..self.m).filter(|c| !self.varying.contains(c)).collect()
    }

    pub fn with_segment_ids(mut self, ids: Vec<SegmentId>) -> Self {
        assert_eq!(ids.len(), self.m, "one id per column");
        self.segment_ids = ids;
        self
    }
}

/// Collects rows into a weighted problem. Duplicate rows are averaged.
pub fn build_problem(records: &[(Vec<bool>, f64)], m: usize) -> Result<ShapProblem, ShapError> {
    if records.is_empty() {
        return Err(ShapError::InsufficientRows { needed: 2, got: 0 });
    }
    for (row, (bits, y)) in records.iter().enumerate() {
        if bits.len() != m {
            return Err(ShapError::DimensionMismatch {
                row,
                got: bits.len(),
                expected: m,
            });
        }
        if !(0.0..=1.0).contains(y) {
            return Err(ShapError::BadOutcome { row, value: *y });
        }
    }
    let varying: Vec<usize> = (0..m)
        .filter(|&c| {
            let first = records[0].0[c];
            records.iter().any(|(b, _)| b[c] != first)
        })
        .collect();
    let k = varying.len();

    let mut groups: BTreeMap<Vec<bool>, (f64, usize)> = BTreeMap::new();
    for (bits, y) in records {
        let key: Vec<bool> = varying.iter().map(|&c| bits[c]).collect();
        let e = groups.entry(key).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
    }
    let mut problem = ShapProblem {
        m,
        varying,
        x: Vec::new(),
        y: Vec::new(),
        w: Vec::new(),
        f_empty: None,
        f_full: None,
        segment_ids: (0..m as SegmentId).collect(),
    };
    for (key, (sum, n)) in groups {
        let mean = sum / n as f64;
        let s = key.iter().filter(|&&b| b).count();
        if s == 0 {
            problem.f_empty = Some(mean);
        }
        if s == k {
            problem.f_full = Some(mean);
        }
        if s > 0 && s < k {
            problem.w.push(kernel_weight(k, s)?);
            problem.x.push(key);
            problem.y.push(mean);
        }
    }
    let needs_rows = k >= 2 || problem.f_empty.is_none() || problem.f_full.is_none();
    if needs_rows && problem.x.len() < 2 {
        return Err(ShapError::InsufficientRows {
            needed: 2,
            got: problem.x.len(),
        });
    }
    Ok(problem)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapDiagnostics {
    pub condition_estimate: f64,
    pub residual_norm: f64,
    pub interior_rows: usize,
    pub observed_empty: bool,
    pub observed_full: bool,
    /// Segments whose bit never varies; their attribution is reported as 0.
    pub non_identifiable: Vec<SegmentId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapResult {
    pub phi0: f64,
    pub phi: Vec<f64>,
    pub segment_ids: Vec<SegmentId>,
    pub diagnostics: ShapDiagnostics,
}

/// Weighted least squares `min sum w (t - A beta)^2` through the
/// pseudoinverse of the normal matrix. Returns `(beta, condition)`.
fn wls(a: &DMatrix<f64>, t: &DVector<f64>, w: &[f64]) -> (DVector<f64>, f64) {
    let wd = DVector::from_column_slice(w);
    let mut aw = a.clone();
    for (mut row, &wi) in aw.row_iter_mut().zip(wd.iter()) {
        row *= wi;
    }
    let normal = a.transpose() * &aw;
    let rhs = aw.transpose() * t;
    let svd = normal.svd(true, true);
    let max = svd.singular_values.max();
    let tol = PINV_RTOL * max;
    let min_kept = svd
        .singular_values
        .iter()
        .copied()
        .filter(|&v| v > tol)
        .fold(f64::INFINITY, f64::min);
    let condition = if max > 0.0 && min_kept.is_finite() {
        max / min_kept
    } else {
        f64::INFINITY
    };
    let pinv = svd
        .pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.ncols()));
    (pinv * rhs, condition)
}

pub fn solve(p: &ShapProblem) -> Result<ShapResult, ShapError> {
    let k = p.varying.len();
    let n = p.x.len();
    let z = |r: usize, c: usize| if p.x[r][c] { 1.0 } else { 0.0 };
    let y = DVector::from_column_slice(&p.y);
    let (phi0, phi_k, condition): (f64, Vec<f64>, f64) = if k == 0 {
        (p.f_empty.or(p.f_full).unwrap_or(0.0), Vec::new(), 1.0)
    } else {
        match (p.f_empty, p.f_full) {
            (Some(f0), Some(f1)) if k == 1 => (f0, vec![f1 - f0], 1.0),
            (Some(f0), Some(f1)) => {
                // phi_last = (f1 - f0) - sum(other phi)
                let last = k - 1;
                let a = DMatrix::from_fn(n, last, |r, c| z(r, c) - z(r, last));
                let t = DVector::from_fn(n, |r, _| p.y[r] - f0 - (f1 - f0) * z(r, last));
                let (beta, cond) = wls(&a, &t, &p.w);
                let mut phi: Vec<f64> = beta.iter().copied().collect();
                phi.push((f1 - f0) - phi.iter().sum::<f64>());
                (f0, phi, cond)
            }
            (None, Some(f1)) => {
                let a = DMatrix::from_fn(n, k, |r, c| z(r, c) - 1.0);
                let t = y.map(|v| v - f1);
                let (beta, cond) = wls(&a, &t, &p.w);
                let phi: Vec<f64> = beta.iter().copied().collect();
                (f1 - phi.iter().sum::<f64>(), phi, cond)
            }
            (Some(f0), None) => {
                let a = DMatrix::from_fn(n, k, z);
                let t = y.map(|v| v - f0);
                let (beta, cond) = wls(&a, &t, &p.w);
                (f0, beta.iter().copied().collect(), cond)
            }
            (None, None) => {
                let a = DMatrix::from_fn(n, k + 1, |r, c| if c == 0 { 1.0 } else { z(r, c - 1) });
                let (beta, cond) = wls(&a, &y, &p.w);
                (beta[0], beta.iter().skip(1).copied().collect(), cond)
            }
        }
    };

    let mut phi = vec![0.0; p.m];
    for (j, &c) in p.varying.iter().enumerate() {
        phi[c] = phi_k[j];
    }
    let residual_norm = (0..n)
        .map(|r| {
            let pred = phi0 + (0..k).map(|c| phi_k[c] * z(r, c)).sum::<f64>();
            p.w[r] * (p.y[r] - pred).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    if !phi0.is_finite() || phi.iter().any(|v| !v.is_finite()) || !residual_norm.is_finite() {
        return Err(ShapError::NumericalFailure);
    }
    Ok(ShapResult {
        phi0,
        phi,
        segment_ids: p.segment_ids.clone(),
        diagnostics: ShapDiagnostics {
            condition_estimate: condition,
            residual_norm,
            interior_rows: n,
            observed_empty: p.f_empty.is_some(),
            observed_full: p.f_full.is_some(),
            non_identifiable: p
                .non_identifiable()
                .into_iter()
                .map(|c| p.segment_ids[c])
                .collect(),
        },
    })
}

/// Builds and solves in one step, labelling columns with `segment_ids`.
pub fn kernel_shap(
    records: &[(Vec<bool>, f64)],
    segment_ids: &[SegmentId],
) -> Result<ShapResult, ShapError> {
    let p = build_problem(records, segment_ids.len())?.with_segment_ids(segment_ids.to_vec());
    solve(&p)
}
