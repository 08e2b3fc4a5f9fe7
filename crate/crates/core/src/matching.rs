//! Optimal bipartite assignment between proposals and ground-truth targets.

use serde::{Deserialize, Serialize};

use crate::geometry::{giou, BoxCxcywh};
use crate::tensor::{sigmoid, Array};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchingError {
    #[error("target {0} has no positive query in the image's query set")]
    NoPositiveQuery(usize),
    #[error("cost matrix holds a non-finite value at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Relative weights of the three matching-cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub l1: f64,
    pub giou: f64,
    pub class: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            giou: 1.0,
            class: 1.0,
        }
    }
}

/// A matching target: its box and the indices of the queries that are
/// positive for it.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTarget {
    pub bbox: BoxCxcywh,
    pub positive_queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub weights: MatchWeights,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(MatchingError::Shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            values.extend_from_slice(r);
        }
        let m = Self {
            rows: rows.len(),
            cols: if rows.is_empty() { 0 } else { cols },
            values,
            weights: MatchWeights::default(),
        };
        m.check_finite()?;
        Ok(m)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    fn check_finite(&self) -> Result<(), MatchingError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(MatchingError::NonFinite(k / self.cols, k % self.cols)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(proposal, target)` pairs in ascending proposal order.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Matching cost between every proposal (`boxes`, `logits` rows) and every
/// target: weighted L1 distance, `1 - GIoU`, and the mean of
/// `1 - sigmoid(logit)` over the target's positive queries.
pub fn build_cost_matrix(
    boxes: &Array,
    logits: &Array,
    targets: &[MatchTarget],
    weights: MatchWeights,
) -> Result<CostMatrix, MatchingError> {
    let p = boxes.rows();
    if boxes.cols() != 4 {
        return Err(MatchingError::Shape(format!("boxes must be P×4, got {:?}", boxes.shape())));
    }
    if logits.rows() != p && !(p == 0 && logits.is_empty()) {
        return Err(MatchingError::Shape(format!(
            "logits have {} rows but there are {p} proposals",
            logits.rows()
        )));
    }
    let q = if p == 0 { 0 } else { logits.len() / p };
    for (j, t) in targets.iter().enumerate() {
        if t.positive_queries.is_empty() || t.positive_queries.iter().any(|&k| k >= q) {
            return Err(MatchingError::NoPositiveQuery(j));
        }
    }
    let mut values = Vec::with_capacity(p * targets.len());
    for i in 0..p {
        let pb = boxes.row(i);
        let pred = BoxCxcywh::new(pb[0], pb[1], pb[2], pb[3]);
        let pred_xy = pred.to_xyxy();
        for t in targets {
            let l1: f64 = pb.iter().zip(t.bbox.to_array()).map(|(a, b)| (a - b).abs()).sum();
            let g = 1.0 - giou(&pred_xy, &t.bbox.to_xyxy());
            let cls = t
                .positive_queries
                .iter()
                .map(|&k| 1.0 - sigmoid(logits.get2(i, k)))
                .sum::<f64>()
                / t.positive_queries.len() as f64;
            values.push(weights.l1 * l1 + weights.giou * g + weights.class * cls);
        }
    }
    let m = CostMatrix {
        rows: p,
        cols: targets.len(),
        values,
        weights,
    };
    m.check_finite()?;
    Ok(m)
}

/// Minimum-cost complete matching of the smaller side of the submatrix
/// `rows × cols`. Returns `(row, col)` pairs in terms of the given indices.
fn solve_rect(c: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    let transposed = rows.len() > cols.len();
    let (n, m) = if transposed {
        (cols.len(), rows.len())
    } else {
        (rows.len(), cols.len())
    };
    let cost = |i: usize, j: usize| {
        if transposed {
            c.get(rows[j], cols[i])
        } else {
            c.get(rows[i], cols[j])
        }
    };

    // Shortest augmenting paths with potentials; 1-based, column 0 is virtual.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, jj) = (owner[j] - 1, j - 1);
            if transposed {
                (rows[jj], cols[i])
            } else {
                (rows[i], cols[jj])
            }
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

fn pair_cost(c: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| c.get(i, j)).sum()
}

/// Minimum-cost assignment of `min(P, T)` pairs.
///
/// Among optimal assignments (costs equal within a relative 1e-9), the one
/// whose proposal-sorted pair list is lexicographically smallest is returned.
pub fn hungarian_assign(c: &CostMatrix) -> Assignment {
    if c.rows == 0 || c.cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let all_rows: Vec<usize> = (0..c.rows).collect();
    let all_cols: Vec<usize> = (0..c.cols).collect();
    let best = pair_cost(c, &solve_rect(c, &all_rows, &all_cols));
    let scale = c.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * (c.rows.min(c.cols) as f64 + 1.0);

    let k = c.rows.min(c.cols);
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut col_free = vec![true; c.cols];
    for p in 0..c.rows {
        if fixed.len() == k {
            break;
        }
        let need = k - fixed.len() - 1;
        let rows_after: Vec<usize> = (p + 1..c.rows).collect();
        for t in 0..c.cols {
            if !col_free[t] {
                continue;
            }
            let cols_after: Vec<usize> = (0..c.cols).filter(|&j| col_free[j] && j != t).collect();
            if rows_after.len().min(cols_after.len()) != need {
                continue;
            }
            let sub = pair_cost(c, &solve_rect(c, &rows_after, &cols_after));
            if fixed_cost + c.get(p, t) + sub <= best + tol {
                fixed.push((p, t));
                fixed_cost += c.get(p, t);
                col_free[t] = false;
                break;
            }
        }
    }
    debug_assert_eq!(fixed.len(), k);
    Assignment {
        total_cost: pair_cost(c, &fixed),
        pairs: fixed,
    }
}
