//! Optimal bipartite matching between gold and predicted grounding sets.
//!
//! Sets of unequal size are padded with ∅ to a square P×P problem,
//! P = max(G, K), and solved with the Hungarian method (shortest augmenting
//! paths with row/column potentials, O(P³)). Among equal-cost optima the
//! solver returns the assignment that is lexicographically smallest by row.

use crate::error::{Error, Result};
use crate::geometry::{self, DenseMask};
use crate::model::{AudioSegment, Tracklet};

/// Cost of any pair that touches a ∅ pad. Larger than any real pair cost
/// (at most −ln ε + 1 ≈ 14.8 for ε = 1e-6). Every permutation of a padded
/// problem has the same number of ∅ pairs, so this value never changes which
/// real pairs are chosen; it is excluded from reported totals.
pub const NULL_COST: f64 = 1e6;

/// Square matrix of finite costs, rows = gold, columns = predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    size: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        let mut values = Vec::with_capacity(size * size);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != size {
                return Err(Error::invalid(format!(
                    "cost matrix must be square: row {i} has {} entries, expected {size}",
                    row.len()
                )));
            }
            values.extend(row);
        }
        Self::from_flat(size, values)
    }

    pub fn from_flat(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::invalid(format!(
                "expected {} entries for a {size}x{size} matrix, got {}",
                size * size,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite cost at ({}, {})",
                pos / size.max(1),
                pos % size.max(1)
            )));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

/// A permutation: `row_to_col[i]` is the column assigned to row i.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let n = costs.size();
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            total_cost: 0.0,
        };
    }

    // 1-indexed potentials; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }

    lexicographic_refine(costs, &u[1..], &v[1..], &mut row_to_col);

    let total_cost = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| costs.get(i, j))
        .sum();
    Assignment {
        row_to_col,
        total_cost,
    }
}

/// Rewrites an optimal assignment into the lexicographically smallest
/// optimal one. With optimal potentials fixed, the optimal assignments are
/// exactly the perfect matchings of the tight-edge subgraph, so row by row we
/// move each row to its smallest feasible tight column by rerouting an
/// alternating cycle through the not-yet-fixed rows.
fn lexicographic_refine(costs: &CostMatrix, u: &[f64], v: &[f64], row_to_col: &mut [usize]) {
    let n = row_to_col.len();
    let scale = 8.0 * n as f64 * f64::EPSILON;
    let mut tight = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let c = costs.get(i, j);
            let reduced = c - u[i] - v[j];
            tight[i * n + j] = reduced.abs() <= scale * (c.abs() + u[i].abs() + v[j].abs());
        }
        tight[i * n + row_to_col[i]] = true;
    }

    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }

    let mut fixed_col = vec![false; n];
    for i in 0..n {
        let current = row_to_col[i];
        for j in 0..current {
            if !tight[i * n + j] || fixed_col[j] {
                continue;
            }
            let r = col_to_row[j];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut search = Reroute {
                n,
                tight: &tight,
                fixed_col: &fixed_col,
                target: current,
                row_to_col: &mut *row_to_col,
                col_to_row: &mut col_to_row,
                visited: &mut visited,
            };
            if search.find(r) {
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        fixed_col[row_to_col[i]] = true;
    }
}

struct Reroute<'a> {
    n: usize,
    tight: &'a [bool],
    fixed_col: &'a [bool],
    target: usize,
    row_to_col: &'a mut [usize],
    col_to_row: &'a mut [usize],
    visited: &'a mut [bool],
}

impl Reroute<'_> {
    /// Finds a tight alternating path from `row` to the target column and
    /// applies it on the way back.
    fn find(&mut self, row: usize) -> bool {
        for c in 0..self.n {
            if self.visited[c] || self.fixed_col[c] || !self.tight[row * self.n + c] {
                continue;
            }
            self.visited[c] = true;
            if c == self.target || self.find(self.col_to_row[c]) {
                self.row_to_col[row] = c;
                self.col_to_row[c] = row;
                return true;
            }
        }
        false
    }
}

/// One matched pair. `None` marks a ∅ pad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub gold: Option<usize>,
    pub pred: Option<usize>,
    /// Matching cost for real–real pairs.
    pub cost: Option<f64>,
}

impl MatchPair {
    pub fn is_real(&self) -> bool {
        self.gold.is_some() && self.pred.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// One entry per padded row, in gold order, then pads.
    pub pairs: Vec<MatchPair>,
    /// Sum of real–real costs; ∅ pairs are excluded.
    pub total_cost: f64,
}

impl Matching {
    pub fn real_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().filter_map(|p| Some((p.gold?, p.pred?)))
    }
}

/// Pads a G×K cost function to P×P with [`NULL_COST`] and solves it.
pub fn match_with_costs<F>(gold_len: usize, pred_len: usize, mut cost: F) -> Result<Matching>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let size = gold_len.max(pred_len);
    let mut values = Vec::with_capacity(size * size);
    for g in 0..size {
        for p in 0..size {
            values.push(if g < gold_len && p < pred_len {
                cost(g, p)?
            } else {
                NULL_COST
            });
        }
    }
    let matrix = CostMatrix::from_flat(size, values)?;
    let assignment = hungarian(&matrix);

    let mut total_cost = 0.0;
    let pairs = assignment
        .row_to_col
        .iter()
        .enumerate()
        .map(|(g, &p)| {
            let gold = (g < gold_len).then_some(g);
            let pred = (p < pred_len).then_some(p);
            let cost = (gold.is_some() && pred.is_some()).then(|| matrix.get(g, p));
            if let Some(c) = cost {
                total_cost += c;
            }
            MatchPair { gold, pred, cost }
        })
        .collect();
    Ok(Matching { pairs, total_cost })
}

/// Mask matching cost: BCE(pred, gold) + Dice loss.
pub fn mask_match_cost(gold: &DenseMask, pred: &DenseMask, epsilon: f64) -> Result<f64> {
    Ok(geometry::bce_loss(pred, gold, epsilon)? + geometry::dice_loss(pred, gold)?)
}

pub fn match_mask_sets(gold: &[DenseMask], pred: &[DenseMask], epsilon: f64) -> Result<Matching> {
    if let Some(first) = gold.first().or(pred.first()) {
        let dims = (first.width(), first.height());
        if let Some(bad) = gold
            .iter()
            .chain(pred)
            .find(|m| (m.width(), m.height()) != dims)
        {
            return Err(Error::invalid(format!(
                "mask size mismatch: {}x{} vs {}x{}",
                dims.0,
                dims.1,
                bad.width(),
                bad.height()
            )));
        }
    }
    match_with_costs(gold.len(), pred.len(), |g, p| {
        mask_match_cost(&gold[g], &pred[p], epsilon)
    })
}

pub fn match_span_sets(gold: &[AudioSegment], pred: &[AudioSegment]) -> Matching {
    match_with_costs(gold.len(), pred.len(), |g, p| {
        Ok(1.0 - geometry::span_iou_1d(&gold[g], &pred[p]))
    })
    .expect("span costs are finite")
}

pub fn match_tracklet_sets(gold: &[Tracklet], pred: &[Tracklet]) -> Result<Matching> {
    match_with_costs(gold.len(), pred.len(), |g, p| {
        Ok(1.0 - geometry::tracklet_iou_profile(&gold[g], &pred[p])?.mean)
    })
}
