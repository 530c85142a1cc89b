//! Cost-matrix construction and optimal one-to-one assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_distance};
use crate::network::Prediction;
use crate::synthdata::GroundTruth;

/// Finite stand-in for "infinite" cost used when square-padding.
pub const PAD_COST: f64 = 1e6;

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// Unweighted cost components of one (prediction, GT) cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostCell {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl CostCell {
    pub fn total(&self, w: &CostWeights) -> f64 {
        w.cls * self.cls + w.l1 * self.l1 + w.giou * (-self.giou)
    }
}

/// Focal-style classification cost on the sigmoid score of the GT class.
pub fn focal_class_cost(p: f64) -> f64 {
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p + 1e-8).ln();
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -(p + 1e-8).ln();
    pos - neg
}

/// Dense `rows x cols` cost matrix; rows are predictions, columns GTs.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    weights: CostWeights,
    cells: Vec<CostCell>,
    totals: Vec<f64>,
}

impl CostMatrix {
    /// Builds a matrix directly from totals (no component breakdown).
    pub fn from_totals(rows: usize, cols: usize, totals: Vec<f64>) -> Self {
        assert_eq!(totals.len(), rows * cols, "cost matrix shape");
        let cells = totals
            .iter()
            .map(|&t| CostCell { cls: 0.0, l1: t, giou: 0.0 })
            .collect();
        Self {
            rows,
            cols,
            weights: CostWeights { cls: 0.0, l1: 1.0, giou: 0.0 },
            cells,
            totals,
        }
    }

    pub fn from_cells(rows: usize, cols: usize, cells: Vec<CostCell>, weights: CostWeights) -> Self {
        assert_eq!(cells.len(), rows * cols, "cost matrix shape");
        let totals = cells.iter().map(|c| c.total(&weights)).collect();
        Self { rows, cols, weights, cells, totals }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.totals[row * self.cols + col]
    }

    pub fn cell(&self, row: usize, col: usize) -> &CostCell {
        &self.cells[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, col))
    }
}

pub fn build_cost_matrix(
    preds: &[Prediction],
    gts: &[GroundTruth],
    weights: &CostWeights,
) -> Result<CostMatrix> {
    let mut cells = Vec::with_capacity(preds.len() * gts.len());
    for (i, p) in preds.iter().enumerate() {
        if p.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore { query: i });
        }
        for gt in gts {
            cells.push(CostCell {
                cls: focal_class_cost(p.scores[gt.class]),
                l1: l1_distance(p.bbox, gt.bbox),
                giou: giou(p.bbox, gt.bbox),
            });
        }
    }
    Ok(CostMatrix::from_cells(preds.len(), gts.len(), cells, *weights))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub query: usize,
    pub gt: usize,
    /// The cost-matrix cell this pair was selected with.
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Sorted by GT index.
    pub pairs: Vec<MatchPair>,
    pub unmatched_queries: Vec<usize>,
    /// Only non-empty when there are more GTs than queries.
    pub unmatched_gts: Vec<usize>,
    pub num_queries: usize,
    pub num_gts: usize,
    pub warnings: Vec<String>,
}

impl MatchResult {
    pub fn empty(num_queries: usize, num_gts: usize) -> Self {
        Self {
            pairs: Vec::new(),
            unmatched_queries: (0..num_queries).collect(),
            unmatched_gts: (0..num_gts).collect(),
            num_queries,
            num_gts,
            warnings: Vec::new(),
        }
    }

    /// Builds a result from explicit `(query, gt)` pairs, reading costs from `c`.
    pub fn from_pairs(c: &CostMatrix, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut gt_of = vec![None; c.rows()];
        let mut out: Vec<MatchPair> = pairs
            .into_iter()
            .map(|(q, g)| {
                gt_of[q] = Some(g);
                MatchPair { query: q, gt: g, cost: c.get(q, g) }
            })
            .collect();
        out.sort_by_key(|p| p.gt);
        let matched_gts: Vec<usize> = out.iter().map(|p| p.gt).collect();
        Self {
            pairs: out,
            unmatched_queries: (0..c.rows()).filter(|&q| gt_of[q].is_none()).collect(),
            unmatched_gts: (0..c.cols()).filter(|g| !matched_gts.contains(g)).collect(),
            num_queries: c.rows(),
            num_gts: c.cols(),
            warnings: Vec::new(),
        }
    }

    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.cost).sum()
    }

    pub fn query_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.gt == gt).map(|p| p.query)
    }

    pub fn gt_for_query(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.query == query).map(|p| p.gt)
    }

    /// Per-query lookup table of matched GT indices.
    pub fn gt_by_query(&self) -> Vec<Option<usize>> {
        let mut v = vec![None; self.num_queries];
        for p in &self.pairs {
            v[p.query] = Some(p.gt);
        }
        v
    }
}

/// Minimum-cost one-to-one assignment.
///
/// The matrix is square-padded with [`PAD_COST`] and solved with the
/// shortest-augmenting-path Hungarian method (O(n^3)). When there are fewer
/// queries than GTs every query is matched and the surplus GTs are reported
/// in `unmatched_gts` along with a warning.
pub fn hungarian(c: &CostMatrix) -> MatchResult {
    let (rows, cols) = (c.rows(), c.cols());
    if rows == 0 || cols == 0 {
        return MatchResult::empty(rows, cols);
    }
    let n = rows.max(cols);
    let mut square = vec![PAD_COST; n * n];
    for r in 0..rows {
        for k in 0..cols {
            square[r * n + k] = c.get(r, k);
        }
    }
    let row_to_col = solve_square(&square, n);
    let pairs = row_to_col
        .iter()
        .enumerate()
        .filter(|&(r, &k)| r < rows && k < cols)
        .map(|(r, &k)| (r, k));
    let mut result = MatchResult::from_pairs(c, pairs);
    if rows < cols {
        result.warnings.push(format!(
            "{} ground truths but only {} queries; {} ground truths left unmatched",
            cols,
            rows,
            cols - rows
        ));
    }
    result
}

/// Solves a dense square assignment problem, returning the column of each row.
fn solve_square(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based potentials; index 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Builds the cost matrix and solves it. Each pair carries its cell cost.
pub fn match_predictions(
    preds: &[Prediction],
    gts: &[GroundTruth],
    weights: &CostWeights,
) -> Result<(MatchResult, CostMatrix)> {
    let c = build_cost_matrix(preds, gts, weights)?;
    Ok((hungarian(&c), c))
}
