//! Optimal and greedy bipartite assignment on cost/similarity matrices.

use crate::detect::{box_iou, Detection};
use crate::mask::Box2D;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignError {
    #[error("cost matrix contains a non-finite value at ({0}, {1})")]
    NonFiniteValue(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    MinimizeCost,
    MaximizeSimilarity,
}

/// Rectangular matrix of finite costs or similarities, row-major.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub orientation: Orientation,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, orientation: Orientation) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self {
            rows,
            cols,
            values,
            orientation,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn check_finite(&self) -> Result<(), AssignError> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.get(r, c).is_finite() {
                    return Err(AssignError::NonFiniteValue(r, c));
                }
            }
        }
        Ok(())
    }
}

/// O(n^3) shortest-augmenting-path solver on a square minimization matrix.
/// Keeps the dual labels so callers can recover the set of tight edges.
struct SquareSolver {
    dim: usize,
    cost: Vec<f64>,
    row_label: Vec<f64>,
    col_label: Vec<f64>,
    match_col_by_row: Vec<Option<usize>>,
    match_row_by_col: Vec<Option<usize>>,
}

impl SquareSolver {
    fn new(dim: usize, cost: Vec<f64>) -> Self {
        Self {
            dim,
            cost,
            row_label: vec![0.0; dim],
            col_label: vec![0.0; dim],
            match_col_by_row: vec![None; dim],
            match_row_by_col: vec![None; dim],
        }
    }

    #[inline]
    fn c(&self, r: usize, c: usize) -> f64 {
        self.cost[r * self.dim + c]
    }

    fn reduce(&mut self) {
        for r in 0..self.dim {
            let min = (0..self.dim)
                .map(|c| self.c(r, c))
                .fold(f64::INFINITY, f64::min);
            for c in 0..self.dim {
                self.cost[r * self.dim + c] -= min;
            }
        }
        for c in 0..self.dim {
            let min = (0..self.dim)
                .map(|r| self.c(r, c))
                .fold(f64::INFINITY, f64::min);
            for r in 0..self.dim {
                self.cost[r * self.dim + c] -= min;
            }
        }
    }

    fn solve(&mut self) {
        if self.dim == 0 {
            return;
        }
        self.reduce();
        for c in 0..self.dim {
            self.col_label[c] = (0..self.dim)
                .map(|r| self.c(r, c))
                .fold(f64::INFINITY, f64::min);
        }
        // jump-start with the zero-reduced-cost greedy matching
        for r in 0..self.dim {
            for c in 0..self.dim {
                if self.match_col_by_row[r].is_none()
                    && self.match_row_by_col[c].is_none()
                    && self.c(r, c) - self.row_label[r] - self.col_label[c] == 0.0
                {
                    self.match_col_by_row[r] = Some(c);
                    self.match_row_by_col[c] = Some(r);
                }
            }
        }
        while let Some(root) = (0..self.dim).find(|&r| self.match_col_by_row[r].is_none()) {
            self.phase(root);
        }
    }

    /// Grow the matching by one along an augmenting path rooted at an
    /// unmatched row, raising labels when the tight subgraph is exhausted.
    fn phase(&mut self, root: usize) {
        let dim = self.dim;
        let mut committed_rows = vec![false; dim];
        let mut parent_row_by_col: Vec<Option<usize>> = vec![None; dim];
        let mut slack_value = vec![0.0f64; dim];
        let mut slack_row = vec![root; dim];
        committed_rows[root] = true;
        for c in 0..dim {
            slack_value[c] = self.c(root, c) - self.row_label[root] - self.col_label[c];
        }
        loop {
            let mut best_col = None;
            let mut best = f64::INFINITY;
            for c in 0..dim {
                if parent_row_by_col[c].is_none() && slack_value[c] < best {
                    best = slack_value[c];
                    best_col = Some(c);
                }
            }
            let col = best_col.expect("uncommitted column must exist");
            if best > 0.0 {
                for r in 0..dim {
                    if committed_rows[r] {
                        self.row_label[r] += best;
                    }
                }
                for c in 0..dim {
                    if parent_row_by_col[c].is_some() {
                        self.col_label[c] -= best;
                    } else {
                        slack_value[c] -= best;
                    }
                }
            }
            parent_row_by_col[col] = Some(slack_row[col]);
            match self.match_row_by_col[col] {
                None => {
                    // augmenting path found: flip matched edges back to the root
                    let mut cur = col;
                    loop {
                        let row = parent_row_by_col[cur].expect("committed column has parent");
                        let next = self.match_col_by_row[row];
                        self.match_col_by_row[row] = Some(cur);
                        self.match_row_by_col[cur] = Some(row);
                        match next {
                            Some(c) => cur = c,
                            None => return,
                        }
                    }
                }
                Some(row) => {
                    committed_rows[row] = true;
                    for c in 0..dim {
                        if parent_row_by_col[c].is_none() {
                            let s = self.c(row, c) - self.row_label[row] - self.col_label[c];
                            if s < slack_value[c] {
                                slack_value[c] = s;
                                slack_row[c] = row;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Kuhn's augmenting-path check: can every row in `rows` be matched into
/// the unused columns of the boolean graph?
fn has_perfect_matching(tight: &[bool], dim: usize, rows: &[usize], used_col: &[bool]) -> bool {
    let mut match_row_by_col: Vec<Option<usize>> = vec![None; dim];
    fn try_assign(
        row: usize,
        tight: &[bool],
        dim: usize,
        used_col: &[bool],
        visited: &mut [bool],
        match_row_by_col: &mut [Option<usize>],
    ) -> bool {
        for c in 0..dim {
            if used_col[c] || visited[c] || !tight[row * dim + c] {
                continue;
            }
            visited[c] = true;
            let free = match match_row_by_col[c] {
                None => true,
                Some(other) => try_assign(other, tight, dim, used_col, visited, match_row_by_col),
            };
            if free {
                match_row_by_col[c] = Some(row);
                return true;
            }
        }
        false
    }
    for &r in rows {
        let mut visited = vec![false; dim];
        if !try_assign(r, tight, dim, used_col, &mut visited, &mut match_row_by_col) {
            return false;
        }
    }
    true
}

/// Maximum-cardinality assignment of `min(rows, cols)` pairs minimizing
/// total cost (or maximizing total similarity). Rectangular matrices are
/// padded internally with a finite sentinel; padded pairs are stripped.
/// Among optimal assignments the lexicographically smallest by (row, col)
/// is returned, so results are reproducible across runs and platforms.
pub fn hungarian(m: &CostMatrix) -> Result<Vec<(usize, usize)>, AssignError> {
    m.check_finite()?;
    if m.rows == 0 || m.cols == 0 {
        return Ok(Vec::new());
    }
    let dim = m.rows.max(m.cols);
    let max_abs = m.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let sentinel = 4.0 * (1.0 + max_abs);
    let mut cost = vec![sentinel; dim * dim];
    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.get(r, c);
            cost[r * dim + c] = match m.orientation {
                Orientation::MinimizeCost => v,
                Orientation::MaximizeSimilarity => -v,
            };
        }
    }

    let mut solver = SquareSolver::new(dim, cost);
    solver.solve();

    // Tight edges of the reduced problem; any perfect matching on them is
    // optimal. The solver's own edges are forced in so float noise in the
    // labels can never leave the graph without a perfect matching.
    let scale = solver.cost.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let eps = 1e-9 * (1.0 + scale);
    let mut tight = vec![false; dim * dim];
    for r in 0..dim {
        for c in 0..dim {
            let slack = solver.c(r, c) - solver.row_label[r] - solver.col_label[c];
            if slack <= eps {
                tight[r * dim + c] = true;
            }
        }
    }
    for r in 0..dim {
        if let Some(c) = solver.match_col_by_row[r] {
            tight[r * dim + c] = true;
        }
    }

    // Lexicographic extraction: for each real row in order, keep the
    // smallest column that still extends to a perfect tight matching.
    let mut used_col = vec![false; dim];
    let mut pairs = Vec::with_capacity(m.rows.min(m.cols));
    for r in 0..m.rows {
        let remaining: Vec<usize> = (r + 1..dim).collect();
        let mut chosen = None;
        for c in 0..dim {
            if used_col[c] || !tight[r * dim + c] {
                continue;
            }
            used_col[c] = true;
            if has_perfect_matching(&tight, dim, &remaining, &used_col) {
                chosen = Some(c);
                break;
            }
            used_col[c] = false;
        }
        let c = chosen.expect("tight graph always extends to a perfect matching");
        if c < m.cols {
            pairs.push((r, c));
        }
    }
    Ok(pairs)
}

/// Greedy matching: repeatedly take the best remaining entry that passes
/// the gate (value >= gate for similarities, value <= gate for costs),
/// removing its row and column. Ties break lexicographically.
pub fn greedy_assign(m: &CostMatrix, gate: f64) -> Result<Vec<(usize, usize)>, AssignError> {
    m.check_finite()?;
    let mut row_used = vec![false; m.rows];
    let mut col_used = vec![false; m.cols];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in 0..m.rows {
            if row_used[r] {
                continue;
            }
            for c in 0..m.cols {
                if col_used[c] {
                    continue;
                }
                let v = m.get(r, c);
                let passes = match m.orientation {
                    Orientation::MaximizeSimilarity => v >= gate,
                    Orientation::MinimizeCost => v <= gate,
                };
                if !passes {
                    continue;
                }
                let better = match (&best, m.orientation) {
                    (None, _) => true,
                    (Some(&(_, _, b)), Orientation::MaximizeSimilarity) => v > b,
                    (Some(&(_, _, b)), Orientation::MinimizeCost) => v < b,
                };
                if better {
                    best = Some((r, c, v));
                }
            }
        }
        match best {
            Some((r, c, _)) => {
                row_used[r] = true;
                col_used[c] = true;
                pairs.push((r, c));
            }
            None => break,
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Cost matrix for track-detection association: similarity is box IoU
/// weighted by detection confidence, cost is its complement.
pub fn fused_iou_cost(tracks_boxes: &[Box2D], dets: &[Detection]) -> CostMatrix {
    let rows = tracks_boxes.len();
    let cols = dets.len();
    let mut values = Vec::with_capacity(rows * cols);
    for tb in tracks_boxes {
        for det in dets {
            let sim = box_iou(tb, &det.bbox) * det.score;
            values.push(1.0 - sim);
        }
    }
    CostMatrix::new(rows, cols, values, Orientation::MinimizeCost)
}
