//! Rectangular linear assignment with forbidden pairs.
//!
//! Forbidden entries are never selected. Among all matchings that use only
//! feasible entries, the solver returns one with the largest number of
//! matched pairs and, among those, the smallest total cost. This is done
//! by padding to a square problem in which every row and every column can
//! also be left "unmatched" at a penalty larger than any achievable cost
//! difference, then running the shortest-augmenting-path Hungarian method
//! with dual potentials.

/// Dense matrix of optional costs; `None` marks a forbidden pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Option<f64>>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![None; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost matrix");
        Self {
            rows: rows.len(),
            cols,
            entries: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        self.entries[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: Option<f64>) {
        self.entries[r * self.cols + c] = value;
    }

    /// Sum of the selected entries, in the order given.
    pub fn total(&self, matches: &[(usize, usize)]) -> f64 {
        matches
            .iter()
            .map(|&(r, c)| self.get(r, c).unwrap_or(f64::INFINITY))
            .sum()
    }
}

/// Solves the square problem `n x n` in row-major `cost` (entries may be
/// `+inf` but a finite perfect matching must exist). Returns the column
/// assigned to each row.
fn hungarian_square(n: usize, cost: &[f64]) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based potentials and matching, column 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut row_of = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
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
            debug_assert!(delta.is_finite(), "no finite augmenting path");
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Maximum-cardinality, minimum-cost matching over feasible entries.
/// Returns `(row, col)` pairs sorted by row.
pub fn solve(matrix: &CostMatrix) -> Vec<(usize, usize)> {
    let (r, c) = (matrix.rows, matrix.cols);
    if r == 0 || c == 0 || matrix.entries.iter().all(Option::is_none) {
        return Vec::new();
    }
    let max_abs = matrix.entries.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let penalty = 1.0 + 2.0 * (r.min(c) as f64 + 1.0) * max_abs;
    let n = r + c;
    let mut cost = vec![f64::INFINITY; n * n];
    for i in 0..r {
        for j in 0..c {
            if let Some(d) = matrix.get(i, j) {
                cost[i * n + j] = d;
            }
        }
        cost[i * n + c + i] = penalty;
    }
    for l in 0..c {
        let row = r + l;
        cost[row * n + l] = penalty;
        for k in 0..r {
            cost[row * n + c + k] = 0.0;
        }
    }
    let col_of = hungarian_square(n, &cost);
    (0..r)
        .filter_map(|i| {
            let j = col_of[i];
            (j < c && matrix.get(i, j).is_some()).then_some((i, j))
        })
        .collect()
}

/// Assignment over a full (no forbidden entries) rectangular matrix that
/// maximizes total weight.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let max = weights.iter().flatten().fold(0.0f64, |m, &w| m.max(w));
    let rows: Vec<Vec<Option<f64>>> = weights
        .iter()
        .map(|row| row.iter().map(|&w| Some(max - w)).collect())
        .collect();
    solve(&CostMatrix::from_rows(&rows))
}
