//! Brute-force solvers, validity checkers and evaluation metrics.
//!
//! Everything here works on decoded boards, not tokens, except
//! [`compute_metrics`], which decodes model outputs through the task spec.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::tasks::{TaskKind, TaskSpec};

/// Upper bound on solutions any enumerator will collect.
pub const ENUMERATION_CAP: usize = 1_000_000;

// ---------------------------------------------------------------- sudoku

/// True iff every row, column and box holds 1..9 exactly once.
/// Cells are 0 for blank, 1..9 for digits.
pub fn sudoku_valid(board: &[u8]) -> bool {
    if board.len() != 81 || board.iter().any(|&c| !(1..=9).contains(&c)) {
        return false;
    }
    for unit in sudoku_units() {
        let mut seen = [false; 10];
        for idx in unit {
            let d = board[idx] as usize;
            if seen[d] {
                return false;
            }
            seen[d] = true;
        }
    }
    true
}

/// The 27 rows, columns and boxes as cell-index lists.
pub fn sudoku_units() -> Vec<[usize; 9]> {
    let mut units = Vec::with_capacity(27);
    for i in 0..9 {
        units.push(std::array::from_fn(|j| i * 9 + j));
        units.push(std::array::from_fn(|j| j * 9 + i));
        let (br, bc) = (3 * (i / 3), 3 * (i % 3));
        units.push(std::array::from_fn(|j| (br + j / 3) * 9 + bc + j % 3));
    }
    units
}

fn sudoku_candidates(board: &[u8], idx: usize) -> [bool; 10] {
    let mut ok = [true; 10];
    ok[0] = false;
    let (r, c) = (idx / 9, idx % 9);
    let (br, bc) = (3 * (r / 3), 3 * (c / 3));
    for k in 0..9 {
        ok[board[r * 9 + k] as usize] = false;
        ok[board[k * 9 + c] as usize] = false;
        ok[board[(br + k / 3) * 9 + bc + k % 3] as usize] = false;
    }
    ok[0] = false;
    ok
}

/// Number of completions of a partial board, stopping at `cap`.
pub fn sudoku_count_solutions(board: &[u8], cap: usize) -> usize {
    fn go(b: &mut [u8], cap: usize, count: &mut usize) {
        if *count >= cap {
            return;
        }
        // most constrained blank first
        let mut best: Option<(usize, [bool; 10], usize)> = None;
        for i in 0..81 {
            if b[i] == 0 {
                let cand = sudoku_candidates(b, i);
                let n = cand.iter().filter(|&&x| x).count();
                if best.as_ref().map_or(true, |(_, _, bn)| n < *bn) {
                    best = Some((i, cand, n));
                    if n <= 1 {
                        break;
                    }
                }
            }
        }
        let Some((i, cand, _)) = best else {
            *count += 1;
            return;
        };
        for d in 1..=9u8 {
            if cand[d as usize] {
                b[i] = d;
                go(b, cap, count);
                b[i] = 0;
            }
        }
    }
    // the search only checks blanks, so clashing givens are caught here
    let consistent = board.len() == 81
        && board.iter().all(|&c| c <= 9)
        && sudoku_units().iter().all(|unit| {
            let mut seen = [false; 10];
            unit.iter().all(|&i| {
                let d = board[i] as usize;
                d == 0 || !std::mem::replace(&mut seen[d], true)
            })
        });
    if !consistent {
        return 0;
    }
    let mut b = board.to_vec();
    let mut count = 0;
    go(&mut b, cap, &mut count);
    count
}

// --------------------------------------------------------------- n-queens

/// `n` queens on an `n x n` board, pairwise non-attacking, with every
/// queen of `clues` still present.
pub fn nqueens_valid(n: usize, board: &[bool], clues: &[bool]) -> bool {
    if board.len() != n * n || clues.len() != n * n {
        return false;
    }
    if clues.iter().zip(board).any(|(&c, &b)| c && !b) {
        return false;
    }
    let queens: Vec<(i64, i64)> = (0..n * n).filter(|&i| board[i]).map(|i| ((i / n) as i64, (i % n) as i64)).collect();
    if queens.len() != n {
        return false;
    }
    for a in 0..queens.len() {
        for b in a + 1..queens.len() {
            let (r1, c1) = queens[a];
            let (r2, c2) = queens[b];
            if r1 == r2 || c1 == c2 || (r1 - r2).abs() == (c1 - c2).abs() {
                return false;
            }
        }
    }
    true
}

/// Solutions as column-per-row vectors, by backtracking, honouring any
/// fixed queens in `clues` (an `n*n` mask).
pub fn nqueens_backtrack(n: usize, clues: &[bool]) -> Result<Vec<Vec<usize>>> {
    if n > 12 {
        return Err(GramError::config(format!("n-queens enumeration capped at n=12, got {n}")));
    }
    let fixed: Vec<Option<usize>> = (0..n)
        .map(|r| {
            let cols: Vec<usize> = (0..n).filter(|&c| clues.get(r * n + c).copied().unwrap_or(false)).collect();
            match cols.len() {
                0 => Ok(None),
                1 => Ok(Some(cols[0])),
                _ => Err(()),
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map_or_else(|_| vec![], |v| v);
    if fixed.len() != n {
        return Ok(Vec::new());
    }
    fn go(
        row: usize,
        n: usize,
        fixed: &[Option<usize>],
        cols: &mut Vec<usize>,
        used: &mut [bool],
        d1: &mut [bool],
        d2: &mut [bool],
        out: &mut Vec<Vec<usize>>,
    ) {
        if row == n {
            out.push(cols.clone());
            return;
        }
        for c in 0..n {
            if fixed[row].is_some_and(|f| f != c) {
                continue;
            }
            let (a, b) = (row + c, row + n - 1 - c);
            if used[c] || d1[a] || d2[b] {
                continue;
            }
            used[c] = true;
            d1[a] = true;
            d2[b] = true;
            cols.push(c);
            go(row + 1, n, fixed, cols, used, d1, d2, out);
            cols.pop();
            used[c] = false;
            d1[a] = false;
            d2[b] = false;
        }
    }
    let mut out = Vec::new();
    go(0, n, &fixed, &mut Vec::with_capacity(n), &mut vec![false; n], &mut vec![false; 2 * n], &mut vec![false; 2 * n], &mut out);
    Ok(out)
}

/// All complete solutions by filtering every column permutation; an
/// independent second method for cross-checking [`nqueens_backtrack`].
pub fn nqueens_permutation_filter(n: usize) -> Result<Vec<Vec<usize>>> {
    if n > 9 {
        return Err(GramError::config(format!("permutation filter capped at n=9, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    loop {
        let ok = (0..n).all(|i| (i + 1..n).all(|j| perm[i].abs_diff(perm[j]) != j - i));
        if ok {
            out.push(perm.clone());
        }
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else { break };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).expect("successor exists");
        perm.swap(i - 1, j);
        perm[i..].reverse();
    }
    Ok(out)
}

pub fn queens_to_board(n: usize, cols: &[usize]) -> Vec<bool> {
    let mut b = vec![false; n * n];
    for (r, &c) in cols.iter().enumerate() {
        b[r * n + c] = true;
    }
    b
}

// --------------------------------------------------------- graph coloring

/// Undirected simple graph as a dense adjacency matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub n: usize,
    pub adj: Vec<bool>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Graph { n, adj: vec![false; n * n] }
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        self.adj[a * self.n + b] = true;
        self.adj[b * self.n + a] = true;
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a * self.n + b]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for a in 0..self.n {
            for b in a + 1..self.n {
                if self.has_edge(a, b) {
                    e.push((a, b));
                }
            }
        }
        e
    }
}

/// Edges whose endpoints share a colour. `None` marks an invalid colour,
/// which conflicts on every incident edge.
pub fn coloring_conflicts(g: &Graph, colors: &[Option<usize>]) -> usize {
    g.edges()
        .into_iter()
        .filter(|&(a, b)| match (colors[a], colors[b]) {
            (Some(x), Some(y)) => x == y,
            _ => true,
        })
        .count()
}

/// Relabels colours in order of first appearance.
pub fn canonicalize_coloring(colors: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = Vec::new();
    let mut next = 0;
    colors
        .iter()
        .map(|&c| {
            if map.len() <= c {
                map.resize(c + 1, None);
            }
            *map[c].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Canonical proper `k`-colourings by exhaustive enumeration of all `k^n`
/// assignments.
pub fn enumerate_colorings(g: &Graph, k: usize) -> Result<Vec<Vec<usize>>> {
    let total = (k as u128).pow(g.n as u32);
    if total > ENUMERATION_CAP as u128 * 100 {
        return Err(GramError::config(format!("{k}^{} colourings exceed the enumeration cap", g.n)));
    }
    let mut set = BTreeSet::new();
    let mut colors = vec![0usize; g.n];
    for mut code in 0..total {
        for c in colors.iter_mut() {
            *c = (code % k as u128) as usize;
            code /= k as u128;
        }
        let opt: Vec<Option<usize>> = colors.iter().map(|&c| Some(c)).collect();
        if coloring_conflicts(g, &opt) == 0 {
            set.insert(canonicalize_coloring(&colors));
        }
    }
    Ok(set.into_iter().collect())
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent of single samples that are valid.
    pub accuracy: f64,
    /// Percent of each input's solution set recovered, averaged over inputs.
    pub coverage: f64,
    /// Mean conflicting edges per sample (graph colouring only).
    pub conflict: f64,
    /// Percent of samples that are complete valid solutions.
    pub validity: f64,
    /// Distinct valid outputs, summed over inputs.
    pub unique_valid: usize,
    pub n_samples: usize,
    pub n_inputs: usize,
}

/// Validity of one predicted token sequence for `input`.
pub fn is_valid_prediction(spec: &TaskSpec, input: Option<&[usize]>, pred: &[usize]) -> bool {
    match spec.kind {
        TaskKind::Sudoku | TaskKind::SudokuUnconditional => {
            let Ok(board) = crate::tasks::decode_sudoku(&pred[..81.min(pred.len())]) else { return false };
            if !sudoku_valid(&board) {
                return false;
            }
            match input.and_then(|x| crate::tasks::decode_sudoku(&x[..81]).ok()) {
                Some(givens) => givens.iter().zip(&board).all(|(&g, &b)| g == 0 || g == b),
                None => true,
            }
        }
        TaskKind::NQueens { n } => {
            let Some(board) = crate::tasks::decode_nqueens(&pred[..(n * n).min(pred.len())]) else { return false };
            let clues = input.and_then(|x| crate::tasks::decode_nqueens(&x[..n * n])).unwrap_or_else(|| vec![false; n * n]);
            nqueens_valid(n, &board, &clues)
        }
        TaskKind::Coloring { n } => match input {
            Some(x) => {
                let g = crate::tasks::decode_graph(n, x);
                coloring_conflicts(&g, &crate::tasks::decode_colors(n, pred)) == 0
            }
            None => false,
        },
    }
}

/// Canonical key for solution-set membership (colourings are relabelled).
pub fn solution_key(spec: &TaskSpec, pred: &[usize]) -> Vec<usize> {
    match spec.kind {
        TaskKind::Coloring { n } => {
            let colors: Vec<usize> = pred[..n].iter().map(|&t| t.saturating_sub(3)).collect();
            canonicalize_coloring(&colors).into_iter().map(|c| c + 3).collect()
        }
        _ => pred[..spec.target_len].to_vec(),
    }
}

/// Metrics over `predictions[i]`, the samples drawn for input `i`.
/// `solution_sets[i]` holds that input's valid targets (canonical keys);
/// an empty set skips coverage for that input.
pub fn compute_metrics(
    spec: &TaskSpec,
    inputs: &[Option<Vec<usize>>],
    solution_sets: &[Vec<Vec<usize>>],
    predictions: &[Vec<Vec<usize>>],
) -> Result<MetricsReport> {
    if inputs.len() != predictions.len() || inputs.len() != solution_sets.len() {
        return Err(GramError::data("metrics: inputs, solution sets and predictions differ in length"));
    }
    let n_samples = predictions.first().map_or(0, Vec::len);
    if predictions.iter().any(|p| p.len() != n_samples) {
        return Err(GramError::data("metrics: every input needs the same sample count"));
    }
    if inputs.is_empty() || n_samples == 0 {
        return Ok(MetricsReport { n_samples, n_inputs: inputs.len(), ..Default::default() });
    }
    let mut valid_count = 0usize;
    let mut conflicts = 0usize;
    let mut coverage_sum = 0.0;
    let mut coverage_inputs = 0usize;
    let mut unique_valid = 0usize;
    for ((input, set), preds) in inputs.iter().zip(solution_sets).zip(predictions) {
        let mut found = BTreeSet::new();
        for p in preds {
            if let TaskKind::Coloring { n } = spec.kind {
                if let Some(x) = input {
                    conflicts += coloring_conflicts(&crate::tasks::decode_graph(n, x), &crate::tasks::decode_colors(n, p));
                }
            }
            if is_valid_prediction(spec, input.as_deref(), p) {
                valid_count += 1;
                found.insert(solution_key(spec, p));
            }
        }
        unique_valid += found.len();
        if !set.is_empty() {
            let hits = set.iter().filter(|s| found.contains(*s)).count();
            coverage_sum += hits as f64 / set.len() as f64;
            coverage_inputs += 1;
        }
    }
    let total = (inputs.len() * n_samples) as f64;
    let pct = 100.0 * valid_count as f64 / total;
    Ok(MetricsReport {
        accuracy: pct,
        coverage: if coverage_inputs > 0 { 100.0 * coverage_sum / coverage_inputs as f64 } else { 0.0 },
        conflict: conflicts as f64 / total,
        validity: pct,
        unique_valid,
        n_samples,
        n_inputs: inputs.len(),
    })
}
