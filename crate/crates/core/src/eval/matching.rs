//! Maximum-weight bipartite matching via Kuhn–Munkres.

use super::EvalError;

const TIE_TOLERANCE: f64 = 1e-9;

/// Find a maximum-weight matching of an `m × n` nonnegative weight matrix.
///
/// The matrix is padded to square with zero rows/columns and solved with the
/// Hungarian method. Zero-weight edges are not reported. Among optimal
/// matchings the lexicographically smallest sorted pair list is returned.
pub fn max_weight_matching(weights: &[Vec<f64>]) -> Result<Vec<(usize, usize)>, EvalError> {
    let m = weights.len();
    let n = weights.first().map_or(0, Vec::len);
    for (i, row) in weights.iter().enumerate() {
        if row.len() != n {
            return Err(EvalError::Ragged { row: i, len: row.len(), expected: n });
        }
        for (j, &w) in row.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(EvalError::BadWeight { row: i, col: j, value: w });
            }
        }
    }
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }

    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let optimum = best_total(weights, &all_rows, &all_cols);
    let tol = TIE_TOLERANCE * optimum.max(1.0);

    // Fix rows in order, giving each the smallest column that still admits an
    // optimal completion. Matching a row always sorts before skipping it.
    let mut pairs = Vec::new();
    let mut fixed = 0.0;
    let mut free_cols = all_cols;
    for i in 0..m {
        let rest: Vec<usize> = (i + 1..m).collect();
        let mut chosen = None;
        for (slot, &j) in free_cols.iter().enumerate() {
            let w = weights[i][j];
            if w <= 0.0 {
                continue;
            }
            let mut remaining = free_cols.clone();
            remaining.remove(slot);
            if fixed + w + best_total(weights, &rest, &remaining) >= optimum - tol {
                chosen = Some((slot, j, w));
                break;
            }
        }
        if let Some((slot, j, w)) = chosen {
            pairs.push((i, j));
            fixed += w;
            free_cols.remove(slot);
        }
    }
    Ok(pairs)
}

/// Total weight of a matching, `None` if it reuses a row or column.
pub fn matching_weight(weights: &[Vec<f64>], pairs: &[(usize, usize)]) -> Option<f64> {
    let mut rows = std::collections::HashSet::new();
    let mut cols = std::collections::HashSet::new();
    let mut total = 0.0;
    for &(i, j) in pairs {
        if !rows.insert(i) || !cols.insert(j) {
            return None;
        }
        total += weights[i][j];
    }
    Some(total)
}

/// Optimal total weight restricted to the given rows and columns.
fn best_total(weights: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let assignment = hungarian_max(weights, rows, cols);
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| weights[rows[r]][cols[c]]))
        .sum()
}

/// Square-padded Hungarian method (shortest augmenting path with potentials)
/// maximizing weight. Returns, per row of the submatrix, its column (if the
/// assigned column is a real one).
fn hungarian_max(weights: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<Option<usize>> {
    let k = rows.len().max(cols.len());
    let cost = |r: usize, c: usize| -> f64 {
        if r < rows.len() && c < cols.len() {
            -weights[rows[r]][cols[c]]
        } else {
            0.0
        }
    };

    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut col_owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for r in 1..=k {
        col_owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
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
            for j in 0..=k {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
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

    let mut out = vec![None; rows.len()];
    for (j, &r) in col_owner.iter().enumerate().skip(1) {
        if r >= 1 && r <= rows.len() && j <= cols.len() {
            out[r - 1] = Some(j - 1);
        }
    }
    out
}
