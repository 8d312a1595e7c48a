//! Exact linear assignment via shortest augmenting paths (O(n^3)), plus a
//! lexicographic refinement so ties resolve to the lowest-index permutation.

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor};

/// Minimum-cost perfect assignment of a square cost matrix (row -> column).
/// Among cost-optimal permutations, returns the lexicographically smallest.
pub fn min_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::shape("min_assignment", "cost matrix must be square"));
    }
    let base = solve(cost);
    let optimum = total(cost, &base);
    let tol = 1e-9 * (1.0 + optimum.abs());

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion. n is small everywhere this is used, so the extra
    // O(n) subproblem solves are cheap.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for row in 0..n {
        let mut chosen = None;
        for col in 0..n {
            if used[col] {
                continue;
            }
            let fixed_cost: f64 =
                fixed.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>() + cost[row][col];
            let rest = if row + 1 < n {
                let rows: Vec<usize> = (row + 1..n).collect();
                let cols: Vec<usize> =
                    (0..n).filter(|&c| !used[c] && c != col).collect();
                let sub: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
                    .collect();
                let sub_perm = solve(&sub);
                sub_perm.iter().enumerate().map(|(i, &j)| cost[rows[i]][cols[j]]).sum()
            } else {
                0.0
            };
            if fixed_cost + rest <= optimum + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("an optimal completion always exists");
        fixed.push(col);
        used[col] = true;
    }
    Ok(fixed)
}

/// Assignment maximizing total cosine similarity between rows of `a` and `b`.
/// Returns the permutation `perm` with `a[p]` matched to `b[perm[p]]`.
pub fn max_cosine_assignment(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::shape(
            "max_cosine_assignment",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let p = a.rows();
    let mut cost = vec![vec![0.0; p]; p];
    for i in 0..p {
        let ai = a.row(i)?;
        for j in 0..p {
            cost[i][j] = -cosine_similarity(&ai, &b.row(j)?)?;
        }
    }
    min_assignment(&cost)
}

fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

/// Jonker-Volgenant style shortest augmenting path with dual potentials.
fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed with column 0 as the virtual start.
    let mut row_pot = vec![0.0; n + 1];
    let mut col_pot = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row (1-indexed, 0 = free)

    for r in 1..=n {
        let mut col0 = 0usize;
        matched_row[col0] = r;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prev = vec![0usize; n + 1];
        let mut visited = vec![false; n + 1];
        loop {
            visited[col0] = true;
            let row = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut next_col = 0usize;
            for c in 1..=n {
                if visited[c] {
                    continue;
                }
                let reduced = cost[row - 1][c - 1] - row_pot[row] - col_pot[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    prev[c] = col0;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next_col = c;
                }
            }
            for c in 0..=n {
                if visited[c] {
                    row_pot[matched_row[c]] += delta;
                    col_pot[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            col0 = next_col;
            if matched_row[col0] == 0 {
                break;
            }
        }
        // Augment along the alternating path.
        while col0 != 0 {
            let c = prev[col0];
            matched_row[col0] = matched_row[c];
            col0 = c;
        }
    }

    let mut perm = vec![0usize; n];
    for c in 1..=n {
        if matched_row[c] > 0 {
            perm[matched_row[c] - 1] = c - 1;
        }
    }
    perm
}
