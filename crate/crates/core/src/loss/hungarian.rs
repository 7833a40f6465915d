//! Exact rectangular assignment (rows ≤ columns) by shortest augmenting
//! paths with dual potentials, plus a lexicographic tie-break pass.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `cols[i]` is the column matched to row `i`.
    pub cols: Vec<usize>,
    pub cost: f64,
}

struct Solved {
    cols: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Minimum-cost matching of every row of a row-major `n × m` matrix,
/// restricted to columns where `allowed[j]` holds.
fn solve(cost: &[f64], n: usize, m: usize, allowed: &[bool]) -> Solved {
    let inf = f64::INFINITY;
    let c = |i: usize, j: usize| cost[i * m + j];
    // 1-based potentials; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] || !allowed[j - 1] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut cols = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            cols[owner[j] - 1] = j - 1;
        }
    }
    Solved { cols, u: u[1..].to_vec(), v: v[1..].to_vec() }
}

fn total(cost: &[f64], m: usize, rows: impl Iterator<Item = (usize, usize)>) -> f64 {
    rows.map(|(i, j)| cost[i * m + j]).sum()
}

/// Optimal assignment of each of `n` rows to a distinct column of a
/// row-major `n × m` cost matrix. Among optimal assignments the
/// lexicographically smallest column vector is returned.
pub fn assign(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    if n > m {
        return Err(Error::Domain(format!("cannot assign {n} rows to {m} columns")));
    }
    if cost.len() != n * m {
        return Err(Error::Dim(format!("cost matrix has {} entries, expected {}", cost.len(), n * m)));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    if n == 0 {
        return Ok(Assignment { cols: Vec::new(), cost: 0.0 });
    }
    let all = vec![true; m];
    let first = solve(cost, n, m, &all);
    let opt = total(cost, m, first.cols.iter().copied().enumerate());
    let tol = 1e-9 * (1.0 + opt.abs());
    let mut cols = first.cols.clone();

    // Rows 0..i are fixed; try to lower row i's column while staying optimal.
    // Any optimal assignment only uses edges tight under the optimal duals.
    let mut taken = vec![false; m];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        if i + 1 < n {
            for j in 0..cols[i] {
                if taken[j] {
                    continue;
                }
                let reduced = cost[i * m + j] - first.u[i] - first.v[j];
                if reduced.abs() > tol {
                    continue;
                }
                let mut allowed: Vec<bool> = taken.iter().map(|t| !t).collect();
                allowed[j] = false;
                let rest_n = n - i - 1;
                let sub = &cost[(i + 1) * m..];
                if allowed.iter().filter(|&&a| a).count() < rest_n {
                    continue;
                }
                let s = solve(sub, rest_n, m, &allowed);
                let c = fixed_cost + cost[i * m + j] + total(sub, m, s.cols.iter().copied().enumerate());
                if c <= opt + tol {
                    cols[i] = j;
                    cols[i + 1..].copy_from_slice(&s.cols);
                    break;
                }
            }
        } else {
            // Last row: cheapest free tight column, smallest index first.
            let best = (0..m)
                .filter(|&j| !taken[j])
                .map(|j| (cost[i * m + j], j))
                .fold(None::<(f64, usize)>, |acc, (c, j)| match acc {
                    Some((bc, _)) if bc <= c + tol => acc,
                    _ => Some((c, j)),
                });
            if let Some((c, j)) = best {
                if j < cols[i] && c <= cost[i * m + cols[i]] + tol {
                    cols[i] = j;
                }
            }
        }
        taken[cols[i]] = true;
        fixed_cost += cost[i * m + cols[i]];
    }
    let cost_sum = total(cost, m, cols.iter().copied().enumerate());
    Ok(Assignment { cols, cost: cost_sum })
}
