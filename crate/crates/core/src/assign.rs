//! Per-class minimum-cost object correspondence.
//!
//! Objects are only matched within their class. The cost of a pair is the
//! Euclidean distance between translations, and the optimal bijection per
//! class group comes from the Hungarian method. Among equal-cost optima the
//! lexicographically smallest mapping wins.

use crate::error::{Error, Result};
use crate::scene::{dist, Scene};

/// Groups larger than this skip the lexicographic tie-break refinement,
/// which costs O(n⁵).
const TIE_BREAK_LIMIT: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[i]` is the target index matched to source object `i`.
    pub mapping: Vec<usize>,
    /// Sum of pair distances, accumulated in source-index order.
    pub total_cost: f64,
}

/// Minimum-cost bijection between `source` and `target` objects of the same
/// class.
pub fn match_scenes(source: &Scene, target: &Scene) -> Result<Assignment> {
    let classes = source.class_count.max(target.class_count);
    let mut src_groups = vec![Vec::new(); classes];
    let mut dst_groups = vec![Vec::new(); classes];
    for (i, o) in source.objects.iter().enumerate() {
        src_groups[o.class_id].push(i);
    }
    for (j, o) in target.objects.iter().enumerate() {
        dst_groups[o.class_id].push(j);
    }
    for (class, (s, d)) in src_groups.iter().zip(&dst_groups).enumerate() {
        if s.len() != d.len() {
            return Err(Error::ClassMultisetMismatch {
                class,
                source_count: s.len(),
                target_count: d.len(),
            });
        }
    }

    let mut mapping = vec![usize::MAX; source.objects.len()];
    for (src, dst) in src_groups.iter().zip(&dst_groups) {
        if src.is_empty() {
            continue;
        }
        let cost: Vec<Vec<f64>> = src
            .iter()
            .map(|&i| {
                dst.iter()
                    .map(|&j| dist(source.objects[i].translation, target.objects[j].translation))
                    .collect()
            })
            .collect();
        let local = if src.len() <= TIE_BREAK_LIMIT {
            lexicographic_min_assignment(&cost)
        } else {
            hungarian(&cost).0
        };
        for (a, &b) in local.iter().enumerate() {
            mapping[src[a]] = dst[b];
        }
    }

    let total_cost = mapping
        .iter()
        .enumerate()
        .map(|(i, &j)| dist(source.objects[i].translation, target.objects[j].translation))
        .sum();
    Ok(Assignment {
        mapping,
        total_cost,
    })
}

/// Mean per-object transport distance between `pred` and `gt`.
pub fn emd_to_gt(pred: &Scene, gt: &Scene) -> Result<f64> {
    let a = match_scenes(pred, gt)?;
    Ok(a.total_cost / pred.objects.len() as f64)
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns the row-to-column mapping and its cost. Shortest augmenting path
/// formulation with row/column potentials, O(n³).
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    debug_assert!(cost.iter().all(|row| row.len() == n));

    // 1-based potentials; index 0 is the virtual root column.
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
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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

    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[p[j] - 1] = j - 1;
    }
    let total = mapping.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (mapping, total)
}

/// Optimal assignment, preferring the lexicographically smallest mapping
/// among optima. Rows are fixed one at a time to the smallest column that
/// keeps the remaining subproblem optimal.
fn lexicographic_min_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let (_, best) = hungarian(cost);
    let tol = 1e-12 * (1.0 + best.abs());

    let mut mapping = Vec::with_capacity(n);
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (slot, &col) in free_cols.iter().enumerate() {
            let remaining: Vec<usize> = free_cols
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != slot)
                .map(|(_, &c)| c)
                .collect();
            let sub: Vec<Vec<f64>> = rest_rows
                .iter()
                .map(|&r| remaining.iter().map(|&c| cost[r][c]).collect())
                .collect();
            let (_, sub_cost) = hungarian(&sub);
            if fixed_cost + cost[row][col] + sub_cost <= best + tol {
                chosen = Some(slot);
                fixed_cost += cost[row][col];
                break;
            }
        }
        // The optimum itself is always feasible, so some slot qualifies.
        let slot = chosen.unwrap_or(0);
        mapping.push(free_cols.remove(slot));
    }
    mapping
}
