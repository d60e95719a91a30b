//! Minimum-cost bipartite assignment.

use crate::error::{Error, Result};

/// A one-to-one assignment between predictions (rows) and targets (columns).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl MatchSet {
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }
}

/// Kuhn-Munkres with potentials, O(n^2 m) for `n <= m`.
/// Returns for each row the column it is assigned to.
fn solve(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; 0 means free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
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
    let mut assigned = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assigned[p[j] - 1] = j - 1;
        }
    }
    assigned
}

/// Optimal assignment on an `n x m` cost matrix; `min(n, m)` pairs are made.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchSet> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchSet {
            pairs: vec![],
            unmatched_rows: (0..n).collect(),
            unmatched_cols: (0..m).collect(),
        });
    }
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        solve(cost, n, m).into_iter().enumerate().collect()
    } else {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        solve(&t, m, n).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; m];
    for &(i, j) in &pairs {
        row_used[i] = true;
        col_used[j] = true;
    }
    Ok(MatchSet {
        pairs,
        unmatched_rows: (0..n).filter(|&i| !row_used[i]).collect(),
        unmatched_cols: (0..m).filter(|&j| !col_used[j]).collect(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injective maps of the smaller side.
    pub(crate) fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return 0.0;
        }
        fn rec(cost: &[Vec<f64>], i: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
            let rows = if transpose { cost[0].len() } else { cost.len() };
            let cols = if transpose { cost.len() } else { cost[0].len() };
            if i == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cols {
                if used[j] {
                    continue;
                }
                used[j] = true;
                let c = if transpose { cost[j][i] } else { cost[i][j] };
                best = best.min(c + rec(cost, i + 1, used, transpose));
                used[j] = false;
            }
            best
        }
        let transpose = n > m;
        let cols = if transpose { n } else { m };
        rec(cost, 0, &mut vec![false; cols], transpose)
    }

    #[test]
    fn two_by_two() {
        let c = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let m = hungarian(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total(&c), 1.0);
    }

    #[test]
    fn diagonal_zero() {
        let c: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 0.0 } else { 1.0 + (i * j) as f64 }).collect())
            .collect();
        assert_eq!(hungarian(&c).unwrap().pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_rectangular() {
        assert_eq!(hungarian(&[]).unwrap(), MatchSet::default());
        let wide = vec![vec![5.0, 1.0, 3.0]];
        let m = hungarian(&wide).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.unmatched_cols, vec![0, 2]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        let m = hungarian(&tall).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_rows, vec![0, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&[vec![1.0, f64::NAN]]).is_err());
        assert!(hungarian(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=7, 1usize..=7).prop_flat_map(|(n, m)| {
            proptest::collection::vec(proptest::collection::vec(-50i32..50, m), n)
                .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(c in matrix()) {
            let m = hungarian(&c).unwrap();
            prop_assert_eq!(m.pairs.len(), c.len().min(c[0].len()));
            prop_assert_eq!(m.total(&c), brute_force(&c));
            let mut rows: Vec<_> = m.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = m.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), m.pairs.len());
            prop_assert_eq!(cols.len(), m.pairs.len());
        }
    }
}
