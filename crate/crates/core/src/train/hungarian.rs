use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Injective assignment of predictions (rows) to targets (columns).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, target)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Per pair: the target's point order was reversed (map matching only).
    pub reversed: Vec<bool>,
    /// Sum of the chosen costs, accumulated in pair order.
    pub total_cost: f64,
}

impl MatchResult {
    /// Target matched to prediction `p`, if any.
    pub fn target_of(&self, p: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(q, _)| q == p).map(|&(_, t)| t)
    }
}

/// Minimum-cost assignment of `min(n, m)` pairs for a row-major `n x m`
/// cost matrix (shortest augmenting paths with row/column potentials).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Input("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost matrix has a non-finite entry".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult::default());
    }
    let mut pairs = if n <= m {
        solve(n, m, |i, j| cost[i][j])
    } else {
        solve(m, n, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(MatchResult {
        reversed: vec![false; pairs.len()],
        pairs,
        total_cost,
    })
}

/// Assigns every one of `n <= m` rows; returns `(row, col)`.
fn solve(n: usize, m: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based with column 0 as the virtual start of each augmenting path
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
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
    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_diagonal() {
        let c: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 0.0 } else { 10.0 }).collect())
            .collect();
        let r = hungarian(&c).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn three_by_three() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        // permutations: the minimum is 1 + 2 + 2 = 5 via (0,1), (1,0), (2,2)
        let r = hungarian(&c).unwrap();
        assert_eq!(r.total_cost, 5.0);
        assert_eq!(r.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn rectangular_and_degenerate() {
        assert_eq!(hungarian(&[vec![7.0]]).unwrap().pairs, vec![(0, 0)]);
        let wide = hungarian(&[vec![5.0, 1.0, 3.0]]).unwrap();
        assert_eq!(wide.pairs, vec![(0, 1)]);
        let tall = hungarian(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(tall.pairs, vec![(1, 0)]);
        assert!(hungarian(&[]).unwrap().pairs.is_empty());
        assert!(hungarian(&[vec![f64::NAN]]).unwrap_err().is_validation());
    }
}
