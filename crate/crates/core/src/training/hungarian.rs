use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// One-to-one matching of ground truths to predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs, sorted by ground truth.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions without a ground truth, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Ground truth matched to prediction `p`, if any.
    pub fn gt_of(&self, p: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(q, _)| q == p).map(|&(_, j)| j)
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, j)| cost[p][j]).sum()
    }

    /// Checks the pairs are injective and index into `n` predictions and `gts` ground truths.
    pub fn validate(&self, n: usize, gts: usize) -> Result<()> {
        let mut seen_p = vec![false; n];
        let mut seen_g = vec![false; gts];
        for &(p, j) in &self.pairs {
            if p >= n || j >= gts || std::mem::replace(&mut seen_p[p], true) || std::mem::replace(&mut seen_g[j], true) {
                return Err(TrainError::Assignment(format!("pair ({p}, {j}) invalid for {n} predictions, {gts} targets")));
            }
        }
        for &p in &self.unmatched {
            if p >= n || std::mem::replace(&mut seen_p[p], true) {
                return Err(TrainError::Assignment(format!("unmatched prediction {p} invalid")));
            }
        }
        Ok(())
    }
}

/// Minimum-cost assignment of every column (ground truth) of `cost[pred][gt]`
/// to a distinct row (prediction). Needs `G <= N`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(TrainError::Assignment("ragged cost matrix".into()));
    }
    if g > n {
        return Err(TrainError::Assignment(format!("{g} targets but only {n} predictions")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(TrainError::NonFiniteCost);
    }
    // shortest augmenting paths with potentials; ground truths are the rows
    // being assigned, predictions the columns (1-based, 0 is a sentinel)
    let inf = f64::INFINITY;
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=g {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[col - 1][r0 - 1] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n).filter(|&c| owner[c] != 0).map(|c| (c - 1, owner[c] - 1)).collect();
    pairs.sort_by_key(|&(_, j)| j);
    let unmatched = (1..=n).filter(|&c| owner[c] == 0).map(|c| c - 1).collect();
    Ok(Assignment { pairs, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&[vec![1.0, 2.0], vec![2.0, 1.0]]), 2.0);
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let c: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 0.0 } else { 100.0 }).collect()).collect();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn more_predictions_than_targets() {
        let a = hungarian(&[vec![5.0, 1.0], vec![0.0, 9.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.unmatched, vec![2]);
        a.validate(3, 2).unwrap();
    }

    #[test]
    fn errors() {
        assert!(matches!(hungarian(&[vec![f64::NAN]]), Err(TrainError::NonFiniteCost)));
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        let empty = hungarian(&[vec![], vec![]]).unwrap();
        assert_eq!(empty.unmatched, vec![0, 1]);
    }
}
