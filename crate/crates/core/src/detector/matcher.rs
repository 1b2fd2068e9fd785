//! Optimal one-to-one assignment of predictions to targets.

use super::DetectorError;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(prediction, target)` pairs sorted by target index; one per target.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn prediction_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, t)| *t == target).map(|(p, _)| *p)
    }
}

/// Minimum-cost injective map from targets (columns) into predictions (rows)
/// for a `P × G` cost matrix with `P ≥ G`, by the shortest augmenting path
/// (Kuhn–Munkres with potentials), `O(G² · P)`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment, DetectorError> {
    let p = cost.len();
    let g = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != g) {
        return Err(DetectorError::Matching("ragged cost matrix".into()));
    }
    if p < g {
        return Err(DetectorError::Matching(format!("{p} predictions cannot cover {g} targets")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(DetectorError::Matching("non-finite cost".into()));
    }
    if g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Rows of the working problem are targets (n = g), columns predictions (m = p).
    let (n, m) = (g, p);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    // owner[j] = target row currently assigned to column j (1-based, 0 = free)
    let mut owner = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
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
                let cur = a(i0, j) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|&(_, t)| t);
    let total_cost = pairs.iter().map(|&(pr, t)| cost[pr][t]).sum();
    Ok(Assignment { pairs, total_cost })
}
