use crate::error::{Error, Result};

/// Optimal injective assignment of ground-truth rows to query columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[j]` is the query matched to ground truth `j`.
    pub assignment: Vec<usize>,
    /// `Σ_j cost[j][assignment[j]]`, summed in ground-truth order.
    pub cost: f64,
}

impl MatchResult {
    /// Ground-truth index matched to each query, if any.
    pub fn query_targets(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for (j, &q) in self.assignment.iter().enumerate() {
            out[q] = Some(j);
        }
        out
    }
}

/// Exact minimum-cost assignment for an `n_gt×N` cost matrix with
/// `n_gt ≤ N`, by the shortest augmenting path method with row/column
/// potentials (`O(n_gt²·N)`).
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 {
        return Ok(MatchResult { assignment: Vec::new(), cost: 0.0 });
    }
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Matching("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(Error::Matching(format!("{n} ground-truth objects but only {m} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Matching("cost matrix has non-finite entries".into()));
    }

    // 1-based: index 0 of `col_row` is the virtual column used as the root
    // of each augmenting search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut col_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
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
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if col_row[j] != 0 {
            assignment[col_row[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    Ok(MatchResult { assignment, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases() {
        let r = hungarian_match(&[vec![5.0]]).unwrap();
        assert_eq!((r.assignment, r.cost), (vec![0], 5.0));
        let r = hungarian_match(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!((r.assignment, r.cost), (vec![0, 1], 0.0));
        let r = hungarian_match(&[vec![3.0, 1.0, 2.0]]).unwrap();
        assert_eq!(r.assignment, vec![1]);
    }

    #[test]
    fn too_many_ground_truths() {
        assert!(hungarian_match(&[vec![1.0], vec![2.0]]).is_err());
        assert!(hungarian_match(&[vec![f64::NAN, 1.0]]).is_err());
        assert_eq!(hungarian_match(&[]).unwrap().assignment, Vec::<usize>::new());
    }

    #[test]
    fn query_targets_inverts_assignment() {
        let r = MatchResult { assignment: vec![2, 0], cost: 0.0 };
        assert_eq!(r.query_targets(4), vec![Some(1), None, Some(0), None]);
    }
}
