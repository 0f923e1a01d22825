//! Exhaustive minimum-cost assignment.

use cvanet::head::hungarian_match;

/// Minimum over every injective assignment of rows to columns.
pub fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let m = cost.first().map_or(0, Vec::len);
    go(cost, 0, &mut vec![false; m], 0.0, &mut best);
    if cost.is_empty() {
        0.0
    } else {
        best
    }
}

pub fn check(cost: &[Vec<f64>]) {
    let r = hungarian_match(cost).unwrap();
    assert_eq!(r.assignment.len(), cost.len());
    let mut seen = r.assignment.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), cost.len(), "assignment is not injective: {:?}", r.assignment);
    let realised: f64 = r.assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    assert_eq!(r.cost, realised);
    assert_eq!(realised, brute_force(cost), "cost matrix {cost:?}");
}
