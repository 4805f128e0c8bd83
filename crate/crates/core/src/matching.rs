//! One-to-one proposal matching.
//!
//! The cost of pairing proposal `i` with ground-truth point `j` is
//! `alpha · ‖loc_i − loc_j‖ − p_obj(i) − p_cls(i, c_j)`; the minimum-cost
//! injective assignment of ground truth to proposals is found with the
//! Hungarian algorithm. Unassigned proposals are negatives.

use crate::error::{Error, Result};
use crate::types::{GroundTruthSet, ProposalSet};

/// `M×N` pairwise costs, proposals along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub alpha: f64,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "cost matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            alpha: 0.0,
        })
    }

    pub fn get(&self, proposal: usize, target: usize) -> f64 {
        self.values[proposal * self.cols + target]
    }

    /// Cost of an assignment given as target → proposal.
    pub fn total(&self, delta: &[usize]) -> f64 {
        delta.iter().enumerate().map(|(j, &i)| self.get(i, j)).sum()
    }
}

/// Ground truth `j` is paired with proposal `delta[j]`; everything else is negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub delta: Vec<usize>,
    /// Sorted ascending.
    pub negatives: Vec<usize>,
}

impl MatchResult {
    fn from_delta(delta: Vec<usize>, proposals: usize) -> Self {
        let mut taken = vec![false; proposals];
        for &i in &delta {
            taken[i] = true;
        }
        let negatives = (0..proposals).filter(|&i| !taken[i]).collect();
        Self { delta, negatives }
    }

    pub fn positives(&self) -> &[usize] {
        &self.delta
    }
}

pub fn build_cost_matrix(proposals: &ProposalSet, gt: &GroundTruthSet, alpha: f64) -> Result<CostMatrix> {
    let (m, n) = (proposals.len(), gt.len());
    if m < n {
        return Err(Error::Infeasible {
            proposals: m,
            targets: n,
        });
    }
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
    }
    let c = proposals.num_classes();
    let mut values = Vec::with_capacity(m * n);
    for i in 0..m {
        let (px, py) = proposals.coords[i];
        let obj = proposals.objectness[i].1;
        for p in &gt.points {
            if p.class_id >= c {
                return Err(Error::Validation(format!(
                    "ground-truth class {} outside {c} predicted classes",
                    p.class_id
                )));
            }
            let dist = (px - p.x).hypot(py - p.y);
            values.push(alpha * dist - obj - proposals.class_probs[i][p.class_id]);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cost matrix has non-finite entries".into()));
    }
    Ok(CostMatrix {
        rows: m,
        cols: n,
        values,
        alpha,
    })
}

/// Minimum-cost assignment of `n_rows` rows to distinct columns
/// (`n_rows <= n_cols`), returning the column for each row.
///
/// Shortest augmenting paths with dual potentials, O(n_rows² · n_cols).
/// Columns are scanned in index order and only strictly smaller reduced
/// costs displace the current candidate, so among equal-cost alternatives
/// lower column indices are taken first.
pub fn hungarian(n_rows: usize, n_cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(n_rows <= n_cols, "hungarian needs rows <= cols");
    if n_rows == 0 {
        return Vec::new();
    }
    // 1-based with a virtual column 0 as in the classical formulation.
    let mut u = vec![0.0f64; n_rows + 1];
    let mut v = vec![0.0f64; n_cols + 1];
    let mut owner = vec![0usize; n_cols + 1];
    let mut way = vec![0usize; n_cols + 1];
    for row in 1..=n_rows {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n_cols + 1];
        let mut used = vec![false; n_cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n_cols {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n_cols {
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
    let mut assignment = vec![0usize; n_rows];
    for j in 1..=n_cols {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

pub fn solve_assignment(costs: &CostMatrix) -> Result<MatchResult> {
    if costs.rows < costs.cols {
        return Err(Error::Infeasible {
            proposals: costs.rows,
            targets: costs.cols,
        });
    }
    if let Some(pos) = costs.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "cost entry ({}, {}) is {}",
            pos / costs.cols.max(1),
            pos % costs.cols.max(1),
            costs.values[pos]
        )));
    }
    // Targets are rows of the solver, proposals its columns.
    let delta = hungarian(costs.cols, costs.rows, |j, i| costs.get(i, j));
    Ok(MatchResult::from_delta(delta, costs.rows))
}

/// Builds the cost matrix and solves it; an empty ground truth makes every
/// proposal negative.
pub fn match_proposals(proposals: &ProposalSet, gt: &GroundTruthSet, alpha: f64) -> Result<MatchResult> {
    let costs = build_cost_matrix(proposals, gt, alpha)?;
    solve_assignment(&costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GroundTruthPoint;

    fn proposals(coords: &[(f64, f64)], obj: &[f64], cls: &[Vec<f64>]) -> ProposalSet {
        ProposalSet {
            coords: coords.to_vec(),
            objectness: obj.iter().map(|&p| (1.0 - p, p)).collect(),
            class_probs: cls.to_vec(),
        }
    }

    fn gt(points: &[(f64, f64, usize)]) -> GroundTruthSet {
        GroundTruthSet::new(
            points
                .iter()
                .map(|&(x, y, c)| GroundTruthPoint { x, y, class_id: c })
                .collect(),
        )
    }

    #[test]
    fn three_four_five_cost() {
        let p = proposals(&[(0.0, 0.0)], &[1.0], &[vec![1.0, 0.0]]);
        let e = build_cost_matrix(&p, &gt(&[(3.0, 4.0, 0)]), 0.05).unwrap();
        assert!((e.get(0, 0) - (-1.75)).abs() < 1e-15);
    }

    #[test]
    fn uniform_probabilities_without_distance_give_constant_columns() {
        let p = proposals(
            &[(0.0, 0.0), (5.0, 1.0), (9.0, 9.0)],
            &[0.5, 0.5, 0.5],
            &vec![vec![0.5, 0.5]; 3],
        );
        let e = build_cost_matrix(&p, &gt(&[(1.0, 1.0, 0), (7.0, 2.0, 1)]), 0.0).unwrap();
        for j in 0..2 {
            assert!((0..3).all(|i| e.get(i, j) == e.get(0, j)));
        }
        // Ties resolve to the lowest proposal indices.
        assert_eq!(solve_assignment(&e).unwrap().delta, vec![0, 1]);
    }

    #[test]
    fn too_few_proposals_is_infeasible() {
        let p = proposals(&[(0.0, 0.0)], &[0.5], &[vec![0.5, 0.5]]);
        let err = build_cost_matrix(&p, &gt(&[(1.0, 1.0, 0), (2.0, 2.0, 1)]), 0.05).unwrap_err();
        assert!(matches!(err, Error::Infeasible { proposals: 1, targets: 2 }));
    }

    #[test]
    fn dominant_diagonal_and_single_entry() {
        let e = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let r = solve_assignment(&e).unwrap();
        assert_eq!(r.delta, vec![0, 1]);
        assert_eq!(e.total(&r.delta), 2.0);
        for c in [-3.5, 0.0, 7.25] {
            let one = CostMatrix::new(1, 1, vec![c]).unwrap();
            assert_eq!(solve_assignment(&one).unwrap().delta, vec![0]);
        }
    }

    #[test]
    fn non_finite_cost_is_numeric_error() {
        let e = CostMatrix::new(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(solve_assignment(&e), Err(Error::Numeric(_))));
    }

    #[test]
    fn empty_ground_truth_makes_all_negative() {
        let p = proposals(&[(0.0, 0.0), (1.0, 1.0)], &[0.9, 0.1], &vec![vec![0.5, 0.5]; 2]);
        let r = match_proposals(&p, &GroundTruthSet::default(), 0.05).unwrap();
        assert!(r.delta.is_empty());
        assert_eq!(r.negatives, vec![0, 1]);
    }

    #[test]
    fn coincident_confident_proposals_match_their_points() {
        let p = proposals(
            &[(40.0, 40.0), (10.0, 10.0), (25.0, 5.0)],
            &[0.9, 0.9, 0.9],
            &[vec![0.05, 0.95], vec![0.95, 0.05], vec![0.95, 0.05]],
        );
        let g = gt(&[(10.0, 10.0, 0), (40.0, 40.0, 1), (25.0, 5.0, 0)]);
        let r = match_proposals(&p, &g, 0.05).unwrap();
        assert_eq!(r.delta, vec![1, 0, 2]);
        assert!(r.negatives.is_empty());
    }
}
