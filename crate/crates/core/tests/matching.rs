use cellpoint::matching::{build_cost_matrix, match_proposals, solve_assignment, CostMatrix};
use cellpoint::types::{GroundTruthPoint, GroundTruthSet, ProposalSet};
use cellpoint::Error;
use proptest::prelude::*;

/// Exhaustive minimum over all injective maps from columns to rows.
fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, j: usize, used: &mut Vec<bool>, acc: &mut Vec<usize>, best: &mut f64) {
        if j == c.cols {
            *best = best.min(c.total(acc));
            return;
        }
        for i in 0..c.rows {
            if !used[i] {
                used[i] = true;
                acc.push(i);
                go(c, j + 1, used, acc, best);
                acc.pop();
                used[i] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.rows], &mut Vec::new(), &mut best);
    best
}

fn matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=6)
        .prop_flat_map(|m| (Just(m), 0..=m))
        .prop_flat_map(|(m, n)| {
            (Just(m), Just(n), prop::collection::vec(-50i32..50, m * n))
        })
        .prop_map(|(m, n, v)| CostMatrix::new(m, n, v.into_iter().map(f64::from).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn integer_costs_reach_the_brute_force_minimum(c in matrix()) {
        let r = solve_assignment(&c).unwrap();
        prop_assert_eq!(c.total(&r.delta), brute_force(&c));
    }

    #[test]
    fn assignment_is_injective_and_partitions_rows(c in matrix()) {
        let r = solve_assignment(&c).unwrap();
        prop_assert_eq!(r.delta.len(), c.cols);
        let mut all: Vec<usize> = r.delta.iter().chain(&r.negatives).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..c.rows).collect::<Vec<_>>());
    }

    #[test]
    fn real_costs_reach_the_brute_force_minimum(
        (m, n, v) in (1usize..=5).prop_flat_map(|m| (Just(m), 0..=m))
            .prop_flat_map(|(m, n)| (Just(m), Just(n), prop::collection::vec(-3.0f64..3.0, m * n)))
    ) {
        let c = CostMatrix::new(m, n, v).unwrap();
        let r = solve_assignment(&c).unwrap();
        prop_assert_eq!(c.total(&r.delta), brute_force(&c));
    }
}

#[test]
fn wide_matrix_is_infeasible() {
    let c = CostMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
    assert!(matches!(solve_assignment(&c), Err(Error::Infeasible { proposals: 1, targets: 2 })));
}

#[test]
fn ties_prefer_lower_proposal_indices() {
    let c = CostMatrix::new(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
    assert_eq!(solve_assignment(&c).unwrap().delta, vec![0]);
}

#[test]
fn cost_matrix_combines_distance_and_probabilities() {
    let proposals = ProposalSet {
        coords: vec![(0.0, 0.0), (10.0, 0.0)],
        objectness: vec![(0.2, 0.8), (0.6, 0.4)],
        class_probs: vec![vec![0.7, 0.3], vec![0.1, 0.9]],
    };
    let gt = GroundTruthSet::new(vec![GroundTruthPoint { x: 3.0, y: 4.0, class_id: 1 }]);
    let c = build_cost_matrix(&proposals, &gt, 0.05).unwrap();
    assert!((c.get(0, 0) - (0.05 * 5.0 - 0.8 - 0.3)).abs() < 1e-15);
    let d1 = (7.0f64).hypot(4.0);
    assert!((c.get(1, 0) - (0.05 * d1 - 0.4 - 0.9)).abs() < 1e-15);
    let r = match_proposals(&proposals, &gt, 0.05).unwrap();
    // the farther proposal wins on confidence: -0.897 < -0.85
    assert_eq!(r.delta, vec![1]);
    assert_eq!(r.negatives, vec![0]);
}

#[test]
fn negative_alpha_is_a_contract_error() {
    let proposals = ProposalSet {
        coords: vec![(0.0, 0.0)],
        objectness: vec![(0.5, 0.5)],
        class_probs: vec![vec![0.5, 0.5]],
    };
    let gt = GroundTruthSet::new(vec![GroundTruthPoint { x: 0.0, y: 0.0, class_id: 0 }]);
    assert!(matches!(build_cost_matrix(&proposals, &gt, -1.0), Err(Error::Contract(_))));
}
