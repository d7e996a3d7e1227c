mod common;

use common::*;
use moe_upcycle::ctc::{ctc_loss, edit_distance, greedy_decode, min_frames};

#[test]
fn dp_matches_path_enumeration() {
    let r = ctc_oracle_suite();
    assert_eq!(r.cases, 6 * (1 + 4 + 15));
    assert_eq!(r.feasibility_mismatches, 0);
    assert!(r.max_path_diff <= 1e-6, "max diff {}", r.max_path_diff);
}

#[test]
fn label_probabilities_sum_to_one() {
    let r = ctc_oracle_suite();
    assert!(r.max_norm_err <= 1e-5, "{}", r.max_norm_err);
}

#[test]
fn worked_example() {
    assert!(ctc_worked_example_error() <= 1e-9);
}

#[test]
fn gradient_is_negative_occupancy() {
    // Every frame is occupied by exactly one symbol of some path.
    let mut r = rng(5);
    let lp = random_log_probs(&mut r, 6, 4);
    let res = ctc_loss(&lp, 6, 4, &[2, 1, 2]).unwrap();
    for row in res.grad.chunks(4) {
        let s: f64 = row.iter().sum();
        assert!((s + 1.0).abs() < 1e-9, "row sums to {s}");
        assert!(row.iter().all(|&g| g <= 1e-12));
    }
}

#[test]
fn infeasible_when_too_few_frames() {
    let lp = vec![(1.0f64 / 3.0).ln(); 6];
    assert_eq!(min_frames(&[1, 1]), 3);
    let r = ctc_loss(&lp, 2, 3, &[1, 1]).unwrap();
    assert!(!r.feasible && r.loss.is_infinite() && r.grad.is_empty());
    assert!(ctc_loss(&lp, 2, 3, &[1, 2]).unwrap().feasible);
}

#[test]
fn rejects_bad_labels_and_shapes() {
    let lp = vec![0.0; 6];
    assert!(ctc_loss(&lp, 2, 3, &[0]).is_err());
    assert!(ctc_loss(&lp, 2, 3, &[3]).is_err());
    assert!(ctc_loss(&lp, 3, 3, &[1]).is_err());
}

#[test]
fn greedy_collapses_then_drops_blanks() {
    // argmax path: 1 1 0 1 2 2 0
    let path = [1usize, 1, 0, 1, 2, 2, 0];
    let mut scores = vec![0.0f32; path.len() * 3];
    for (t, &c) in path.iter().enumerate() {
        scores[t * 3 + c] = 1.0;
    }
    assert_eq!(greedy_decode(&scores, 3), vec![1, 1, 2]);
    assert_eq!(collapse(&path), vec![1, 1, 2]);
}

#[test]
fn edit_distance_cases() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), (0, 0.0));
    assert_eq!(edit_distance::<u8>(&[], &[1, 2]), (2, 1.0));
    assert_eq!(edit_distance(&[1, 3], &[1, 2, 3]).0, 1);
    assert_eq!(edit_distance(&[2, 1], &[1, 2]).0, 2);
    assert_eq!(edit_distance::<u8>(&[4], &[]), (1, 1.0));
}
