mod support;

use pit_core::retrieval::{evaluate_distances, ItemMeta};

use support::oracle::{compare_with_oracle, oracle};

#[test]
fn evaluate_matches_brute_force_exactly() {
    let (matched, evaluated, first_bad) = compare_with_oracle(1000, 2024);
    assert_eq!(matched, 1000, "{first_bad:?}");
    assert!(evaluated > 800, "only {evaluated} instances had a valid query");
}

#[test]
fn oracle_reproduces_the_hand_case() {
    let meta = |person_id, camera_id, video_id| ItemMeta { person_id, camera_id, video_id };
    let q = [meta(0, 0, 9)];
    let g = [meta(0, 1, 0), meta(1, 1, 1), meta(0, 1, 2)];
    let dist = vec![vec![0.1, 0.2, 0.3]];
    // hits at ranks 1 and 3, evaluated in f64 (one ulp below the literal 5.0 / 6.0)
    let five_sixths = 0.5 * (1.0 / 1.0 + 2.0 / 3.0);
    assert_eq!(oracle(&dist, &q, &g).map, Some(five_sixths));
    assert_eq!(evaluate_distances(&dist, &q, &g).unwrap().map, five_sixths);
}
