use lvtq_review::{reviewer_order, summarize, Grade, ScoreGrid};
use proptest::prelude::*;

fn grades() -> impl Strategy<Value = Vec<Grade>> {
    let grid = ScoreGrid::default().values();
    proptest::collection::btree_map((0u8..3, 0u8..4, 0u32..5), proptest::sample::select(grid), 1..40).prop_map(
        |m| {
            m.into_iter()
                .map(|((r, p, s), score)| Grade {
                    reviewer_id: format!("r{r}"),
                    patient_id: format!("p{p}"),
                    slice_index: s,
                    score,
                    timestamp_ms: 0,
                })
                .collect()
        },
    )
}

proptest! {
    #[test]
    fn permutation_invariant(g in grades(), seed in any::<u64>()) {
        let mut shuffled = g.clone();
        let order = reviewer_order(shuffled.len(), seed, "x");
        shuffled = order.iter().map(|&i| g[i].clone()).collect();
        prop_assert_eq!(summarize(&g, 3.5), summarize(&shuffled, 3.5));
    }

    #[test]
    fn percent_valid_monotone(g in grades(), a in 0.0f64..6.0, b in 0.0f64..6.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let plo = summarize(&g, lo).unwrap().percent_valid;
        let phi = summarize(&g, hi).unwrap().percent_valid;
        prop_assert!(phi <= plo);
        prop_assert!((0.0..=100.0).contains(&plo));
    }

    #[test]
    fn order_is_a_permutation(n in 0usize..200, seed in any::<u64>()) {
        let mut o = reviewer_order(n, seed, "rev");
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }
}
