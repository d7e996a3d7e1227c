use moe_upcycle_web::*;

#[test]
fn uniform_router_balances_perfectly() {
    let a = explore_router(&RouterQuery { router_std: 0.0, ..Default::default() }).unwrap();
    // Equal logits: every token's argmax and top-k go to the lowest indices.
    assert_eq!(a.dispatch[0], 1.0);
    assert!((a.balance_loss - 1.0).abs() < 1e-6);
    assert_eq!(a.engaged, 2);
}

#[test]
fn skew_concentrates_routing() {
    let spread = explore_router(&RouterQuery::default()).unwrap();
    let skewed = explore_router(&RouterQuery { skew: 8.0, ..Default::default() }).unwrap();
    assert!(skewed.balance_loss > spread.balance_loss);
    assert!(skewed.dispatch[0] > 0.9);
    assert!((spread.topk_share.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((spread.mean_prob.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn router_rejects_bad_topk() {
    assert!(explore_router(&RouterQuery { top_k: 9, ..Default::default() }).is_err());
}

#[test]
fn upcycling_keeps_outputs() {
    for (n, k) in [(2, 1), (8, 2), (4, 4)] {
        let a = upcycle_gap(&UpcycleQuery { n_experts: n, top_k: k, ..Default::default() }).unwrap();
        assert!(a.max_abs_diff <= 1e-5, "N={n} k={k}: {}", a.max_abs_diff);
        assert_eq!(a.decode_mismatches, 0);
        assert!(a.moe_params > a.dense_params);
        assert!((a.first_layer_share.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn flop_curve_grows_by_router_only() {
    let q = FlopQuery::default();
    let a = flop_curve(&q).unwrap();
    for s in &a.series {
        for w in s.points.windows(2) {
            assert_eq!(w[1].1 - w[0].1, (q.n_blocks * q.d_model) as u64);
        }
    }
    let k1 = &a.series[0];
    assert_eq!(k1.points[0], (1, a.dense_total + (q.n_blocks * q.d_model) as u64));
}

#[test]
fn json_entry_points_round_trip() {
    let out = explore_router_json(r#"{"n_experts": 4, "top_k": 1, "tokens": 32}"#).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["dispatch"].as_array().unwrap().len(), 4);
    let out = flop_curve_json("{}").unwrap();
    assert!(out.contains("dense_total"));
    let out = upcycle_gap_json(r#"{"batches": 2}"#).unwrap();
    assert!(out.contains("max_abs_diff"));
}
