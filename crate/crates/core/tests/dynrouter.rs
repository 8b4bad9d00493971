mod common;

use common::{max_abs_diff, tiny_config, tiny_data, tiny_routed};
use proptest::prelude::*;
use scalemoe::autodiff::Activation;
use scalemoe::dynrouter::{
    expert_norms, harvest_ffn_inputs, moe_forward, moe_forward_predicted, prune_ffn, train_router, RouterConfig,
    TrueNorms,
};
use scalemoe::moefy::moefy_model;
use scalemoe::{gate, ClusterConfig, ForwardMode, Gating, TauSchedule, Tensor};

fn preds() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(0.5), 0.0f64..10.0], 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]
    #[test]
    fn raising_tau_only_removes_experts(p in preds(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let wide = gate(&p, lo);
        let narrow = gate(&p, hi);
        prop_assert!(narrow.iter().zip(&wide).all(|(n, w)| !n || *w));
    }

    #[test]
    fn maxima_always_survive(p in preds(), tau in 0.0f64..=1.0) {
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mask = gate(&p, tau);
        for (v, m) in p.iter().zip(&mask) {
            if *v == max {
                prop_assert!(*m);
            }
        }
    }

    #[test]
    fn gating_ignores_positive_rescaling(p in preds(), tau in 0.0f64..=1.0, k in -20i32..20) {
        let c = 2f64.powi(k);
        let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
        prop_assert_eq!(gate(&scaled, tau), gate(&p, tau));
    }

    #[test]
    fn boundary_thresholds(p in preds()) {
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(gate(&p, 0.0).iter().all(|m| *m));
        let top: Vec<bool> = p.iter().map(|v| *v == max).collect();
        prop_assert_eq!(gate(&p, 1.0), top);
    }
}

#[test]
fn zero_threshold_routing_is_the_dense_model() {
    let (dense, routed, data) = tiny_routed(4, 1);
    let k = dense.config.num_scales();
    for mode in [ForwardMode::DynkMax, ForwardMode::Oracle] {
        let gating = Gating::new(mode, TauSchedule::uniform(1, 0.0, k).unwrap());
        for s in &data {
            let a = dense.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
            let (b, trace) = routed.forward_traced(&s.hierarchy, s.class_id, Some(&gating)).unwrap();
            assert!(max_abs_diff(a.data(), b.data()) < 1e-10);
            assert!(trace.records.iter().all(|r| r.experts_selected() == 4));
            assert!(trace.records.iter().all(|r| r.router_ran == (mode == ForwardMode::DynkMax)));
        }
    }
}

#[test]
fn oracle_selection_follows_true_norms() {
    let (_, routed, data) = tiny_routed(4, 2);
    let inputs = harvest_ffn_inputs(&routed, &data).unwrap();
    for (l, x) in inputs.iter().enumerate() {
        let layer = routed.blocks[l].ffn.as_moe().unwrap();
        for tau in [0.1, 0.4, 0.7, 0.95] {
            let oracle = moe_forward(layer, x, Some(tau), ForwardMode::Oracle, None, None).unwrap();
            let swapped =
                moe_forward_predicted(layer, x, tau, &TrueNorms(&layer.experts), true, None, None).unwrap();
            assert_eq!(oracle.output.data(), swapped.output.data());
            for r in 0..x.rows() {
                let norms = expert_norms(&layer.experts, x.row(r)).unwrap();
                let mask = gate(&norms, tau);
                assert_eq!(oracle.selections[r], mask);
                let row = Tensor::new(vec![1, x.cols()], x.row(r).to_vec()).unwrap();
                let mut expected = layer.experts.b2.data().to_vec();
                for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                    let y = layer.experts.expert_forward(i, &row).unwrap();
                    for (e, v) in expected.iter_mut().zip(y.data()) {
                        *e += v;
                    }
                }
                assert!(max_abs_diff(&expected, oracle.output.row(r)) < 1e-12);
            }
        }
    }
}

#[test]
fn router_training_lowers_heldout_error() {
    let cfg = tiny_config(Activation::Relu);
    let data = tiny_data(&cfg, 3, 48);
    let dense = common::noisy_model(&cfg, 3, 0.3);
    let (moe, _) = moefy_model(&dense, &ClusterConfig { num_experts: 4, ..ClusterConfig::default() }).unwrap();
    let config = RouterConfig { epochs: 3, ..RouterConfig::default() };
    let (routed, reports) = train_router(&moe, &data[..32], &data[32..], &config).unwrap();
    assert_eq!(reports.len(), cfg.depth);
    for r in &reports {
        assert_eq!(r.train_pairs, 32 * cfg.seq_len());
        assert_eq!(r.epoch_train_mse.len(), 3);
        assert!(r.final_heldout_mse < r.initial_heldout_mse, "{r:?}");
    }
    assert!(routed.blocks.iter().all(|b| b.ffn.as_moe().unwrap().router.is_some()));
    let none = RouterConfig { epochs: 0, ..config };
    let (untouched, _) = train_router(&routed, &data[..32], &data[32..], &none).unwrap();
    assert_eq!(untouched, routed);
}

#[test]
fn dynk_without_router_is_an_error() {
    let cfg = tiny_config(Activation::Relu);
    let dense = common::noisy_model(&cfg, 0, 0.3);
    let (moe, _) = moefy_model(&dense, &ClusterConfig { num_experts: 4, ..ClusterConfig::default() }).unwrap();
    let s = &tiny_data(&cfg, 0, 1)[0];
    let gating = Gating::new(ForwardMode::DynkMax, TauSchedule::uniform(1, 0.5, 3).unwrap());
    assert!(moe.forward_logits(&s.hierarchy, s.class_id, Some(&gating)).is_err());
}

#[test]
fn pruning_keeps_the_requested_unit_count() {
    let (_, routed, data) = tiny_routed(4, 4);
    let d_ff = routed.config.d_ff;
    for keep in [0.1, 0.25, 0.5, 0.8] {
        let pruned = prune_ffn(&routed, keep, &data, &[2]).unwrap();
        let expected = ((keep * d_ff as f64).round() as usize).max(1);
        for b in &pruned.blocks {
            let p = b.prune.as_ref().unwrap();
            assert_eq!(p.kept(), expected);
            assert_eq!(p.scales, vec![2]);
        }
        let bounds = routed.config.boundaries();
        for s in &data[..4] {
            let a = routed.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
            let b = pruned.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
            let end = bounds[1].end * routed.config.vocab;
            assert_eq!(&a.data()[..end], &b.data()[..end]);
        }
    }
    let full = prune_ffn(&routed, 1.0, &data, &[0, 1, 2]).unwrap();
    for s in &data[..4] {
        let a = routed.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
        let b = full.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
        assert_eq!(a.data(), b.data());
    }
    assert!(prune_ffn(&routed, 0.0, &data, &[2]).is_err());
    assert!(prune_ffn(&routed, 0.5, &data, &[3]).is_err());
}

#[test]
fn single_scale_gating_leaves_other_scales_dense() {
    let (_, routed, data) = tiny_routed(4, 5);
    let mut gating = Gating::new(ForwardMode::DynkMax, TauSchedule::uniform(1, 1.0, 3).unwrap());
    gating.only_scale = Some(1);
    let (_, trace) = routed.forward_traced(&data[0].hierarchy, data[0].class_id, Some(&gating)).unwrap();
    for r in &trace.records {
        if r.scale == 1 {
            assert!(r.router_ran);
        } else {
            assert!(!r.router_ran);
            assert_eq!(r.experts_selected(), 4);
            assert_eq!(r.units as usize, routed.config.d_ff);
        }
    }
}
