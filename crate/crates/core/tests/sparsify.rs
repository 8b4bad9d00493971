mod common;

use common::{combined_loss_grad_error, noisy_model, preactivation_margin, tiny_config, tiny_data};
use proptest::prelude::*;
use scalemoe::autodiff::Activation;
use scalemoe::model::ForwardObserver;
use scalemoe::sparsify::{combined_loss, finetune_sparse, hoyer, relufy, sparsity_report, SparsifyConfig};
use scalemoe::{NextScaleModel, Tensor};

fn direct_hoyer(h: &[f64]) -> f64 {
    let l1: f64 = h.iter().map(|v| v.abs()).sum();
    let l2: f64 = h.iter().map(|v| v * v).sum();
    l1 * l1 / l2
}

#[test]
fn hoyer_reference_values() {
    assert!((hoyer(&[0.0, 0.0, 2.5, 0.0]) - 1.0).abs() < 1e-12);
    for d in 1..=64 {
        assert!((hoyer(&vec![0.7; d]) - d as f64).abs() < 1e-12);
    }
    assert!((hoyer(&[3.0, 4.0]) - 1.96).abs() < 1e-12);
}

proptest! {
    #[test]
    fn hoyer_is_scale_invariant_and_bounded(
        h in prop::collection::vec(-5.0f64..5.0, 1..48),
        c in 1e-3f64..1e3,
    ) {
        let nnz = h.iter().filter(|v| **v != 0.0).count();
        prop_assume!(nnz > 0);
        let base = hoyer(&h);
        let scaled: Vec<f64> = h.iter().map(|v| v * c).collect();
        prop_assert!((hoyer(&scaled) - base).abs() < 1e-12);
        prop_assert!((base - direct_hoyer(&h)).abs() < 1e-12);
        prop_assert!(base >= 1.0 - 1e-12);
        prop_assert!(base <= nnz as f64 + 1e-12);
    }
}

struct HiddenHoyer {
    sums: Vec<f64>,
    rows: Vec<usize>,
}

impl ForwardObserver for HiddenHoyer {
    fn ffn_hidden(&mut self, layer: usize, _scale: usize, h: &Tensor) {
        for r in 0..h.rows() {
            self.sums[layer] += direct_hoyer(h.row(r));
            self.rows[layer] += 1;
        }
    }
}

#[test]
fn combined_loss_is_ce_plus_weighted_block_mean_hoyer() {
    let cfg = tiny_config(Activation::Relu);
    let m = noisy_model(&cfg, 7, 0.3);
    let data = tiny_data(&cfg, 3, 5);
    let mut expected_ce = 0.0;
    let mut expected_hoyer = 0.0;
    for s in &data {
        expected_ce += m.evaluate(std::slice::from_ref(s), None, false).unwrap().nll;
        let mut obs = HiddenHoyer {
            sums: vec![0.0; cfg.depth],
            rows: vec![0; cfg.depth],
        };
        m.observe(&s.hierarchy, s.class_id, None, &mut obs).unwrap();
        let per_layer: f64 = obs.sums.iter().zip(&obs.rows).map(|(s, n)| s / *n as f64).sum();
        expected_hoyer += per_layer / cfg.depth as f64;
    }
    expected_ce /= data.len() as f64;
    expected_hoyer /= data.len() as f64;

    let plain = combined_loss(&m, &data, 0.0).unwrap();
    assert_eq!(plain.total, plain.ce);
    assert!((plain.ce - expected_ce).abs() < 1e-10);
    for alpha in [0.01, 0.1, 1.0] {
        let l = combined_loss(&m, &data, alpha).unwrap();
        assert!((l.hoyer - expected_hoyer).abs() < 1e-10);
        assert!((l.total - (expected_ce + alpha * expected_hoyer)).abs() < 1e-10);
    }
}

#[test]
fn combined_loss_gradient_matches_central_differences() {
    let cfg = tiny_config(Activation::Relu);
    let data = tiny_data(&cfg, 17, 32);
    let mut checked = 0;
    for (seed, s) in data.iter().enumerate() {
        let m = noisy_model(&cfg, 100 + seed as u64, 0.5);
        let (min_abs, min_row_max) = preactivation_margin(&m, s);
        if min_abs < 1e-3 || min_row_max < 1e-3 {
            continue;
        }
        let err = combined_loss_grad_error(&m, s, 0.1, 1e-6);
        assert!(err < 1e-4, "gradient error {err} at point {seed}");
        checked += 1;
        if checked == 3 {
            break;
        }
    }
    assert_eq!(checked, 3);
}

#[test]
fn relufy_swaps_only_the_activation() {
    let cfg = tiny_config(Activation::Gelu);
    let m = noisy_model(&cfg, 0, 0.1);
    let r = relufy(&m);
    assert_eq!(r.config.activation, Activation::Relu);
    assert_eq!(r.blocks, m.blocks);
    assert_eq!(r.tok_emb, m.tok_emb);
}

#[test]
fn fine_tuning_needs_relu() {
    let cfg = tiny_config(Activation::Gelu);
    let data = tiny_data(&cfg, 0, 4);
    let m = NextScaleModel::init(&cfg, 0).unwrap();
    assert!(finetune_sparse(&m, &data, &data, &SparsifyConfig::default()).is_err());
}

#[test]
fn stronger_penalty_gives_more_zeros() {
    let cfg = tiny_config(Activation::Gelu);
    let data = tiny_data(&cfg, 21, 64);
    let m = relufy(&common::briefly_trained(&cfg, &data, 1));
    let run = |alpha: f64| {
        let c = SparsifyConfig {
            alpha,
            lr: 2e-3,
            epochs: 3,
            ..SparsifyConfig::default()
        };
        finetune_sparse(&m, &data, &data, &c).unwrap().1
    };
    let none = run(0.0);
    let strong = run(1.0);
    assert!(strong.mean_zero_fraction() > none.mean_zero_fraction());
    for row in strong.zero_fraction.iter().chain(&none.zero_fraction) {
        assert_eq!(row.len(), cfg.num_scales());
        assert!(row.iter().all(|z| (0.0..=1.0).contains(z)));
    }
}

#[test]
fn report_rejects_moe_models() {
    let cfg = tiny_config(Activation::Relu);
    let data = tiny_data(&cfg, 0, 2);
    let m = NextScaleModel::init(&cfg, 0).unwrap();
    assert!(sparsity_report(&m, &data).is_ok());
    let (moe, _) = scalemoe::moefy::moefy_model(&m, &scalemoe::ClusterConfig { num_experts: 4, ..Default::default() }).unwrap();
    assert!(sparsity_report(&moe, &data).is_err());
}
