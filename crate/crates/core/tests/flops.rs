mod common;

use common::{dense_pass_closed_form, gated_flops_oracle, tiny_routed};
use scalemoe::flops::dense_generation_flops;
use scalemoe::model::sample;
use scalemoe::{count_generation, ForwardMode, Gating, ModelConfig, NextScaleModel, SamplerConfig, TauSchedule};

#[test]
fn default_dense_generation_matches_closed_form() {
    let cfg = ModelConfig::default();
    let per_pass = dense_pass_closed_form(&cfg);
    assert_eq!(per_pass, 94_335_488);
    assert_eq!(dense_generation_flops(&cfg, 1), per_pass);
    let m = NextScaleModel::init(&cfg, 0).unwrap();
    let g = sample(&m, 2, &SamplerConfig::for_vocab(cfg.vocab)).unwrap();
    let report = count_generation(&m, &g.trace).unwrap();
    assert_eq!(report.passes, 2);
    assert_eq!(report.dense_total(), 2 * per_pass);
    assert_eq!(report.gated_total(), 2 * per_pass);
    assert_eq!(report.reduction(), 0.0);
    let unguided = SamplerConfig { cfg: 1.0, ..SamplerConfig::for_vocab(cfg.vocab) };
    let g = sample(&m, 2, &unguided).unwrap();
    assert_eq!(count_generation(&m, &g.trace).unwrap().gated_total(), per_pass);
}

#[test]
fn gated_totals_match_per_record_accumulation() {
    let (_, routed, _) = tiny_routed(4, 6);
    let k = routed.config.num_scales();
    let dense = dense_pass_closed_form(&routed.config);
    for (i, tau) in [0.0, 0.2, 0.5, 0.8, 1.0].into_iter().enumerate() {
        for mode in [ForwardMode::DynkMax, ForwardMode::Oracle] {
            let sampler = SamplerConfig {
                seed: i as u64,
                gating: Some(Gating::new(mode, TauSchedule::uniform(2, tau, k).unwrap())),
                ..SamplerConfig::for_vocab(routed.config.vocab)
            };
            let g = sample(&routed, 0, &sampler).unwrap();
            let report = count_generation(&routed, &g.trace).unwrap();
            assert_eq!(report.gated_total(), gated_flops_oracle(&routed, &g.trace));
            assert_eq!(report.dense_total(), 2 * dense);
            if mode == ForwardMode::Oracle {
                assert_eq!(report.router_total(), 0);
            }
        }
    }
}

#[test]
fn router_cost_at_reference_width() {
    let r = scalemoe::RouterNet::init(64, 32, 8, 0);
    assert_eq!(r.flops_per_token(), 2 * (64 * 32 + 32 * 32 + 32 * 8));
}

#[test]
fn incomplete_or_foreign_traces_are_rejected() {
    let (_, routed, _) = tiny_routed(4, 7);
    let g = sample(&routed, 1, &SamplerConfig::for_vocab(routed.config.vocab)).unwrap();
    let mut short = g.trace.clone();
    short.records.pop();
    assert!(count_generation(&routed, &short).is_err());
    let other = NextScaleModel::init(&ModelConfig::default(), 0).unwrap();
    assert!(count_generation(&other, &g.trace).is_err());
}
