mod common;

use common::{briefly_trained, max_abs_diff, noisy_model, tiny_config, tiny_data};
use scalemoe::autodiff::Activation;
use scalemoe::model::{guided_logits, read_checkpoint, sample, write_checkpoint};
use scalemoe::moefy::moefy_model;
use scalemoe::dynrouter::{prune_ffn, train_router, RouterConfig};
use scalemoe::{ClusterConfig, NextScaleModel, SamplerConfig};

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[test]
fn cached_inference_matches_training_graph() {
    for act in [Activation::Gelu, Activation::Relu] {
        let cfg = tiny_config(act);
        let data = tiny_data(&cfg, 5, 6);
        for seed in 0..3 {
            let m = noisy_model(&cfg, seed, 0.3);
            for s in &data {
                let a = m.forward_train(&s.hierarchy, s.class_id).unwrap();
                let b = m.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
                assert!(max_abs_diff(a.data(), b.data()) < 1e-10);
            }
        }
    }
}

#[test]
fn coarser_logits_ignore_finer_tokens() {
    let cfg = tiny_config(Activation::Gelu);
    let m = noisy_model(&cfg, 1, 0.3);
    let data = tiny_data(&cfg, 9, 4);
    let bounds = cfg.boundaries();
    for s in &data {
        let base = m.forward_logits(&s.hierarchy, s.class_id, None).unwrap();
        for k in 0..cfg.num_scales() {
            let old = s.hierarchy.map(k)[0];
            let new = (old + 1) % cfg.vocab as u16;
            let changed = s.hierarchy.with_token(k, 0, new).unwrap();
            let logits = m.forward_logits(&changed, s.class_id, None).unwrap();
            let end = bounds[k].end;
            assert_eq!(&base.data()[..end * cfg.vocab], &logits.data()[..end * cfg.vocab]);
            if k + 1 < cfg.num_scales() {
                let next = bounds[k + 1].clone();
                let a = &base.data()[next.start * cfg.vocab..next.end * cfg.vocab];
                let b = &logits.data()[next.start * cfg.vocab..next.end * cfg.vocab];
                assert_ne!(a, b, "scale {} should see the changed token", k + 1);
            }
        }
    }
}

#[test]
fn sampling_is_seeded() {
    let cfg = tiny_config(Activation::Gelu);
    let m = noisy_model(&cfg, 2, 0.3);
    let sampler = SamplerConfig::for_vocab(cfg.vocab);
    let a = sample(&m, 1, &sampler).unwrap();
    let b = sample(&m, 1, &sampler).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.passes(), 2);
    assert_eq!(a.trace.records.len(), 2 * cfg.seq_len() * cfg.depth);
    let differs = (1..8).any(|seed| {
        let other = sample(&m, 1, &SamplerConfig { seed, ..sampler.clone() }).unwrap();
        other.hierarchy != a.hierarchy
    });
    assert!(differs);
}

#[test]
fn greedy_generation_is_teacher_forced_argmax() {
    let cfg = tiny_config(Activation::Gelu);
    let m = noisy_model(&cfg, 3, 0.5);
    for class in 0..cfg.num_classes {
        let sampler = SamplerConfig {
            cfg: 1.0,
            top_k: 1,
            ..SamplerConfig::for_vocab(cfg.vocab)
        };
        let g = sample(&m, class, &sampler).unwrap();
        assert_eq!(g.trace.passes(), 1);
        let logits = m.forward_logits(&g.hierarchy, class, None).unwrap();
        let (tokens, _) = g.hierarchy.flatten();
        for (p, &t) in tokens.iter().enumerate() {
            assert_eq!(argmax(logits.row(p)), t as usize);
        }
    }
}

#[test]
fn greedy_guided_generation_follows_guided_logits() {
    let cfg = tiny_config(Activation::Gelu);
    let m = noisy_model(&cfg, 4, 0.5);
    let guidance = 2.5;
    let sampler = SamplerConfig {
        cfg: guidance,
        top_k: 1,
        ..SamplerConfig::for_vocab(cfg.vocab)
    };
    let g = sample(&m, 0, &sampler).unwrap();
    let cond = m.forward_logits(&g.hierarchy, 0, None).unwrap();
    let uncond = m.forward_logits(&g.hierarchy, cfg.null_class(), None).unwrap();
    let (tokens, _) = g.hierarchy.flatten();
    for (p, &t) in tokens.iter().enumerate() {
        let mixed = guided_logits(cond.row(p), uncond.row(p), guidance);
        assert_eq!(argmax(&mixed), t as usize);
    }
}

#[test]
fn short_training_lowers_loss() {
    let cfg = tiny_config(Activation::Gelu);
    let data = tiny_data(&cfg, 11, 48);
    let before = NextScaleModel::init(&cfg, 0).unwrap().evaluate(&data, None, false).unwrap().nll;
    let after = briefly_trained(&cfg, &data, 0).evaluate(&data, None, false).unwrap().nll;
    assert!(after < before, "{after} !< {before}");
}

fn round_trip(m: &NextScaleModel) {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, m).unwrap();
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(&back, m);
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn checkpoints_round_trip_every_stage() {
    let cfg = tiny_config(Activation::Relu);
    let data = tiny_data(&cfg, 13, 16);
    let dense = noisy_model(&cfg, 5, 0.2);
    round_trip(&dense);
    let (moe, _) = moefy_model(&dense, &ClusterConfig { num_experts: 4, ..ClusterConfig::default() }).unwrap();
    round_trip(&moe);
    let router = RouterConfig { epochs: 1, ..RouterConfig::default() };
    let (routed, _) = train_router(&moe, &data[..8], &data[8..], &router).unwrap();
    round_trip(&routed);
    round_trip(&prune_ffn(&routed, 0.5, &data, &[1, 2]).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = tiny_config(Activation::Gelu);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &NextScaleModel::init(&cfg, 0).unwrap()).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
}
