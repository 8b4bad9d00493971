#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalemoe::autodiff::{grad_check, Activation, GraphFn};
use scalemoe::model::{build_train_graph, fit, graph_inputs, DenseFfn, ForwardObserver, LossKind, OptimizerConfig};
use scalemoe::dynrouter::{train_router, RouterConfig};
use scalemoe::moefy::moefy_model;
use scalemoe::pyramid::synthetic_corpus;
use scalemoe::{ClusterConfig, ModelConfig, NextScaleModel, Sample, Tensor};

pub fn tiny_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        depth: 2,
        heads: 2,
        d_ff: 32,
        vocab: 8,
        num_classes: 3,
        scale_sides: vec![1, 2, 3],
        activation,
    }
}

pub fn tiny_data(config: &ModelConfig, seed: u64, n: usize) -> Vec<Sample> {
    synthetic_corpus(seed, n, &config.pyramid()).unwrap()
}

/// Random init with every trainable tensor shifted by uniform noise of
/// standard deviation `std`.
pub fn noisy_model(config: &ModelConfig, seed: u64, std: f64) -> NextScaleModel {
    let mut m = NextScaleModel::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let half = std * 3f64.sqrt();
    for (_, t) in m.trainable_params_mut().unwrap() {
        for v in t.data_mut() {
            *v += rng.random_range(-half..half);
        }
    }
    m
}

/// A short plain-CE fit so the model has non-trivial structure.
pub fn briefly_trained(config: &ModelConfig, data: &[Sample], seed: u64) -> NextScaleModel {
    let mut m = NextScaleModel::init(config, seed).unwrap();
    let opt = OptimizerConfig {
        epochs: 3,
        batch_size: 8,
        seed,
        ..OptimizerConfig::default()
    };
    fit(&mut m, data, &opt, LossKind::CrossEntropy).unwrap();
    m
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct PreActivations {
    ffns: Vec<DenseFfn>,
    min_abs: f64,
    min_row_max: f64,
}

impl ForwardObserver for PreActivations {
    fn ffn_input(&mut self, layer: usize, _scale: usize, x: &Tensor) {
        let f = &self.ffns[layer];
        let pre = x.matmul_t(&f.w1).unwrap();
        let b = f.b1.data();
        for r in 0..pre.rows() {
            let row: Vec<f64> = pre.row(r).iter().zip(b).map(|(v, b)| v + b).collect();
            let abs = row.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            self.min_abs = self.min_abs.min(abs);
            self.min_row_max = self.min_row_max.min(top);
        }
    }
}

/// Smallest `|pre-activation|` and smallest per-row maximum pre-activation
/// over every FFN unit and token of `sample`.
pub fn preactivation_margin(model: &NextScaleModel, sample: &Sample) -> (f64, f64) {
    let mut obs = PreActivations {
        ffns: model.blocks.iter().map(|b| b.ffn.to_dense()).collect(),
        min_abs: f64::INFINITY,
        min_row_max: f64::INFINITY,
    };
    model.observe(&sample.hierarchy, sample.class_id, None, &mut obs).unwrap();
    (obs.min_abs, obs.min_row_max)
}

/// Worst central-difference error of the combined loss gradient over every
/// trainable tensor.
pub fn combined_loss_grad_error(model: &NextScaleModel, sample: &Sample, alpha: f64, eps: f64) -> f64 {
    let tg = build_train_graph(&model.config, alpha).unwrap();
    let params: Vec<(String, Tensor)> = model
        .trainable_params()
        .unwrap()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let seq: Vec<(String, Tensor)> = graph_inputs(&model.config, sample)
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    let mut worst: f64 = 0.0;
    for (i, (name, point)) in params.iter().enumerate() {
        let mut fixed = seq.clone();
        fixed.extend(params.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()));
        let f = GraphFn::new(&tg.graph, tg.loss, name, fixed);
        worst = worst.max(grad_check(&f, point, eps).unwrap());
    }
    worst
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn partition_cost(rows: &Tensor, assignment: &[usize], k: usize) -> f64 {
    let d = rows.cols();
    let mut cost = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..rows.rows()).filter(|&r| assignment[r] == c).collect();
        let mut mean = vec![0.0; d];
        for &r in &members {
            for (m, v) in mean.iter_mut().zip(rows.row(r)) {
                *m += v / members.len() as f64;
            }
        }
        for &r in &members {
            cost += rows.row(r).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    cost
}

/// Exhaustive search over balanced two-way partitions (the row count must
/// be even); unit 0 is pinned to cluster 0.
pub fn best_balanced_bipartition(rows: &Tensor) -> (Vec<usize>, f64) {
    let n = rows.rows();
    assert!(n % 2 == 0 && n <= 20);
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 0u32..(1 << n) {
        if mask & 1 != 0 || mask.count_ones() as usize != n / 2 {
            continue;
        }
        let assignment: Vec<usize> = (0..n).map(|r| ((mask >> r) & 1) as usize).collect();
        let cost = partition_cost(rows, &assignment, 2);
        if cost < best.1 {
            best = (assignment, cost);
        }
    }
    best
}

/// Relabels clusters in order of first appearance.
pub fn canonical_labels(assignment: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    assignment
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect()
}

/// Eight rows drawn around two centres, four rows each, in shuffled order.
pub fn two_blob_rows(seed: u64, dim: usize, spread: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(8 * dim);
    for &l in &labels {
        for c in &centres[l] {
            data.push(c + rng.random_range(-spread..spread));
        }
    }
    Tensor::new(vec![8, dim], data).unwrap()
}

/// Tiny ReLU model, moefied into `experts` experts with trained routers.
pub fn tiny_routed(experts: usize, seed: u64) -> (NextScaleModel, NextScaleModel, Vec<Sample>) {
    let cfg = tiny_config(Activation::Relu);
    let data = tiny_data(&cfg, seed, 24);
    let dense = noisy_model(&cfg, seed, 0.3);
    let (moe, _) = moefy_model(&dense, &ClusterConfig { num_experts: experts, seed, ..ClusterConfig::default() }).unwrap();
    let router = RouterConfig { epochs: 2, seed, ..RouterConfig::default() };
    let (routed, _) = train_router(&moe, &data[..16], &data[16..], &router).unwrap();
    (dense, routed, data)
}

/// Dense cost of one pass written out term by term: per block and scale,
/// four `d×d` projections, `QKᵀ` and `PV` against the cached context, and
/// the two FFN matrices; plus the output head.
pub fn dense_pass_closed_form(cfg: &ModelConfig) -> u64 {
    let (d, f, v, l) = (cfg.d_model as u64, cfg.d_ff as u64, cfg.vocab as u64, cfg.depth as u64);
    let mut context = 0u64;
    let mut total = 0u64;
    for &s in &cfg.scale_sides {
        let n = (s * s) as u64;
        context += n;
        let projections = 4 * 2 * n * d * d;
        let scores = 2 * n * context * d;
        let mixing = 2 * n * context * d;
        let ffn = 2 * n * d * f + 2 * n * f * d;
        total += l * (projections + scores + mixing + ffn) + 2 * n * d * v;
    }
    total
}

/// Gated generation cost accumulated record by record: dense attention
/// and head per pass, `4·d·units` per FFN record and the router's three
/// matrices whenever it ran.
pub fn gated_flops_oracle(model: &NextScaleModel, trace: &scalemoe::GatingTrace) -> u64 {
    let cfg = &model.config;
    let d = cfg.d_model as u64;
    let no_ffn = ModelConfig { d_ff: 0, ..cfg.clone() };
    let mut total = trace.passes() as u64 * dense_pass_closed_form(&no_ffn);
    for r in &trace.records {
        total += 4 * d * r.units as u64;
        if r.router_ran {
            let router = model.blocks[r.layer as usize].ffn.as_moe().unwrap().router.as_ref().unwrap();
            total += 2 * [&router.w1, &router.w2, &router.w3].iter().map(|w| w.len() as u64).sum::<u64>();
        }
    }
    total
}
