//! Multiply-add accounting for generation traces and wall-clock timing of
//! the generation loop.
//!
//! Convention: one multiply-add is 2 FLOPs; bias adds, layer norms,
//! softmax and activations are not counted. Attention is counted with
//! cached keys/values, so scale `k` with `n_k` new tokens and a context of
//! `c_k = n_1 + … + n_k` tokens costs, per block and pass,
//! `8·n_k·d² + 4·n_k·c_k·d` (four projections plus scores and mixing),
//! and the output head costs `2·n_k·d·V`.

use std::fmt;
use std::io::Write;
use std::time::Duration;

use crate::dynrouter::{Gating, GatingTrace};
use crate::error::{invalid, Result};
use crate::model::{ModelConfig, NextScaleModel, SamplerConfig};

pub fn count_linear(tokens: u64, d_in: u64, d_out: u64) -> u64 {
    2 * tokens * d_in * d_out
}

/// FFN cost for one token executing `units` hidden units.
pub fn ffn_flops(d_model: usize, units: usize) -> u64 {
    count_linear(1, d_model as u64, units as u64) + count_linear(1, units as u64, d_model as u64)
}

/// Attention cost of one block for a scale of `n` new tokens attending to
/// `context` tokens.
pub fn attention_flops(d_model: usize, n: usize, context: usize) -> u64 {
    let (d, n, c) = (d_model as u64, n as u64, context as u64);
    4 * count_linear(n, d, d) + 2 * n * c * d + 2 * n * c * d
}

/// Dense generation cost for `passes` forward passes.
pub fn dense_generation_flops(config: &ModelConfig, passes: usize) -> u64 {
    let d = config.d_model;
    let mut context = 0;
    let mut total = 0;
    for &s in &config.scale_sides {
        let n = s * s;
        context += n;
        let per_block = attention_flops(d, n, context) + n as u64 * ffn_flops(d, config.d_ff);
        total += config.depth as u64 * per_block + count_linear(n as u64, d as u64, config.vocab as u64);
    }
    total * passes as u64
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerFlops {
    pub attention: u64,
    pub ffn_dense: u64,
    pub ffn_gated: u64,
    pub router: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub passes: usize,
    /// `[scale][layer]`, summed over passes.
    pub layers: Vec<Vec<LayerFlops>>,
    /// Output head per scale, summed over passes.
    pub head: Vec<u64>,
}

impl FlopsReport {
    fn sum(&self, f: impl Fn(&LayerFlops) -> u64) -> u64 {
        self.layers.iter().flatten().map(f).sum()
    }

    pub fn attention_total(&self) -> u64 {
        self.sum(|l| l.attention)
    }

    pub fn head_total(&self) -> u64 {
        self.head.iter().sum()
    }

    pub fn ffn_dense_total(&self) -> u64 {
        self.sum(|l| l.ffn_dense)
    }

    pub fn ffn_gated_total(&self) -> u64 {
        self.sum(|l| l.ffn_gated)
    }

    pub fn router_total(&self) -> u64 {
        self.sum(|l| l.router)
    }

    pub fn dense_total(&self) -> u64 {
        self.attention_total() + self.head_total() + self.ffn_dense_total()
    }

    /// Includes router cost.
    pub fn gated_total(&self) -> u64 {
        self.attention_total() + self.head_total() + self.ffn_gated_total() + self.router_total()
    }

    /// `1 − gated/dense` over the whole generation.
    pub fn reduction(&self) -> f64 {
        1.0 - self.gated_total() as f64 / self.dense_total() as f64
    }

    /// Reduction restricted to FFN (+ router) cost.
    pub fn ffn_reduction(&self) -> f64 {
        1.0 - (self.ffn_gated_total() + self.router_total()) as f64 / self.ffn_dense_total() as f64
    }

    /// Gated FFN + router FLOPs on the given 0-based scales.
    pub fn ffn_gated_on(&self, scales: &[usize]) -> u64 {
        scales
            .iter()
            .flat_map(|&s| &self.layers[s])
            .map(|l| l.ffn_gated + l.router)
            .sum()
    }

    pub fn ffn_dense_on(&self, scales: &[usize]) -> u64 {
        scales.iter().flat_map(|&s| &self.layers[s]).map(|l| l.ffn_dense).sum()
    }

    pub fn merge(&mut self, other: &FlopsReport) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(invalid("cannot merge reports of different geometry"));
        }
        self.passes += other.passes;
        for (a, b) in self.layers.iter_mut().flatten().zip(other.layers.iter().flatten()) {
            a.attention += b.attention;
            a.ffn_dense += b.ffn_dense;
            a.ffn_gated += b.ffn_gated;
            a.router += b.router;
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            *a += b;
        }
        Ok(())
    }

    /// CSV: scale, layer, attention, ffn_dense, ffn_gated, router.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["scale", "layer", "attention", "ffn_dense", "ffn_gated", "router"])?;
        for (s, layers) in self.layers.iter().enumerate() {
            for (l, f) in layers.iter().enumerate() {
                csv.write_record([
                    (s + 1).to_string(),
                    l.to_string(),
                    f.attention.to_string(),
                    f.ffn_dense.to_string(),
                    f.ffn_gated.to_string(),
                    f.router.to_string(),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "passes        {}", self.passes)?;
        writeln!(f, "attention     {:>14}", self.attention_total())?;
        writeln!(f, "output head   {:>14}", self.head_total())?;
        writeln!(f, "ffn (dense)   {:>14}", self.ffn_dense_total())?;
        writeln!(f, "ffn (gated)   {:>14}", self.ffn_gated_total())?;
        writeln!(f, "router        {:>14}", self.router_total())?;
        writeln!(f, "dense total   {:>14}", self.dense_total())?;
        writeln!(f, "gated total   {:>14}", self.gated_total())?;
        write!(f, "reduction     {:>13.4}%", 100.0 * self.reduction())
    }
}

/// FLOPs of the generation (or forward pass) that produced `trace`.
pub fn count_generation(model: &NextScaleModel, trace: &GatingTrace) -> Result<FlopsReport> {
    let cfg = &model.config;
    if trace.scale_sides != cfg.scale_sides || trace.depth != cfg.depth {
        return Err(invalid("trace geometry does not match the model"));
    }
    let passes = trace.passes();
    let (k, depth, d) = (cfg.num_scales(), cfg.depth, cfg.d_model);
    let mut counts = vec![vec![vec![0usize; depth]; k]; passes];
    let mut layers = vec![vec![LayerFlops::default(); depth]; k];
    let router_cost: Vec<u64> = model
        .blocks
        .iter()
        .map(|b| {
            b.ffn
                .as_moe()
                .and_then(|m| m.router.as_ref())
                .map_or(0, |r| r.flops_per_token())
        })
        .collect();
    for r in &trace.records {
        let (p, s, l) = (r.pass as usize, r.scale as usize, r.layer as usize);
        if s >= k || l >= depth || r.token as usize >= cfg.scale_sides[s].pow(2) || r.units as usize > cfg.d_ff {
            return Err(invalid(format!("trace record {r:?} outside the model geometry")));
        }
        if r.router_ran && router_cost[l] == 0 {
            return Err(invalid(format!("trace claims a router ran on layer {l}, which has none")));
        }
        counts[p][s][l] += 1;
        let lf = &mut layers[s][l];
        lf.ffn_gated += ffn_flops(d, r.units as usize);
        if r.router_ran {
            lf.router += router_cost[l];
        }
    }
    let mut head = vec![0; k];
    for p in 0..passes {
        let mut context = 0;
        for s in 0..k {
            let n = cfg.scale_sides[s].pow(2);
            context += n;
            for l in 0..depth {
                if counts[p][s][l] != n {
                    return Err(invalid(format!(
                        "trace has {} records for pass {p}, scale {s}, layer {l}; expected {n}",
                        counts[p][s][l]
                    )));
                }
                layers[s][l].attention += attention_flops(d, n, context);
                layers[s][l].ffn_dense += n as u64 * ffn_flops(d, cfg.d_ff);
            }
            head[s] += count_linear(n as u64, d as u64, cfg.vocab as u64);
        }
    }
    Ok(FlopsReport { passes, layers, head })
}

/// Wall-clock accumulators filled in by the forward path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub scales: Vec<ScaleTimes>,
    current: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleTimes {
    pub total: Duration,
    pub router: Duration,
    pub dispatch: Duration,
}

impl PhaseTimes {
    pub fn new(num_scales: usize) -> Self {
        Self {
            scales: vec![ScaleTimes::default(); num_scales],
            current: 0,
        }
    }

    pub fn begin_scale(&mut self, scale: usize) {
        if self.scales.len() <= scale {
            self.scales.resize(scale + 1, ScaleTimes::default());
        }
        self.current = scale;
    }

    pub fn add_router(&mut self, d: Duration) {
        self.begin_scale(self.current);
        self.scales[self.current].router += d;
    }

    pub fn add_dispatch(&mut self, d: Duration) {
        self.begin_scale(self.current);
        self.scales[self.current].dispatch += d;
    }

    pub fn record_scale(&mut self, scale: usize, d: Duration) {
        self.begin_scale(scale);
        self.scales[scale].total += d;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTiming {
    /// 1-based scale index.
    pub scale: usize,
    pub tokens: usize,
    pub total_ns: u64,
    pub router_ns: u64,
    pub dispatch_ns: u64,
    /// `total − router − dispatch`.
    pub kernel_ns: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub threads: usize,
    pub batch: usize,
    pub repeats: usize,
    pub num_experts: usize,
    pub expert_size: usize,
    pub mode: String,
    pub scales: Vec<ScaleTiming>,
}

impl TimingReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "scale",
            "tokens",
            "total_ns",
            "router_ns",
            "dispatch_ns",
            "kernel_ns",
            "batch",
            "num_experts",
            "expert_size",
            "mode",
            "threads",
        ])?;
        for s in &self.scales {
            csv.write_record([
                s.scale.to_string(),
                s.tokens.to_string(),
                s.total_ns.to_string(),
                s.router_ns.to_string(),
                s.dispatch_ns.to_string(),
                s.kernel_ns.to_string(),
                self.batch.to_string(),
                self.num_experts.to_string(),
                self.expert_size.to_string(),
                self.mode.clone(),
                self.threads.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times `batch` generations per repeat (single thread) and reports the
/// per-scale median over `repeats`.
pub fn bench_walltime(
    model: &NextScaleModel,
    gating: Option<&Gating>,
    batch: usize,
    repeats: usize,
) -> Result<TimingReport> {
    if repeats < 3 {
        return Err(invalid("at least three repeats are required"));
    }
    if batch == 0 {
        return Err(invalid("batch must be positive"));
    }
    let cfg = &model.config;
    let k = cfg.num_scales();
    let mut runs: Vec<PhaseTimes> = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut times = PhaseTimes::new(k);
        for b in 0..batch {
            let sampler = SamplerConfig {
                seed: (rep * batch + b) as u64,
                gating: gating.cloned(),
                ..SamplerConfig::for_vocab(cfg.vocab)
            };
            crate::model::generate_timed(model, b % cfg.num_classes, &sampler, &mut times)?;
        }
        runs.push(times);
    }
    let ns = |d: Duration| d.as_nanos() as u64;
    let scales = (0..k)
        .map(|s| {
            let total = median(runs.iter().map(|r| ns(r.scales[s].total)).collect());
            let router = median(runs.iter().map(|r| ns(r.scales[s].router)).collect());
            let dispatch = median(runs.iter().map(|r| ns(r.scales[s].dispatch)).collect());
            ScaleTiming {
                scale: s + 1,
                tokens: cfg.scale_sides[s].pow(2),
                total_ns: total,
                router_ns: router,
                dispatch_ns: dispatch,
                kernel_ns: total.saturating_sub(router + dispatch),
            }
        })
        .collect();
    let moe = model.blocks.iter().find_map(|b| b.ffn.as_moe());
    Ok(TimingReport {
        threads: 1,
        batch,
        repeats,
        num_experts: moe.map_or(1, |m| m.experts.num_experts()),
        expert_size: moe.map_or(cfg.d_ff, |m| m.experts.expert_size()),
        mode: gating.map_or("dense", |g| g.mode.name()).to_string(),
        scales,
    })
}
