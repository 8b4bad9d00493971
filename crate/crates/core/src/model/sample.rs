use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::infer::{KvCache, NoObserver, StepContext};
use super::NextScaleModel;
use crate::dynrouter::{Gating, GatingTrace};
use crate::error::{invalid, Result};
use crate::flops::PhaseTimes;
use crate::pyramid::TokenHierarchy;

/// Largest top-k used by the reference sampler.
pub const REFERENCE_TOP_K: usize = 900;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub cfg: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
    pub gating: Option<Gating>,
}

impl SamplerConfig {
    /// Reference defaults: guidance 1.5, nucleus 0.96, top-k capped by the
    /// vocabulary.
    pub fn for_vocab(vocab: usize) -> Self {
        Self {
            cfg: 1.5,
            top_k: REFERENCE_TOP_K.min(vocab),
            top_p: 0.96,
            seed: 0,
            gating: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if !(self.cfg >= 0.0 && self.cfg.is_finite()) {
            return Err(invalid(format!("cfg {} must be finite and non-negative", self.cfg)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub hierarchy: TokenHierarchy,
    pub trace: GatingTrace,
}

/// `u + cfg · (c − u)`.
pub fn guided_logits(cond: &[f64], uncond: &[f64], cfg: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| u + cfg * (c - u)).collect()
}

/// Softmax, then keep the `top_k` most probable tokens, renormalise, and
/// keep the smallest prefix whose cumulative probability reaches `top_p`.
/// Returns `(token, probability)` pairs sorted by descending probability
/// (ties by token index), renormalised to sum to one.
pub fn filter_top_k_top_p(logits: &[f64], top_k: usize, top_p: f64) -> Vec<(usize, f64)> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let mut ranked: Vec<(usize, f64)> = exp.iter().map(|e| e / z).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k.max(1));
    renormalise(&mut ranked);
    let mut cum = 0.0;
    let mut keep = ranked.len();
    for (i, (_, p)) in ranked.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    ranked.truncate(keep);
    renormalise(&mut ranked);
    ranked
}

fn renormalise(items: &mut [(usize, f64)]) {
    let total: f64 = items.iter().map(|(_, p)| p).sum();
    items.iter_mut().for_each(|(_, p)| *p /= total);
}

fn draw(items: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.random::<f64>();
    for &(t, p) in items {
        if u < p {
            return t;
        }
        u -= p;
    }
    items.last().expect("at least one token survives filtering").0
}

/// Class-conditional coarse-to-fine generation.
pub fn sample(model: &NextScaleModel, class_id: usize, sampler: &SamplerConfig) -> Result<Generation> {
    generate(model, class_id, sampler, None)
}

/// [`sample`] that also accumulates per-scale wall-clock phases.
pub fn generate_timed(
    model: &NextScaleModel,
    class_id: usize,
    sampler: &SamplerConfig,
    times: &mut PhaseTimes,
) -> Result<Generation> {
    generate(model, class_id, sampler, Some(times))
}

fn generate(
    model: &NextScaleModel,
    class_id: usize,
    sampler: &SamplerConfig,
    mut times: Option<&mut PhaseTimes>,
) -> Result<Generation> {
    sampler.validate()?;
    let cfg = &model.config;
    if class_id >= cfg.num_classes {
        return Err(invalid(format!("class {class_id} outside [0, {})", cfg.num_classes)));
    }
    let guided = sampler.cfg != 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut cond_cache = KvCache::new(cfg.depth, cfg.heads);
    let mut uncond_cache = KvCache::new(cfg.depth, cfg.heads);
    let mut trace = GatingTrace::new(cfg);
    let mut maps: Vec<Vec<u16>> = Vec::with_capacity(cfg.num_scales());
    let mut obs = NoObserver;
    for k in 0..cfg.num_scales() {
        let prev = maps.last().map(|m| m.as_slice());
        let started = Instant::now();
        if let Some(t) = times.as_deref_mut() {
            t.begin_scale(k);
        }
        let x = model.embed_scale(k, class_id, prev)?;
        let mut ctx = StepContext {
            gating: sampler.gating.as_ref(),
            pass: 0,
            trace: Some(&mut trace),
            observer: &mut obs,
            times: times.as_deref_mut(),
        };
        let cond = model.step_scale(&mut cond_cache, k, x, &mut ctx)?;
        let logits = if guided {
            let xu = model.embed_scale(k, cfg.null_class(), prev)?;
            let mut ctx = StepContext {
                gating: sampler.gating.as_ref(),
                pass: 1,
                trace: Some(&mut trace),
                observer: &mut obs,
                times: times.as_deref_mut(),
            };
            let uncond = model.step_scale(&mut uncond_cache, k, xu, &mut ctx)?;
            (0..cond.rows())
                .map(|r| guided_logits(cond.row(r), uncond.row(r), sampler.cfg))
                .collect::<Vec<_>>()
        } else {
            (0..cond.rows()).map(|r| cond.row(r).to_vec()).collect()
        };
        let map = logits
            .iter()
            .map(|row| draw(&filter_top_k_top_p(row, sampler.top_k, sampler.top_p), &mut rng) as u16)
            .collect();
        if let Some(t) = times.as_deref_mut() {
            t.record_scale(k, started.elapsed());
        }
        maps.push(map);
    }
    trace.sort();
    Ok(Generation {
        hierarchy: TokenHierarchy::new(maps, cfg.scale_sides.clone(), cfg.vocab)?,
        trace,
    })
}
