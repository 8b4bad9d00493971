//! Scale-at-a-time inference with cached keys and values.
//!
//! Each call to `step_scale` consumes the embeddings of one whole scale;
//! because attention is block-causal, the cache holds exactly the keys a
//! new scale may attend to.

use std::time::Instant;

use super::{add_bias_rows, scale_inputs, FfnLayer, NextScaleModel, LN_EPS};
use crate::autodiff::{layer_norm_rows, softmax_row};
use crate::dynrouter::{moe_forward, FfnRecord, ForwardMode, Gating, GatingTrace};
use crate::error::{invalid, Result};
use crate::flops::PhaseTimes;
use crate::pyramid::TokenHierarchy;
use crate::tensor::{gemm, Tensor};

/// Hook into the FFN of every block during inference.
pub trait ForwardObserver {
    /// Layer-normalised FFN input rows of one scale.
    fn ffn_input(&mut self, _layer: usize, _scale: usize, _x: &Tensor) {}
    /// Post-activation hidden rows (dense blocks only).
    fn ffn_hidden(&mut self, _layer: usize, _scale: usize, _h: &Tensor) {}
}

pub struct NoObserver;

impl ForwardObserver for NoObserver {}

/// Per layer, per head: cached key and value rows (`head_dim` wide).
pub(crate) struct KvCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl KvCache {
    pub fn new(depth: usize, heads: usize) -> Self {
        Self {
            keys: vec![vec![Vec::new(); heads]; depth],
            values: vec![vec![Vec::new(); heads]; depth],
            len: 0,
        }
    }
}

pub(crate) struct StepContext<'a> {
    pub gating: Option<&'a Gating>,
    pub pass: usize,
    pub trace: Option<&'a mut GatingTrace>,
    pub observer: &'a mut dyn ForwardObserver,
    pub times: Option<&'a mut PhaseTimes>,
}

impl<'a> StepContext<'a> {
    pub fn plain(observer: &'a mut dyn ForwardObserver) -> Self {
        Self {
            gating: None,
            pass: 0,
            trace: None,
            observer,
            times: None,
        }
    }
}

fn slice_head(x: &Tensor, h: usize, dh: usize) -> Vec<f64> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.rows() * dh);
    for r in 0..x.rows() {
        out.extend_from_slice(&x.data()[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

impl NextScaleModel {
    /// Input embeddings for one scale. `prev_map` is the token map of the
    /// previous scale (ignored for scale 0, which embeds `class_row`).
    pub(crate) fn embed_scale(&self, scale: usize, class_row: usize, prev_map: Option<&[u16]>) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let start: usize = cfg.scale_sides[..scale].iter().map(|s| s * s).sum();
        let base = if scale == 0 {
            if class_row > cfg.num_classes {
                return Err(invalid(format!("class row {class_row} out of range")));
            }
            self.class_emb.gather_rows(&[class_row])
        } else {
            let prev = prev_map.ok_or_else(|| invalid("scale > 0 needs the previous token map"))?;
            let tokens = scale_inputs(prev, cfg.scale_sides[scale - 1], cfg.scale_sides[scale]);
            let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            if idx.iter().any(|&t| t >= cfg.vocab) {
                return Err(invalid("token outside the vocabulary"));
            }
            self.tok_emb.gather_rows(&idx)
        };
        let mut x = base.into_data();
        let n = x.len() / d;
        let level = self.level_emb.row(scale);
        for i in 0..n {
            let pos = self.pos_emb.row(start + i);
            for j in 0..d {
                x[i * d + j] += pos[j];
            }
        }
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] += level[j];
            }
        }
        Tensor::new(vec![n, d], x)
    }

    /// Runs one scale through every block, extending the cache, and returns
    /// that scale's logits.
    pub(crate) fn step_scale(
        &self,
        cache: &mut KvCache,
        scale: usize,
        mut x: Tensor,
        ctx: &mut StepContext<'_>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (d, dh, heads) = (cfg.d_model, cfg.head_dim(), cfg.heads);
        let n = x.rows();
        let ctx_len = cache.len + n;
        let att_scale = 1.0 / (dh as f64).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let a = layer_norm_rows(&x, block.ln1_g.data(), block.ln1_b.data(), LN_EPS);
            let at = &block.attn;
            let mut q = a.matmul_t(&at.wq)?;
            add_bias_rows(&mut q, &at.bq);
            let mut k = a.matmul_t(&at.wk)?;
            add_bias_rows(&mut k, &at.bk);
            let mut v = a.matmul_t(&at.wv)?;
            add_bias_rows(&mut v, &at.bv);
            let mut cat = vec![0.0; n * d];
            let mut scores = vec![0.0; n * ctx_len];
            let mut probs = vec![0.0; ctx_len];
            let mut oh = vec![0.0; n * dh];
            for h in 0..heads {
                cache.keys[l][h].extend(slice_head(&k, h, dh));
                cache.values[l][h].extend(slice_head(&v, h, dh));
                let qh = slice_head(&q, h, dh);
                gemm(false, true, n, ctx_len, dh, 1.0, &qh, &cache.keys[l][h], 0.0, &mut scores);
                for row in scores.chunks_exact_mut(ctx_len) {
                    for s in row.iter_mut() {
                        *s *= att_scale;
                    }
                    softmax_row(row, None, &mut probs);
                    row.copy_from_slice(&probs);
                }
                gemm(false, false, n, dh, ctx_len, 1.0, &scores, &cache.values[l][h], 0.0, &mut oh);
                for r in 0..n {
                    cat[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
            }
            let cat = Tensor::new(vec![n, d], cat)?;
            let mut o = cat.matmul_t(&at.wo)?;
            add_bias_rows(&mut o, &at.bo);
            add_in_place(&mut x, &o);

            let b = layer_norm_rows(&x, block.ln2_g.data(), block.ln2_b.data(), LN_EPS);
            ctx.observer.ffn_input(l, scale, &b);
            let prune = block.prune.as_ref().filter(|p| p.applies_to(scale));
            let y = match &block.ffn {
                FfnLayer::Dense(f) => {
                    let mut h = f.hidden(&b, cfg.activation)?;
                    let units = match prune {
                        Some(p) => {
                            zero_pruned(&mut h, &p.keep);
                            p.kept()
                        }
                        None => f.d_ff(),
                    };
                    ctx.observer.ffn_hidden(l, scale, &h);
                    if let Some(trace) = ctx.trace.as_deref_mut() {
                        for t in 0..n {
                            trace.push(FfnRecord::dense(ctx.pass, scale, l, t, units));
                        }
                    }
                    f.output(&h)?
                }
                FfnLayer::Moe(m) => {
                    let (mode, tau) = match ctx.gating {
                        Some(g) => (g.mode, g.tau_for(scale)),
                        None => (ForwardMode::Dense, None),
                    };
                    let keep = prune.map(|p| p.keep.as_slice());
                    let out = moe_forward(m, &b, tau, mode, keep, ctx.times.as_deref_mut())?;
                    if let Some(trace) = ctx.trace.as_deref_mut() {
                        for (t, sel) in out.selections.into_iter().enumerate() {
                            let units = m.experts.selected_units(&sel, keep);
                            trace.push(FfnRecord::moe(ctx.pass, scale, l, t, units, out.router_ran, sel));
                        }
                    }
                    out.output
                }
            };
            add_in_place(&mut x, &y);
        }
        cache.len = ctx_len;
        let xf = layer_norm_rows(&x, self.ln_f_g.data(), self.ln_f_b.data(), LN_EPS);
        let mut logits = xf.matmul(&self.head_w)?;
        add_bias_rows(&mut logits, &self.head_b);
        logits.ensure_finite("output logits")?;
        Ok(logits)
    }

    /// Teacher-forced logits for a whole hierarchy through the cached
    /// inference path.
    pub(crate) fn forward_cached(
        &self,
        hierarchy: &TokenHierarchy,
        class_row: usize,
        ctx: &mut StepContext<'_>,
    ) -> Result<Tensor> {
        self.check_geometry(hierarchy)?;
        let cfg = &self.config;
        let mut cache = KvCache::new(cfg.depth, cfg.heads);
        let mut rows = Vec::with_capacity(cfg.seq_len() * cfg.vocab);
        for k in 0..cfg.num_scales() {
            let prev = (k > 0).then(|| hierarchy.map(k - 1));
            let x = self.embed_scale(k, class_row, prev)?;
            let started = Instant::now();
            if let Some(t) = ctx.times.as_deref_mut() {
                t.begin_scale(k);
            }
            let logits = self.step_scale(&mut cache, k, x, ctx)?;
            if let Some(t) = ctx.times.as_deref_mut() {
                t.record_scale(k, started.elapsed());
            }
            rows.extend_from_slice(logits.data());
        }
        Tensor::new(vec![cfg.seq_len(), cfg.vocab], rows)
    }

    /// Teacher-forced logits (`Σ s_k² × V`) under an optional gating
    /// configuration.
    pub fn forward_logits(
        &self,
        hierarchy: &TokenHierarchy,
        class_id: usize,
        gating: Option<&Gating>,
    ) -> Result<Tensor> {
        let mut obs = NoObserver;
        let mut ctx = StepContext {
            gating,
            ..StepContext::plain(&mut obs)
        };
        self.forward_cached(hierarchy, class_id, &mut ctx)
    }

    /// Like [`forward_logits`](Self::forward_logits) but also returns the
    /// per-token FFN execution trace.
    pub fn forward_traced(
        &self,
        hierarchy: &TokenHierarchy,
        class_id: usize,
        gating: Option<&Gating>,
    ) -> Result<(Tensor, GatingTrace)> {
        let mut obs = NoObserver;
        let mut trace = GatingTrace::new(&self.config);
        let mut ctx = StepContext {
            gating,
            trace: Some(&mut trace),
            ..StepContext::plain(&mut obs)
        };
        let logits = self.forward_cached(hierarchy, class_id, &mut ctx)?;
        Ok((logits, trace))
    }

    /// Teacher-forced pass that reports every FFN input/hidden batch to
    /// `observer`.
    pub fn observe(
        &self,
        hierarchy: &TokenHierarchy,
        class_id: usize,
        gating: Option<&Gating>,
        observer: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        let mut ctx = StepContext {
            gating,
            ..StepContext::plain(observer)
        };
        self.forward_cached(hierarchy, class_id, &mut ctx)
    }
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

pub(crate) fn zero_pruned(h: &mut Tensor, keep: &[bool]) {
    let c = h.cols();
    for (i, v) in h.data_mut().iter_mut().enumerate() {
        if !keep[i % c] {
            *v = 0.0;
        }
    }
}
