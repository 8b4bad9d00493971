use std::sync::Arc;

use super::mask::{position_scales, BlockMask};
use super::{ModelConfig, NextScaleModel, LN_EPS};
use crate::autodiff::{Graph, GraphBuilder, Inputs, NodeId};
use crate::error::{invalid, Result};
use crate::pyramid::{Sample, TokenHierarchy};
use crate::tensor::Tensor;

/// Teacher-forced training graph for one sequence of a dense model.
///
/// Inputs: every trainable parameter under its model name, plus `class`
/// (`[1]`), `tokens` (`[N-1]`, omitted when `N == 1`) and `targets` (`[N]`).
/// Outputs: `logits`, `ce`, `hoyer` (mean over blocks of the per-block
/// token-mean Hoyer ratio), `loss` and `h.{l}` (FFN post-activations).
pub struct TrainGraph {
    pub graph: Graph,
    pub logits: NodeId,
    pub ce: NodeId,
    pub hoyer: NodeId,
    pub loss: NodeId,
    pub hidden: Vec<NodeId>,
}

/// `alpha = 0` gives plain cross-entropy.
pub fn build_train_graph(config: &ModelConfig, alpha: f64) -> Result<TrainGraph> {
    config.validate()?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("alpha must be a finite non-negative number, got {alpha}")));
    }
    let (d, v, n) = (config.d_model, config.vocab, config.seq_len());
    let scales = position_scales(&config.scale_sides);
    let mask: Arc<[bool]> = BlockMask::from_blocks(&scales).cells().into();
    let mut g = GraphBuilder::new();

    let tok_emb = g.param("tok_emb", &[v, d])?;
    let class_emb = g.param("class_emb", &[config.num_classes + 1, d])?;
    let pos_emb = g.param("pos_emb", &[n, d])?;
    let level_emb = g.param("level_emb", &[config.num_scales(), d])?;
    let class = g.input("class", &[1])?;
    let cls = g.gather(class_emb, class)?;
    let mut x = if n > 1 {
        let tokens = g.input("tokens", &[n - 1])?;
        let tok = g.gather(tok_emb, tokens)?;
        g.concat_rows(vec![cls, tok])?
    } else {
        cls
    };
    x = g.add(x, pos_emb)?;
    let lvl = g.gather_fixed(level_emb, scales)?;
    x = g.add(x, lvl)?;

    let dh = config.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    let mut hidden = Vec::with_capacity(config.depth);
    let mut hoyers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let p = |name: &str| format!("blocks.{l}.{name}");
        let ln1_g = g.param(&p("ln1.g"), &[d])?;
        let ln1_b = g.param(&p("ln1.b"), &[d])?;
        let a = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let proj = |g: &mut GraphBuilder, w: &str, b: &str| -> Result<NodeId> {
            let wn = g.param(&p(w), &[d, d])?;
            let bn = g.param(&p(b), &[d])?;
            g.linear(a, wn, bn)
        };
        let q = proj(&mut g, "attn.wq", "attn.bq")?;
        let k = proj(&mut g, "attn.wk", "attn.bk")?;
        let val = proj(&mut g, "attn.wv", "attn.bv")?;
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(val, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, att_scale);
            let pr = g.softmax(s, Some(mask.clone()))?;
            heads.push(g.matmul(pr, vh)?);
        }
        let cat = g.concat_cols(heads)?;
        let wo = g.param(&p("attn.wo"), &[d, d])?;
        let bo = g.param(&p("attn.bo"), &[d])?;
        let o = g.linear(cat, wo, bo)?;
        x = g.add(x, o)?;

        let ln2_g = g.param(&p("ln2.g"), &[d])?;
        let ln2_b = g.param(&p("ln2.b"), &[d])?;
        let b = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let w1 = g.param(&p("ffn.w1"), &[config.d_ff, d])?;
        let b1 = g.param(&p("ffn.b1"), &[config.d_ff])?;
        let pre = g.linear(b, w1, b1)?;
        let h = g.activation(pre, config.activation);
        g.output(&format!("h.{l}"), h);
        hidden.push(h);
        hoyers.push(g.hoyer(h)?);
        let w2 = g.param(&p("ffn.w2"), &[d, config.d_ff])?;
        let b2 = g.param(&p("ffn.b2"), &[d])?;
        let f = g.linear(h, w2, b2)?;
        x = g.add(x, f)?;
    }
    let lnf_g = g.param("ln_f.g", &[d])?;
    let lnf_b = g.param("ln_f.b", &[d])?;
    let xf = g.layer_norm(x, lnf_g, lnf_b, LN_EPS)?;
    let head_w = g.param("head.w", &[d, v])?;
    let head_b = g.param("head.b", &[v])?;
    let logits = g.matmul(xf, head_w)?;
    let logits = g.add_bias(logits, head_b)?;
    let targets = g.input("targets", &[n])?;
    let ce = g.cross_entropy(logits, targets)?;

    let mut total = hoyers[0];
    for &h in &hoyers[1..] {
        total = g.add(total, h)?;
    }
    let hoyer = g.scale(total, 1.0 / config.depth as f64);
    let penalty = g.scale(hoyer, alpha);
    let loss = g.add(ce, penalty)?;
    g.output("logits", logits);
    g.output("ce", ce);
    g.output("hoyer", hoyer);
    g.output("loss", loss);
    Ok(TrainGraph {
        graph: g.build(),
        logits,
        ce,
        hoyer,
        loss,
        hidden,
    })
}

/// Index inputs for one teacher-forced sequence.
pub(crate) struct SequenceInputs {
    pub class: Tensor,
    pub tokens: Option<Tensor>,
    pub targets: Tensor,
}

impl SequenceInputs {
    pub fn new(model: &ModelConfig, h: &TokenHierarchy, class_row: usize) -> Self {
        let sides = &model.scale_sides;
        let mut tokens = Vec::with_capacity(model.seq_len().saturating_sub(1));
        for k in 1..sides.len() {
            let inp = super::scale_inputs(h.map(k - 1), sides[k - 1], sides[k]);
            tokens.extend(inp.into_iter().map(f64::from));
        }
        let targets = h.flatten().0.into_iter().map(f64::from).collect();
        Self {
            class: Tensor::vector(vec![class_row as f64]),
            tokens: (!tokens.is_empty()).then(|| Tensor::vector(tokens)),
            targets: Tensor::vector(targets),
        }
    }

    pub fn bind<'a>(&'a self, inputs: &mut Inputs<'a>) {
        inputs.bind("class", &self.class);
        if let Some(t) = &self.tokens {
            inputs.bind("tokens", t);
        }
        inputs.bind("targets", &self.targets);
    }
}

/// Non-parameter inputs of the training graph for one sample:
/// `class`, `tokens` (when the sequence has more than one position) and
/// `targets`.
pub fn graph_inputs(config: &ModelConfig, sample: &Sample) -> Vec<(&'static str, Tensor)> {
    let seq = SequenceInputs::new(config, &sample.hierarchy, sample.class_id);
    let mut out = vec![("class", seq.class)];
    out.extend(seq.tokens.map(|t| ("tokens", t)));
    out.push(("targets", seq.targets));
    out
}

impl NextScaleModel {
    pub(crate) fn bind_params<'a>(&'a self, inputs: &mut Inputs<'a>) -> Result<()> {
        for (name, t) in self.trainable_params()? {
            inputs.bind(name, t);
        }
        Ok(())
    }

    /// Teacher-forced logits (`Σ s_k² × V`) through the training graph.
    pub fn forward_train(&self, hierarchy: &TokenHierarchy, class_id: usize) -> Result<Tensor> {
        self.check_geometry(hierarchy)?;
        if class_id > self.config.num_classes {
            return Err(invalid(format!("class {class_id} out of range")));
        }
        let tg = build_train_graph(&self.config, 0.0)?;
        let seq = SequenceInputs::new(&self.config, hierarchy, class_id);
        let mut inputs = Inputs::new();
        self.bind_params(&mut inputs)?;
        seq.bind(&mut inputs);
        let eval = tg.graph.forward(&inputs)?;
        Ok(eval.value(tg.logits).clone())
    }
}
