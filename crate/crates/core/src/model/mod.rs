//! Miniature next-scale transformer.
//!
//! The model reads a flattened token hierarchy scale by scale. Position 0 is
//! the class (start) token and predicts the single token of the coarsest
//! scale; every later scale `k` occupies `s_k²` positions, each fed the
//! ground-truth token of scale `k-1` at the spatially corresponding cell,
//! and predicts the tokens of scale `k`. Attention is block-causal over
//! scales.

mod checkpoint;
mod eval;
mod graph;
mod infer;
mod mask;
mod sample;
mod train;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use eval::{cross_entropy, nll_eval, EvalReport};
pub use graph::{build_train_graph, graph_inputs, TrainGraph};
pub use infer::{ForwardObserver, NoObserver};
pub use mask::{block_causal_mask, position_scales, BlockMask};
pub use sample::{filter_top_k_top_p, generate_timed, guided_logits, sample, Generation, SamplerConfig};
pub use train::{fit, lr_at, train, EpochStats, LossKind, OptimizerConfig, StepLog, TrainLog};


use crate::autodiff::Activation;
use crate::dynrouter::MoeLayer;
use crate::error::{invalid, Result};
use crate::pyramid::{scale_boundaries, validate_sides, PyramidConfig, TokenHierarchy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub scale_sides: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PyramidConfig::default();
        Self {
            d_model: 64,
            depth: 6,
            heads: 4,
            d_ff: 256,
            vocab: p.vocab,
            num_classes: p.num_classes,
            scale_sides: p.scale_sides,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn for_pyramid(pyramid: &PyramidConfig) -> Self {
        Self {
            vocab: pyramid.vocab,
            num_classes: pyramid.num_classes,
            scale_sides: pyramid.scale_sides.clone(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_sides(&self.scale_sides)?;
        if self.scale_sides[0] != 1 {
            return Err(invalid("the coarsest scale must be a single token"));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.vocab < 2 {
            return Err(invalid("vocab must be at least 2"));
        }
        if self.activation == Activation::Abs {
            return Err(invalid("FFN activation must be gelu or relu"));
        }
        Ok(())
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            scale_sides: self.scale_sides.clone(),
            vocab: self.vocab,
            num_classes: self.num_classes,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scale_sides.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Σ s_k².
    pub fn seq_len(&self) -> usize {
        self.scale_sides.iter().map(|s| s * s).sum()
    }

    pub fn boundaries(&self) -> Vec<Range<usize>> {
        scale_boundaries(&self.scale_sides)
    }

    /// Embedding row used for the unconditional (null-class) branch.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// For each cell of a `side × side` grid, the row-major index of the
/// spatially corresponding cell of the `prev_side × prev_side` grid.
pub fn parent_cells(prev_side: usize, side: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            out.push((r * prev_side / side) * prev_side + c * prev_side / side);
        }
    }
    out
}

/// Input tokens for scale `k ≥ 1`: the scale `k-1` token under each cell.
pub fn scale_inputs(prev_map: &[u16], prev_side: usize, side: usize) -> Vec<u16> {
    parent_cells(prev_side, side).into_iter().map(|i| prev_map[i]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Two-layer FFN: `F(x) = W₂ σ(W₁ x + b₁) + b₂`, weights stored `(out × in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFfn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DenseFfn {
    pub fn d_ff(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Hidden activations `σ(x W₁ᵀ + b₁)` for a batch of rows.
    pub fn hidden(&self, x: &Tensor, activation: Activation) -> Result<Tensor> {
        let mut h = x.matmul_t(&self.w1)?;
        let b = self.b1.data();
        let n = b.len();
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v = activation.apply(*v + b[i % n]);
        }
        Ok(h)
    }

    pub fn output(&self, h: &Tensor) -> Result<Tensor> {
        let mut y = h.matmul_t(&self.w2)?;
        add_bias_rows(&mut y, &self.b2);
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor, activation: Activation) -> Result<Tensor> {
        self.output(&self.hidden(x, activation)?)
    }
}

pub(crate) fn add_bias_rows(y: &mut Tensor, bias: &Tensor) {
    let b = bias.data();
    let n = b.len();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b[i % n];
    }
}

/// Either the original dense FFN or its mixture-of-experts rearrangement.
#[derive(Clone, Debug, PartialEq)]
pub enum FfnLayer {
    Dense(DenseFfn),
    Moe(MoeLayer),
}

impl FfnLayer {
    pub fn is_moe(&self) -> bool {
        matches!(self, FfnLayer::Moe(_))
    }

    pub fn as_dense(&self) -> Option<&DenseFfn> {
        match self {
            FfnLayer::Dense(d) => Some(d),
            FfnLayer::Moe(_) => None,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeLayer> {
        match self {
            FfnLayer::Moe(m) => Some(m),
            FfnLayer::Dense(_) => None,
        }
    }

    pub fn as_moe_mut(&mut self) -> Option<&mut MoeLayer> {
        match self {
            FfnLayer::Moe(m) => Some(m),
            FfnLayer::Dense(_) => None,
        }
    }

    /// The equivalent dense weights (reassembled for MoE layers).
    pub fn to_dense(&self) -> DenseFfn {
        match self {
            FfnLayer::Dense(d) => d.clone(),
            FfnLayer::Moe(m) => m.experts.reassemble(),
        }
    }
}

/// Static hidden-unit pruning applied at a fixed set of scales.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitPrune {
    /// Indexed by original hidden unit.
    pub keep: Vec<bool>,
    /// 0-based scale indices the mask applies to.
    pub scales: Vec<usize>,
}

impl UnitPrune {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn applies_to(&self, scale: usize) -> bool {
        self.scales.contains(&scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: Attention,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ffn: FfnLayer,
    pub prune: Option<UnitPrune>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NextScaleModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    /// `C + 1` rows; the last row is the null class.
    pub class_emb: Tensor,
    /// One row per flattened position.
    pub pos_emb: Tensor,
    /// One row per scale.
    pub level_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    /// `d_model × V`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

impl NextScaleModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let proj_std = INIT_STD / (2.0 * config.depth as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let attn = Attention {
                wq: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], proj_std, &mut rng),
                bo: Tensor::zeros(&[d]),
            };
            let ffn = DenseFfn {
                w1: Tensor::randn(&[config.d_ff, d], INIT_STD, &mut rng),
                b1: Tensor::zeros(&[config.d_ff]),
                w2: Tensor::randn(&[d, config.d_ff], proj_std, &mut rng),
                b2: Tensor::zeros(&[d]),
            };
            blocks.push(Block {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                attn,
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                ffn: FfnLayer::Dense(ffn),
                prune: None,
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_emb: Tensor::randn(&[config.vocab, d], INIT_STD, &mut rng),
            class_emb: Tensor::randn(&[config.num_classes + 1, d], INIT_STD, &mut rng),
            pos_emb: Tensor::randn(&[config.seq_len(), d], INIT_STD, &mut rng),
            level_emb: Tensor::randn(&[config.num_scales(), d], INIT_STD, &mut rng),
            blocks,
            ln_f_g: Tensor::ones(&[d]),
            ln_f_b: Tensor::zeros(&[d]),
            head_w: Tensor::randn(&[d, config.vocab], INIT_STD, &mut rng),
            head_b: Tensor::zeros(&[config.vocab]),
        })
    }

    pub fn is_dense(&self) -> bool {
        self.blocks.iter().all(|b| !b.ffn.is_moe())
    }

    pub fn moe_layers(&self) -> usize {
        self.blocks.iter().filter(|b| b.ffn.is_moe()).count()
    }

    pub fn check_geometry(&self, h: &TokenHierarchy) -> Result<()> {
        if h.scale_sides() != self.config.scale_sides.as_slice() || h.vocab() != self.config.vocab {
            return Err(invalid(format!(
                "hierarchy geometry {:?}/V={} does not match model {:?}/V={}",
                h.scale_sides(),
                h.vocab(),
                self.config.scale_sides,
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Parameters shared by every block kind, keyed by stable names.
    fn shared_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("class_emb".into(), &self.class_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("level_emb".into(), &self.level_emb),
            ("ln_f.g".into(), &self.ln_f_g),
            ("ln_f.b".into(), &self.ln_f_b),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let a = &b.attn;
            for (n, t) in [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("attn.wq", &a.wq),
                ("attn.bq", &a.bq),
                ("attn.wk", &a.wk),
                ("attn.bk", &a.bk),
                ("attn.wv", &a.wv),
                ("attn.bv", &a.bv),
                ("attn.wo", &a.wo),
                ("attn.bo", &a.bo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
            ] {
                out.push((format!("blocks.{l}.{n}"), t));
            }
        }
        out
    }

    /// Every trainable tensor of a fully dense model.
    pub fn trainable_params(&self) -> Result<Vec<(String, &Tensor)>> {
        let mut out = self.shared_params();
        for (l, b) in self.blocks.iter().enumerate() {
            let f = b
                .ffn
                .as_dense()
                .ok_or_else(|| invalid(format!("block {l} is a MoE layer; only dense models train")))?;
            for (n, t) in [("ffn.w1", &f.w1), ("ffn.b1", &f.b1), ("ffn.w2", &f.w2), ("ffn.b2", &f.b2)] {
                out.push((format!("blocks.{l}.{n}"), t));
            }
        }
        Ok(out)
    }

    pub fn trainable_params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        if !self.is_dense() {
            return Err(invalid("only dense models train"));
        }
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("class_emb".into(), &mut self.class_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("level_emb".into(), &mut self.level_emb),
            ("ln_f.g".into(), &mut self.ln_f_g),
            ("ln_f.b".into(), &mut self.ln_f_b),
            ("head.w".into(), &mut self.head_w),
            ("head.b".into(), &mut self.head_b),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let a = &mut b.attn;
            for (n, t) in [
                ("ln1.g", &mut b.ln1_g),
                ("ln1.b", &mut b.ln1_b),
                ("attn.wq", &mut a.wq),
                ("attn.bq", &mut a.bq),
                ("attn.wk", &mut a.wk),
                ("attn.bk", &mut a.bk),
                ("attn.wv", &mut a.wv),
                ("attn.bv", &mut a.bv),
                ("attn.wo", &mut a.wo),
                ("attn.bo", &mut a.bo),
                ("ln2.g", &mut b.ln2_g),
                ("ln2.b", &mut b.ln2_b),
            ] {
                out.push((format!("blocks.{l}.{n}"), t));
            }
            if let FfnLayer::Dense(f) = &mut b.ffn {
                for (n, t) in [
                    ("ffn.w1", &mut f.w1),
                    ("ffn.b1", &mut f.b1),
                    ("ffn.w2", &mut f.w2),
                    ("ffn.b2", &mut f.b2),
                ] {
                    out.push((format!("blocks.{l}.{n}"), t));
                }
            }
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.shared_params().iter().map(|(_, t)| t.len()).sum::<usize>()
            + self
                .blocks
                .iter()
                .map(|b| {
                    let f = b.ffn.to_dense();
                    f.w1.len() + f.b1.len() + f.w2.len() + f.b2.len()
                })
                .sum::<usize>()
    }
}
