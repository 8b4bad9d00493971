//! ReLUfication and Hoyer-regularised fine-tuning.

use std::io::Write;

use log::warn;

use crate::autodiff::{hoyer_ratio, Activation, Inputs};
use crate::error::{invalid, Result};
use crate::model::{build_train_graph, fit, ForwardObserver, LossKind, NextScaleModel, OptimizerConfig, TrainLog};
use crate::pyramid::Sample;
use crate::tensor::Tensor;

/// Sweep of sparsity strengths used by the α study.
pub const ALPHA_SWEEP: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifyConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epochs: 2,
            lr: 2e-4,
            warmup_frac: 0.2,
            clip_norm: 1.0,
            batch_size: 16,
            seed: 1,
        }
    }
}

impl SparsifyConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            clip_norm: self.clip_norm,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }
}

/// Switches every FFN to ReLU; all weights are kept as they are.
pub fn relufy(model: &NextScaleModel) -> NextScaleModel {
    let mut out = model.clone();
    if model.config.activation == Activation::Relu {
        warn!("model already uses ReLU; relufy is a no-op");
    }
    out.config.activation = Activation::Relu;
    for b in &mut out.blocks {
        if let Some(m) = b.ffn.as_moe_mut() {
            m.experts.activation = Activation::Relu;
        }
    }
    out
}

/// `(Σ|h|)² / Σh²`; 0 for an all-zero vector.
pub fn hoyer(h: &[f64]) -> f64 {
    hoyer_ratio(h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CombinedLoss {
    pub ce: f64,
    /// Mean over blocks of the token-mean Hoyer ratio.
    pub hoyer: f64,
    pub total: f64,
}

/// `CE + α · L_s` averaged over the batch, with true class labels.
pub fn combined_loss(model: &NextScaleModel, batch: &[Sample], alpha: f64) -> Result<CombinedLoss> {
    if batch.is_empty() {
        return Err(invalid("combined loss needs a non-empty batch"));
    }
    let tg = build_train_graph(&model.config, alpha)?;
    let (mut ce, mut h, mut total) = (0.0, 0.0, 0.0);
    for s in batch {
        let seq = crate::model::graph_inputs(&model.config, s);
        let mut inputs = Inputs::new();
        for (name, t) in model.trainable_params()? {
            inputs.bind(name, t);
        }
        for (name, t) in &seq {
            inputs.bind(*name, t);
        }
        let eval = tg.graph.forward(&inputs)?;
        ce += eval.value(tg.ce).data()[0];
        h += eval.value(tg.hoyer).data()[0];
        total += eval.value(tg.loss).data()[0];
    }
    let n = batch.len() as f64;
    Ok(CombinedLoss {
        ce: ce / n,
        hoyer: h / n,
        total: total / n,
    })
}

/// Per-layer, per-scale activation statistics of the FFN hidden vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    /// `[layer][scale]` fraction of exactly-zero activations.
    pub zero_fraction: Vec<Vec<f64>>,
    /// `[layer][scale]` token-mean Hoyer ratio.
    pub hoyer: Vec<Vec<f64>>,
    /// Token-mean Hoyer ratio per layer over all scales.
    pub layer_hoyer: Vec<f64>,
}

impl SparsityReport {
    /// Zero fraction over every layer and token.
    pub fn mean_zero_fraction(&self) -> f64 {
        let all: Vec<f64> = self.zero_fraction.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    /// Zero fraction of each scale, averaged over layers.
    pub fn scale_zero_fraction(&self) -> Vec<f64> {
        let k = self.zero_fraction.first().map_or(0, Vec::len);
        (0..k)
            .map(|s| self.zero_fraction.iter().map(|l| l[s]).sum::<f64>() / self.zero_fraction.len() as f64)
            .collect()
    }

    /// CSV: layer, scale, zero_fraction, mean_hoyer.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["layer", "scale", "zero_fraction", "mean_hoyer"])?;
        for (l, (zs, hs)) in self.zero_fraction.iter().zip(&self.hoyer).enumerate() {
            for (s, (z, h)) in zs.iter().zip(hs).enumerate() {
                csv.write_record([l.to_string(), (s + 1).to_string(), format!("{z:.9}"), format!("{h:.9}")])?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

struct HiddenStats {
    zeros: Vec<Vec<u64>>,
    entries: Vec<Vec<u64>>,
    hoyer: Vec<Vec<f64>>,
    rows: Vec<Vec<u64>>,
}

impl ForwardObserver for HiddenStats {
    fn ffn_hidden(&mut self, layer: usize, scale: usize, h: &Tensor) {
        self.zeros[layer][scale] += h.data().iter().filter(|&&v| v == 0.0).count() as u64;
        self.entries[layer][scale] += h.len() as u64;
        for r in 0..h.rows() {
            self.hoyer[layer][scale] += hoyer_ratio(h.row(r));
        }
        self.rows[layer][scale] += h.rows() as u64;
    }
}

/// Teacher-forced activation statistics of a dense model over `data`.
pub fn sparsity_report(model: &NextScaleModel, data: &[Sample]) -> Result<SparsityReport> {
    if !model.is_dense() {
        return Err(invalid("sparsity statistics are collected on dense models"));
    }
    if data.is_empty() {
        return Err(invalid("sparsity report needs data"));
    }
    let (l, k) = (model.config.depth, model.config.num_scales());
    let mut stats = HiddenStats {
        zeros: vec![vec![0; k]; l],
        entries: vec![vec![0; k]; l],
        hoyer: vec![vec![0.0; k]; l],
        rows: vec![vec![0; k]; l],
    };
    for s in data {
        model.observe(&s.hierarchy, s.class_id, None, &mut stats)?;
    }
    let zero_fraction = (0..l)
        .map(|i| (0..k).map(|s| stats.zeros[i][s] as f64 / stats.entries[i][s] as f64).collect())
        .collect();
    let hoyer = (0..l)
        .map(|i| (0..k).map(|s| stats.hoyer[i][s] / stats.rows[i][s] as f64).collect())
        .collect();
    let layer_hoyer = (0..l)
        .map(|i| stats.hoyer[i].iter().sum::<f64>() / stats.rows[i].iter().sum::<u64>() as f64)
        .collect();
    Ok(SparsityReport {
        zero_fraction,
        hoyer,
        layer_hoyer,
    })
}

/// Fine-tunes a ReLU model under `CE + α·L_s` and reports activation
/// sparsity on `report_data`.
pub fn finetune_sparse(
    model: &NextScaleModel,
    data: &[Sample],
    report_data: &[Sample],
    config: &SparsifyConfig,
) -> Result<(NextScaleModel, SparsityReport, TrainLog)> {
    if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(invalid(format!("alpha {} must be finite and non-negative", config.alpha)));
    }
    if model.config.activation != Activation::Relu {
        return Err(invalid("sparse fine-tuning expects a ReLU model (call relufy first)"));
    }
    let mut out = model.clone();
    let log = fit(&mut out, data, &config.optimizer(), LossKind::Sparse { alpha: config.alpha })?;
    let report = sparsity_report(&out, report_data)?;
    Ok((out, report, log))
}
