use std::io::Write;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{build_train_graph, SequenceInputs};
use super::{ModelConfig, NextScaleModel};
use crate::autodiff::{Gradients, Inputs};
use crate::error::{invalid, Error, Result};
use crate::optim::{clip_global_norm, Adam};
use crate::pyramid::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Warm-up length as a fraction of one epoch.
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of replacing the class label by the null class.
    pub label_drop: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_frac: 0.2,
            clip_norm: 1.0,
            epochs: 4,
            batch_size: 16,
            label_drop: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.99,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_drop) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(invalid("label drop and warm-up fraction must lie in [0, 1]"));
        }
        if self.clip_norm <= 0.0 {
            return Err(invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Which loss `fit` minimises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// Cross-entropy plus `alpha` times the block-mean Hoyer penalty.
    Sparse { alpha: f64 },
}

impl LossKind {
    fn alpha(self) -> f64 {
        match self {
            LossKind::CrossEntropy => 0.0,
            LossKind::Sparse { alpha } => alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub hoyer: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_hoyer: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["step", "epoch", "lr", "ce", "hoyer", "loss", "grad_norm"])?;
        for s in &self.steps {
            csv.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                format!("{:.9e}", s.lr),
                format!("{:.12}", s.ce),
                format!("{:.12}", s.hoyer),
                format!("{:.12}", s.loss),
                format!("{:.9e}", s.grad_norm),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Linear warm-up over `warmup` steps, then linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        base * (total - step) as f64 / (total - warmup) as f64
    } else {
        base
    }
}

/// Initialises a model from `opt.seed` and trains it with cross-entropy.
pub fn train(data: &[Sample], config: &ModelConfig, opt: &OptimizerConfig) -> Result<(NextScaleModel, TrainLog)> {
    let mut model = NextScaleModel::init(config, opt.seed)?;
    let log = fit(&mut model, data, opt, LossKind::CrossEntropy)?;
    Ok((model, log))
}

/// Mini-batch training of a dense model in place. Gradients are averaged
/// over the batch in sample order, clipped by global norm and applied with
/// Adam; any non-finite value aborts with [`Error::Diverged`].
pub fn fit(model: &mut NextScaleModel, data: &[Sample], opt: &OptimizerConfig, loss: LossKind) -> Result<TrainLog> {
    opt.validate()?;
    if data.is_empty() {
        return Err(invalid("training needs a non-empty dataset"));
    }
    for s in data {
        model.check_geometry(&s.hierarchy)?;
    }
    let cfg = model.config.clone();
    let tg = build_train_graph(&cfg, loss.alpha())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x7A11_u64);
    let mut adam = Adam::new(opt.beta1, opt.beta2, 1e-8, opt.weight_decay);
    let steps_per_epoch = data.len().div_ceil(opt.batch_size);
    let total = steps_per_epoch * opt.epochs;
    let warmup = ((opt.warmup_frac * steps_per_epoch as f64).round() as usize).max(1);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let (mut sum_ce, mut sum_h, mut sum_loss) = (0.0, 0.0, 0.0);
        for batch in order.chunks(opt.batch_size) {
            let mut grads: Option<Gradients> = None;
            let (mut ce, mut hoyer, mut value) = (0.0, 0.0, 0.0);
            for &i in batch {
                let s = &data[i];
                let class_row = if rng.random_bool(opt.label_drop) {
                    cfg.null_class()
                } else {
                    s.class_id
                };
                let seq = SequenceInputs::new(&cfg, &s.hierarchy, class_row);
                let mut inputs = Inputs::new();
                model.bind_params(&mut inputs)?;
                seq.bind(&mut inputs);
                let eval = tg.graph.forward(&inputs).map_err(|e| Error::Diverged {
                    step,
                    detail: e.to_string(),
                })?;
                ce += eval.value(tg.ce).data()[0];
                hoyer += eval.value(tg.hoyer).data()[0];
                value += eval.value(tg.loss).data()[0];
                let g = tg.graph.backward(&eval, tg.loss)?;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (name, t) in g {
                            let a = acc.get_mut(&name).expect("same graph, same gradient names");
                            for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let b = batch.len() as f64;
            let mut grads = grads.expect("non-empty batch");
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v /= b);
            }
            let grad_norm = clip_global_norm(&mut grads, opt.clip_norm);
            if !grad_norm.is_finite() || !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {value}, gradient norm {grad_norm}"),
                });
            }
            let lr = lr_at(step, total, warmup, opt.lr);
            adam.step(model.trainable_params_mut()?, &grads, lr)?;
            let entry = StepLog {
                step,
                epoch,
                lr,
                ce: ce / b,
                hoyer: hoyer / b,
                loss: value / b,
                grad_norm,
            };
            debug!("step {step} epoch {epoch} loss {:.5} ce {:.5}", entry.loss, entry.ce);
            sum_ce += ce;
            sum_h += hoyer;
            sum_loss += value;
            log.steps.push(entry);
            step += 1;
        }
        let n = data.len() as f64;
        log.epochs.push(EpochStats {
            epoch,
            mean_ce: sum_ce / n,
            mean_hoyer: sum_h / n,
            mean_loss: sum_loss / n,
        });
    }
    Ok(log)
}
