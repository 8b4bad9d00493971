//! Norm-regression routers, relative-threshold gating and the MoE forward
//! pass, plus the static pruned-FFN baseline.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, GraphBuilder, Inputs, NodeId};
use crate::error::{invalid, Error, Result};
use crate::flops::PhaseTimes;
use crate::model::{add_bias_rows, ForwardObserver, ModelConfig, NextScaleModel, UnitPrune};
use crate::moefy::ExpertSet;
use crate::optim::Adam;
use crate::pyramid::Sample;
use crate::tensor::Tensor;

/// Threshold list from the reference configuration for the last three
/// scales.
pub const REFERENCE_TAUS: [f64; 3] = [0.81839, 0.81302, 0.78686];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Every expert runs; no router.
    Dense,
    /// Gate on router predictions.
    DynkMax,
    /// Gate on true expert norms (two passes through the experts).
    Oracle,
    /// Static execution of a pruned model; no router.
    Pruned,
}

impl ForwardMode {
    pub fn name(self) -> &'static str {
        match self {
            ForwardMode::Dense => "dense",
            ForwardMode::DynkMax => "dynk_max",
            ForwardMode::Oracle => "oracle",
            ForwardMode::Pruned => "pruned",
        }
    }
}

impl FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ForwardMode::Dense),
            "dynk_max" => Ok(ForwardMode::DynkMax),
            "oracle" => Ok(ForwardMode::Oracle),
            "pruned" => Ok(ForwardMode::Pruned),
            other => Err(invalid(format!("unknown forward mode `{other}`"))),
        }
    }
}

/// Per-scale thresholds for scales `switch_scale..=K` (1-based); earlier
/// scales run dense.
#[derive(Clone, Debug, PartialEq)]
pub struct TauSchedule {
    switch_scale: usize,
    taus: Vec<f64>,
    scale_aware: bool,
}

impl TauSchedule {
    /// With `scale_aware`, taus must be non-decreasing toward fine scales.
    pub fn new(switch_scale: usize, taus: Vec<f64>, scale_aware: bool, num_scales: usize) -> Result<Self> {
        if switch_scale == 0 || switch_scale > num_scales {
            return Err(invalid(format!("switch scale {switch_scale} outside 1..={num_scales}")));
        }
        if taus.len() != num_scales - switch_scale + 1 {
            return Err(invalid(format!(
                "{} taus given for scales {switch_scale}..={num_scales}",
                taus.len()
            )));
        }
        if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid(format!("tau {t} outside [0, 1]")));
        }
        if scale_aware && taus.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid(format!("scale-aware taus must be non-decreasing, got {taus:?}")));
        }
        Ok(Self {
            switch_scale,
            taus,
            scale_aware,
        })
    }

    /// The same threshold on every scale from `switch_scale` on.
    pub fn uniform(switch_scale: usize, tau: f64, num_scales: usize) -> Result<Self> {
        let n = (num_scales + 1).saturating_sub(switch_scale);
        Self::new(switch_scale, vec![tau; n], false, num_scales)
    }

    /// Reference-shaped schedule on the last three scales: the stored
    /// threshold list multiplied by `factor`.
    pub fn reference_shaped(factor: f64, num_scales: usize) -> Result<Self> {
        if num_scales < 3 {
            return Err(invalid("the reference schedule needs at least three scales"));
        }
        let taus = REFERENCE_TAUS.iter().map(|t| (t * factor).clamp(0.0, 1.0)).collect();
        Self::new(num_scales - 2, taus, false, num_scales)
    }

    pub fn switch_scale(&self) -> usize {
        self.switch_scale
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn scale_aware(&self) -> bool {
        self.scale_aware
    }

    /// Threshold for a 0-based scale, or `None` where the scale runs dense.
    pub fn tau_at(&self, scale: usize) -> Option<f64> {
        let one_based = scale + 1;
        (one_based >= self.switch_scale)
            .then(|| self.taus.get(one_based - self.switch_scale).copied())
            .flatten()
    }

    /// `switch:τ,τ,...` form used by CSV outputs.
    pub fn label(&self) -> String {
        let taus: Vec<String> = self.taus.iter().map(|t| format!("{t}")).collect();
        format!("{}:{}", self.switch_scale, taus.join(","))
    }
}

/// Gating configuration forwarded to MoE blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Gating {
    pub mode: ForwardMode,
    pub schedule: TauSchedule,
    /// Restricts gating to one 0-based scale (single-scale ablation).
    pub only_scale: Option<usize>,
}

impl Gating {
    pub fn new(mode: ForwardMode, schedule: TauSchedule) -> Self {
        Self {
            mode,
            schedule,
            only_scale: None,
        }
    }

    pub fn dense(num_scales: usize) -> Self {
        Self::new(
            ForwardMode::Dense,
            TauSchedule::uniform(1, 0.0, num_scales).expect("uniform zero schedule is valid"),
        )
    }

    /// Threshold used at a 0-based scale, `None` when it runs dense.
    pub fn tau_for(&self, scale: usize) -> Option<f64> {
        match self.mode {
            ForwardMode::Dense | ForwardMode::Pruned => None,
            ForwardMode::DynkMax | ForwardMode::Oracle => {
                if self.only_scale.is_some_and(|s| s != scale) {
                    None
                } else {
                    self.schedule.tau_at(scale)
                }
            }
        }
    }
}

/// `mask_i = preds_i ≥ τ · max_j preds_j`.
pub fn gate(preds: &[f64], tau: f64) -> Vec<bool> {
    let max = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = tau * max;
    preds.iter().map(|&p| p >= threshold).collect()
}

/// ℓ2 norm of every expert's output for one input vector.
pub fn expert_norms(experts: &ExpertSet, x: &[f64]) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(expert_norms_rows(experts, &x)?.into_data())
}

/// Row-wise expert output norms (`rows × E`).
pub fn expert_norms_rows(experts: &ExpertSet, x: &Tensor) -> Result<Tensor> {
    let (n, e) = (x.rows(), experts.num_experts());
    let mut out = vec![0.0; n * e];
    for i in 0..e {
        let y = experts.expert_forward(i, x)?;
        for r in 0..n {
            out[r * e + i] = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    Tensor::new(vec![n, e], out)
}

/// Anything that predicts per-expert output norms for a batch of rows.
pub trait NormPredictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

/// The true norms, i.e. a perfect router.
pub struct TrueNorms<'a>(pub &'a ExpertSet);

impl NormPredictor for TrueNorms<'_> {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        expert_norms_rows(self.0, x)
    }
}

/// Router MLP: `d_model → w → w → E` with gelu hidden activations and an
/// absolute-value output.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl RouterNet {
    pub fn init(d_model: usize, width: usize, num_experts: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Self {
            w1: Tensor::randn(&[width, d_model], std(d_model), &mut rng),
            b1: Tensor::zeros(&[width]),
            w2: Tensor::randn(&[width, width], std(width), &mut rng),
            b2: Tensor::zeros(&[width]),
            w3: Tensor::randn(&[num_experts, width], std(width), &mut rng),
            b3: Tensor::zeros(&[num_experts]),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_experts(&self) -> usize {
        self.w3.rows()
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
            ("w3".into(), &mut self.w3),
            ("b3".into(), &mut self.b3),
        ]
    }

    /// Multiply-add FLOPs of one prediction.
    pub fn flops_per_token(&self) -> u64 {
        let (d, w, e) = (self.d_model() as u64, self.width() as u64, self.num_experts() as u64);
        2 * (d * w + w * w + w * e)
    }

    fn layer(x: &Tensor, w: &Tensor, b: &Tensor, act: Activation) -> Result<Tensor> {
        let mut y = x.matmul_t(w)?;
        add_bias_rows(&mut y, b);
        Ok(y.map(|v| act.apply(v)))
    }
}

impl NormPredictor for RouterNet {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let h = Self::layer(x, &self.w1, &self.b1, Activation::Gelu)?;
        let h = Self::layer(&h, &self.w2, &self.b2, Activation::Gelu)?;
        Self::layer(&h, &self.w3, &self.b3, Activation::Abs)
    }
}

/// A MoE block: experts plus (once trained) the router.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub experts: ExpertSet,
    pub router: Option<RouterNet>,
}

pub struct MoeOutput {
    pub output: Tensor,
    /// Selected experts per input row.
    pub selections: Vec<Vec<bool>>,
    pub router_ran: bool,
}

/// MoE forward for a batch of rows. `tau = None` (or a non-gating mode)
/// runs every expert; otherwise experts are gated per row on router
/// predictions (`DynkMax`) or true norms (`Oracle`). `keep` applies a
/// static unit mask over original FFN units.
pub fn moe_forward(
    layer: &MoeLayer,
    x: &Tensor,
    tau: Option<f64>,
    mode: ForwardMode,
    keep: Option<&[bool]>,
    times: Option<&mut PhaseTimes>,
) -> Result<MoeOutput> {
    match (mode, tau) {
        (ForwardMode::DynkMax, Some(t)) => {
            let router = layer
                .router
                .as_ref()
                .ok_or_else(|| invalid("dynk_max gating needs a trained router"))?;
            moe_forward_predicted(layer, x, t, router, true, keep, times)
        }
        (ForwardMode::Oracle, Some(t)) => {
            moe_forward_predicted(layer, x, t, &TrueNorms(&layer.experts), false, keep, times)
        }
        _ => {
            let output = dispatch(&layer.experts, x, None, keep, None)?;
            let e = layer.experts.num_experts();
            Ok(MoeOutput {
                output,
                selections: vec![vec![true; e]; x.rows()],
                router_ran: false,
            })
        }
    }
}

/// Gates on `predictor`'s output and runs the selected experts.
pub fn moe_forward_predicted(
    layer: &MoeLayer,
    x: &Tensor,
    tau: f64,
    predictor: &dyn NormPredictor,
    router_ran: bool,
    keep: Option<&[bool]>,
    mut times: Option<&mut PhaseTimes>,
) -> Result<MoeOutput> {
    let started = Instant::now();
    let preds = predictor.predict(x)?;
    if let Some(t) = times.as_deref_mut() {
        t.add_router(started.elapsed());
    }
    let started = Instant::now();
    let selections: Vec<Vec<bool>> = (0..x.rows()).map(|r| gate(preds.row(r), tau)).collect();
    if let Some(t) = times.as_deref_mut() {
        t.add_dispatch(started.elapsed());
    }
    let output = dispatch(&layer.experts, x, Some(&selections), keep, times)?;
    Ok(MoeOutput {
        output,
        selections,
        router_ran,
    })
}

/// Runs each expert on the rows that selected it and scatter-adds the
/// results in ascending expert order, then adds `b₂` once.
fn dispatch(
    experts: &ExpertSet,
    x: &Tensor,
    selections: Option<&[Vec<bool>]>,
    keep: Option<&[bool]>,
    mut times: Option<&mut PhaseTimes>,
) -> Result<Tensor> {
    let (n, d) = (x.rows(), experts.d_model());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..experts.num_experts() {
        let started = Instant::now();
        let rows: Option<Vec<usize>> = selections.map(|s| (0..n).filter(|&r| s[r][i]).collect());
        let subset = match &rows {
            Some(r) if r.is_empty() => {
                if let Some(t) = times.as_deref_mut() {
                    t.add_dispatch(started.elapsed());
                }
                continue;
            }
            Some(r) if r.len() < n => Some(x.gather_rows(r)),
            _ => None,
        };
        if let Some(t) = times.as_deref_mut() {
            t.add_dispatch(started.elapsed());
        }
        let y = experts.expert_forward_masked(i, subset.as_ref().unwrap_or(x), keep)?;
        let started = Instant::now();
        match (&rows, subset.is_some()) {
            (Some(r), true) => {
                for (j, &row) in r.iter().enumerate() {
                    for (o, v) in out.row_mut(row).iter_mut().zip(y.row(j)) {
                        *o += v;
                    }
                }
            }
            _ => {
                for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                    *o += v;
                }
            }
        }
        if selections.is_some() {
            if let Some(t) = times.as_deref_mut() {
                t.add_dispatch(started.elapsed());
            }
        }
    }
    add_bias_rows(&mut out, &experts.b2);
    Ok(out)
}

/// One FFN execution for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnRecord {
    /// 0 for the conditional pass, 1 for the null-class pass.
    pub pass: u8,
    pub scale: u16,
    pub layer: u16,
    /// Row-major index within the scale.
    pub token: u32,
    /// Hidden units executed.
    pub units: u32,
    pub router_ran: bool,
    /// Selected experts; empty for dense blocks.
    pub selected: Vec<bool>,
}

impl FfnRecord {
    pub fn dense(pass: usize, scale: usize, layer: usize, token: usize, units: usize) -> Self {
        Self {
            pass: pass as u8,
            scale: scale as u16,
            layer: layer as u16,
            token: token as u32,
            units: units as u32,
            router_ran: false,
            selected: Vec::new(),
        }
    }

    pub fn moe(
        pass: usize,
        scale: usize,
        layer: usize,
        token: usize,
        units: usize,
        router_ran: bool,
        selected: Vec<bool>,
    ) -> Self {
        Self {
            selected,
            router_ran,
            ..Self::dense(pass, scale, layer, token, units)
        }
    }

    pub fn experts_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Per-token FFN executions of one forward or generation, ordered by
/// (pass, scale, layer, token).
#[derive(Clone, Debug, PartialEq)]
pub struct GatingTrace {
    pub scale_sides: Vec<usize>,
    pub depth: usize,
    pub records: Vec<FfnRecord>,
}

impl GatingTrace {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            scale_sides: config.scale_sides.clone(),
            depth: config.depth,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: FfnRecord) {
        self.records.push(record);
    }

    pub fn passes(&self) -> usize {
        self.records.iter().map(|r| r.pass as usize + 1).max().unwrap_or(0)
    }

    pub fn append(&mut self, other: GatingTrace) {
        self.records.extend(other.records);
    }

    /// Records are sorted by (pass, scale, layer, token).
    pub fn sort(&mut self) {
        self.records.sort_by_key(|r| (r.pass, r.scale, r.layer, r.token));
    }

    /// Per-scale grid of selected-expert counts summed over layers and
    /// passes (MoE blocks only).
    pub fn expert_grid(&self, scale: usize) -> Vec<usize> {
        let side = self.scale_sides[scale];
        let mut grid = vec![0; side * side];
        for r in self.records.iter().filter(|r| r.scale as usize == scale) {
            grid[r.token as usize] += r.experts_selected();
        }
        grid
    }

    /// CSV: scale, layer, token_row, token_col, experts_selected, pass.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["scale", "layer", "token_row", "token_col", "experts_selected", "pass"])?;
        for r in self.records.iter().filter(|r| !r.selected.is_empty()) {
            let side = self.scale_sides[r.scale as usize];
            csv.write_record([
                (r.scale as usize + 1).to_string(),
                r.layer.to_string(),
                (r.token as usize / side).to_string(),
                (r.token as usize % side).to_string(),
                r.experts_selected().to_string(),
                r.pass.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterConfig {
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            width: 32,
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterLayerReport {
    pub layer: usize,
    pub train_pairs: usize,
    pub initial_heldout_mse: f64,
    pub final_heldout_mse: f64,
    pub epoch_train_mse: Vec<f64>,
}

/// Collects FFN inputs per layer.
struct InputHarvest {
    rows: Vec<Vec<f64>>,
}

impl ForwardObserver for InputHarvest {
    fn ffn_input(&mut self, layer: usize, _scale: usize, x: &Tensor) {
        self.rows[layer].extend_from_slice(x.data());
    }
}

/// Teacher-forced FFN inputs for every layer over `data` (`rows × d`).
pub fn harvest_ffn_inputs(model: &NextScaleModel, data: &[Sample]) -> Result<Vec<Tensor>> {
    let d = model.config.d_model;
    let mut harvest = InputHarvest {
        rows: vec![Vec::new(); model.config.depth],
    };
    for s in data {
        model.observe(&s.hierarchy, s.class_id, None, &mut harvest)?;
    }
    harvest
        .rows
        .into_iter()
        .map(|r| {
            let n = r.len() / d;
            Tensor::new(vec![n, d], r)
        })
        .collect()
}

fn router_graph(rows: usize, d: usize, width: usize, e: usize) -> Result<(Graph, NodeId)> {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[rows, d])?;
    let target = g.input("target", &[rows, e])?;
    let mut h = x;
    for (i, (din, dout)) in [(d, width), (width, width), (width, e)].into_iter().enumerate() {
        let w = g.param(&format!("w{}", i + 1), &[dout, din])?;
        let b = g.param(&format!("b{}", i + 1), &[dout])?;
        let y = g.linear(h, w, b)?;
        h = g.activation(y, if i < 2 { Activation::Gelu } else { Activation::Abs });
    }
    let loss = g.mse(h, target)?;
    Ok((g.build(), loss))
}

fn mse(router: &RouterNet, x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let p = router.predict(x)?;
    Ok(p.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// Trains one router per MoE layer by mean-squared regression onto true
/// expert norms of teacher-forced FFN inputs from `train`. Routers already
/// present are used as the starting point.
pub fn train_router(
    model: &NextScaleModel,
    train: &[Sample],
    heldout: &[Sample],
    config: &RouterConfig,
) -> Result<(NextScaleModel, Vec<RouterLayerReport>)> {
    if model.moe_layers() == 0 {
        return Err(invalid("router training needs a MoE model"));
    }
    if config.batch_size == 0 || config.width == 0 {
        return Err(invalid("router width and batch size must be positive"));
    }
    let train_x = harvest_ffn_inputs(model, train)?;
    let held_x = harvest_ffn_inputs(model, heldout)?;
    let mut out = model.clone();
    let mut reports = Vec::new();
    let d = model.config.d_model;
    for (l, block) in out.blocks.iter_mut().enumerate() {
        let Some(layer) = block.ffn.as_moe_mut() else {
            continue;
        };
        let e = layer.experts.num_experts();
        let tx = &train_x[l];
        let ty = expert_norms_rows(&layer.experts, tx)?;
        let hx = &held_x[l];
        let hy = expert_norms_rows(&layer.experts, hx)?;
        let mut router = layer
            .router
            .clone()
            .unwrap_or_else(|| RouterNet::init(d, config.width, e, config.seed.wrapping_add(l as u64)));
        let initial = mse(&router, hx, &hy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x5EED_0000 + l as u64));
        let mut opt = Adam::new(0.9, 0.999, 1e-8, 0.0);
        let mut graphs: Vec<(usize, Graph, NodeId)> = Vec::new();
        let mut epoch_loss = Vec::with_capacity(config.epochs);
        let n = tx.rows();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let bx = tx.gather_rows(chunk);
                let by = ty.gather_rows(chunk);
                if !graphs.iter().any(|(r, _, _)| *r == chunk.len()) {
                    let (g, loss) = router_graph(chunk.len(), d, config.width, e)?;
                    graphs.push((chunk.len(), g, loss));
                }
                let (_, graph, loss) = graphs.iter().find(|(r, _, _)| *r == chunk.len()).expect("graph cached");
                let mut inputs = Inputs::new();
                inputs.bind("x", &bx).bind("target", &by);
                for (name, t) in router.named() {
                    inputs.bind(name, t);
                }
                let eval = graph.forward(&inputs).map_err(|err| Error::Diverged {
                    step: epoch,
                    detail: format!("router layer {l}: {err}"),
                })?;
                let value = eval.value(*loss).data()[0];
                let grads = graph.backward(&eval, *loss)?;
                opt.step(router.named_mut(), &grads, config.lr)?;
                total += value * chunk.len() as f64;
            }
            epoch_loss.push(total / n.max(1) as f64);
        }
        let fin = mse(&router, hx, &hy)?;
        if !fin.is_finite() {
            return Err(Error::Diverged {
                step: config.epochs,
                detail: format!("router layer {l} held-out MSE is {fin}"),
            });
        }
        layer.router = Some(router);
        reports.push(RouterLayerReport {
            layer: l,
            train_pairs: n,
            initial_heldout_mse: initial,
            final_heldout_mse: fin,
            epoch_train_mse: epoch_loss,
        });
    }
    Ok((out, reports))
}

/// Static pruning baseline: for every block, ranks hidden units by mean
/// absolute activation over `calibration` tokens of the given 0-based
/// `scales` and zeroes the lowest `1 - keep_fraction` of them at those
/// scales.
pub fn prune_ffn(
    model: &NextScaleModel,
    keep_fraction: f64,
    calibration: &[Sample],
    scales: &[usize],
) -> Result<NextScaleModel> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    if scales.iter().any(|&s| s >= model.config.num_scales()) {
        return Err(invalid(format!("prune scales {scales:?} out of range")));
    }
    let mut base = model.clone();
    for b in &mut base.blocks {
        b.prune = None;
    }
    struct ScaleInputs<'s> {
        scales: &'s [usize],
        rows: Vec<Vec<f64>>,
    }
    impl ForwardObserver for ScaleInputs<'_> {
        fn ffn_input(&mut self, layer: usize, scale: usize, x: &Tensor) {
            if self.scales.contains(&scale) {
                self.rows[layer].extend_from_slice(x.data());
            }
        }
    }
    let mut obs = ScaleInputs {
        scales,
        rows: vec![Vec::new(); model.config.depth],
    };
    for s in calibration {
        base.observe(&s.hierarchy, s.class_id, None, &mut obs)?;
    }
    let d_ff = model.config.d_ff;
    let kept = ((keep_fraction * d_ff as f64).round() as usize).clamp(1, d_ff);
    let d = model.config.d_model;
    let mut out = base.clone();
    for (l, block) in out.blocks.iter_mut().enumerate() {
        let x = Tensor::new(vec![obs.rows[l].len() / d, d], std::mem::take(&mut obs.rows[l]))?;
        let mut score = vec![0.0; d_ff];
        if x.rows() > 0 {
            let h = block.ffn.to_dense().hidden(&x, model.config.activation)?;
            for r in 0..h.rows() {
                for (s, v) in score.iter_mut().zip(h.row(r)) {
                    *s += v.abs();
                }
            }
            score.iter_mut().for_each(|s| *s /= h.rows() as f64);
        }
        let mut ranked: Vec<usize> = (0..d_ff).collect();
        ranked.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
        let mut keep = vec![true; d_ff];
        for &u in &ranked[..d_ff - kept] {
            keep[u] = false;
        }
        block.prune = Some(UnitPrune {
            keep,
            scales: scales.to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_examples() {
        assert_eq!(gate(&[0.9, 0.5, 0.0], 0.5), vec![true, true, false]);
        assert_eq!(gate(&[0.3, 0.7, 0.7], 1.0), vec![false, true, true]);
        assert_eq!(gate(&[0.3, 0.0, 0.7], 0.0), vec![true, true, true]);
        assert_eq!(gate(&[0.0, 0.0], 0.8), vec![true, true]);
    }

    #[test]
    fn mode_parsing() {
        for m in [ForwardMode::Dense, ForwardMode::DynkMax, ForwardMode::Oracle, ForwardMode::Pruned] {
            assert_eq!(m.name().parse::<ForwardMode>().unwrap(), m);
        }
        assert!("topk".parse::<ForwardMode>().is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(TauSchedule::new(4, vec![0.1, 0.2, 0.3], true, 6).is_ok());
        assert!(TauSchedule::new(4, vec![0.3, 0.2, 0.1], true, 6).is_err());
        assert!(TauSchedule::new(4, vec![0.3, 0.2, 0.1], false, 6).is_ok());
        assert!(TauSchedule::new(4, vec![0.3, 0.2], false, 6).is_err());
        assert!(TauSchedule::new(4, vec![0.3, 0.2, 1.5], false, 6).is_err());
        assert!(TauSchedule::new(0, vec![0.1; 7], false, 6).is_err());
    }

    #[test]
    fn schedule_lookup() {
        let s = TauSchedule::new(4, vec![0.1, 0.2, 0.3], true, 6).unwrap();
        assert_eq!(s.tau_at(2), None);
        assert_eq!(s.tau_at(3), Some(0.1));
        assert_eq!(s.tau_at(5), Some(0.3));
        let r = TauSchedule::reference_shaped(1.0, 6).unwrap();
        assert_eq!(r.switch_scale(), 4);
        assert_eq!(r.taus(), &REFERENCE_TAUS);
    }

    #[test]
    fn gating_respects_single_scale() {
        let mut g = Gating::new(ForwardMode::Oracle, TauSchedule::uniform(1, 0.5, 6).unwrap());
        g.only_scale = Some(2);
        assert_eq!(g.tau_for(1), None);
        assert_eq!(g.tau_for(2), Some(0.5));
        assert_eq!(Gating::dense(6).tau_for(5), None);
    }

    #[test]
    fn router_output_is_non_negative() {
        let r = RouterNet::init(8, 4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[50, 8], 3.0, &mut rng);
        assert!(r.predict(&x).unwrap().data().iter().all(|&v| v >= 0.0));
        assert_eq!(r.flops_per_token(), 2 * (8 * 4 + 4 * 4 + 4 * 3));
    }
}
