//! End-to-end pipeline driver and experiment suite.
//!
//! Every CSV written here starts with a `#` comment line stating that the
//! quality column is held-out NLL per token (nats) in place of FID.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::dynrouter::{
    prune_ffn, train_router, ForwardMode, Gating, GatingTrace, RouterConfig, RouterLayerReport, TauSchedule,
    REFERENCE_TAUS,
};
use crate::error::{invalid, Error, Result};
use crate::flops::{count_generation, FlopsReport};
use crate::model::{
    fit, load_checkpoint, sample, save_checkpoint, train, LossKind, ModelConfig, NextScaleModel, OptimizerConfig,
    SamplerConfig, TrainLog,
};
use crate::moefy::{moefy_model, write_cluster_csv, ClusterConfig};
use crate::pyramid::{decode_to_image, image_pgm, pgm_bytes, synthetic_corpus, write_dataset, Sample};
use crate::sparsify::{finetune_sparse, relufy, sparsity_report, SparsifyConfig, SparsityReport};

/// First line of every CSV produced by the harness.
pub const NLL_NOTE: &str = "# quality metric: held-out NLL per token (nats), used in place of FID";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Train,
    Sparsify,
    Moefy,
    Route,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Train, Stage::Sparsify, Stage::Moefy, Stage::Route];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Sparsify => "sparsify",
            Stage::Moefy => "moefy",
            Stage::Route => "route",
        }
    }

    /// Checkpoint written by this stage.
    pub fn checkpoint(self) -> &'static str {
        match self {
            Stage::Train => "dense.nsvm",
            Stage::Sparsify => "sparse.nsvm",
            Stage::Moefy => "moefied.nsvm",
            Stage::Route => "routed.nsvm",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn previous(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i])
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown stage `{s}`")))
    }
}

/// Evaluation suite run after the routing stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    /// τ grid shared by the last-scales and all-scales sweeps.
    pub tau_grid: Vec<f64>,
    pub ablation_grid: Vec<f64>,
    /// Generations per curve point used for FLOP accounting.
    pub generations: usize,
    pub sampler: SamplerConfig,
    pub heatmap_class: usize,
    /// τ of the reference-shaped schedule used for the heatmap.
    pub heatmap_tau: f64,
    /// Training samples used to rank units for the pruned baseline.
    pub calibration_samples: usize,
}

impl EvalPlan {
    pub fn for_vocab(vocab: usize) -> Self {
        Self {
            tau_grid: [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0].to_vec(),
            ablation_grid: vec![0.5, 0.9],
            generations: 8,
            sampler: SamplerConfig::for_vocab(vocab),
            heatmap_class: 0,
            heatmap_tau: 0.6,
            calibration_samples: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    /// Contiguous run of stages in pipeline order.
    pub stages: Vec<Stage>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub optimizer: OptimizerConfig,
    pub sparsify: SparsifyConfig,
    pub cluster: ClusterConfig,
    pub router: RouterConfig,
    pub evaluate: Option<EvalPlan>,
}

impl ExperimentSpec {
    /// Full chain with default toy settings; sub-seeds derive from `seed`.
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let model = ModelConfig::default();
        let evaluate = Some(EvalPlan::for_vocab(model.vocab));
        Self {
            stages: Stage::ALL.to_vec(),
            out_dir: out_dir.into(),
            seed,
            model,
            train_samples: 512,
            heldout_samples: 128,
            optimizer: OptimizerConfig {
                seed,
                ..OptimizerConfig::default()
            },
            sparsify: SparsifyConfig {
                seed: seed.wrapping_add(1),
                ..SparsifyConfig::default()
            },
            cluster: ClusterConfig {
                seed: seed.wrapping_add(2),
                ..ClusterConfig::default()
            },
            router: RouterConfig {
                seed: seed.wrapping_add(3),
                ..RouterConfig::default()
            },
            evaluate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(invalid("experiment has no stages"));
        }
        if self
            .stages
            .windows(2)
            .any(|w| w[1].index() != w[0].index() + 1)
        {
            let names: Vec<&str> = self.stages.iter().map(|s| s.name()).collect();
            return Err(invalid(format!(
                "stages must be a contiguous chain in pipeline order, got {}",
                names.join(",")
            )));
        }
        if self.evaluate.is_some() && self.stages.last() != Some(&Stage::Route) {
            return Err(invalid("evaluation needs the route stage"));
        }
        if self.train_samples == 0 || self.heldout_samples == 0 {
            return Err(invalid("train and held-out sets must be non-empty"));
        }
        self.model.validate()?;
        self.optimizer.validate()
    }

    /// SHA-256 over every setting except the output directory.
    pub fn config_hash(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:?}|{}|{:?}|{}|{}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.stages,
            self.seed,
            self.model,
            self.train_samples,
            self.heldout_samples,
            self.optimizer,
            self.sparsify,
            self.cluster,
            self.router,
            self.evaluate
        );
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

/// Ordered `key = value` lines; the last file written by a pipeline run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad manifest line `{l}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

/// Results of the evaluation suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub last_scales: Vec<CurvePoint>,
    pub all_scales: Vec<CurvePoint>,
    pub ablation: Vec<AblationRow>,
    pub pruned: Vec<PrunedComparison>,
    pub heatmap: Heatmap,
}

/// In-memory products of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    /// Model produced by each executed stage, in order.
    pub models: Vec<(Stage, NextScaleModel)>,
    pub router_reports: Vec<RouterLayerReport>,
    pub sparsity: Option<SparsityReport>,
    pub evaluation: Option<Evaluation>,
}

impl PipelineRun {
    pub fn model(&self, stage: Stage) -> Option<&NextScaleModel> {
        self.models.iter().find(|(s, _)| *s == stage).map(|(_, m)| m)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_file(path: &Path) -> Result<BufWriter<File>> {
    let mut w = create(path)?;
    writeln!(w, "{NLL_NOTE}")?;
    Ok(w)
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = create(path)?;
    log.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_router_csv(path: &Path, reports: &[RouterLayerReport]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    csv.write_record(["layer", "train_pairs", "epoch", "train_mse", "initial_heldout_mse", "final_heldout_mse"])?;
    for r in reports {
        for (e, m) in r.epoch_train_mse.iter().enumerate() {
            csv.write_record([
                r.layer.to_string(),
                r.train_pairs.to_string(),
                e.to_string(),
                m.to_string(),
                r.initial_heldout_mse.to_string(),
                r.final_heldout_mse.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Runs the requested stages, writing datasets, a checkpoint per stage,
/// logs and reports under `spec.out_dir`, then the manifest.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<PipelineRun> {
    spec.validate()?;
    let dir = &spec.out_dir;
    fs::create_dir_all(dir)?;
    let pyramid = spec.model.pyramid();
    let train_set = synthetic_corpus(spec.seed, spec.train_samples, &pyramid)?;
    let heldout = synthetic_corpus(spec.seed.wrapping_add(1_000_003), spec.heldout_samples, &pyramid)?;
    let mut artifacts: Vec<String> = Vec::new();
    for (name, data) in [("train.nspd", &train_set), ("heldout.nspd", &heldout)] {
        let mut w = create(&dir.join(name))?;
        write_dataset(&mut w, &pyramid, data)?;
        w.flush()?;
        artifacts.push(name.into());
    }

    let first = spec.stages[0];
    let mut current = match first.previous() {
        None => None,
        Some(prev) => {
            let path = dir.join(prev.checkpoint());
            if !path.exists() {
                return Err(Error::MissingUpstream {
                    stage: prev.name().into(),
                    path: path.display().to_string(),
                });
            }
            Some(load_checkpoint(&path)?)
        }
    };
    let mut run = PipelineRun {
        manifest: Manifest { entries: Vec::new() },
        train: train_set,
        heldout,
        models: Vec::new(),
        router_reports: Vec::new(),
        sparsity: None,
        evaluation: None,
    };
    for &stage in &spec.stages {
        info!("stage {}", stage.name());
        let model = match stage {
            Stage::Train => {
                let (m, log) = train(&run.train, &spec.model, &spec.optimizer)?;
                write_log(&dir.join("train_log.csv"), &log)?;
                artifacts.push("train_log.csv".into());
                m
            }
            Stage::Sparsify => {
                let dense = current.take().expect("upstream model present");
                let relu = relufy(&dense);
                let (m, report, log) = finetune_sparse(&relu, &run.train, &run.heldout, &spec.sparsify)?;
                write_log(&dir.join("sparsify_log.csv"), &log)?;
                let mut w = create(&dir.join("sparsity.csv"))?;
                report.write_csv(&mut w)?;
                w.flush()?;
                artifacts.extend(["sparsify_log.csv".into(), "sparsity.csv".into()]);
                run.sparsity = Some(report);
                m
            }
            Stage::Moefy => {
                let sparse = current.take().expect("upstream model present");
                let (m, clusterings) = moefy_model(&sparse, &spec.cluster)?;
                let mut w = create(&dir.join("clusters.csv"))?;
                write_cluster_csv(&mut w, &clusterings)?;
                w.flush()?;
                artifacts.push("clusters.csv".into());
                m
            }
            Stage::Route => {
                let moe = current.take().expect("upstream model present");
                let (m, reports) = train_router(&moe, &run.train, &run.heldout, &spec.router)?;
                write_router_csv(&dir.join("router.csv"), &reports)?;
                artifacts.push("router.csv".into());
                run.router_reports = reports;
                m
            }
        };
        save_checkpoint(&dir.join(stage.checkpoint()), &model)?;
        artifacts.push(stage.checkpoint().into());
        run.models.push((stage, model.clone()));
        current = Some(model);
    }

    if let Some(plan) = &spec.evaluate {
        let routed = current.as_ref().expect("route stage ran");
        let (eval, files) = evaluate_routed(routed, &run.train, &run.heldout, plan, dir)?;
        artifacts.extend(files);
        run.evaluation = Some(eval);
    }

    let mut entries = vec![
        ("seed".to_string(), spec.seed.to_string()),
        ("config_sha256".to_string(), spec.config_hash()),
        (
            "stages".to_string(),
            spec.stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
        ),
    ];
    for a in &artifacts {
        entries.push((format!("sha256.{a}"), sha256_file(&dir.join(a))?));
    }
    let manifest = Manifest { entries };
    fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    run.manifest = manifest;
    Ok(run)
}

fn evaluate_routed(
    model: &NextScaleModel,
    train_set: &[Sample],
    heldout: &[Sample],
    plan: &EvalPlan,
    dir: &Path,
) -> Result<(Evaluation, Vec<String>)> {
    let setup = SweepSetup {
        heldout,
        gating_mode: ForwardMode::DynkMax,
        generations: plan.generations,
        sampler: plan.sampler.clone(),
    };
    let last_scales = tau_sweep(model, &plan.tau_grid, SweepMode::LastScales, &setup)?;
    let all_scales = tau_sweep(model, &plan.tau_grid, SweepMode::AllScales, &setup)?;
    write_curve_csv(&dir.join("sweep_last_scales.csv"), &last_scales)?;
    write_curve_csv(&dir.join("sweep_all_scales.csv"), &all_scales)?;

    let ablation = scale_ablation(model, &plan.ablation_grid, &setup)?;
    write_ablation_csv(&dir.join("scale_ablation.csv"), &ablation)?;

    let calibration = &train_set[..plan.calibration_samples.min(train_set.len())];
    let mut pruned = Vec::new();
    for p in last_scales.iter().filter(|p| p.mode != "dense" && p.tau > 0.0) {
        pruned.push(pruned_baseline(model, p, calibration, &setup)?);
    }
    write_pruned_csv(&dir.join("pruned_baseline.csv"), &pruned)?;

    let factor = plan.heatmap_tau / REFERENCE_TAUS[0];
    let gating = Gating::new(
        ForwardMode::DynkMax,
        TauSchedule::reference_shaped(factor, model.config.num_scales())?,
    );
    let sampler = SamplerConfig {
        gating: Some(gating),
        ..plan.sampler.clone()
    };
    let heatmap = expert_heatmap(model, plan.heatmap_class, &sampler)?;
    let mut files = vec![
        "sweep_last_scales.csv".to_string(),
        "sweep_all_scales.csv".into(),
        "scale_ablation.csv".into(),
        "pruned_baseline.csv".into(),
    ];
    files.extend(write_heatmap(dir, &heatmap)?);
    Ok((
        Evaluation {
            last_scales,
            all_scales,
            ablation,
            pruned,
            heatmap,
        },
        files,
    ))
}

/// Which scales a τ sweep gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Reference-shaped schedule over the last three scales; `τ` is the
    /// threshold of the first of them.
    LastScales,
    /// One threshold on every scale.
    AllScales,
    /// One threshold on a single 0-based scale, all others dense.
    SingleScale(usize),
}

impl SweepMode {
    pub fn name(self) -> String {
        match self {
            SweepMode::LastScales => "last_scales".into(),
            SweepMode::AllScales => "all_scales".into(),
            SweepMode::SingleScale(s) => format!("scale_{}", s + 1),
        }
    }

    pub fn gating(self, mode: ForwardMode, tau: f64, num_scales: usize) -> Result<Gating> {
        match self {
            SweepMode::LastScales => Ok(Gating::new(
                mode,
                TauSchedule::reference_shaped(tau / REFERENCE_TAUS[0], num_scales)?,
            )),
            SweepMode::AllScales => Ok(Gating::new(mode, TauSchedule::uniform(1, tau, num_scales)?)),
            SweepMode::SingleScale(s) => {
                if s >= num_scales {
                    return Err(invalid(format!("scale {} out of range", s + 1)));
                }
                let mut g = Gating::new(mode, TauSchedule::uniform(1, tau, num_scales)?);
                g.only_scale = Some(s);
                Ok(g)
            }
        }
    }
}

/// Shared evaluation inputs of the sweeps.
#[derive(Clone, Debug)]
pub struct SweepSetup<'a> {
    pub heldout: &'a [Sample],
    pub gating_mode: ForwardMode,
    /// Generation `i` uses class `i mod C` and seed `sampler.seed + i`.
    pub generations: usize,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    /// Sweep mode name, or `dense` for the baseline row.
    pub mode: String,
    pub tau: f64,
    pub schedule: String,
    /// Mean GFLOPs per generated image.
    pub gated_gflops: f64,
    pub dense_gflops: f64,
    /// `1 − gated/dense`.
    pub reduction: f64,
    pub nll: f64,
    /// Mean selected experts per MoE token-layer of each scale.
    pub experts_per_token: Vec<f64>,
    /// Gated FFN + router FLOPs over dense FFN FLOPs on the last three
    /// scales.
    pub ffn_keep_last3: f64,
}

/// Generates `setup.generations` images and sums their FLOPs.
pub fn generation_flops(
    model: &NextScaleModel,
    gating: Option<&Gating>,
    setup: &SweepSetup,
) -> Result<(FlopsReport, GatingTrace)> {
    if setup.generations == 0 {
        return Err(invalid("at least one generation is needed for FLOP accounting"));
    }
    let mut report: Option<FlopsReport> = None;
    let mut all = GatingTrace::new(&model.config);
    for i in 0..setup.generations {
        let sampler = SamplerConfig {
            seed: setup.sampler.seed.wrapping_add(i as u64),
            gating: gating.cloned(),
            ..setup.sampler.clone()
        };
        let g = sample(model, i % model.config.num_classes, &sampler)?;
        let r = count_generation(model, &g.trace)?;
        match &mut report {
            None => report = Some(r),
            Some(acc) => acc.merge(&r)?,
        }
        all.append(g.trace);
    }
    Ok((report.expect("at least one generation"), all))
}

fn last_three(num_scales: usize) -> Vec<usize> {
    (num_scales.saturating_sub(3)..num_scales).collect()
}

fn curve_point(
    model: &NextScaleModel,
    mode: String,
    tau: f64,
    gating: Option<&Gating>,
    setup: &SweepSetup,
) -> Result<CurvePoint> {
    let k = model.config.num_scales();
    let nll = model.evaluate(setup.heldout, gating, false)?.nll;
    let (flops, trace) = generation_flops(model, gating, setup)?;
    let mut sums = vec![(0usize, 0usize); k];
    for r in trace.records.iter().filter(|r| !r.selected.is_empty()) {
        let e = &mut sums[r.scale as usize];
        e.0 += r.experts_selected();
        e.1 += 1;
    }
    let experts_per_token = sums
        .iter()
        .map(|&(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
        .collect();
    let last = last_three(k);
    let n = setup.generations as f64;
    Ok(CurvePoint {
        mode,
        tau,
        schedule: gating.map_or("dense".into(), |g| g.schedule.label()),
        gated_gflops: flops.gated_total() as f64 / n / 1e9,
        dense_gflops: flops.dense_total() as f64 / n / 1e9,
        reduction: flops.reduction(),
        nll,
        experts_per_token,
        ffn_keep_last3: flops.ffn_gated_on(&last) as f64 / flops.ffn_dense_on(&last) as f64,
    })
}

/// Dense baseline row.
pub fn dense_point(model: &NextScaleModel, setup: &SweepSetup) -> Result<CurvePoint> {
    curve_point(model, "dense".into(), 0.0, None, setup)
}

/// One explicit schedule; `tau` reports its first threshold.
pub fn schedule_point(model: &NextScaleModel, gating: &Gating, setup: &SweepSetup) -> Result<CurvePoint> {
    let tau = gating.schedule.taus().first().copied().unwrap_or(0.0);
    curve_point(model, "schedule".into(), tau, Some(gating), setup)
}

/// Dense baseline row followed by one point per τ of `grid`.
pub fn tau_sweep(model: &NextScaleModel, grid: &[f64], mode: SweepMode, setup: &SweepSetup) -> Result<Vec<CurvePoint>> {
    if model.moe_layers() == 0 {
        return Err(invalid("τ sweeps need a MoE model"));
    }
    let k = model.config.num_scales();
    let mut out = vec![dense_point(model, setup)?];
    for &tau in grid {
        let gating = mode.gating(setup.gating_mode, tau, k)?;
        out.push(curve_point(model, mode.name(), tau, Some(&gating), setup)?);
        info!("{} τ={tau}: nll {:.5} reduction {:.4}", mode.name(), out.last().unwrap().nll, out.last().unwrap().reduction);
    }
    Ok(out)
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv_file(path)?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        let k = points.first().map_or(0, |p| p.experts_per_token.len());
        let mut header = vec![
            "mode".to_string(),
            "tau".into(),
            "schedule".into(),
            "gated_gflops".into(),
            "dense_gflops".into(),
            "reduction".into(),
            "heldout_nll".into(),
            "ffn_keep_last3".into(),
        ];
        header.extend((1..=k).map(|s| format!("experts_per_token_s{s}")));
        csv.write_record(&header)?;
        for p in points {
            let mut row = vec![
                p.mode.clone(),
                p.tau.to_string(),
                p.schedule.clone(),
                p.gated_gflops.to_string(),
                p.dense_gflops.to_string(),
                p.reduction.to_string(),
                p.nll.to_string(),
                p.ffn_keep_last3.to_string(),
            ];
            row.extend(p.experts_per_token.iter().map(|e| e.to_string()));
            csv.write_record(&row)?;
        }
        csv.flush()?;
    }
    w.flush()?;
    Ok(())
}

/// The sweep point with the largest FLOP reduction whose NLL is within
/// `max_rel_degradation` of the dense row.
pub fn best_within(points: &[CurvePoint], max_rel_degradation: f64) -> Option<&CurvePoint> {
    let dense = points.iter().find(|p| p.mode == "dense")?;
    points
        .iter()
        .filter(|p| p.mode != "dense" && p.nll <= dense.nll * (1.0 + max_rel_degradation))
        .max_by(|a, b| a.reduction.total_cmp(&b.reduction))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// 1-based scale with MoE active; 0 for the dense row.
    pub scale: usize,
    pub tau: f64,
    pub gated_gflops: f64,
    pub dense_gflops: f64,
    /// `dense − gated` GFLOPs per image.
    pub savings_gflops: f64,
    pub nll: f64,
}

/// MoE gating on one scale at a time, every other scale dense.
pub fn scale_ablation(model: &NextScaleModel, grid: &[f64], setup: &SweepSetup) -> Result<Vec<AblationRow>> {
    let k = model.config.num_scales();
    let row = |scale: usize, p: &CurvePoint| AblationRow {
        scale,
        tau: p.tau,
        gated_gflops: p.gated_gflops,
        dense_gflops: p.dense_gflops,
        savings_gflops: p.dense_gflops - p.gated_gflops,
        nll: p.nll,
    };
    let dense = curve_point(model, "dense".into(), 0.0, None, setup)?;
    let mut out = vec![row(0, &dense)];
    for s in 0..k {
        for &tau in grid {
            let mode = SweepMode::SingleScale(s);
            let gating = mode.gating(setup.gating_mode, tau, k)?;
            out.push(row(s + 1, &curve_point(model, mode.name(), tau, Some(&gating), setup)?));
        }
    }
    Ok(out)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_file(path)?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        csv.write_record(["moe_scale", "tau", "gated_gflops", "dense_gflops", "savings_gflops", "heldout_nll"])?;
        for r in rows {
            csv.write_record([
                r.scale.to_string(),
                r.tau.to_string(),
                r.gated_gflops.to_string(),
                r.dense_gflops.to_string(),
                r.savings_gflops.to_string(),
                r.nll.to_string(),
            ])?;
        }
        csv.flush()?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedComparison {
    pub tau: f64,
    /// Fraction of FFN units the pruned model keeps on the last three
    /// scales, matched to the dynamic point's FFN + router FLOPs there.
    pub keep_fraction: f64,
    pub dynamic_nll: f64,
    pub pruned_nll: f64,
    pub dynamic_ffn_keep: f64,
    pub pruned_ffn_keep: f64,
}

impl PrunedComparison {
    /// `pruned − dynamic`; positive when dynamic gating is better.
    pub fn gap(&self) -> f64 {
        self.pruned_nll - self.dynamic_nll
    }
}

/// Static unit pruning on the last three scales at the FFN FLOP budget of
/// a dynamic sweep point.
pub fn pruned_baseline(
    model: &NextScaleModel,
    point: &CurvePoint,
    calibration: &[Sample],
    setup: &SweepSetup,
) -> Result<PrunedComparison> {
    let k = model.config.num_scales();
    let last = last_three(k);
    let keep = point.ffn_keep_last3.clamp(1.0 / model.config.d_ff as f64, 1.0);
    let pruned = prune_ffn(model, keep, calibration, &last)?;
    let pruned_nll = pruned.evaluate(setup.heldout, None, false)?.nll;
    let (flops, _) = generation_flops(&pruned, None, setup)?;
    Ok(PrunedComparison {
        tau: point.tau,
        keep_fraction: keep,
        dynamic_nll: point.nll,
        pruned_nll,
        dynamic_ffn_keep: point.ffn_keep_last3,
        pruned_ffn_keep: flops.ffn_gated_on(&last) as f64 / flops.ffn_dense_on(&last) as f64,
    })
}

pub fn write_pruned_csv(path: &Path, rows: &[PrunedComparison]) -> Result<()> {
    let mut w = csv_file(path)?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        csv.write_record([
            "tau",
            "keep_fraction",
            "dynamic_ffn_keep_last3",
            "pruned_ffn_keep_last3",
            "dynamic_nll",
            "pruned_nll",
            "gap",
        ])?;
        for r in rows {
            csv.write_record([
                r.tau.to_string(),
                r.keep_fraction.to_string(),
                r.dynamic_ffn_keep.to_string(),
                r.pruned_ffn_keep.to_string(),
                r.dynamic_nll.to_string(),
                r.pruned_nll.to_string(),
                r.gap().to_string(),
            ])?;
        }
        csv.flush()?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGrid {
    /// 0-based scale.
    pub scale: usize,
    pub side: usize,
    /// Row-major selected-expert totals over layers and passes.
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub class_id: usize,
    pub seed: u64,
    /// Largest possible cell value: MoE layers × experts × passes.
    pub max_count: usize,
    pub grids: Vec<ScaleGrid>,
    pub image_side: usize,
    pub image: Vec<f64>,
}

/// Per-token expert allocation of one generation, summed over MoE layers
/// and over the conditional and null-class passes.
pub fn expert_heatmap(model: &NextScaleModel, class_id: usize, sampler: &SamplerConfig) -> Result<Heatmap> {
    let moe = model.moe_layers();
    if moe == 0 {
        return Err(invalid("heatmaps need a MoE model"));
    }
    let g = sample(model, class_id, sampler)?;
    let experts = model
        .blocks
        .iter()
        .find_map(|b| b.ffn.as_moe())
        .map_or(0, |m| m.experts.num_experts());
    let grids = (0..model.config.num_scales())
        .map(|s| ScaleGrid {
            scale: s,
            side: model.config.scale_sides[s],
            counts: g.trace.expert_grid(s),
        })
        .collect();
    Ok(Heatmap {
        class_id,
        seed: sampler.seed,
        max_count: moe * experts * g.trace.passes().max(1),
        grids,
        image_side: *model.config.scale_sides.last().expect("at least one scale"),
        image: decode_to_image(&g.hierarchy),
    })
}

/// Writes `heatmap.csv`, one `heatmap_s{k}.pgm` per scale and
/// `heatmap_sample.pgm`; returns the file names.
pub fn write_heatmap(dir: &Path, heatmap: &Heatmap) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut csv = csv::Writer::from_writer(create(&dir.join("heatmap.csv"))?);
    csv.write_record(["scale", "row", "col", "experts_selected"])?;
    for g in &heatmap.grids {
        for (i, c) in g.counts.iter().enumerate() {
            csv.write_record([(g.scale + 1).to_string(), (i / g.side).to_string(), (i % g.side).to_string(), c.to_string()])?;
        }
        let max = heatmap.max_count.max(1);
        let bytes: Vec<u8> = g.counts.iter().map(|&c| ((c.min(max) * 255 + max / 2) / max) as u8).collect();
        let name = format!("heatmap_s{}.pgm", g.scale + 1);
        fs::write(dir.join(&name), pgm_bytes(g.side, &bytes))?;
        files.push(name);
    }
    csv.flush()?;
    files.insert(0, "heatmap.csv".into());
    fs::write(dir.join("heatmap_sample.pgm"), image_pgm(heatmap.image_side, &heatmap.image))?;
    files.push("heatmap_sample.pgm".into());
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaRow {
    /// `relu`, or `gelu_control` for the run without ReLUfication.
    pub variant: String,
    pub alpha: f64,
    /// Held-out NLL after fine-tuning (dense execution).
    pub heldout_ce: f64,
    /// Mean over layers of the token-mean Hoyer ratio.
    pub hoyer: f64,
    /// Zero fraction per scale on the report set.
    pub zero_fraction: Vec<f64>,
    /// Oracle-mode sweep of the moefied model.
    pub curve: Vec<CurvePoint>,
}

/// Sparsifies `dense` once per α (plus a GeLU control at `base.alpha`),
/// moefies each result and sweeps it in oracle mode.
#[allow(clippy::too_many_arguments)]
pub fn alpha_study(
    dense: &NextScaleModel,
    train_set: &[Sample],
    report_set: &[Sample],
    alphas: &[f64],
    base: &SparsifyConfig,
    cluster: &ClusterConfig,
    taus: &[f64],
    setup: &SweepSetup,
) -> Result<Vec<AlphaRow>> {
    if !dense.is_dense() {
        return Err(invalid("the α study starts from a dense model"));
    }
    let setup = SweepSetup {
        gating_mode: ForwardMode::Oracle,
        ..setup.clone()
    };
    let relu = relufy(dense);
    let mut runs: Vec<(String, f64, NextScaleModel, SparsityReport)> = Vec::new();
    for &alpha in alphas {
        let cfg = SparsifyConfig { alpha, ..base.clone() };
        let (m, report, _) = finetune_sparse(&relu, train_set, report_set, &cfg)?;
        runs.push(("relu".into(), alpha, m, report));
    }
    let mut control = dense.clone();
    if control.config.activation != Activation::Relu {
        fit(&mut control, train_set, &base.optimizer(), LossKind::Sparse { alpha: base.alpha })?;
        let report = sparsity_report(&control, report_set)?;
        runs.push(("gelu_control".into(), base.alpha, control, report));
    }
    let mut rows = Vec::new();
    for (variant, alpha, model, report) in runs {
        let heldout_ce = model.evaluate(setup.heldout, None, false)?.nll;
        let (moe, _) = moefy_model(&model, cluster)?;
        let curve = tau_sweep(&moe, taus, SweepMode::LastScales, &setup)?;
        let hoyer = report.layer_hoyer.iter().sum::<f64>() / report.layer_hoyer.len() as f64;
        rows.push(AlphaRow {
            variant,
            alpha,
            heldout_ce,
            hoyer,
            zero_fraction: report.scale_zero_fraction(),
            curve,
        });
    }
    Ok(rows)
}

/// `(scale, lower α, higher α)` triples where the zero fraction of a
/// higher-α ReLU run falls below that of the next lower α.
pub fn zero_fraction_violations(rows: &[AlphaRow]) -> Vec<(usize, f64, f64)> {
    let mut relu: Vec<&AlphaRow> = rows.iter().filter(|r| r.variant == "relu").collect();
    relu.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let mut out = Vec::new();
    for w in relu.windows(2) {
        for (s, (lo, hi)) in w[0].zero_fraction.iter().zip(&w[1].zero_fraction).enumerate() {
            if hi < lo {
                out.push((s + 1, w[0].alpha, w[1].alpha));
            }
        }
    }
    out
}

/// Writes `alpha_study.csv` (one row per run) and `alpha_curves.csv`.
pub fn write_alpha_csv(dir: &Path, rows: &[AlphaRow]) -> Result<()> {
    let mut w = csv_file(&dir.join("alpha_study.csv"))?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        let k = rows.first().map_or(0, |r| r.zero_fraction.len());
        let mut header = vec!["variant".to_string(), "alpha".into(), "heldout_nll".into(), "hoyer".into()];
        header.extend((1..=k).map(|s| format!("zero_fraction_s{s}")));
        csv.write_record(&header)?;
        for r in rows {
            let mut rec = vec![r.variant.clone(), r.alpha.to_string(), r.heldout_ce.to_string(), r.hoyer.to_string()];
            rec.extend(r.zero_fraction.iter().map(|z| z.to_string()));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
    }
    w.flush()?;
    let mut w = csv_file(&dir.join("alpha_curves.csv"))?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        csv.write_record(["variant", "alpha", "tau", "gated_gflops", "dense_gflops", "reduction", "heldout_nll"])?;
        for r in rows {
            for p in &r.curve {
                csv.write_record([
                    r.variant.clone(),
                    r.alpha.to_string(),
                    if p.mode == "dense" { "dense".into() } else { p.tau.to_string() },
                    p.gated_gflops.to_string(),
                    p.dense_gflops.to_string(),
                    p.reduction.to_string(),
                    p.nll.to_string(),
                ])?;
            }
        }
        csv.flush()?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_chain_validation() {
        let mut spec = ExperimentSpec::new("/tmp/unused", 0);
        spec.evaluate = None;
        spec.stages = vec![Stage::Train, Stage::Moefy];
        assert!(spec.validate().is_err());
        spec.stages = vec![Stage::Sparsify, Stage::Train];
        assert!(spec.validate().is_err());
        spec.stages = vec![Stage::Moefy, Stage::Route];
        assert!(spec.validate().is_ok());
        spec.evaluate = Some(EvalPlan::for_vocab(16));
        spec.stages = vec![Stage::Train];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("finetune".parse::<Stage>().is_err());
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let a = ExperimentSpec::new("/tmp/a", 3);
        let b = ExperimentSpec::new("/tmp/b", 3);
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), ExperimentSpec::new("/tmp/a", 4).config_hash());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            entries: vec![("seed".into(), "7".into()), ("sha256.dense.nsvm".into(), "ab".into())],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(m.get("seed"), Some("7"));
    }

    #[test]
    fn sweep_modes_build_expected_schedules() {
        let g = SweepMode::LastScales.gating(ForwardMode::DynkMax, REFERENCE_TAUS[0], 6).unwrap();
        assert_eq!(g.schedule.switch_scale(), 4);
        for (a, b) in g.schedule.taus().iter().zip(REFERENCE_TAUS) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = SweepMode::SingleScale(2).gating(ForwardMode::Oracle, 0.5, 6).unwrap();
        assert_eq!(g.tau_for(2), Some(0.5));
        assert_eq!(g.tau_for(3), None);
        assert!(SweepMode::SingleScale(6).gating(ForwardMode::Oracle, 0.5, 6).is_err());
    }

    #[test]
    fn best_point_respects_tolerance() {
        let p = |mode: &str, nll: f64, reduction: f64| CurvePoint {
            mode: mode.into(),
            tau: 0.0,
            schedule: String::new(),
            gated_gflops: 0.0,
            dense_gflops: 0.0,
            reduction,
            nll,
            experts_per_token: vec![],
            ffn_keep_last3: 1.0,
        };
        let pts = vec![p("dense", 1.0, 0.0), p("x", 1.01, 0.1), p("x", 1.03, 0.3)];
        assert_eq!(best_within(&pts, 0.02).unwrap().reduction, 0.1);
    }
}
