use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use scalemoe::dynrouter::REFERENCE_TAUS;
use scalemoe::flops::{bench_walltime, count_generation};
use scalemoe::harness::{
    alpha_study, best_within, dense_point, expert_heatmap, run_pipeline, scale_ablation, schedule_point, tau_sweep, write_ablation_csv,
    write_alpha_csv, write_curve_csv, write_heatmap, zero_fraction_violations, CurvePoint, ExperimentSpec,
    Stage, SweepMode, SweepSetup,
};
use scalemoe::model::{load_checkpoint, sample};
use scalemoe::pyramid::{decode_to_image, image_pgm, read_dataset, Sample};
use scalemoe::sparsify::ALPHA_SWEEP;
use scalemoe::{ForwardMode, Gating, NextScaleModel, SamplerConfig, TauSchedule};

#[derive(Parser)]
#[command(name = "scalemoe", version, about = "Dense-to-dynamic-MoE pipeline for a toy next-scale image model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model (writes datasets and dense.nsvm).
    Train(TrainArgs),
    /// ReLUfy and fine-tune under the Hoyer penalty (writes sparse.nsvm).
    Sparsify(SparsifyArgs),
    /// Cluster FFN units into experts (writes moefied.nsvm).
    Moefy(MoefyArgs),
    /// Train per-layer norm-regression routers (writes routed.nsvm).
    TrainRouter(RouterArgs),
    /// Run every stage, then the sweeps, ablation, pruned baseline and heatmap.
    Pipeline(PipelineArgs),
    /// Generate one image and report its FLOPs.
    Sample(SampleArgs),
    /// Held-out NLL against generation FLOPs over a τ grid.
    SweepTau(SweepArgs),
    /// MoE gating on one scale at a time.
    AblateScale(AblateArgs),
    /// Per-token expert allocation grids of one generation.
    Heatmap(HeatmapArgs),
    /// Sparsity-strength study from the dense checkpoint.
    AlphaStudy(AlphaArgs),
    /// Per-scale wall-clock timing of generation.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory holding datasets, checkpoints and reports.
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples.
    #[arg(long, default_value_t = 512)]
    samples: usize,
    /// Held-out samples.
    #[arg(long, default_value_t = 128)]
    heldout: usize,
    /// Transformer blocks.
    #[arg(long, default_value_t = 6)]
    depth: usize,
}

impl Common {
    fn spec(&self, stages: Vec<Stage>) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(&self.dir, self.seed);
        spec.stages = stages;
        spec.train_samples = self.samples;
        spec.heldout_samples = self.heldout;
        spec.model.depth = self.depth;
        spec.evaluate = None;
        spec
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Args)]
struct SparsifyArgs {
    #[command(flatten)]
    common: Common,
    /// Sparsity strength.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
}

#[derive(Args)]
struct MoefyArgs {
    #[command(flatten)]
    common: Common,
    /// Hidden units per expert.
    #[arg(long, default_value_t = 32)]
    expert_size: usize,
}

#[derive(Args)]
struct RouterArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 32)]
    expert_size: usize,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args, Clone)]
struct Sampling {
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 1.5)]
    cfg: f64,
    #[arg(long, default_value_t = 900)]
    top_k: usize,
    #[arg(long, default_value_t = 0.96)]
    top_p: f64,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

impl Sampling {
    fn sampler(&self, vocab: usize, gating: Option<Gating>) -> SamplerConfig {
        SamplerConfig {
            cfg: self.cfg,
            top_k: self.top_k.min(vocab),
            top_p: self.top_p,
            seed: self.sample_seed,
            gating,
        }
    }
}

#[derive(Args, Clone)]
struct Schedule {
    /// Per-scale thresholds from the switch scale to the last scale,
    /// e.g. `0.81839,0.81302,0.78686`.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// First gated scale (1-based); defaults to K minus the number of
    /// thresholds plus one.
    #[arg(long)]
    switch_scale: Option<usize>,
    /// Gate on true expert norms instead of the router.
    #[arg(long)]
    oracle: bool,
}

impl Schedule {
    fn mode(&self) -> ForwardMode {
        if self.oracle {
            ForwardMode::Oracle
        } else {
            ForwardMode::DynkMax
        }
    }

    fn gating(&self, num_scales: usize) -> Result<Option<Gating>> {
        let Some(taus) = &self.taus else {
            return Ok(None);
        };
        let switch = self
            .switch_scale
            .unwrap_or((num_scales + 1).saturating_sub(taus.len()));
        Ok(Some(Gating::new(self.mode(), TauSchedule::new(switch, taus.clone(), false, num_scales)?)))
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    /// Checkpoint stage to sample from.
    #[arg(long, default_value = "route")]
    stage: String,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[command(flatten)]
    sampling: Sampling,
    #[command(flatten)]
    schedule: Schedule,
    /// Output image (PGM); defaults to `<dir>/sample.pgm`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SweepKind {
    Last,
    All,
    Single,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "last")]
    mode: SweepKind,
    /// 1-based scale for `--mode single`.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.8,1")]
    grid: Vec<f64>,
    /// Generations per point for FLOP accounting.
    #[arg(long, default_value_t = 8)]
    generations: usize,
    #[command(flatten)]
    sampling: Sampling,
    /// Evaluate one explicit schedule instead of the grid.
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    generations: usize,
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    class: usize,
    /// Threshold of the first gated scale of the reference-shaped schedule
    /// (ignored when `--taus` is given).
    #[arg(long, default_value_t = 0.6)]
    tau: f64,
    #[command(flatten)]
    sampling: Sampling,
    #[command(flatten)]
    schedule: Schedule,
    /// Output directory; defaults to `<dir>/heatmap`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlphaArgs {
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,0.9")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    expert_size: usize,
    #[arg(long, default_value_t = 4)]
    generations: usize,
    /// Training samples used for the zero-fraction report.
    #[arg(long, default_value_t = 128)]
    report_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "runs/default")]
    dir: PathBuf,
    #[arg(long, default_value = "route")]
    stage: String,
    /// Generations per repeat.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(dir: &Path, stage: &str) -> Result<NextScaleModel> {
    let stage: Stage = stage.parse()?;
    let path = dir.join(stage.checkpoint());
    load_checkpoint(&path).with_context(|| format!("loading {} (run the `{}` stage first)", path.display(), stage.name()))
}

fn load_data(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let path = dir.join(name);
    let file = File::open(&path).with_context(|| format!("opening {} (run `train` first)", path.display()))?;
    Ok(read_dataset(&mut BufReader::new(file))?.1)
}

fn print_curve(points: &[CurvePoint]) {
    println!("{:<12} {:>6} {:>12} {:>10} {:>10}  schedule", "mode", "tau", "GFLOPs/img", "reduction", "nll");
    for p in points {
        println!(
            "{:<12} {:>6.3} {:>12.6} {:>9.2}% {:>10.5}  {}",
            p.mode,
            p.tau,
            p.gated_gflops,
            100.0 * p.reduction,
            p.nll,
            p.schedule
        );
    }
}

fn run_stage(spec: ExperimentSpec) -> Result<()> {
    let run = run_pipeline(&spec)?;
    for (stage, model) in &run.models {
        println!(
            "{}: {} ({} parameters)",
            stage.name(),
            spec.out_dir.join(stage.checkpoint()).display(),
            model.parameter_count()
        );
    }
    Ok(())
}

fn experts_for(d_ff: usize, expert_size: usize) -> Result<usize> {
    if expert_size == 0 || d_ff % expert_size != 0 {
        bail!("expert size {expert_size} does not divide d_ff {d_ff}");
    }
    Ok(d_ff / expert_size)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => {
            let mut spec = a.common.spec(vec![Stage::Train]);
            spec.optimizer.epochs = a.epochs;
            spec.optimizer.lr = a.lr;
            spec.optimizer.batch_size = a.batch;
            run_stage(spec)?;
        }
        Command::Sparsify(a) => {
            let mut spec = a.common.spec(vec![Stage::Sparsify]);
            spec.sparsify.alpha = a.alpha;
            spec.sparsify.epochs = a.epochs;
            spec.sparsify.lr = a.lr;
            run_stage(spec)?;
        }
        Command::Moefy(a) => {
            let mut spec = a.common.spec(vec![Stage::Moefy]);
            spec.cluster.num_experts = experts_for(spec.model.d_ff, a.expert_size)?;
            run_stage(spec)?;
        }
        Command::TrainRouter(a) => {
            let mut spec = a.common.spec(vec![Stage::Route]);
            spec.router.epochs = a.epochs;
            spec.router.lr = a.lr;
            spec.router.width = a.width;
            run_stage(spec)?;
        }
        Command::Pipeline(a) => {
            let mut spec = a.common.spec(Stage::ALL.to_vec());
            spec.sparsify.alpha = a.alpha;
            spec.cluster.num_experts = experts_for(spec.model.d_ff, a.expert_size)?;
            let mut plan = scalemoe::harness::EvalPlan::for_vocab(spec.model.vocab);
            plan.sampler = a.sampling.sampler(spec.model.vocab, None);
            spec.evaluate = Some(plan);
            let run = run_pipeline(&spec)?;
            let eval = run.evaluation.expect("evaluation requested");
            print_curve(&eval.last_scales);
            match best_within(&eval.last_scales, 0.02) {
                Some(p) => println!(
                    "best point within 2% NLL: tau {} -> {:.2}% fewer FLOPs",
                    p.tau,
                    100.0 * p.reduction
                ),
                None => println!("no point within 2% NLL of dense"),
            }
            println!("manifest: {}", spec.out_dir.join("manifest.txt").display());
        }
        Command::Sample(a) => {
            let model = load_model(&a.dir, &a.stage)?;
            let gating = a.schedule.gating(model.config.num_scales())?;
            let sampler = a.sampling.sampler(model.config.vocab, gating);
            let g = sample(&model, a.class, &sampler)?;
            let flops = count_generation(&model, &g.trace)?;
            let out = a.out.unwrap_or_else(|| a.dir.join("sample.pgm"));
            let side = *model.config.scale_sides.last().expect("scales");
            fs::write(&out, image_pgm(side, &decode_to_image(&g.hierarchy)))?;
            g.trace.write_csv(File::create(out.with_extension("trace.csv"))?)?;
            println!("{flops}");
            println!("image: {}", out.display());
        }
        Command::SweepTau(a) => {
            let model = load_model(&a.dir, "route")?;
            let heldout = load_data(&a.dir, "heldout.nspd")?;
            let k = model.config.num_scales();
            let mut setup = SweepSetup {
                heldout: &heldout,
                gating_mode: a.schedule.mode(),
                generations: a.generations,
                sampler: a.sampling.sampler(model.config.vocab, None),
            };
            let (points, name) = if let Some(g) = a.schedule.gating(k)? {
                setup.gating_mode = g.mode;
                let points = vec![dense_point(&model, &setup)?, schedule_point(&model, &g, &setup)?];
                (points, "sweep_schedule.csv".to_string())
            } else {
                let mode = match a.mode {
                    SweepKind::Last => SweepMode::LastScales,
                    SweepKind::All => SweepMode::AllScales,
                    SweepKind::Single => {
                        let s = a.scale.context("--mode single needs --scale")?;
                        if s == 0 {
                            bail!("scales are 1-based");
                        }
                        SweepMode::SingleScale(s - 1)
                    }
                };
                (tau_sweep(&model, &a.grid, mode, &setup)?, format!("sweep_{}.csv", mode.name()))
            };
            print_curve(&points);
            let out = a.out.unwrap_or_else(|| a.dir.join(name));
            write_curve_csv(&out, &points)?;
            info!("wrote {}", out.display());
        }
        Command::AblateScale(a) => {
            let model = load_model(&a.dir, "route")?;
            let heldout = load_data(&a.dir, "heldout.nspd")?;
            let setup = SweepSetup {
                heldout: &heldout,
                gating_mode: if a.oracle { ForwardMode::Oracle } else { ForwardMode::DynkMax },
                generations: a.generations,
                sampler: a.sampling.sampler(model.config.vocab, None),
            };
            let rows = scale_ablation(&model, &a.grid, &setup)?;
            println!("{:>6} {:>6} {:>14} {:>10}", "scale", "tau", "saved GFLOPs", "nll");
            for r in &rows {
                println!("{:>6} {:>6.2} {:>14.6} {:>10.5}", r.scale, r.tau, r.savings_gflops, r.nll);
            }
            let out = a.dir.join("scale_ablation.csv");
            write_ablation_csv(&out, &rows)?;
            info!("wrote {}", out.display());
        }
        Command::Heatmap(a) => {
            let model = load_model(&a.dir, "route")?;
            let k = model.config.num_scales();
            let gating = match a.schedule.gating(k)? {
                Some(g) => g,
                None => Gating::new(
                    a.schedule.mode(),
                    TauSchedule::reference_shaped(a.tau / REFERENCE_TAUS[0], k)?,
                ),
            };
            let sampler = a.sampling.sampler(model.config.vocab, Some(gating));
            let heatmap = expert_heatmap(&model, a.class, &sampler)?;
            let out = a.out.unwrap_or_else(|| a.dir.join("heatmap"));
            fs::create_dir_all(&out)?;
            let files = write_heatmap(&out, &heatmap)?;
            for g in &heatmap.grids {
                println!("scale {} (max {}):", g.scale + 1, heatmap.max_count);
                for row in g.counts.chunks(g.side) {
                    let cells: Vec<String> = row.iter().map(|c| format!("{c:>3}")).collect();
                    println!("  {}", cells.join(" "));
                }
            }
            info!("wrote {} files to {}", files.len(), out.display());
        }
        Command::AlphaStudy(a) => {
            let dense = load_model(&a.dir, "train")?;
            let train_set = load_data(&a.dir, "train.nspd")?;
            let heldout = load_data(&a.dir, "heldout.nspd")?;
            let alphas = a.alphas.unwrap_or_else(|| ALPHA_SWEEP.to_vec());
            let spec = ExperimentSpec::new(&a.dir, a.seed);
            let base = scalemoe::sparsify::SparsifyConfig {
                epochs: a.epochs,
                ..spec.sparsify
            };
            let cluster = scalemoe::ClusterConfig {
                num_experts: experts_for(dense.config.d_ff, a.expert_size)?,
                ..spec.cluster
            };
            let setup = SweepSetup {
                heldout: &heldout,
                gating_mode: ForwardMode::Oracle,
                generations: a.generations,
                sampler: a.sampling.sampler(dense.config.vocab, None),
            };
            let report = &train_set[..a.report_samples.min(train_set.len())];
            let rows = alpha_study(&dense, &train_set, report, &alphas, &base, &cluster, &a.grid, &setup)?;
            for r in &rows {
                let z: Vec<String> = r.zero_fraction.iter().map(|z| format!("{z:.3}")).collect();
                println!(
                    "{:<13} alpha {:<6} nll {:.5} hoyer {:.2} zero fraction per scale [{}]",
                    r.variant,
                    r.alpha,
                    r.heldout_ce,
                    r.hoyer,
                    z.join(", ")
                );
            }
            for (s, lo, hi) in zero_fraction_violations(&rows) {
                println!("note: scale {s} zero fraction drops from alpha {lo} to {hi}");
            }
            write_alpha_csv(&a.dir, &rows)?;
        }
        Command::Bench(a) => {
            let model = load_model(&a.dir, &a.stage)?;
            let gating = a.schedule.gating(model.config.num_scales())?;
            let report = bench_walltime(&model, gating.as_ref(), a.batch, a.repeats)?;
            println!("{:>5} {:>7} {:>12} {:>12} {:>12} {:>12}", "scale", "tokens", "total_us", "kernel_us", "router_us", "dispatch_us");
            for s in &report.scales {
                println!(
                    "{:>5} {:>7} {:>12.1} {:>12.1} {:>12.1} {:>12.1}",
                    s.scale,
                    s.tokens,
                    s.total_ns as f64 / 1e3,
                    s.kernel_ns as f64 / 1e3,
                    s.router_ns as f64 / 1e3,
                    s.dispatch_ns as f64 / 1e3
                );
            }
            match a.out {
                Some(p) => report.write_csv(File::create(p)?)?,
                None => report.write_csv(io::stdout())?,
            }
        }
    }
    Ok(())
}
