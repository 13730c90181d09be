//! Command-line entry point wiring all modules: data synthesis, the two
//! training stages, flow rollout, non-learned baselines, evaluation,
//! experiments, and report/plot emission.
//!
//! Exit codes: 0 success, 1 runtime failure (diagnostic on stderr),
//! 2 bad flags/subcommand (usage from clap).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flowcast::error::{Error, Result};
use flowcast::fields::flow_write;
use flowcast::harness::{
    self, AblationConfig, EvalFlow, ExperimentConfig, Horizon, Method, Models, WarpSpan,
};
use flowcast::masknet::{
    train_masknet_finetune, train_masknet_pretrain, MaskFinetuneHyper, MaskLoss, MaskNet,
    MaskTrainHyper, TrainableSuffix, WarperConfig,
};
use flowcast::metrics::FlowMse;
use flowcast::ofnet::{train_ofnet, FlowTrainHyper, ForecasterConfig, OfNet};
use flowcast::plot::{write_label_overlay, LinePlot, Series};
use flowcast::synthgen::{self, SceneConfig, Split};

#[derive(Parser)]
#[command(
    name = "flowcast",
    about = "Future instance segmentation by forecasting optical flow and warping masks",
    version
)]
struct Cli {
    /// Default root for output paths (also via FLOWCAST_OUT).
    #[arg(long, global = true, env = "FLOWCAST_OUT", default_value = "out")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes dataset with ground-truth flow.
    Synth(SynthArgs),
    /// Train the flow forecaster on the train split.
    TrainFlow(TrainFlowArgs),
    /// Train the mask warper (pretrain on true flows, optional finetune).
    TrainMask(TrainMaskArgs),
    /// Roll predicted flows forward and report per-step MSE.
    Rollout(RolloutArgs),
    /// Non-learned transport baselines on ground-truth flows.
    Baseline(EvalArgs),
    /// Evaluate a method end to end on the val split.
    Eval(EvalArgs),
    /// Run an experiment or the ablation grid from a TOML config.
    Experiment(ExperimentArgs),
    /// Render plots from a saved evaluation report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Snap motion to whole pixels (masks translate exactly).
    #[arg(long)]
    integer_motion: bool,
}

#[derive(Args)]
struct TrainFlowArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    feature_channels: usize,
    #[arg(long, default_value_t = 16)]
    hidden_channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Dice,
    CrossEntropy,
}

impl From<LossArg> for MaskLoss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Dice => MaskLoss::Dice,
            LossArg::CrossEntropy => MaskLoss::CrossEntropy,
        }
    }
}

#[derive(Args)]
struct TrainMaskArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flow-forecaster checkpoint; required when --finetune-epochs > 0.
    #[arg(long)]
    flow_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 0)]
    finetune_epochs: usize,
    /// Trainable suffix during finetuning: a layer count, or "all".
    #[arg(long, default_value = "2")]
    suffix: String,
    /// Rollout length during finetuning (3 short, 9 mid).
    #[arg(long, default_value_t = 3)]
    horizon: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Dice)]
    loss: LossArg,
    #[arg(long, default_value_t = 16)]
    feature_channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    flow_ckpt: PathBuf,
    #[arg(long, default_value_t = 9)]
    steps: usize,
    /// Where to write predicted .flo files and the MSE report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    CopyLast,
    Shift,
    Warp,
    Masknet,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::CopyLast => Method::CopyLast,
            MethodArg::Shift => Method::Shift,
            MethodArg::Warp => Method::Warp,
            MethodArg::Masknet => Method::MaskNet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowSourceArg {
    Oracle,
    Autoregressive,
    TeacherForced,
}

impl From<FlowSourceArg> for EvalFlow {
    fn from(f: FlowSourceArg) -> Self {
        match f {
            FlowSourceArg::Oracle => EvalFlow::Oracle,
            FlowSourceArg::Autoregressive => EvalFlow::Autoregressive,
            FlowSourceArg::TeacherForced => EvalFlow::TeacherForced,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HorizonArg {
    Short,
    Mid,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Warp)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = HorizonArg::Short)]
    horizon: HorizonArg,
    /// Flow source; `baseline` forces oracle regardless.
    #[arg(long, value_enum, default_value_t = FlowSourceArg::Oracle)]
    flow_source: FlowSourceArg,
    #[arg(long)]
    flow_ckpt: Option<PathBuf>,
    #[arg(long)]
    mask_ckpt: Option<PathBuf>,
    /// Apply one warp spanning all steps instead of one per step.
    #[arg(long)]
    single_shot: bool,
    /// Report output path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a qualitative overlay PNG of the first val forecast.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config: an experiment, or the ablation grid with --grid.
    #[arg(long)]
    config: PathBuf,
    /// Interpret the config as the five-regime ablation grid.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more report JSON files from `eval`/`experiment`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Output SVG path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<flowcast::fields::SequenceSample>> {
    let manifest = synthgen::load_manifest(dir)?;
    manifest
        .iter()
        .filter(|e| e.split == split)
        .map(|e| synthgen::load_sequence(dir, e))
        .collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => {
            let out = a.out.unwrap_or_else(|| cli.out_root.join("dataset"));
            let cfg = SceneConfig {
                height: a.height,
                width: a.width,
                frames: a.frames,
                n_objects: a.objects,
                integer_motion: a.integer_motion,
                seed: a.seed,
                ..SceneConfig::default()
            };
            let entries = synthgen::emit_dataset(&cfg, a.sequences, &out)?;
            let train = entries.iter().filter(|e| e.split == Split::Train).count();
            log::info!(
                "wrote {} sequences ({} train / {} val) to {}",
                entries.len(),
                train,
                entries.len() - train,
                out.display()
            );
        }
        Cmd::TrainFlow(a) => {
            let out = a.out.unwrap_or_else(|| cli.out_root.join("ofnet.ckpt"));
            let train = load_split(&a.data, Split::Train)?;
            let cfg = ForecasterConfig {
                feature_channels: a.feature_channels,
                hidden_channels: a.hidden_channels,
                init_seed: a.seed,
                ..ForecasterConfig::desk()
            };
            let hyper = FlowTrainHyper {
                lr: a.lr,
                batch: a.batch,
                epochs: a.epochs,
                shuffle_seed: a.seed,
                ..FlowTrainHyper::default()
            };
            let (mut net, losses) = train_ofnet(&cfg, &hyper, &train)?;
            for (e, l) in losses.iter().enumerate() {
                log::info!("epoch {e}: flow loss {l:.6}");
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            net.save(&out)?;
            log::info!("saved flow forecaster to {}", out.display());
        }
        Cmd::TrainMask(a) => {
            let out = a.out.unwrap_or_else(|| cli.out_root.join("masknet.ckpt"));
            let train = load_split(&a.data, Split::Train)?;
            let cfg = WarperConfig {
                feature_channels: a.feature_channels,
                init_seed: a.seed,
                ..WarperConfig::desk()
            };
            let mut net = MaskNet::<f32>::new(&cfg)?;
            if a.pretrain_epochs > 0 {
                let hyper = MaskTrainHyper {
                    epochs: a.pretrain_epochs,
                    loss: a.loss.into(),
                    shuffle_seed: a.seed,
                    ..MaskTrainHyper::default()
                };
                let losses = train_masknet_pretrain(&mut net, &train, &hyper)?;
                for (e, l) in losses.iter().enumerate() {
                    log::info!("pretrain epoch {e}: loss {l:.6}");
                }
            }
            if a.finetune_epochs > 0 {
                let ckpt = a.flow_ckpt.as_ref().ok_or_else(|| {
                    Error::Config("--finetune-epochs needs --flow-ckpt".into())
                })?;
                let flow_net = OfNet::<f32>::load(ckpt)?;
                let suffix = if a.suffix == "all" {
                    TrainableSuffix::All
                } else {
                    let k = a
                        .suffix
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad --suffix {:?}", a.suffix)))?;
                    TrainableSuffix::Layers(k)
                };
                let hyper = MaskFinetuneHyper {
                    epochs: a.finetune_epochs,
                    suffix,
                    horizon: a.horizon,
                    loss: a.loss.into(),
                    shuffle_seed: a.seed,
                    ..MaskFinetuneHyper::default()
                };
                let losses = train_masknet_finetune(&mut net, &flow_net, &train, &hyper)?;
                for (e, l) in losses.iter().enumerate() {
                    log::info!("finetune epoch {e}: loss {l:.6}");
                }
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            net.save(&out)?;
            log::info!("saved mask warper to {}", out.display());
        }
        Cmd::Rollout(a) => {
            let out = a.out.unwrap_or_else(|| cli.out_root.join("rollout"));
            std::fs::create_dir_all(&out)?;
            let net = OfNet::<f32>::load(&a.flow_ckpt)?;
            let val = load_split(&a.data, Split::Val)?;
            let t = net.cfg.t_in;
            let mut acc: Vec<FlowMse> = Vec::new();
            for (si, seq) in val.iter().enumerate() {
                if seq.flows.len() < t + a.steps {
                    return Err(Error::Shape(format!(
                        "sequence {si} too short for T={t} + {} steps",
                        a.steps
                    )));
                }
                let preds = net.rollout(&seq.flows[..t], a.steps)?;
                for (k, p) in preds.iter().enumerate() {
                    flow_write(p, &out.join(format!("seq{si:03}_step{k}.flo")))?;
                }
                let mse = flowcast::metrics::flow_mse(&preds, &seq.flows[t..t + a.steps])?;
                if acc.is_empty() {
                    acc = mse;
                } else {
                    for (x, m) in acc.iter_mut().zip(&mse) {
                        x.mse += m.mse;
                        x.mse_u += m.mse_u;
                        x.mse_v += m.mse_v;
                    }
                }
            }
            let n = val.len() as f64;
            for x in &mut acc {
                x.mse /= n;
                x.mse_u /= n;
                x.mse_v /= n;
            }
            write_json(&out.join("mse.json"), &acc)?;
            for (k, m) in acc.iter().enumerate() {
                log::info!("t+{}: mse {:.5} (u {:.5}, v {:.5})", k + 1, m.mse, m.mse_u, m.mse_v);
            }
        }
        Cmd::Baseline(mut a) | Cmd::Eval(mut a) => {
            // `baseline` is `eval` restricted to non-learned transport
            if matches!(a.method, MethodArg::Masknet) && a.mask_ckpt.is_none() {
                return Err(Error::Config("--method masknet needs --mask-ckpt".into()));
            }
            let val = load_split(&a.data, Split::Val)?;
            let models = Models {
                ofnet: a.flow_ckpt.as_ref().map(|p| OfNet::load(p)).transpose()?,
                masknet: a.mask_ckpt.as_ref().map(|p| MaskNet::load(p)).transpose()?,
            };
            let steps = match a.horizon {
                HorizonArg::Short => Horizon::Short.steps(),
                HorizonArg::Mid => Horizon::Mid.steps(),
            };
            let span = if a.single_shot {
                WarpSpan::SingleShot
            } else {
                WarpSpan::PerStep
            };
            let echo = format!(
                "{{\"data\":{:?},\"steps\":{steps}}}",
                a.data.display().to_string()
            );
            let report = harness::evaluate(
                a.method.into(),
                a.flow_source.into(),
                span,
                steps,
                &models,
                &val,
                &echo,
            )?;
            let out = a
                .out
                .take()
                .unwrap_or_else(|| cli.out_root.join("report.json"));
            write_json(&out, &report)?;
            log::info!(
                "AP {:.4}  AP50 {:.4}  IoU {:.4} over {} sequences -> {}",
                report.ap,
                report.ap50,
                report.iou,
                report.n_sequences,
                out.display()
            );
            if a.overlay {
                if let Some(seq) = val.first() {
                    let t = models.ofnet.as_ref().map_or(6, |n| n.cfg.t_in);
                    let overlay = out.with_extension("overlay.png");
                    write_label_overlay(&seq.semantics[t + steps], &overlay)?;
                    log::info!("wrote target overlay to {}", overlay.display());
                }
            }
        }
        Cmd::Experiment(a) => {
            let text = std::fs::read_to_string(&a.config)?;
            if a.grid {
                let cfg: AblationConfig = toml::from_str(&text)?;
                let table = harness::run_ablation_grid(&cfg)?;
                let out = a.out.unwrap_or_else(|| cli.out_root.join("ablation.json"));
                write_json(&out, &table)?;
                print!("{}", table.render());
            } else {
                let cfg: ExperimentConfig = toml::from_str(&text)?;
                let (report, _) = harness::run_pipeline(&cfg)?;
                let out = a.out.unwrap_or_else(|| cli.out_root.join("report.json"));
                write_json(&out, &report)?;
                log::info!(
                    "AP {:.4}  AP50 {:.4}  IoU {:.4} -> {}",
                    report.ap,
                    report.ap50,
                    report.iou,
                    out.display()
                );
            }
        }
        Cmd::Report(a) => {
            let out = a.out.unwrap_or_else(|| cli.out_root.join("mse_vs_horizon.svg"));
            let mut series = Vec::new();
            for path in &a.reports {
                let report: harness::EvalReport =
                    serde_json::from_str(&std::fs::read_to_string(path)?)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "report".into());
                series.push(Series {
                    label: stem,
                    points: report
                        .flow_mse
                        .iter()
                        .enumerate()
                        .map(|(k, m)| ((k + 1) as f64, m.mse))
                        .collect(),
                });
            }
            let plot = LinePlot {
                title: "Flow MSE vs horizon".into(),
                x_label: "steps ahead".into(),
                y_label: "MSE".into(),
                series,
            };
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            plot.write_svg(&out)?;
            log::info!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse(); // exits 2 with usage on bad flags
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
