//! Experiment orchestration: dataset builds, the two-step training regime
//! (flow forecaster, then mask warper pretrain/finetune), end-to-end
//! pipelines at short (t+3) and mid (t+9) horizons, and the five-row
//! training-regime ablation grid.
//!
//! The horizon is a parameter of one code path: the mid pipeline run with
//! n = 3 is exactly the short pipeline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregate::{fuse_semantic, rescore_all, RescoreConfig};
use crate::error::{Error, Result};
use crate::fields::{FlowField, InstanceMask, SemanticMap, SequenceSample};
use crate::masknet::{
    prepare_input, train_masknet_finetune, train_masknet_pretrain, MaskFinetuneHyper, MaskNet,
    MaskTrainHyper, TrainableSuffix, WarperConfig,
};
use crate::metrics::{ap_thresholds, average_precision, flow_mse, semantic_iou, FlowMse};
use crate::ofnet::{train_ofnet, FlowTrainHyper, ForecasterConfig, OfNet};
use crate::synthgen::{generate_split, SceneConfig};
use crate::warpop::{copy_last, shift_mask, warp_mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Short,
    Mid,
}

impl Horizon {
    pub fn steps(self) -> usize {
        match self {
            Horizon::Short => 3,
            Horizon::Mid => 9,
        }
    }
}

/// How future instances are transported from the anchor frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Last observed mask, unchanged (static baseline).
    CopyLast,
    /// Rigid translation by the mean flow over the mask support.
    Shift,
    /// Forward bilinear warp along the flow.
    Warp,
    /// Learned warping network.
    MaskNet,
}

/// Where the transport flows come from at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFlow {
    /// OFNet rollout feeding its own predictions forward.
    Autoregressive,
    /// OFNet single-step predictions from ground-truth windows (ablation
    /// mode only; never a deployment mode).
    TeacherForced,
    /// Ground-truth future flows (upper bound; MaskNet-Oracle analogue).
    Oracle,
}

/// Whether multi-step transport applies one operation per intermediate
/// step or a single operation with the accumulated flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpSpan {
    PerStep,
    SingleShot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    /// Total sequences; even seeds are train, odd are val.
    pub n_sequences: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene: SceneConfig::default(),
            n_sequences: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub horizon: Horizon,
    pub method: Method,
    pub eval_flow: EvalFlow,
    pub span: WarpSpan,
    pub ofnet: ForecasterConfig,
    pub flow_hyper: FlowTrainHyper,
    /// Mask warper stages; both optional so baselines skip them.
    pub pretrain: Option<MaskTrainHyper>,
    pub finetune: Option<MaskFinetuneHyper>,
    pub masknet: WarperConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            horizon: Horizon::Short,
            method: Method::MaskNet,
            eval_flow: EvalFlow::Autoregressive,
            span: WarpSpan::PerStep,
            ofnet: ForecasterConfig::desk(),
            flow_hyper: FlowTrainHyper::default(),
            pretrain: Some(MaskTrainHyper::default()),
            finetune: None,
            masknet: WarperConfig::desk(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        self.ofnet.validate()?;
        let need = self.ofnet.t_in + self.horizon.steps() + 1;
        if self.dataset.scene.frames < need {
            return Err(Error::Config(format!(
                "sequences of {} frames cannot support T={} plus n={}",
                self.dataset.scene.frames,
                self.ofnet.t_in,
                self.horizon.steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Config echo (JSON) so reports are self-describing.
    pub config: String,
    pub n_sequences: usize,
    pub horizon_steps: usize,
    pub ap: f64,
    pub ap50: f64,
    /// Mean semantic IoU of the fused forecast vs ground truth.
    pub iou: f64,
    /// Transport-flow error vs ground truth, per rollout step.
    pub flow_mse: Vec<FlowMse>,
}

/// Trained models threaded through pipelines so ablation rows can share
/// one flow-forecaster training run.
#[derive(Default)]
pub struct Models {
    pub ofnet: Option<OfNet<f32>>,
    pub masknet: Option<MaskNet<f32>>,
}

fn sum_flows(flows: &[FlowField]) -> FlowField {
    let mut total = FlowField::zeros(flows[0].height(), flows[0].width());
    for f in flows {
        total.u += &f.u;
        total.v += &f.v;
    }
    total
}

fn fuse_or_empty(instances: &[InstanceMask], h: usize, w: usize) -> Result<SemanticMap> {
    let live: Vec<InstanceMask> = instances.iter().filter(|i| !i.is_empty()).cloned().collect();
    if live.is_empty() {
        Ok(SemanticMap::zeros(h, w))
    } else {
        fuse_semantic(&live)
    }
}

/// Transport every anchor-frame instance `n` steps along `flows`,
/// re-fusing the semantic input after each step for the learned warper.
pub fn transport_instances(
    method: Method,
    span: WarpSpan,
    masknet: Option<&MaskNet<f32>>,
    anchor: &[InstanceMask],
    flows: &[FlowField],
) -> Result<Vec<InstanceMask>> {
    let mut current: Vec<InstanceMask> = anchor.to_vec();
    if flows.is_empty() {
        return Err(Error::Shape("transport over zero flow steps".into()));
    }
    match method {
        Method::CopyLast => Ok(current.iter().map(copy_last).collect()),
        Method::Shift => {
            for f in flows {
                for inst in &mut current {
                    *inst = shift_mask(inst, f)?;
                }
            }
            Ok(current)
        }
        Method::Warp => {
            match span {
                WarpSpan::PerStep => {
                    for f in flows {
                        for inst in &mut current {
                            *inst = warp_mask(inst, f)?;
                        }
                    }
                }
                WarpSpan::SingleShot => {
                    let total = sum_flows(flows);
                    for inst in &mut current {
                        *inst = warp_mask(inst, &total)?;
                    }
                }
            }
            Ok(current)
        }
        Method::MaskNet => {
            let net = masknet
                .ok_or_else(|| Error::Config("MaskNet method without a trained warper".into()))?;
            let (h, w) = (flows[0].height(), flows[0].width());
            let step = |current: &mut Vec<InstanceMask>, f: &FlowField| -> Result<()> {
                let sem = fuse_or_empty(current, h, w)?;
                for inst in current.iter_mut() {
                    let x = prepare_input::<f32>(f, &sem, &inst.mask)?;
                    let (_, bin) = net.predict_mask(&x)?;
                    inst.mask = bin;
                    inst.refresh_bbox();
                }
                Ok(())
            };
            match span {
                WarpSpan::PerStep => {
                    for f in flows {
                        step(&mut current, f)?;
                    }
                }
                WarpSpan::SingleShot => step(&mut current, &sum_flows(flows))?,
            }
            Ok(current)
        }
    }
}

/// Evaluate one configuration over the val split with already-trained
/// models. The anchor frame is the first with a full T-flow history.
pub fn evaluate(
    method: Method,
    eval_flow: EvalFlow,
    span: WarpSpan,
    steps: usize,
    models: &Models,
    val: &[SequenceSample],
    config_echo: &str,
) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    let needs_net = !matches!(eval_flow, EvalFlow::Oracle);
    if needs_net && models.ofnet.is_none() {
        return Err(Error::Config(
            "predicted flows requested but no flow forecaster is loaded".into(),
        ));
    }
    let t_in = models.ofnet.as_ref().map_or(6, |n| n.cfg.t_in);
    let mut all_preds: Vec<Vec<InstanceMask>> = Vec::new();
    let mut all_gts: Vec<Vec<InstanceMask>> = Vec::new();
    let mut iou_sum = 0.0;
    let mut mse_acc: Vec<FlowMse> = Vec::new();
    let mut n_eval = 0usize;
    for seq in val {
        let anchor = t_in;
        if seq.flows.len() < anchor + steps {
            return Err(Error::Shape(format!(
                "sequence with {} flows cannot anchor at {anchor} and roll {steps} steps",
                seq.flows.len()
            )));
        }
        let gt_flows = &seq.flows[anchor..anchor + steps];
        let transport: Vec<FlowField> = match eval_flow {
            EvalFlow::Oracle => gt_flows.to_vec(),
            EvalFlow::Autoregressive => models
                .ofnet
                .as_ref()
                .unwrap()
                .rollout(&seq.flows[anchor - t_in..anchor], steps)?,
            EvalFlow::TeacherForced => models
                .ofnet
                .as_ref()
                .unwrap()
                .rollout_teacher_forced(&seq.flows[anchor - t_in..anchor], gt_flows)?,
        };
        let per_step = flow_mse(&transport, gt_flows)?;
        if mse_acc.is_empty() {
            mse_acc = per_step;
        } else {
            for (a, s) in mse_acc.iter_mut().zip(&per_step) {
                a.mse += s.mse;
                a.mse_u += s.mse_u;
                a.mse_v += s.mse_v;
            }
        }
        let live: Vec<InstanceMask> = seq.instances[anchor]
            .iter()
            .filter(|i| !i.is_empty())
            .cloned()
            .collect();
        let mut preds = if live.is_empty() {
            Vec::new()
        } else {
            transport_instances(method, span, models.masknet.as_ref(), &live, &transport)?
        };
        let h = seq.semantics[0].height();
        let w = seq.semantics[0].width();
        rescore_all(&mut preds, &RescoreConfig::for_height(h));
        let fused = fuse_or_empty(&preds, h, w)?;
        let target = anchor + steps;
        let classes: Vec<u8> = (1..=crate::fields::NUM_CLASSES).collect();
        iou_sum += semantic_iou(&fused, &seq.semantics[target], &classes)?.mean;
        preds.retain(|p| !p.is_empty());
        all_preds.push(preds);
        all_gts.push(
            seq.instances[target]
                .iter()
                .filter(|g| !g.is_empty())
                .cloned()
                .collect(),
        );
        n_eval += 1;
    }
    for a in &mut mse_acc {
        a.mse /= n_eval as f64;
        a.mse_u /= n_eval as f64;
        a.mse_v /= n_eval as f64;
    }
    let ap = average_precision(&all_preds, &all_gts, &ap_thresholds())?;
    Ok(EvalReport {
        config: config_echo.to_string(),
        n_sequences: n_eval,
        horizon_steps: steps,
        ap: ap.ap,
        ap50: ap.ap50,
        iou: iou_sum / n_eval as f64,
        flow_mse: mse_acc,
    })
}

/// Train the models a configuration asks for. Returns the trained bundle;
/// pass pre-trained models in `reuse` to skip stages (e.g. sharing one
/// flow forecaster across ablation rows).
pub fn train_models(
    cfg: &ExperimentConfig,
    train: &[SequenceSample],
    mut reuse: Models,
) -> Result<Models> {
    let needs_flow_net = !matches!(cfg.eval_flow, EvalFlow::Oracle)
        || cfg.finetune.is_some();
    if needs_flow_net && reuse.ofnet.is_none() {
        let (net, _) = train_ofnet(&cfg.ofnet, &cfg.flow_hyper, train)?;
        reuse.ofnet = Some(net);
    }
    if cfg.method == Method::MaskNet && reuse.masknet.is_none() {
        if cfg.pretrain.is_none() && cfg.finetune.is_none() {
            return Err(Error::Config(
                "MaskNet method needs a pretrain or finetune stage (or a loaded checkpoint)"
                    .into(),
            ));
        }
        let mut net = MaskNet::<f32>::new(&cfg.masknet)?;
        if let Some(ph) = &cfg.pretrain {
            train_masknet_pretrain(&mut net, train, ph)?;
        }
        if let Some(fh) = &cfg.finetune {
            let flow_net = reuse.ofnet.as_ref().ok_or_else(|| {
                Error::Config("finetuning on predicted flows needs a flow forecaster".into())
            })?;
            train_masknet_finetune(&mut net, flow_net, train, fh)?;
        }
        reuse.masknet = Some(net);
    }
    Ok(reuse)
}

/// Full pipeline: build the dataset, train what the config asks for,
/// evaluate on the val split. Deterministic per (config, seed).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(EvalReport, Models)> {
    cfg.validate()?;
    let (train, val) = generate_split(&cfg.dataset.scene, cfg.dataset.n_sequences)?;
    let models = train_models(cfg, &train, Models::default())?;
    let echo = serde_json::to_string(cfg)?;
    let report = evaluate(
        cfg.method,
        cfg.eval_flow,
        cfg.span,
        cfg.horizon.steps(),
        &models,
        &val,
        &echo,
    )?;
    Ok((report, models))
}

/// The five training regimes of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Non-learned warp along predicted flows.
    Warping,
    /// Dice pretraining on oracle flows only.
    PretrainOnly,
    /// Trained on predicted flows from scratch, all layers.
    PredictedOnlyAll,
    /// Pretrain, then finetune the last 3 layers on predicted flows.
    PretrainFinetune3,
    /// Pretrain, then finetune the last 2 layers on predicted flows.
    PretrainFinetune2,
}

pub const ABLATION_REGIMES: [Regime; 5] = [
    Regime::Warping,
    Regime::PretrainOnly,
    Regime::PredictedOnlyAll,
    Regime::PretrainFinetune3,
    Regime::PretrainFinetune2,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub dataset: DatasetSpec,
    pub ofnet: ForecasterConfig,
    pub flow_hyper: FlowTrainHyper,
    pub masknet: WarperConfig,
    pub pretrain: MaskTrainHyper,
    /// Template for finetune stages; suffix and horizon are set per row.
    pub finetune: MaskFinetuneHyper,
    /// Dataset/shuffle seeds; one full grid per seed, rows share models
    /// within a seed where stages coincide.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dataset: DatasetSpec::default(),
            ofnet: ForecasterConfig::desk(),
            flow_hyper: FlowTrainHyper::default(),
            masknet: WarperConfig::desk(),
            pretrain: MaskTrainHyper::default(),
            finetune: MaskFinetuneHyper::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub regime: Regime,
    /// Seed-mean scores.
    pub short_iou: f64,
    pub mid_iou: f64,
    pub short_ap50: f64,
    pub mid_ap50: f64,
    /// Per-seed (short IoU, mid IoU) for noise-band estimates.
    pub per_seed: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = String::from(
            "regime               short IoU  mid IoU  short AP50  mid AP50\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<20} {:>9.4} {:>8.4} {:>10.4} {:>9.4}\n",
                format!("{:?}", r.regime),
                r.short_iou,
                r.mid_iou,
                r.short_ap50,
                r.mid_ap50
            ));
        }
        s
    }
}

fn regime_masknet(
    regime: Regime,
    cfg: &AblationConfig,
    ofnet: &OfNet<f32>,
    train: &[SequenceSample],
    horizon: usize,
    pretrained: &Option<MaskNet<f32>>,
) -> Result<Option<MaskNet<f32>>> {
    let finetune = |suffix, base: Option<&MaskNet<f32>>| -> Result<MaskNet<f32>> {
        let mut net = match base {
            Some(b) => b.clone(),
            None => MaskNet::new(&cfg.masknet)?,
        };
        let mut fh = cfg.finetune.clone();
        fh.suffix = suffix;
        fh.horizon = horizon;
        train_masknet_finetune(&mut net, ofnet, train, &fh)?;
        Ok(net)
    };
    Ok(match regime {
        Regime::Warping => None,
        Regime::PretrainOnly => pretrained.clone(),
        Regime::PredictedOnlyAll => Some(finetune(TrainableSuffix::All, None)?),
        Regime::PretrainFinetune3 => {
            Some(finetune(TrainableSuffix::Layers(3), pretrained.as_ref())?)
        }
        Regime::PretrainFinetune2 => {
            Some(finetune(TrainableSuffix::Layers(2), pretrained.as_ref())?)
        }
    })
}

/// Run the five-regime grid over every seed and average. Within one seed
/// all rows share the dataset, the trained flow forecaster, and (where the
/// regime includes it) the pretrained warper.
pub fn run_ablation_grid(cfg: &AblationConfig) -> Result<AblationTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one seed".into()));
    }
    let echo = serde_json::to_string(cfg)?;
    let n_regimes = ABLATION_REGIMES.len();
    let mut sums = vec![[0.0f64; 4]; n_regimes];
    let mut per_seed: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_regimes];
    for &seed in &cfg.seeds {
        let mut scene = cfg.dataset.scene.clone();
        scene.seed = scene.seed.wrapping_add(seed.wrapping_mul(1 << 20));
        let (train, val) = generate_split(&scene, cfg.dataset.n_sequences)?;
        let mut flow_hyper = cfg.flow_hyper.clone();
        flow_hyper.shuffle_seed ^= seed;
        let mut ofcfg = cfg.ofnet.clone();
        ofcfg.init_seed = ofcfg.init_seed.wrapping_add(seed);
        let (ofnet, _) = train_ofnet(&ofcfg, &flow_hyper, &train)?;
        let mut pre_hyper = cfg.pretrain.clone();
        pre_hyper.shuffle_seed ^= seed;
        let mut mcfg = cfg.masknet.clone();
        mcfg.init_seed = mcfg.init_seed.wrapping_add(seed);
        let mut pretrained = MaskNet::<f32>::new(&mcfg)?;
        train_masknet_pretrain(&mut pretrained, &train, &pre_hyper)?;
        let pretrained = Some(pretrained);
        for (ri, &regime) in ABLATION_REGIMES.iter().enumerate() {
            let mut seed_short = 0.0;
            let mut seed_mid = 0.0;
            for (hi, horizon) in [Horizon::Short, Horizon::Mid].iter().enumerate() {
                let steps = horizon.steps();
                let net = regime_masknet(regime, cfg, &ofnet, &train, steps, &pretrained)?;
                let method = if regime == Regime::Warping {
                    Method::Warp
                } else {
                    Method::MaskNet
                };
                let models = Models {
                    ofnet: Some(ofnet.clone()),
                    masknet: net,
                };
                let rep = evaluate(
                    method,
                    EvalFlow::Autoregressive,
                    WarpSpan::PerStep,
                    steps,
                    &models,
                    &val,
                    &echo,
                )?;
                sums[ri][hi * 2] += rep.iou;
                sums[ri][hi * 2 + 1] += rep.ap50;
                if hi == 0 {
                    seed_short = rep.iou;
                } else {
                    seed_mid = rep.iou;
                }
            }
            per_seed[ri].push((seed_short, seed_mid));
        }
    }
    let n = cfg.seeds.len() as f64;
    let rows = ABLATION_REGIMES
        .iter()
        .enumerate()
        .map(|(ri, &regime)| AblationRow {
            regime,
            short_iou: sums[ri][0] / n,
            short_ap50: sums[ri][1] / n,
            mid_iou: sums[ri][2] / n,
            mid_ap50: sums[ri][3] / n,
            per_seed: per_seed[ri].clone(),
        })
        .collect();
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        rows,
    })
}

/// Mean ground-truth foreground area fraction recovered by a warper's
/// one-step predictions on oracle flows — the collapse statistic for the
/// cross-entropy ablation.
pub fn mean_foreground_ratio(net: &MaskNet<f32>, seqs: &[SequenceSample]) -> Result<f64> {
    let mut pred_area = 0.0f64;
    let mut gt_area = 0.0f64;
    for seq in seqs {
        let (h, w) = (seq.semantics[0].height(), seq.semantics[0].width());
        for t in 0..seq.flows.len().min(seq.frames() - 1) {
            for inst in &seq.instances[t] {
                if inst.is_empty() {
                    continue;
                }
                let sem = &seq.semantics[t];
                let x = prepare_input::<f32>(&seq.flows[t], sem, &inst.mask)?;
                let (_, bin) = net.predict_mask(&x)?;
                pred_area += bin.iter().filter(|&&v| v != 0).count() as f64;
                // target is the same object at t+1 if present
                let gt: Option<&Array2<u8>> = seq.instances[t + 1]
                    .iter()
                    .find(|g| g.id == inst.id)
                    .map(|g| &g.mask);
                gt_area += gt.map_or(0.0, |m| m.iter().filter(|&&v| v != 0).count() as f64);
                let _ = (h, w);
            }
        }
    }
    if gt_area == 0.0 {
        return Err(Error::Config("no foreground in evaluation set".into()));
    }
    Ok(pred_area / gt_area)
}
