//! MaskNet: the learned warping network. Consumes a 4-channel grid
//! [u, v, semantic/8, instance mask], runs a UNet one level shallower than
//! OFNet's backbone plus a 1x1 sigmoid head, and emits the instance's
//! next-frame mask (thresholded at 0.5). Trained with Dice loss; a
//! cross-entropy mode exists to demonstrate why that fails.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::fuse_semantic;
use crate::error::{Error, Result};
use crate::fields::{FlowField, InstanceMask, SemanticMap, SequenceSample, NUM_CLASSES};
use crate::nn::checkpoint;
use crate::nn::conv::{sigmoid, Conv2d};
use crate::nn::unet::{UNet, UNetCache};
use crate::nn::{Adam, ParamRef, Parameterized, Scalar};
use crate::ofnet::OfNet;
use crate::tracker::{build_tracks, Track, TrackerConfig};

pub const MASK_THRESHOLD: f64 = 0.5;
const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarperConfig {
    /// One level fewer than OFNet's backbone.
    pub unet_depth: usize,
    /// Width of the full-resolution decoder output.
    pub feature_channels: usize,
    pub init_seed: u64,
}

impl Default for WarperConfig {
    fn default() -> Self {
        WarperConfig {
            unet_depth: 2,
            feature_channels: 64,
            init_seed: 0,
        }
    }
}

impl WarperConfig {
    pub fn desk() -> Self {
        WarperConfig {
            feature_channels: 16,
            ..WarperConfig::default()
        }
    }
}

#[derive(Clone)]
pub struct MaskNet<F> {
    pub cfg: WarperConfig,
    pub unet: UNet<F>,
    pub head: Conv2d<F>,
}

pub struct MaskCache<F> {
    unet: UNetCache<F>,
    feat: Array3<F>,
    pub prob: Array3<F>,
}

/// Channel order is fixed and load-bearing: [u, v, semantic/8, mask].
pub fn prepare_input<F: Scalar>(
    flow: &FlowField,
    sem: &SemanticMap,
    inst_mask: &Array2<u8>,
) -> Result<Array3<F>> {
    let (h, w) = flow.u.dim();
    if sem.labels.dim() != (h, w) || inst_mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "prepare_input: flow {:?}, sem {:?}, mask {:?}",
            flow.u.dim(),
            sem.labels.dim(),
            inst_mask.dim()
        )));
    }
    let mut x = Array3::zeros((4, h, w));
    let scale = F::from_f64c(1.0 / NUM_CLASSES as f64);
    for r in 0..h {
        for c in 0..w {
            x[(0, r, c)] = F::from_f32c(flow.u[(r, c)]);
            x[(1, r, c)] = F::from_f32c(flow.v[(r, c)]);
            x[(2, r, c)] = F::from_f64c(sem.labels[(r, c)] as f64) * scale;
            x[(3, r, c)] = F::from_f64c(inst_mask[(r, c)] as f64);
        }
    }
    Ok(x)
}

impl<F: Scalar> MaskNet<F> {
    pub fn new(cfg: &WarperConfig) -> Result<Self> {
        if cfg.unet_depth < 2 {
            return Err(Error::Config("unet_depth must be >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let unet = UNet::new("unet", 4, cfg.feature_channels, cfg.unet_depth, &mut rng);
        let head = Conv2d::new("head", cfg.feature_channels, 1, 1, true, &mut rng);
        Ok(MaskNet {
            cfg: cfg.clone(),
            unet,
            head,
        })
    }

    /// Named parameter blocks in execution order; the finetune "layer"
    /// granularity. "Last two layers" = final 1x1 head + last decoder block.
    pub fn layer_blocks(&self) -> Vec<String> {
        let d = self.cfg.unet_depth;
        let mut blocks: Vec<String> = (0..d).map(|l| format!("unet.enc{l}")).collect();
        blocks.extend((0..d - 1).rev().map(|l| format!("unet.dec{l}")));
        blocks.push("head".into());
        blocks
    }

    pub fn forward(&self, input: &Array3<F>) -> Result<(Array3<F>, MaskCache<F>)> {
        let (c, h, w) = input.dim();
        if c != 4 {
            return Err(Error::Shape(format!("masknet expects 4 channels, got {c}")));
        }
        let div = 1 << (self.cfg.unet_depth - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} grid not divisible by {div} for depth {}",
                self.cfg.unet_depth
            )));
        }
        let (feat, ucache) = self.unet.forward(input);
        let z = self.head.forward(&feat);
        let prob = sigmoid(&z);
        Ok((
            prob.clone(),
            MaskCache {
                unet: ucache,
                feat,
                prob,
            },
        ))
    }

    /// Backward given the gradient w.r.t. the pre-sigmoid logits.
    pub fn backward(&mut self, cache: &MaskCache<F>, gz: &Array3<F>) {
        let gfeat = self.head.backward(&cache.feat, gz);
        self.unet.backward(&cache.unet, &gfeat);
    }

    /// Probability grid plus the thresholded binary mask.
    pub fn predict_mask(&self, input: &Array3<F>) -> Result<(Array2<f64>, Array2<u8>)> {
        let (prob, _) = self.forward(input)?;
        let (_, h, w) = prob.dim();
        let mut p = Array2::zeros((h, w));
        let mut b = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let v = prob[(0, r, c)].to_f64c();
                p[(r, c)] = v;
                b[(r, c)] = (v > MASK_THRESHOLD) as u8;
            }
        }
        Ok((p, b))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg)?;
        checkpoint::save(path, &cfg, self)
    }
}

impl MaskNet<f32> {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let cfg: WarperConfig = serde_json::from_str(&ckpt.config_json)?;
        let mut net = MaskNet::<f32>::new(&cfg)?;
        checkpoint::restore(&ckpt, &mut net)?;
        Ok(net)
    }
}

impl<F: Scalar> Parameterized<F> for MaskNet<F> {
    fn param_refs(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        let mut refs = self.unet.param_refs(prefix);
        refs.extend(self.head.param_refs(prefix));
        refs
    }
}

/// Eq. 2 exactly: 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2)); the degenerate
/// all-empty case is defined as 0 (perfect agreement on emptiness).
pub fn dice_loss(prob: &Array2<f64>, gt: &Array2<u8>) -> Result<f64> {
    if prob.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "dice_loss {:?} vs {:?}",
            prob.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&p, &g) in prob.iter().zip(gt.iter()) {
        let g = g as f64;
        inter += p * g;
        pp += p * p;
        gg += g * g;
    }
    if pp + gg == 0.0 {
        Ok(0.0)
    } else {
        Ok(1.0 - 2.0 * inter / (pp + gg))
    }
}

/// Training-path Dice with smoothing epsilon on numerator and denominator.
/// Returns the loss and the gradient w.r.t. the pre-sigmoid logits
/// (d loss / d prob chained through the sigmoid).
pub fn dice_loss_grad_logits<F: Scalar>(prob: &Array3<F>, gt: &Array2<u8>) -> Result<(f64, Array3<F>)> {
    let (c, h, w) = prob.dim();
    if c != 1 || gt.dim() != (h, w) {
        return Err(Error::Shape("dice grad shape mismatch".into()));
    }
    let mut inter = 0.0f64;
    let mut pp = 0.0f64;
    let mut gg = 0.0f64;
    for r in 0..h {
        for cc in 0..w {
            let p = prob[(0, r, cc)].to_f64c();
            let g = gt[(r, cc)] as f64;
            inter += p * g;
            pp += p * p;
            gg += g * g;
        }
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = pp + gg + DICE_EPS;
    let loss = 1.0 - num / den;
    let mut gz = Array3::zeros((1, h, w));
    for r in 0..h {
        for cc in 0..w {
            let p = prob[(0, r, cc)].to_f64c();
            let g = gt[(r, cc)] as f64;
            // d/dp of -(2*inter+eps)/(pp+gg+eps)
            let dp = -(2.0 * g * den - num * 2.0 * p) / (den * den);
            gz[(0, r, cc)] = F::from_f64c(dp * p * (1.0 - p));
        }
    }
    Ok((loss, gz))
}

/// Same gradient without the sigmoid chain, for loss-level checks.
pub fn dice_loss_grad_prob(prob: &Array2<f64>, gt: &Array2<u8>) -> Result<(f64, Array2<f64>)> {
    if prob.dim() != gt.dim() {
        return Err(Error::Shape("dice grad shape mismatch".into()));
    }
    let mut inter = 0.0f64;
    let mut pp = 0.0f64;
    let mut gg = 0.0f64;
    for (&p, &g) in prob.iter().zip(gt.iter()) {
        let g = g as f64;
        inter += p * g;
        pp += p * p;
        gg += g * g;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = pp + gg + DICE_EPS;
    let loss = 1.0 - num / den;
    let mut gp = Array2::zeros(prob.dim());
    for ((r, c), &p) in prob.indexed_iter() {
        let g = gt[(r, c)] as f64;
        gp[(r, c)] = -(2.0 * g * den - num * 2.0 * p) / (den * den);
    }
    Ok((loss, gp))
}

/// Mean binary cross entropy; gradient w.r.t. logits is (p - g)/N.
pub fn bce_loss_grad_logits<F: Scalar>(prob: &Array3<F>, gt: &Array2<u8>) -> Result<(f64, Array3<F>)> {
    let (c, h, w) = prob.dim();
    if c != 1 || gt.dim() != (h, w) {
        return Err(Error::Shape("bce grad shape mismatch".into()));
    }
    let n = (h * w) as f64;
    let mut loss = 0.0;
    let mut gz = Array3::zeros((1, h, w));
    for r in 0..h {
        for cc in 0..w {
            let p = prob[(0, r, cc)].to_f64c().clamp(1e-7, 1.0 - 1e-7);
            let g = gt[(r, cc)] as f64;
            loss -= (g * p.ln() + (1.0 - g) * (1.0 - p).ln()) / n;
            gz[(0, r, cc)] = F::from_f64c((p - g) / n);
        }
    }
    Ok((loss, gz))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLoss {
    Dice,
    CrossEntropy,
}

fn loss_grad<F: Scalar>(
    loss: MaskLoss,
    prob: &Array3<F>,
    gt: &Array2<u8>,
) -> Result<(f64, Array3<F>)> {
    match loss {
        MaskLoss::Dice => dice_loss_grad_logits(prob, gt),
        MaskLoss::CrossEntropy => bce_loss_grad_logits(prob, gt),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskTrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub loss: MaskLoss,
    pub shuffle_seed: u64,
    /// Cap on examples per epoch (deterministic subsample); 0 = all.
    pub max_examples_per_epoch: usize,
    pub tracker: TrackerConfig,
}

impl Default for MaskTrainHyper {
    fn default() -> Self {
        MaskTrainHyper {
            lr: 1e-4,
            epochs: 4,
            batch: 8,
            loss: MaskLoss::Dice,
            shuffle_seed: 0,
            max_examples_per_epoch: 0,
            tracker: TrackerConfig::default(),
        }
    }
}

/// One supervision pair located inside a sequence: warp the instance at
/// frame `t` to frame `t+1`. `next` is None when the track terminates
/// (empty target: the model must learn disappearance).
#[derive(Debug, Clone, Copy)]
pub struct MaskExampleRef {
    pub seq: usize,
    pub t: usize,
    pub cur_idx: usize,
    pub next_idx: Option<usize>,
}

/// Build (M_t, M_{t+1}) supervision pairs from tracker correspondences.
pub fn pretrain_examples(
    seqs: &[SequenceSample],
    tracker: &TrackerConfig,
) -> Result<Vec<MaskExampleRef>> {
    let mut examples = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        let tracks = build_tracks(seq, tracker)?;
        for tr in &tracks {
            for k in 0..tr.len() {
                let t = tr.start_frame + k;
                if t + 1 >= seq.frames() {
                    continue;
                }
                examples.push(MaskExampleRef {
                    seq: si,
                    t,
                    cur_idx: tr.indices[k],
                    next_idx: tr.at_frame(t + 1),
                });
            }
        }
    }
    Ok(examples)
}

fn empty_like(seq: &SequenceSample) -> Array2<u8> {
    Array2::zeros((seq.height(), seq.width()))
}

/// Pretraining on ORACLE (ground-truth) flows. Returns per-epoch mean loss.
pub fn train_masknet_pretrain(
    net: &mut MaskNet<f32>,
    seqs: &[SequenceSample],
    hyper: &MaskTrainHyper,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let examples = pretrain_examples(seqs, &hyper.tracker)?;
    if examples.is_empty() {
        return Err(Error::Config("no supervision pairs in dataset".into()));
    }
    let n_params = net.param_count();
    let mut adam = Adam::<f32>::new(hyper.lr, n_params);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order = examples.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(hyper.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        if hyper.max_examples_per_epoch > 0 {
            order.truncate(hyper.max_examples_per_epoch);
        }
        let mut epoch_loss = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(hyper.batch) {
            net.zero_grads();
            for ex in chunk {
                let seq = &seqs[ex.seq];
                let cur = &seq.instances[ex.t][ex.cur_idx];
                let empty;
                let target: &Array2<u8> = match ex.next_idx {
                    Some(j) => &seq.instances[ex.t + 1][j].mask,
                    None => {
                        empty = empty_like(seq);
                        &empty
                    }
                };
                let input =
                    prepare_input::<f32>(&seq.flows[ex.t], &seq.semantics[ex.t], &cur.mask)?;
                let (prob, cache) = net.forward(&input)?;
                let (loss, mut gz) = loss_grad(hyper.loss, &prob, target)?;
                gz.mapv_inplace(|v| v / chunk.len() as f32);
                net.backward(&cache, &gz);
                epoch_loss += loss;
                n += 1;
            }
            adam.step(&mut net.param_refs(""));
        }
        let mean = epoch_loss / n as f64;
        log::info!("masknet pretrain epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSuffix {
    /// Train only the last k named layers.
    Layers(usize),
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskFinetuneHyper {
    pub lr: f64,
    pub epochs: usize,
    pub suffix: TrainableSuffix,
    /// Rollout length: 3 (short term) or 9 (mid term).
    pub horizon: usize,
    pub loss: MaskLoss,
    pub shuffle_seed: u64,
    pub tracker: TrackerConfig,
}

impl Default for MaskFinetuneHyper {
    fn default() -> Self {
        MaskFinetuneHyper {
            lr: 1e-4,
            epochs: 3,
            suffix: TrainableSuffix::Layers(2),
            horizon: 3,
            loss: MaskLoss::Dice,
            shuffle_seed: 0,
            tracker: TrackerConfig::default(),
        }
    }
}

fn trainable_blocks(net: &MaskNet<f32>, suffix: TrainableSuffix) -> Result<BTreeSet<String>> {
    let blocks = net.layer_blocks();
    match suffix {
        TrainableSuffix::All => Ok(blocks.into_iter().collect()),
        TrainableSuffix::Layers(k) => {
            if k == 0 || k > blocks.len() {
                return Err(Error::Config(format!(
                    "cannot finetune last {k} of {} layers",
                    blocks.len()
                )));
            }
            Ok(blocks[blocks.len() - k..].iter().cloned().collect())
        }
    }
}

/// Finetune on PREDICTED flows from OFNet's autoregressive rollout,
/// feeding MaskNet's own outputs (instance and re-fused semantics) forward
/// at every intermediate step. Only the configured suffix layers move.
pub fn train_masknet_finetune(
    net: &mut MaskNet<f32>,
    flow_net: &OfNet<f32>,
    seqs: &[SequenceSample],
    hyper: &MaskFinetuneHyper,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let trainable = trainable_blocks(net, hyper.suffix)?;
    let t_in = flow_net.cfg.t_in;
    let usable: Vec<&SequenceSample> = seqs
        .iter()
        .filter(|s| s.flows.len() >= t_in + hyper.horizon)
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "no sequence long enough for horizon {} with T={}",
            hyper.horizon, t_in
        )));
    }
    let n_params = net.param_count();
    let mut adam = Adam::<f32>::new(hyper.lr, n_params);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(hyper.shuffle_seed ^ (epoch as u64).wrapping_mul(0x517cc1b7));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n = 0usize;
        for &si in &order {
            let seq = usable[si];
            let anchor = t_in;
            let predicted = flow_net.rollout(&seq.flows[..t_in], hyper.horizon)?;
            let tracks = build_tracks(seq, &hyper.tracker)?;
            let live: Vec<&Track> = tracks
                .iter()
                .filter(|tr| tr.at_frame(anchor).is_some())
                .collect();
            if live.is_empty() {
                continue;
            }
            // rolling per-track state: (class, score, current mask)
            let mut state: Vec<InstanceMask> = live
                .iter()
                .map(|tr| {
                    let inst = &seq.instances[anchor][tr.at_frame(anchor).unwrap()];
                    inst.clone()
                })
                .collect();
            net.zero_grads();
            let mut seq_examples = 0usize;
            for k in 0..hyper.horizon {
                let sem = fuse_semantic(&state)?;
                let mut next_state = state.clone();
                for (ti, tr) in live.iter().enumerate() {
                    let input = prepare_input::<f32>(&predicted[k], &sem, &state[ti].mask)?;
                    let (prob, cache) = net.forward(&input)?;
                    let empty;
                    let target: &Array2<u8> = match tr.at_frame(anchor + k + 1) {
                        Some(j) => &seq.instances[anchor + k + 1][j].mask,
                        None => {
                            empty = empty_like(seq);
                            &empty
                        }
                    };
                    let (loss, gz) = loss_grad(hyper.loss, &prob, target)?;
                    net.backward(&cache, &gz);
                    epoch_loss += loss;
                    seq_examples += 1;
                    // feed own binary output forward
                    let (_, h, w) = prob.dim();
                    let mut m = Array2::zeros((h, w));
                    for r in 0..h {
                        for c in 0..w {
                            m[(r, c)] = (prob[(0, r, c)] as f64 > MASK_THRESHOLD) as u8;
                        }
                    }
                    next_state[ti].mask = m;
                    next_state[ti].refresh_bbox();
                }
                state = next_state;
            }
            if seq_examples == 0 {
                continue;
            }
            n += seq_examples;
            let scale = 1.0 / seq_examples as f32;
            for p in net.param_refs("") {
                let keep = trainable.contains(p.block());
                for g in p.grad.iter_mut() {
                    *g = if keep { *g * scale } else { 0.0 };
                }
            }
            adam.step(&mut net.param_refs(""));
        }
        let mean = if n > 0 { epoch_loss / n as f64 } else { 0.0 };
        log::info!("masknet finetune epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}
