//! OFNet: the optical flow forecaster. A time-distributed UNet extracts
//! motion features from each input flow, a ConvLSTM aggregates them, and a
//! 1x1 linear head emits the next flow. Trained on sequences shifted by one
//! timestep; used autoregressively at inference, keeping only each step's
//! last prediction.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FlowField, SequenceSample};
use crate::nn::checkpoint;
use crate::nn::conv::Conv2d;
use crate::nn::convlstm::{ConvLstm, LstmStepCache};
use crate::nn::unet::{UNet, UNetCache};
use crate::nn::{Adam, ParamRef, Parameterized, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    /// Input sequence length T.
    pub t_in: usize,
    /// UNet output feature channels (64 in the full-size configuration).
    pub feature_channels: usize,
    /// Levels of the contracting path.
    pub unet_depth: usize,
    /// ConvLSTM hidden channels.
    pub hidden_channels: usize,
    /// Weight initialization seed.
    pub init_seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            t_in: 6,
            feature_channels: 64,
            unet_depth: 3,
            hidden_channels: 64,
            init_seed: 0,
        }
    }
}

impl ForecasterConfig {
    /// Small configuration for desk-scale CPU training.
    pub fn desk() -> Self {
        ForecasterConfig {
            feature_channels: 32,
            hidden_channels: 16,
            ..ForecasterConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in < 1 {
            return Err(Error::Config("t_in must be >= 1".into()));
        }
        if self.unet_depth < 2 {
            return Err(Error::Config("unet_depth must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct OfNet<F> {
    pub cfg: ForecasterConfig,
    pub unet: UNet<F>,
    pub lstm: ConvLstm<F>,
    pub head: Conv2d<F>,
}

pub struct SeqCache<F> {
    unet: Vec<UNetCache<F>>,
    lstm: Vec<LstmStepCache<F>>,
    /// LSTM hidden outputs (the head inputs).
    hs: Vec<Array3<F>>,
}

pub fn flow_to_array<F: Scalar>(f: &FlowField) -> Array3<F> {
    let (h, w) = f.u.dim();
    let mut x = Array3::zeros((2, h, w));
    for r in 0..h {
        for c in 0..w {
            x[(0, r, c)] = F::from_f32c(f.u[(r, c)]);
            x[(1, r, c)] = F::from_f32c(f.v[(r, c)]);
        }
    }
    x
}

pub fn array_to_flow<F: Scalar>(x: &Array3<F>) -> FlowField {
    let (_, h, w) = x.dim();
    let mut f = FlowField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            f.u[(r, c)] = x[(0, r, c)].to_f64c() as f32;
            f.v[(r, c)] = x[(1, r, c)].to_f64c() as f32;
        }
    }
    f
}

impl<F: Scalar> OfNet<F> {
    pub fn new(cfg: &ForecasterConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let unet = UNet::new("unet", 2, cfg.feature_channels, cfg.unet_depth, &mut rng);
        let lstm = ConvLstm::new("lstm", cfg.feature_channels, cfg.hidden_channels, &mut rng);
        let head = Conv2d::new("head", cfg.hidden_channels, 2, 1, true, &mut rng);
        Ok(OfNet {
            cfg: cfg.clone(),
            unet,
            lstm,
            head,
        })
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (self.cfg.unet_depth - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} grid not divisible by {div} for depth {}",
                self.cfg.unet_depth
            )));
        }
        Ok(())
    }

    /// Motion features for one flow field (the time-distributed backbone).
    pub fn extract_features(&self, flow: &FlowField) -> Result<Array3<F>> {
        self.check_shape(flow.height(), flow.width())?;
        Ok(self.unet.forward(&flow_to_array(flow)).0)
    }

    /// Run the whole shifted-sequence forward pass: output k estimates input
    /// flow k+1. Hidden state starts from zero (fresh per sequence).
    pub fn forward_arrays(&self, xs: &[Array3<F>]) -> (Vec<Array3<F>>, SeqCache<F>) {
        let (_, h, w) = xs[0].dim();
        let (mut hst, mut cst) = self.lstm.zero_state(h, w);
        let mut cache = SeqCache {
            unet: Vec::with_capacity(xs.len()),
            lstm: Vec::with_capacity(xs.len()),
            hs: Vec::with_capacity(xs.len()),
        };
        let mut preds = Vec::with_capacity(xs.len());
        for x in xs {
            let (feat, ucache) = self.unet.forward(x);
            let (h2, c2, lcache) = self.lstm.step(&feat, &hst, &cst);
            preds.push(self.head.forward(&h2));
            cache.unet.push(ucache);
            cache.lstm.push(lcache);
            cache.hs.push(h2.clone());
            hst = h2;
            cst = c2;
        }
        (preds, cache)
    }

    /// Backward through the whole sequence given per-step prediction
    /// gradients; accumulates parameter gradients.
    pub fn backward_arrays(&mut self, cache: &SeqCache<F>, gpreds: &[Array3<F>]) {
        let t = gpreds.len();
        let dim = cache.hs[0].dim();
        let mut gh = Array3::zeros(dim);
        let mut gc = Array3::zeros(dim);
        for k in (0..t).rev() {
            let gh_head = self.head.backward(&cache.hs[k], &gpreds[k]);
            let gh_total = &gh + &gh_head;
            let (gfeat, ghp, gcp) = self.lstm.backward_step(&cache.lstm[k], &gh_total, &gc);
            self.unet.backward(&cache.unet[k], &gfeat);
            gh = ghp;
            gc = gcp;
        }
    }

    /// Exactly T flows in, T predicted flows out (output k estimates input
    /// flow k+1).
    pub fn forward_sequence(&self, flows: &[FlowField]) -> Result<Vec<FlowField>> {
        if flows.len() != self.cfg.t_in {
            return Err(Error::Shape(format!(
                "forward_sequence expects {} flows, got {}",
                self.cfg.t_in,
                flows.len()
            )));
        }
        self.check_shape(flows[0].height(), flows[0].width())?;
        let xs: Vec<Array3<F>> = flows.iter().map(flow_to_array).collect();
        let (preds, _) = self.forward_arrays(&xs);
        Ok(preds.iter().map(array_to_flow).collect())
    }

    /// Autoregressive rollout: slide a window of the most recent T flows
    /// (real then predicted), keep only each step's last output.
    pub fn rollout(&self, past: &[FlowField], n: usize) -> Result<Vec<FlowField>> {
        if n == 0 {
            return Err(Error::Shape("rollout needs n >= 1".into()));
        }
        if past.len() != self.cfg.t_in {
            return Err(Error::Shape(format!(
                "rollout expects {} past flows, got {}",
                self.cfg.t_in,
                past.len()
            )));
        }
        self.check_shape(past[0].height(), past[0].width())?;
        let mut window: VecDeque<Array3<F>> = past.iter().map(flow_to_array).collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let xs: Vec<Array3<F>> = window.iter().cloned().collect();
            let (preds, _) = self.forward_arrays(&xs);
            let last = preds.into_iter().last().unwrap();
            let emitted = array_to_flow(&last);
            // feed back exactly what is emitted (fields are f32), so a
            // rollout is indistinguishable from hand-unrolled single steps
            window.pop_front();
            window.push_back(flow_to_array(&emitted));
            out.push(emitted);
        }
        Ok(out)
    }

    /// Teacher-forced variant: the window is always refilled with the true
    /// flows, so every output is a single-step prediction from clean context.
    pub fn rollout_teacher_forced(
        &self,
        past: &[FlowField],
        future_truth: &[FlowField],
    ) -> Result<Vec<FlowField>> {
        if past.len() != self.cfg.t_in {
            return Err(Error::Shape(format!(
                "rollout expects {} past flows, got {}",
                self.cfg.t_in,
                past.len()
            )));
        }
        let mut window: VecDeque<Array3<F>> = past.iter().map(flow_to_array).collect();
        let mut out = Vec::with_capacity(future_truth.len());
        for truth in future_truth {
            let xs: Vec<Array3<F>> = window.iter().cloned().collect();
            let (preds, _) = self.forward_arrays(&xs);
            out.push(array_to_flow(preds.last().unwrap()));
            window.pop_front();
            window.push_back(flow_to_array(truth));
        }
        Ok(out)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg)?;
        checkpoint::save(path, &cfg, self)
    }
}

impl OfNet<f32> {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let cfg: ForecasterConfig = serde_json::from_str(&ckpt.config_json)?;
        let mut net = OfNet::<f32>::new(&cfg)?;
        checkpoint::restore(&ckpt, &mut net)?;
        Ok(net)
    }
}

impl<F: Scalar> Parameterized<F> for OfNet<F> {
    fn param_refs(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>> {
        let mut refs = self.unet.param_refs(prefix);
        refs.extend(self.lstm.param_refs(prefix));
        refs.extend(self.head.param_refs(prefix));
        refs
    }
}

/// The shifted-sequence L2 loss: mean over T steps of the per-step squared
/// error normalized by H*W*2. Returns the loss and per-step prediction
/// gradients.
pub fn loss_flow_arrays<F: Scalar>(
    preds: &[Array3<F>],
    gts: &[Array3<F>],
) -> Result<(f64, Vec<Array3<F>>)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "loss_flow over {} preds vs {} gts",
            preds.len(),
            gts.len()
        )));
    }
    let t = preds.len();
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(t);
    for (p, g) in preds.iter().zip(gts) {
        if p.dim() != g.dim() {
            return Err(Error::Shape("loss_flow step shape mismatch".into()));
        }
        let (_, h, w) = p.dim();
        let norm = (h * w * 2) as f64;
        let resid = p - g;
        loss += resid.iter().map(|r| r.to_f64c() * r.to_f64c()).sum::<f64>() / norm;
        let scale = F::from_f64c(2.0 / (norm * t as f64));
        grads.push(resid.mapv(|r| r * scale));
    }
    Ok((loss / t as f64, grads))
}

/// Loss on flow fields (evaluation surface; f64 accumulation).
pub fn loss_flow(preds: &[FlowField], gts: &[FlowField]) -> Result<f64> {
    let ps: Vec<Array3<f64>> = preds.iter().map(flow_to_array).collect();
    let gs: Vec<Array3<f64>> = gts.iter().map(flow_to_array).collect();
    loss_flow_arrays(&ps, &gs).map(|(l, _)| l)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stride between training-window start offsets within one sequence.
    pub window_stride: usize,
    pub shuffle_seed: u64,
}

impl Default for FlowTrainHyper {
    fn default() -> Self {
        FlowTrainHyper {
            lr: 1e-4,
            batch: 3,
            epochs: 100,
            window_stride: 4,
            shuffle_seed: 0,
        }
    }
}

/// Train OFNet on the train split. Returns the model and per-epoch mean
/// training losses (final < initial on any non-degenerate dataset).
pub fn train_ofnet(
    cfg: &ForecasterConfig,
    hyper: &FlowTrainHyper,
    train: &[SequenceSample],
) -> Result<(OfNet<f32>, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let t = cfg.t_in;
    // (sequence, window start): a window uses flows[s..s+T] as input and
    // flows[s+1..s+T+1] as the shifted target
    let mut windows = Vec::new();
    for (i, seq) in train.iter().enumerate() {
        if seq.flows.len() < t + 1 {
            continue;
        }
        let mut s = 0;
        while s + t + 1 <= seq.flows.len() {
            windows.push((i, s));
            s += hyper.window_stride.max(1);
        }
    }
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "no sequence provides the {} consecutive flows required",
            t + 1
        )));
    }
    let mut net = OfNet::<f32>::new(cfg)?;
    let n_params = net.param_count();
    let mut adam = Adam::<f32>::new(hyper.lr, n_params);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order = windows.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(hyper.batch) {
            net.zero_grads();
            let mut batch_loss = 0.0;
            for &(i, s) in chunk {
                let seq = &train[i];
                let xs: Vec<Array3<f32>> =
                    seq.flows[s..s + t].iter().map(flow_to_array).collect();
                let gts: Vec<Array3<f32>> =
                    seq.flows[s + 1..s + t + 1].iter().map(flow_to_array).collect();
                let (preds, cache) = net.forward_arrays(&xs);
                let (loss, mut grads) = loss_flow_arrays(&preds, &gts)?;
                if !loss.is_finite() {
                    return Err(Error::Config(format!("non-finite loss at epoch {epoch}")));
                }
                let scale = 1.0 / chunk.len() as f32;
                for g in grads.iter_mut() {
                    g.mapv_inplace(|v| v * scale);
                }
                net.backward_arrays(&cache, &grads);
                batch_loss += loss;
            }
            adam.step(&mut net.param_refs(""));
            epoch_loss += batch_loss / chunk.len() as f64;
            n_batches += 1;
        }
        let mean = epoch_loss / n_batches as f64;
        log::info!("ofnet epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok((net, epoch_losses))
}
