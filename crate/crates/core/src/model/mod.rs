//! Trainable segmenter, optimizer, EMA, checkpoints and the stage-1 loop.

mod checkpoint;
mod config;
mod gradcheck;
mod net;
mod optim;

pub use checkpoint::*;
pub use config::*;
pub use gradcheck::*;
pub use net::*;
pub use optim::*;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{FeatureMap, FlowField, Frame, Mask, SyntheticSequence};
use crate::error::{ensure_shape, RcfError, Result};
use crate::motion::{motion_backward, motion_forward, softmax_backward};

/// One training pair: frames `t`, `t+1`, the flow between them and optionally the reverse flow.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub frame_t: Frame,
    pub frame_t1: Frame,
    pub flow: FlowField,
    pub backward_flow: Option<FlowField>,
    /// Auxiliary appearance features of `frame_t`, if a feature source is configured.
    pub features: Option<FeatureMap>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pairs: Vec<PairSample>,
}

impl Dataset {
    pub fn from_sequences(seqs: &[SyntheticSequence]) -> Self {
        let mut pairs = Vec::new();
        for s in seqs {
            for t in 0..s.flows.len() {
                pairs.push(PairSample {
                    frame_t: s.frames[t].clone(),
                    frame_t1: s.frames[t + 1].clone(),
                    flow: s.flows[t].clone(),
                    backward_flow: Some(s.backward_flows[t].clone()),
                    features: Some(s.features[t].clone()),
                });
            }
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_features(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.features.is_some())
    }

    /// Input frame size; all pairs must agree.
    pub fn frame_size(&self) -> Result<(usize, usize)> {
        let first = self.pairs.first().ok_or_else(|| RcfError::Config("dataset is empty".into()))?;
        let (h, w) = (first.frame_t.height, first.frame_t.width);
        for p in &self.pairs {
            ensure_shape!(
                p.frame_t.height == h && p.frame_t.width == w && p.frame_t1.height == h && p.frame_t1.width == w,
                "dataset mixes frame sizes"
            );
            ensure_shape!(p.flow.height == h && p.flow.width == w, "flow grid differs from frame grid");
        }
        Ok((h, w))
    }
}

/// Per-step inputs with flows already on the mask grid.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub frame_t: &'a Frame,
    pub frame_t1: &'a Frame,
    pub flow: &'a FlowField,
    pub backward_flow: Option<&'a FlowField>,
    /// Refined object-channel mask to regress towards (stage 2 only).
    pub appearance_target: Option<&'a Mask>,
}

/// Loss weights for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub motion: f64,
    pub appearance: f64,
    pub object_channel: usize,
}

impl LossWeights {
    pub fn motion_only() -> Self {
        Self { motion: 1.0, appearance: 0.0, object_channel: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub motion: f64,
    pub appearance: f64,
}

/// Mean squared difference between a mask and its (constant) refinement.
pub fn appearance_loss(mask: &Mask, refined: &Mask) -> Result<f64> {
    ensure_shape!(
        mask.height == refined.height && mask.width == refined.width && mask.len() == refined.len(),
        "mask {}x{} vs refined {}x{}",
        mask.height,
        mask.width,
        refined.height,
        refined.width
    );
    Ok(mask.data.iter().zip(&refined.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / mask.len() as f64)
}

/// Gradient of [`appearance_loss`] w.r.t. the first argument only.
pub fn appearance_loss_grad(mask: &Mask, refined: &Mask) -> Result<Vec<f64>> {
    appearance_loss(mask, refined)?;
    let n = mask.len() as f64;
    Ok(mask.data.iter().zip(&refined.data).map(|(a, b)| 2.0 * (a - b) / n).collect())
}

/// Forward, backward and one optimizer update on a batch. Returns the batch loss before the update.
pub fn train_step(
    model: &mut SegModel,
    items: &[TrainItem<'_>],
    weights: LossWeights,
    opt: &mut Adam,
    lr: f64,
) -> Result<StepLoss> {
    let loss = accumulate_gradients(model, items, weights)?;
    if !loss.total.is_finite() {
        return Err(RcfError::Divergence(format!(
            "non-finite loss {} (motion {}, appearance {}) at optimizer step {}",
            loss.total, loss.motion, loss.appearance, opt.step
        )));
    }
    let mut params = model.flat_params();
    let grads = model.flat_grads();
    opt.update(&mut params, &grads, lr)?;
    model.set_flat_params(&params)?;
    Ok(loss)
}

/// Zeroes gradients, runs forward + backward on a batch, leaves gradients in the model.
pub fn accumulate_gradients(model: &mut SegModel, items: &[TrainItem<'_>], weights: LossWeights) -> Result<StepLoss> {
    ensure_shape!(!items.is_empty(), "empty batch");
    let b = items.len();
    let (mh, mw) = model.shape.mask_grid();
    for it in items {
        ensure_shape!(it.flow.height == mh && it.flow.width == mw, "flow must be on the {mh}x{mw} mask grid");
    }
    model.zero_grad();
    let pairs: Vec<(&Frame, &Frame)> = items.iter().map(|it| (it.frame_t, it.frame_t1)).collect();
    let fwd = model.forward_pairs(&pairs)?;
    let symmetric = model.shape.symmetric;
    let inv_b = 1.0 / b as f64;

    let mut g_logits = Vec::with_capacity(fwd.masks.len());
    let mut g_masks: Vec<Vec<f64>> = fwd.masks.iter().map(|m| vec![0.0; m.data.len()]).collect();
    let mut g_res: Vec<Vec<f64>> = fwd.residuals.iter().map(|r| vec![0.0; r.data.len()]).collect();
    let (mut motion_sum, mut app_sum) = (0.0, 0.0);

    let phi1 = model.phi1.clone();
    let phi2 = model.phi2.clone();
    let mut directions: Vec<(usize, usize, &FlowField)> = items.iter().enumerate().map(|(i, it)| (i, i, it.flow)).collect();
    if symmetric {
        for (i, it) in items.iter().enumerate() {
            if let Some(bf) = it.backward_flow {
                ensure_shape!(bf.height == mh && bf.width == mw, "backward flow must be on the mask grid");
                directions.push((b + i, b + i, bf));
            }
        }
    }
    for (mask_idx, res_idx, target) in directions {
        let masks = &fwd.masks[mask_idx];
        let res = &fwd.residuals[res_idx];
        let mf = motion_forward(target, masks, res, &phi1, &phi2)?;
        motion_sum += mf.loss;
        if weights.motion != 0.0 {
            let g = motion_backward(&mf, target, masks, res, &phi1, &phi2, weights.motion * inv_b)?;
            g_masks[mask_idx].iter_mut().zip(&g.masks).for_each(|(a, v)| *a += v);
            g_res[res_idx].iter_mut().zip(&g.residual).for_each(|(a, v)| *a += v);
            for (dst, src) in [(&mut model.phi1_grad, &g.phi1), (&mut model.phi2_grad, &g.phi2)] {
                dst.w1.iter_mut().zip(&src.w1).for_each(|(a, v)| *a += v);
                dst.b1.iter_mut().zip(&src.b1).for_each(|(a, v)| *a += v);
                dst.w2.iter_mut().zip(&src.w2).for_each(|(a, v)| *a += v);
                dst.b2.iter_mut().zip(&src.b2).for_each(|(a, v)| *a += v);
            }
        }
    }
    for (i, it) in items.iter().enumerate() {
        if let Some(target) = it.appearance_target {
            let masks = &fwd.masks[i];
            ensure_shape!(weights.object_channel < masks.channels, "object channel {} out of range", weights.object_channel);
            let m = masks.channel_mask(weights.object_channel);
            app_sum += appearance_loss(&m, target)?;
            if weights.appearance != 0.0 {
                let g = appearance_loss_grad(&m, target)?;
                let n = masks.pixels();
                let off = weights.object_channel * n;
                g_masks[i][off..off + n].iter_mut().zip(&g).for_each(|(a, v)| *a += v * weights.appearance * inv_b);
            }
        }
    }
    for (m, g) in fwd.masks.iter().zip(&g_masks) {
        g_logits.push(softmax_backward(m, g));
    }
    model.backward(&g_logits, &g_res)?;
    let motion = motion_sum * inv_b;
    let appearance = app_sum * inv_b;
    Ok(StepLoss { total: weights.motion * motion + weights.appearance * appearance, motion, appearance })
}

/// One stage-1 update: motion loss only.
pub fn stage1_step(model: &mut SegModel, items: &[TrainItem<'_>], opt: &mut Adam, lr: f64) -> Result<f64> {
    Ok(train_step(model, items, LossWeights::motion_only(), opt, lr)?.total)
}

/// Deterministic epoch-shuffled batch sampler.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    n: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { rng: ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C_4E5), order: (0..n).collect(), cursor: n, n };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size.min(self.n))
            .map(|_| {
                if self.cursor == self.n {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Flows resampled once onto the model's mask grid.
pub(crate) struct GridFlows {
    pub forward: Vec<FlowField>,
    pub backward: Vec<Option<FlowField>>,
}

impl GridFlows {
    pub fn new(dataset: &Dataset, grid: (usize, usize)) -> Self {
        Self {
            forward: dataset.pairs.iter().map(|p| p.flow.resized(grid.0, grid.1)).collect(),
            backward: dataset.pairs.iter().map(|p| p.backward_flow.as_ref().map(|f| f.resized(grid.0, grid.1))).collect(),
        }
    }

    pub fn item<'a>(&'a self, dataset: &'a Dataset, i: usize, target: Option<&'a Mask>) -> TrainItem<'a> {
        TrainItem {
            frame_t: &dataset.pairs[i].frame_t,
            frame_t1: &dataset.pairs[i].frame_t1,
            flow: &self.forward[i],
            backward_flow: self.backward[i].as_ref(),
            appearance_target: target,
        }
    }
}

/// Soft object-channel mask resampled to the frame's resolution.
pub fn predict_mask(model: &mut SegModel, frame: &Frame, channel: usize) -> Result<Mask> {
    let masks = model.forward_masks(frame)?;
    ensure_shape!(channel < masks.channels, "object channel {channel} out of range for {} channels", masks.channels);
    Ok(masks.channel_mask(channel).resized(frame.height, frame.width))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub stage: &'static str,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub motion: f64,
    pub appearance: f64,
}

/// Stage-1 training from scratch; returns a checkpoint with EMA equal to the final parameters.
pub fn train_stage1(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    train_stage1_logged(dataset, config, &mut Vec::new())
}

pub fn train_stage1_logged(dataset: &Dataset, config: &TrainConfig, log: &mut Vec<StepLog>) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(RcfError::Config("training dataset is empty".into()));
    }
    let (h, w) = dataset.frame_size()?;
    let mut model = SegModel::new(ModelShape::from_config(config, h, w), config.seed)?;
    let n_params = model.num_params();
    let mut opt = Adam::new(n_params, config.lr, config.min_lr, config.poly_power, config.steps_stage1, config.weight_decay);
    let flows = GridFlows::new(dataset, model.shape.mask_grid());
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    for step in 0..config.steps_stage1 {
        let idx = sampler.next_batch(config.batch);
        let items: Vec<TrainItem> = idx.iter().map(|&i| flows.item(dataset, i, None)).collect();
        let lr = opt.current_lr(step);
        let loss = train_step(&mut model, &items, LossWeights::motion_only(), &mut opt, lr)?;
        log.push(StepLog { stage: "stage1", step, lr, loss: loss.total, motion: loss.motion, appearance: 0.0 });
    }
    let ema = model.flat_params();
    Ok(Checkpoint::new(config.clone(), model, ema, opt, None))
}
