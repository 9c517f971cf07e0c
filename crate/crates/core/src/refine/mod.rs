//! Appearance refinement: dense CRF, normalized-cut refinement under the
//! semantic constraint, and the two-part second training stage.

mod crf;
mod ncut;

pub use crf::*;
pub use ncut::*;

pub use crate::model::{appearance_loss, appearance_loss_grad};

use crate::datagen::{FeatureMap, Frame, Mask};
use crate::error::{ensure_shape, RcfError, Result};
use crate::model::{
    ema_update, train_step, Adam, BatchSampler, Checkpoint, Dataset, GridFlows, LossWeights, SegModel, StepLog, TrainItem,
};

/// `w_app * L_app + w_motion * L_motion`.
pub fn stage2_loss(l_app: f64, l_motion: f64, w_app: f64, w_motion: f64) -> f64 {
    w_app * l_app + w_motion * l_motion
}

/// `CRF(mask) * CRF(resize(x_k))`, elementwise, on the mask grid.
/// `x_k` lives on the feature grid; `frame` must already be on the mask grid.
pub fn combine_refinements(mask: &Mask, x_k: &Mask, frame: &Frame, params: &CrfParams) -> Result<Mask> {
    let a = crf_refine(mask, frame, params)?;
    let up = x_k.resized(mask.height, mask.width);
    let up = Mask { data: up.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..up };
    let b = crf_refine(&up, frame, params)?;
    Ok(Mask { height: mask.height, width: mask.width, data: a.data.iter().zip(&b.data).map(|(p, q)| p * q).collect() })
}

/// NCut-refined object mask on the feature grid for one frame.
pub fn semantic_refine(mask: &Mask, features: &FeatureMap) -> Result<Mask> {
    let x0 = mask.resized(features.height, features.width);
    let x0: Vec<f64> = x0.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let a = affinity(features, AFFINITY_TAU)?;
    let x = ncut_refine(&a, &x0, NCUT_ITERATIONS, NCUT_STEP)?;
    Mask::new(features.height, features.width, x)
}

/// Stage-2 refined target for one frame: the combined CRF/NCut refinement when
/// features are given, otherwise the CRF refinement alone. The mask may live on
/// a coarser grid than the frame; refinement runs at frame resolution and the
/// result is returned on the mask's grid.
pub fn refined_target(mask: &Mask, frame: &Frame, features: Option<&FeatureMap>, params: &CrfParams) -> Result<Mask> {
    let up = mask.resized(frame.height, frame.width);
    let up = Mask { data: up.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..up };
    let refined = match features {
        Some(f) => combine_refinements(&up, &semantic_refine(&up, f)?, frame, params)?,
        None => crf_refine(&up, frame, params)?,
    };
    Ok(refined.resized(mask.height, mask.width))
}

fn copy_buffers(from: &mut SegModel, to: &mut SegModel) {
    let mut bufs = Vec::new();
    from.visit_buffers(&mut |_, v| bufs.push(v.to_vec()));
    let mut it = bufs.into_iter();
    to.visit_buffers(&mut |_, v| v.copy_from_slice(&it.next().expect("same architecture")));
}

/// Second stage: CRF-supervised sub-stage with an EMA teacher, then a sub-stage
/// supervised by refined masks generated once. Each gets half the steps.
pub fn train_stage2(ck: &Checkpoint, dataset: &Dataset, crf: &CrfParams) -> Result<Checkpoint> {
    train_stage2_logged(ck, dataset, crf, &mut Vec::new())
}

pub fn train_stage2_logged(ck: &Checkpoint, dataset: &Dataset, crf: &CrfParams, log: &mut Vec<StepLog>) -> Result<Checkpoint> {
    let cfg = &ck.config;
    cfg.validate()?;
    crf.validate()?;
    if cfg.steps_stage2 == 0 {
        return Ok(ck.clone());
    }
    if dataset.is_empty() {
        return Err(RcfError::Config("training dataset is empty".into()));
    }
    let c_o = ck.object_channel.ok_or_else(|| RcfError::Config("stage 2 needs a selected object channel".into()))?;
    let (h, w) = dataset.frame_size()?;
    ensure_shape!(
        h == ck.model.shape.input_height && w == ck.model.shape.input_width,
        "dataset frames {h}x{w} do not match the model input"
    );
    let mut model = ck.model.clone();
    let mut ema = ck.ema_params.clone();
    let steps_a = cfg.steps_stage2 / 2;
    // each sub-stage is a fine-tuning run of its own: fresh moments, schedule restarted
    let n_params = ema.len();
    let fresh_adam = |steps: usize| Adam::new(n_params, cfg.lr, cfg.min_lr, cfg.poly_power, steps, cfg.weight_decay);
    let mut opt = fresh_adam(steps_a);
    let mut teacher = ck.ema_model();

    let flows = GridFlows::new(dataset, model.shape.mask_grid());
    let use_sc = cfg.semantic_constraint && dataset.has_features();
    let mut sampler = BatchSampler::new(dataset.len(), cfg.seed ^ 0x57A6E2);

    let mut pregen: Option<Vec<Mask>> = None;
    for step in 0..cfg.steps_stage2 {
        let idx = sampler.next_batch(cfg.batch);
        let crf_stage = step < steps_a;
        let fresh: Vec<Mask> = if crf_stage {
            let mut t = Vec::with_capacity(idx.len());
            for &i in &idx {
                let frame = &dataset.pairs[i].frame_t;
                let m = teacher.forward_masks(frame)?.channel_mask(c_o);
                t.push(refined_target(&m, frame, None, crf)?);
            }
            t
        } else {
            if pregen.is_none() {
                opt = fresh_adam(cfg.steps_stage2 - steps_a);
                let mut all = Vec::with_capacity(dataset.len());
                for pair in &dataset.pairs {
                    let m = model.forward_masks(&pair.frame_t)?.channel_mask(c_o);
                    let feats = if use_sc { pair.features.as_ref() } else { None };
                    all.push(refined_target(&m, &pair.frame_t, feats, crf)?);
                }
                pregen = Some(all);
            }
            Vec::new()
        };
        let targets: Vec<&Mask> = match &pregen {
            Some(all) if !crf_stage => idx.iter().map(|&i| &all[i]).collect(),
            _ => fresh.iter().collect(),
        };
        let (weights, stage) = if crf_stage {
            (LossWeights { motion: cfg.w_motion_crf, appearance: cfg.w_app_crf, object_channel: c_o }, "stage2_crf")
        } else {
            (LossWeights { motion: cfg.w_motion_ncut, appearance: cfg.w_app_ncut, object_channel: c_o }, "stage2_ncut")
        };
        let items: Vec<TrainItem> = idx.iter().zip(&targets).map(|(&i, t)| flows.item(dataset, i, Some(*t))).collect();
        let lr = opt.current_lr(if crf_stage { step } else { step - steps_a });
        let loss = train_step(&mut model, &items, weights, &mut opt, lr)?;
        log.push(StepLog { stage, step, lr, loss: loss.total, motion: loss.motion, appearance: loss.appearance });
        ema_update(&mut ema, &model.flat_params(), cfg.ema_momentum)?;
        teacher.set_flat_params(&ema)?;
        copy_buffers(&mut model, &mut teacher);
    }
    Ok(Checkpoint::new(cfg.clone(), model, ema, opt, Some(c_o)))
}
