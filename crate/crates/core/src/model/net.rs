//! The segmenter: a small strided backbone, a segmentation head fusing the
//! first and last backbone blocks, and a bounded residual-flow head over the
//! concatenated features of a frame pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::datagen::Frame;
use crate::error::{ensure_shape, RcfError, Result};
use crate::motion::{bounded_tanh, MaskStack, MlpGrad, ResidualStack, VectorMLP};
use crate::nn::{Conv2d, ConvBlock, Tensor};
use crate::resize::Bilinear;

/// Scale applied to the default init of the residual head's output layer.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub lambda: f64,
    pub feature_channels: usize,
    pub head_channels: usize,
    /// Residual head predicts backward-direction flows too.
    pub symmetric: bool,
}

impl ModelShape {
    pub fn from_config(cfg: &TrainConfig, input_height: usize, input_width: usize) -> Self {
        Self {
            input_height,
            input_width,
            channels: cfg.channels,
            lambda: cfg.lambda,
            feature_channels: cfg.feature_channels,
            head_channels: cfg.head_channels,
            symmetric: cfg.symmetric_loss,
        }
    }

    /// Mask and flow grid: half the input resolution.
    pub fn mask_grid(&self) -> (usize, usize) {
        (self.input_height / 2, self.input_width / 2)
    }

    /// Backbone feature grid: a quarter of the input resolution.
    pub fn feature_grid(&self) -> (usize, usize) {
        (self.input_height / 4, self.input_width / 4)
    }

    fn stem_channels(&self) -> usize {
        (self.feature_channels / 2).max(1)
    }

    fn residual_outputs(&self) -> usize {
        self.channels * 2 * if self.symmetric { 2 } else { 1 }
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub shape: ModelShape,
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub block3: ConvBlock,
    pub seg1: ConvBlock,
    pub seg2: ConvBlock,
    pub seg_out: Conv2d,
    pub res1: ConvBlock,
    pub res2: ConvBlock,
    pub res_out: Conv2d,
    pub phi1: VectorMLP,
    pub phi2: VectorMLP,
    pub phi1_grad: MlpGrad,
    pub phi2_grad: MlpGrad,
    up_feat: Bilinear,
    cache: Option<ForwardCache>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    pairs: usize,
    seg_frames: usize,
    /// tanh outputs at feature resolution
    res_tanh: Option<Tensor>,
}

/// Outputs of a training-mode forward over a batch of frame pairs.
#[derive(Debug, Clone)]
pub struct PairForward {
    /// Masks for the first frames, then (if symmetric) for the second frames.
    pub masks: Vec<MaskStack>,
    /// Forward-direction residuals, then (if symmetric) backward-direction ones.
    pub residuals: Vec<ResidualStack>,
}

impl SegModel {
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.input_height % 4 != 0 || shape.input_width % 4 != 0 || shape.input_height < 4 || shape.input_width < 4 {
            return Err(RcfError::Config(format!(
                "input {}x{} must be a positive multiple of 4 in both dimensions",
                shape.input_height, shape.input_width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, k, h) = (shape.stem_channels(), shape.feature_channels, shape.head_channels);
        let block1 = ConvBlock::new(3, s, 2, &mut rng);
        let block2 = ConvBlock::new(s, k, 2, &mut rng);
        let block3 = ConvBlock::new(k, k, 1, &mut rng);
        let seg1 = ConvBlock::new(s + k, h, 1, &mut rng);
        let seg2 = ConvBlock::new(h, h, 1, &mut rng);
        let seg_out = Conv2d::new(h, shape.channels, 1, 1, 1.0, &mut rng);
        let res1 = ConvBlock::new(2 * k, h, 1, &mut rng);
        let res2 = ConvBlock::new(h, h, 1, &mut rng);
        let res_out = Conv2d::new(h, shape.residual_outputs(), 1, 1, RESIDUAL_INIT_SCALE, &mut rng);
        let phi1 = VectorMLP::near_identity(VectorMLP::DEFAULT_HIDDEN, &mut rng);
        let phi2 = VectorMLP::near_identity(VectorMLP::DEFAULT_HIDDEN, &mut rng);
        let (fh, fw) = shape.feature_grid();
        let (mh, mw) = shape.mask_grid();
        Ok(Self {
            up_feat: Bilinear::new(fh, fw, mh, mw),
            phi1_grad: MlpGrad::zeros(phi1.hidden),
            phi2_grad: MlpGrad::zeros(phi2.hidden),
            shape,
            block1,
            block2,
            block3,
            seg1,
            seg2,
            seg_out,
            res1,
            res2,
            res_out,
            phi1,
            phi2,
            cache: None,
        })
    }

    fn check_frame(&self, f: &Frame) -> Result<()> {
        ensure_shape!(
            f.height == self.shape.input_height && f.width == self.shape.input_width,
            "model expects {}x{} frames, got {}x{}",
            self.shape.input_height,
            self.shape.input_width,
            f.height,
            f.width
        );
        Ok(())
    }

    fn stack_frames(&self, frames: &[&Frame]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(frames.len() * 3 * self.shape.input_height * self.shape.input_width);
        for f in frames {
            self.check_frame(f)?;
            data.extend(f.to_planar());
        }
        Ok(Tensor::from_vec(frames.len(), 3, self.shape.input_height, self.shape.input_width, data))
    }

    fn upsample(&self, t: &Tensor) -> Tensor {
        let (mh, mw) = self.shape.mask_grid();
        let mut out = Tensor::zeros(t.n, t.c, mh, mw);
        let (pi, po) = (t.plane(), mh * mw);
        for (src, dst) in t.data.chunks(pi).zip(out.data.chunks_mut(po)) {
            dst.copy_from_slice(&self.up_feat.apply(src));
        }
        out
    }

    fn upsample_adjoint(&self, g: &Tensor) -> Tensor {
        let (fh, fw) = self.shape.feature_grid();
        let mut out = Tensor::zeros(g.n, g.c, fh, fw);
        let (pi, po) = (fh * fw, g.plane());
        for (src, dst) in g.data.chunks(po).zip(out.data.chunks_mut(pi)) {
            self.up_feat.apply_adjoint(src, dst);
        }
        out
    }

    fn backbone(&mut self, x: &Tensor, train: bool) -> (Tensor, Tensor) {
        let f1 = self.block1.forward(x, train);
        let f2 = self.block2.forward(&f1, train);
        let f3 = self.block3.forward(&f2, train);
        (f1, f3)
    }

    fn seg_logits(&mut self, f1: &Tensor, f3: &Tensor, train: bool) -> Tensor {
        let fused = Tensor::cat_channels(&[f1, &self.upsample(f3)]);
        let h = self.seg1.forward(&fused, train);
        let h = self.seg2.forward(&h, train);
        self.seg_out.forward(&h, train)
    }

    fn to_masks(&self, logits: &Tensor) -> Vec<MaskStack> {
        (0..logits.n).map(|b| MaskStack::from_logits(logits.c, logits.h, logits.w, logits.sample(b))).collect()
    }

    /// Head output after the bounded tanh, still at feature resolution.
    fn residual_tanh(&mut self, f3_t: &Tensor, f3_t1: &Tensor, train: bool) -> Tensor {
        let x = Tensor::cat_channels(&[f3_t, f3_t1]);
        let h = self.res1.forward(&x, train);
        let h = self.res2.forward(&h, train);
        let mut raw = self.res_out.forward(&h, train);
        let lambda = self.shape.lambda;
        raw.data.iter_mut().for_each(|v| *v = bounded_tanh(*v, lambda));
        raw
    }

    /// Splits upsampled residual planes into per-direction stacks.
    fn to_residuals(&self, tanh: &Tensor) -> Vec<ResidualStack> {
        let c = self.shape.channels;
        let (mh, mw) = self.shape.mask_grid();
        let up = self.upsample(tanh);
        let per = c * 2 * mh * mw;
        let mut fwd = Vec::with_capacity(up.n);
        let mut bwd = Vec::with_capacity(up.n);
        for b in 0..up.n {
            let s = up.sample(b);
            fwd.push(ResidualStack { channels: c, height: mh, width: mw, bound: self.shape.lambda, data: s[..per].to_vec() });
            if self.shape.symmetric {
                bwd.push(ResidualStack { channels: c, height: mh, width: mw, bound: self.shape.lambda, data: s[per..].to_vec() });
            }
        }
        fwd.extend(bwd);
        fwd
    }

    fn zero_residuals(&self, pairs: usize) -> Vec<ResidualStack> {
        let (mh, mw) = self.shape.mask_grid();
        let dirs = if self.shape.symmetric { 2 } else { 1 };
        (0..pairs * dirs).map(|_| ResidualStack::zeros(self.shape.channels, mh, mw, self.shape.lambda)).collect()
    }

    /// Eval-mode masks for one frame.
    pub fn forward_masks(&mut self, frame: &Frame) -> Result<MaskStack> {
        let x = self.stack_frames(&[frame])?;
        let (f1, f3) = self.backbone(&x, false);
        let logits = self.seg_logits(&f1, &f3, false);
        Ok(self.to_masks(&logits).remove(0))
    }

    /// Eval-mode forward-direction residual flows for a frame pair.
    pub fn forward_residual(&mut self, frame_t: &Frame, frame_t1: &Frame) -> Result<ResidualStack> {
        let x = self.stack_frames(&[frame_t, frame_t1])?;
        if self.shape.lambda == 0.0 {
            self.check_frame(frame_t)?;
            return Ok(self.zero_residuals(1).remove(0));
        }
        let (_, f3) = self.backbone(&x, false);
        let tanh = self.residual_tanh(&f3.batch_slice(0, 1), &f3.batch_slice(1, 2), false);
        Ok(self.to_residuals(&tanh).remove(0))
    }

    /// Training-mode forward over frame pairs; caches what [`backward`](Self::backward) needs.
    pub fn forward_pairs(&mut self, pairs: &[(&Frame, &Frame)]) -> Result<PairForward> {
        let b = pairs.len();
        let mut frames: Vec<&Frame> = pairs.iter().map(|p| p.0).collect();
        frames.extend(pairs.iter().map(|p| p.1));
        let x = self.stack_frames(&frames)?;
        let (f1, f3) = self.backbone(&x, true);
        let seg_frames = if self.shape.symmetric { 2 * b } else { b };
        let logits = self.seg_logits(&f1.batch_slice(0, seg_frames), &f3.batch_slice(0, seg_frames), true);
        let masks = self.to_masks(&logits);
        let (residuals, res_tanh) = if self.shape.lambda > 0.0 {
            let t = self.residual_tanh(&f3.batch_slice(0, b), &f3.batch_slice(b, 2 * b), true);
            (self.to_residuals(&t), Some(t))
        } else {
            (self.zero_residuals(b), None)
        };
        self.cache = Some(ForwardCache { pairs: b, seg_frames, res_tanh });
        Ok(PairForward { masks, residuals })
    }

    /// Backprop gradients w.r.t. mask logits (one per mask in the forward) and
    /// w.r.t. residual values (one per residual stack), accumulating into parameter grads.
    pub fn backward(&mut self, grad_logits: &[Vec<f64>], grad_residuals: &[Vec<f64>]) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| RcfError::Value("backward called without a training forward".into()))?;
        let b = cache.pairs;
        let c = self.shape.channels;
        let (mh, mw) = self.shape.mask_grid();
        let (fh, fw) = self.shape.feature_grid();
        ensure_shape!(grad_logits.len() == cache.seg_frames, "expected {} mask gradients", cache.seg_frames);

        let mut g_f1 = Tensor::zeros(2 * b, self.shape.stem_channels(), mh, mw);
        let mut g_f3 = Tensor::zeros(2 * b, self.shape.feature_channels, fh, fw);

        // segmentation head
        let g_logits = Tensor::from_vec(cache.seg_frames, c, mh, mw, grad_logits.concat());
        let g = self.seg_out.backward(&g_logits, true).unwrap();
        let g = self.seg2.backward(&g, true).unwrap();
        let g = self.seg1.backward(&g, true).unwrap();
        let parts = g.split_channels(&[self.shape.stem_channels(), self.shape.feature_channels]);
        let g_up = self.upsample_adjoint(&parts[1]);
        g_f1.data[..parts[0].data.len()].copy_from_slice(&parts[0].data);
        g_f3.data[..g_up.data.len()].iter_mut().zip(&g_up.data).for_each(|(a, v)| *a += v);

        // residual head
        if let Some(tanh) = cache.res_tanh {
            let dirs = if self.shape.symmetric { 2 } else { 1 };
            ensure_shape!(grad_residuals.len() == b * dirs, "expected {} residual gradients", b * dirs);
            let per = c * 2 * mh * mw;
            let mut g_up = Tensor::zeros(b, tanh.c, mh, mw);
            for (i, gr) in grad_residuals.iter().enumerate() {
                let (pair, dir) = (i % b, i / b);
                g_up.sample_mut(pair)[dir * per..(dir + 1) * per].copy_from_slice(gr);
            }
            let mut g_t = self.upsample_adjoint(&g_up);
            let lambda = self.shape.lambda;
            g_t.data.iter_mut().zip(&tanh.data).for_each(|(g, &t)| *g *= lambda * (1.0 - (t / lambda).powi(2)));
            let g = self.res_out.backward(&g_t, true).unwrap();
            let g = self.res2.backward(&g, true).unwrap();
            let g = self.res1.backward(&g, true).unwrap();
            let parts = g.split_channels(&[self.shape.feature_channels, self.shape.feature_channels]);
            let item = g_f3.item();
            for pair in 0..b {
                g_f3.data[pair * item..(pair + 1) * item].iter_mut().zip(parts[0].sample(pair)).for_each(|(a, v)| *a += v);
                g_f3.data[(b + pair) * item..(b + pair + 1) * item].iter_mut().zip(parts[1].sample(pair)).for_each(|(a, v)| *a += v);
            }
        }

        // backbone
        let g = self.block3.backward(&g_f3, true).unwrap();
        let mut g = self.block2.backward(&g, true).unwrap();
        g.add_assign(&g_f1);
        self.block1.backward(&g, false);
        self.clear_caches();
        Ok(())
    }

    fn clear_caches(&mut self) {
        for b in [&mut self.block1, &mut self.block2, &mut self.block3, &mut self.seg1, &mut self.seg2, &mut self.res1, &mut self.res2] {
            b.clear_cache();
        }
        self.seg_out.clear_cache();
        self.res_out.clear_cache();
    }

    /// Visits every trainable parameter and its gradient in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        let blocks: [(&str, &mut ConvBlock); 7] = [
            ("block1", &mut self.block1),
            ("block2", &mut self.block2),
            ("block3", &mut self.block3),
            ("seg1", &mut self.seg1),
            ("seg2", &mut self.seg2),
            ("res1", &mut self.res1),
            ("res2", &mut self.res2),
        ];
        for (name, b) in blocks {
            f(&format!("{name}.conv.weight"), &mut b.conv.weight.value, &mut b.conv.weight.grad);
            f(&format!("{name}.conv.bias"), &mut b.conv.bias.value, &mut b.conv.bias.grad);
            f(&format!("{name}.bn.gamma"), &mut b.bn.gamma.value, &mut b.bn.gamma.grad);
            f(&format!("{name}.bn.beta"), &mut b.bn.beta.value, &mut b.bn.beta.grad);
        }
        for (name, conv) in [("seg_out", &mut self.seg_out), ("res_out", &mut self.res_out)] {
            f(&format!("{name}.weight"), &mut conv.weight.value, &mut conv.weight.grad);
            f(&format!("{name}.bias"), &mut conv.bias.value, &mut conv.bias.grad);
        }
        for (name, mlp, g) in [("phi1", &mut self.phi1, &mut self.phi1_grad), ("phi2", &mut self.phi2, &mut self.phi2_grad)] {
            f(&format!("{name}.w1"), &mut mlp.w1, &mut g.w1);
            f(&format!("{name}.b1"), &mut mlp.b1, &mut g.b1);
            f(&format!("{name}.w2"), &mut mlp.w2, &mut g.w2);
            f(&format!("{name}.b2"), &mut mlp.b2, &mut g.b2);
        }
    }

    /// Visits batch-norm running statistics.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, b) in [
            ("block1", &mut self.block1),
            ("block2", &mut self.block2),
            ("block3", &mut self.block3),
            ("seg1", &mut self.seg1),
            ("seg2", &mut self.seg2),
            ("res1", &mut self.res1),
            ("res2", &mut self.res2),
        ] {
            f(&format!("{name}.bn.running_mean"), &mut b.bn.running_mean);
            f(&format!("{name}.bn.running_var"), &mut b.bn.running_var);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(0.0));
    }

    pub fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, v, _| out.extend_from_slice(v));
        out
    }

    pub fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, _, g| out.extend_from_slice(g));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut off = 0;
        let mut ok = true;
        self.visit_params(&mut |_, v, _| {
            if off + v.len() <= flat.len() {
                v.copy_from_slice(&flat[off..off + v.len()]);
            } else {
                ok = false;
            }
            off += v.len();
        });
        ensure_shape!(ok && off == flat.len(), "parameter vector has {} values, model needs {off}", flat.len());
        Ok(())
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v, _| n += v.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
        Frame::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn shape(c: usize, lambda: f64) -> ModelShape {
        ModelShape::from_config(&TrainConfig { channels: c, lambda, ..Default::default() }, 16, 16)
    }

    #[test]
    fn masks_are_a_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = SegModel::new(shape(4, 10.0), 3).unwrap();
        for v in m.seg_out.weight.value.iter_mut() {
            *v *= 50.0;
        }
        let masks = m.forward_masks(&frame(&mut rng, 16, 16)).unwrap();
        masks.validate().unwrap();
    }

    #[test]
    fn zero_seg_head_gives_uniform_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SegModel::new(shape(4, 10.0), 3).unwrap();
        m.seg_out.weight.value.fill(0.0);
        let masks = m.forward_masks(&frame(&mut rng, 16, 16)).unwrap();
        assert!(masks.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = frame(&mut rng, 16, 16);
        let mut m = SegModel::new(shape(3, 10.0), 3).unwrap();
        assert_eq!(m.forward_masks(&f).unwrap(), m.forward_masks(&f).unwrap());
    }

    #[test]
    fn residual_is_strictly_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (frame(&mut rng, 16, 16), frame(&mut rng, 16, 16));
        let mut m = SegModel::new(shape(4, 10.0), 3).unwrap();
        for v in m.res_out.weight.value.iter_mut() {
            *v *= 1e4;
        }
        let r = m.forward_residual(&a, &b).unwrap();
        assert!(r.data.iter().all(|v| v.abs() < 10.0));
        assert!(r.data.iter().any(|v| v.abs() > 9.0));
    }

    #[test]
    fn zero_output_layer_gives_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (frame(&mut rng, 16, 16), frame(&mut rng, 16, 16));
        let mut m = SegModel::new(shape(4, 10.0), 3).unwrap();
        m.res_out.weight.value.fill(0.0);
        assert!(m.forward_residual(&a, &b).unwrap().data.iter().all(|&v| v == 0.0));
        let mut m = SegModel::new(shape(4, 0.0), 3).unwrap();
        assert!(m.forward_residual(&a, &b).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_frame_size_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = SegModel::new(shape(4, 10.0), 3).unwrap();
        assert!(matches!(m.forward_masks(&frame(&mut rng, 8, 16)), Err(RcfError::Shape(_))));
    }

    #[test]
    fn input_must_be_multiple_of_four() {
        let s = ModelShape::from_config(&TrainConfig::default(), 18, 16);
        assert!(SegModel::new(s, 0).is_err());
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut m = SegModel::new(shape(4, 10.0), 3).unwrap();
        let mut p = m.flat_params();
        p[0] += 1.0;
        m.set_flat_params(&p).unwrap();
        assert_eq!(m.flat_params(), p);
        assert!(m.set_flat_params(&p[1..]).is_err());
    }
}
