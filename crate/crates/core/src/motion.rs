//! Stage-1 flow reconstruction: mask-guided pooling, piecewise-constant
//! broadcast, bounded residual aggregation and the L1 motion loss.
//!
//! Every forward op has a matching backward that accumulates into caller-owned
//! gradient buffers. Reductions run in a fixed order, so results are
//! bit-reproducible.

use rand::Rng;

use crate::datagen::{FlowField, Mask};
use crate::error::{ensure_shape, RcfError, Result};

pub const POOL_EPS: f64 = 1e-12;

/// `C` soft masks on an `H x W` grid, channel-major. Each pixel is a point on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaskStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == channels * height * width,
            "mask stack {channels}x{height}x{width} needs {} values, got {}",
            channels * height * width,
            data.len()
        );
        let stack = Self { channels, height, width, data };
        stack.validate()?;
        Ok(stack)
    }

    /// Builds a stack by softmax over channel logits (`C x H x W`).
    pub fn from_logits(channels: usize, height: usize, width: usize, logits: &[f64]) -> Self {
        let n = height * width;
        let mut data = vec![0.0; channels * n];
        for p in 0..n {
            let max = (0..channels).map(|c| logits[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..channels {
                let e = (logits[c * n + p] - max).exp();
                data[c * n + p] = e;
                z += e;
            }
            for c in 0..channels {
                data[c * n + p] /= z;
            }
        }
        Self { channels, height, width, data }
    }

    pub fn uniform(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![1.0 / channels as f64; channels * height * width] }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        for p in 0..n {
            let mut s = 0.0;
            for c in 0..self.channels {
                let v = self.data[c * n + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(RcfError::Value(format!("mask value {v} outside [0, 1]")));
                }
                s += v;
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(RcfError::Value(format!("mask channels sum to {s} at pixel {p}")));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mask(&self, c: usize) -> Mask {
        Mask { height: self.height, width: self.width, data: self.channel(c).to_vec() }
    }
}

/// `bound * tanh(x)`, kept strictly inside the open interval even where tanh rounds to 1.
pub fn bounded_tanh(x: f64, bound: f64) -> f64 {
    let lim = bound * (1.0 - f64::EPSILON);
    (bound * x.tanh()).clamp(-lim, lim)
}

/// One pooled 2-vector per mask channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFlows(pub Vec<[f64; 2]>);

/// `C` per-pixel residual flows, layout `[c][u|v][p]`, each entry strictly inside `(-bound, bound)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bound: f64,
    pub data: Vec<f64>,
}

impl ResidualStack {
    /// Residuals from unbounded head outputs: `bound * tanh(raw)`.
    pub fn from_raw(channels: usize, height: usize, width: usize, bound: f64, raw: &[f64]) -> Self {
        Self { channels, height, width, bound, data: raw.iter().map(|&r| bounded_tanh(r, bound)).collect() }
    }

    pub fn new(channels: usize, height: usize, width: usize, bound: f64, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(data.len() == channels * 2 * height * width, "residual stack length {}", data.len());
        if bound > 0.0 {
            if let Some(v) = data.iter().find(|v| !(v.abs() < bound)) {
                return Err(RcfError::Value(format!("residual {v} not inside (-{bound}, {bound})")));
            }
        } else if data.iter().any(|&v| v != 0.0) {
            return Err(RcfError::Value("zero bound requires zero residuals".into()));
        }
        Ok(Self { channels, height, width, bound, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, bound: f64) -> Self {
        Self { channels, height, width, bound, data: vec![0.0; channels * 2 * height * width] }
    }

    fn component(&self, c: usize, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[(c * 2 + k) * n..(c * 2 + k + 1) * n]
    }
}

/// Two-layer per-vector MLP `2 -> hidden -> 2` with a ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMLP {
    pub hidden: usize,
    /// `hidden x 2`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `2 x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Parameter gradients of a [`VectorMLP`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrad {
    pub fn zeros(hidden: usize) -> Self {
        Self { w1: vec![0.0; hidden * 2], b1: vec![0.0; hidden], w2: vec![0.0; 2 * hidden], b2: vec![0.0; 2] }
    }
}

impl VectorMLP {
    pub const DEFAULT_HIDDEN: usize = 16;

    /// Exact identity: four hidden units pass `relu(x) - relu(-x)` per component.
    pub fn identity(hidden: usize) -> Self {
        Self::scaled_identity(hidden, 1.0)
    }

    pub fn scaled_identity(hidden: usize, scale: f64) -> Self {
        assert!(hidden >= 4, "identity MLP needs at least 4 hidden units");
        let mut m = Self { hidden, w1: vec![0.0; hidden * 2], b1: vec![0.0; hidden], w2: vec![0.0; 2 * hidden], b2: vec![0.0; 2] };
        for (j, (k, s)) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)].into_iter().enumerate() {
            m.w1[j * 2 + k] = s;
            m.w2[k * hidden + j] = s * scale;
        }
        m
    }

    /// Identity plus randomly initialized extra units whose output weights are scaled by 0.1.
    pub fn near_identity(hidden: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::identity(hidden);
        let a1 = (6.0f64 / 2.0).sqrt();
        let a2 = (6.0 / hidden as f64).sqrt();
        for j in 4..hidden {
            for k in 0..2 {
                m.w1[j * 2 + k] = rng.random_range(-a1..a1);
                m.w2[k * hidden + j] = 0.1 * rng.random_range(-a2..a2);
            }
            m.b1[j] = rng.random_range(-0.1..0.1);
        }
        m
    }

    /// Random parameters for tests.
    pub fn random(hidden: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::identity(hidden);
        for w in m.w1.iter_mut().chain(&mut m.w2).chain(&mut m.b1).chain(&mut m.b2) {
            *w = rng.random_range(-1.0..1.0);
        }
        m
    }

    pub fn pre_activation(&self, x: [f64; 2], j: usize) -> f64 {
        self.w1[j * 2] * x[0] + self.w1[j * 2 + 1] * x[1] + self.b1[j]
    }

    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        let mut y = [self.b2[0], self.b2[1]];
        for j in 0..self.hidden {
            let a = self.pre_activation(x, j).max(0.0);
            y[0] += self.w2[j] * a;
            y[1] += self.w2[self.hidden + j] * a;
        }
        y
    }

    /// Backprop through one application; returns the input gradient.
    pub fn backward(&self, x: [f64; 2], grad_y: [f64; 2], grad: &mut MlpGrad) -> [f64; 2] {
        grad.b2[0] += grad_y[0];
        grad.b2[1] += grad_y[1];
        let mut gx = [0.0; 2];
        for j in 0..self.hidden {
            let z = self.pre_activation(x, j);
            if z <= 0.0 {
                continue;
            }
            grad.w2[j] += grad_y[0] * z;
            grad.w2[self.hidden + j] += grad_y[1] * z;
            let gz = grad_y[0] * self.w2[j] + grad_y[1] * self.w2[self.hidden + j];
            grad.w1[j * 2] += gz * x[0];
            grad.w1[j * 2 + 1] += gz * x[1];
            grad.b1[j] += gz;
            gx[0] += gz * self.w1[j * 2];
            gx[1] += gz * self.w1[j * 2 + 1];
        }
        gx
    }

    pub fn apply_field(&self, f: &FlowField) -> FlowField {
        let (mut u, mut v) = (Vec::with_capacity(f.len()), Vec::with_capacity(f.len()));
        for p in 0..f.len() {
            let y = self.apply(f.at(p));
            u.push(y[0]);
            v.push(y[1]);
        }
        FlowField { height: f.height, width: f.width, u, v }
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let h = self.hidden;
        self.w1.copy_from_slice(&p[..2 * h]);
        self.b1.copy_from_slice(&p[2 * h..3 * h]);
        self.w2.copy_from_slice(&p[3 * h..5 * h]);
        self.b2.copy_from_slice(&p[5 * h..5 * h + 2]);
    }
}

impl MlpGrad {
    pub fn flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

fn check_mask_grid(f: &FlowField, m: &Mask) -> Result<()> {
    ensure_shape!(
        f.height == m.height && f.width == m.width && m.data.len() == f.len(),
        "flow is {}x{}, mask is {}x{}",
        f.height,
        f.width,
        m.height,
        m.width
    );
    Ok(())
}

fn check_stack_grid(f: &FlowField, m: &MaskStack) -> Result<()> {
    ensure_shape!(
        f.height == m.height && f.width == m.width,
        "flow is {}x{}, masks are {}x{}",
        f.height,
        f.width,
        m.height,
        m.width
    );
    Ok(())
}

fn pool_slices(u: &[f64], v: &[f64], m: &[f64]) -> [f64; 2] {
    let (mut su, mut sv, mut sm) = (0.0, 0.0, 0.0);
    for p in 0..m.len() {
        su += u[p] * m[p];
        sv += v[p] * m[p];
        sm += m[p];
    }
    [su / (sm + POOL_EPS), sv / (sm + POOL_EPS)]
}

/// Mask-weighted mean of a flow field.
pub fn guided_pool(f: &FlowField, m: &Mask) -> Result<[f64; 2]> {
    check_mask_grid(f, m)?;
    Ok(pool_slices(&f.u, &f.v, &m.data))
}

/// Gradients of [`guided_pool`] given the output gradient: `(d/dF, d/dM)`.
pub fn guided_pool_backward(f: &FlowField, m: &Mask, grad_out: [f64; 2]) -> Result<(FlowField, Vec<f64>)> {
    check_mask_grid(f, m)?;
    let pooled = pool_slices(&f.u, &f.v, &m.data);
    let denom = m.data.iter().sum::<f64>() + POOL_EPS;
    let mut gf = FlowField::zeros(f.height, f.width);
    let mut gm = vec![0.0; m.len()];
    for p in 0..m.len() {
        gf.u[p] = grad_out[0] * m.data[p] / denom;
        gf.v[p] = grad_out[1] * m.data[p] / denom;
        gm[p] = (grad_out[0] * (f.u[p] - pooled[0]) + grad_out[1] * (f.v[p] - pooled[1])) / denom;
    }
    Ok((gf, gm))
}

/// `P_c = phi2(pool(phi1(F), M_c))` for every channel.
pub fn pooled_flows(f: &FlowField, m: &MaskStack, phi1: &VectorMLP, phi2: &VectorMLP) -> Result<PooledFlows> {
    check_stack_grid(f, m)?;
    let g = phi1.apply_field(f);
    Ok(PooledFlows((0..m.channels).map(|c| phi2.apply(pool_slices(&g.u, &g.v, m.channel(c)))).collect()))
}

/// `P[p] = sum_c P_c * M_c[p]`.
pub fn broadcast(pooled: &PooledFlows, m: &MaskStack) -> Result<FlowField> {
    ensure_shape!(pooled.0.len() == m.channels, "{} pooled vectors for {} channels", pooled.0.len(), m.channels);
    let n = m.pixels();
    let mut out = FlowField::zeros(m.height, m.width);
    for (c, pc) in pooled.0.iter().enumerate() {
        let mc = m.channel(c);
        for p in 0..n {
            out.u[p] += pc[0] * mc[p];
            out.v[p] += pc[1] * mc[p];
        }
    }
    Ok(out)
}

/// `R[p] = sum_c R'_c[p] * M_c[p]`.
pub fn residual_compose(r: &ResidualStack, m: &MaskStack) -> Result<FlowField> {
    ensure_shape!(
        r.channels == m.channels && r.height == m.height && r.width == m.width,
        "residual stack {}x{}x{} vs masks {}x{}x{}",
        r.channels,
        r.height,
        r.width,
        m.channels,
        m.height,
        m.width
    );
    let n = m.pixels();
    let mut out = FlowField::zeros(m.height, m.width);
    for c in 0..m.channels {
        let (ru, rv, mc) = (r.component(c, 0), r.component(c, 1), m.channel(c));
        for p in 0..n {
            out.u[p] += ru[p] * mc[p];
            out.v[p] += rv[p] * mc[p];
        }
    }
    Ok(out)
}

pub fn reconstruct(piecewise: &FlowField, residual: &FlowField) -> Result<FlowField> {
    ensure_shape!(piecewise.same_grid(residual), "cannot add {}x{} and {}x{} flows", piecewise.height, piecewise.width, residual.height, residual.width);
    Ok(FlowField {
        height: piecewise.height,
        width: piecewise.width,
        u: piecewise.u.iter().zip(&residual.u).map(|(a, b)| a + b).collect(),
        v: piecewise.v.iter().zip(&residual.v).map(|(a, b)| a + b).collect(),
    })
}

/// Mean per-pixel L1 distance between two flows.
pub fn motion_loss(pred: &FlowField, target: &FlowField) -> Result<f64> {
    ensure_shape!(pred.same_grid(target), "flow grids differ: {}x{} vs {}x{}", pred.height, pred.width, target.height, target.width);
    let s: f64 = (0..pred.len()).map(|p| (pred.u[p] - target.u[p]).abs() + (pred.v[p] - target.v[p]).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Subgradient of [`motion_loss`] w.r.t. the prediction (0 at ties).
pub fn motion_loss_grad(pred: &FlowField, target: &FlowField) -> Result<FlowField> {
    ensure_shape!(pred.same_grid(target), "flow grids differ");
    let scale = 1.0 / pred.len() as f64;
    let sgn = |d: f64| if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 };
    Ok(FlowField {
        height: pred.height,
        width: pred.width,
        u: pred.u.iter().zip(&target.u).map(|(a, b)| sgn(a - b)).collect(),
        v: pred.v.iter().zip(&target.v).map(|(a, b)| sgn(a - b)).collect(),
    })
}

/// Forward record of the full flow-reconstruction objective for one frame pair.
#[derive(Debug, Clone)]
pub struct MotionForward {
    pub transformed: FlowField,
    pub pooled_raw: Vec<[f64; 2]>,
    pub pooled: PooledFlows,
    pub piecewise: FlowField,
    pub residual: FlowField,
    pub prediction: FlowField,
    pub loss: f64,
}

/// Gradients of the motion objective.
#[derive(Debug, Clone)]
pub struct MotionGrad {
    /// d loss / d mask values, `C x H x W`.
    pub masks: Vec<f64>,
    /// d loss / d residual values, `C x 2 x H x W`.
    pub residual: Vec<f64>,
    pub phi1: MlpGrad,
    pub phi2: MlpGrad,
}

/// Full stage-1 motion objective: `|| broadcast(pooled_flows(F, M)) + compose(R', M) - F ||_1`.
pub fn motion_forward(
    target: &FlowField,
    masks: &MaskStack,
    residual: &ResidualStack,
    phi1: &VectorMLP,
    phi2: &VectorMLP,
) -> Result<MotionForward> {
    check_stack_grid(target, masks)?;
    let transformed = phi1.apply_field(target);
    let pooled_raw: Vec<[f64; 2]> =
        (0..masks.channels).map(|c| pool_slices(&transformed.u, &transformed.v, masks.channel(c))).collect();
    let pooled = PooledFlows(pooled_raw.iter().map(|&q| phi2.apply(q)).collect());
    let piecewise = broadcast(&pooled, masks)?;
    let residual = residual_compose(residual, masks)?;
    let prediction = reconstruct(&piecewise, &residual)?;
    let loss = motion_loss(&prediction, target)?;
    Ok(MotionForward { transformed, pooled_raw, pooled, piecewise, residual, prediction, loss })
}

/// Backward pass of [`motion_forward`], scaled by `scale` (the upstream gradient of the loss).
pub fn motion_backward(
    fwd: &MotionForward,
    target: &FlowField,
    masks: &MaskStack,
    residual: &ResidualStack,
    phi1: &VectorMLP,
    phi2: &VectorMLP,
    scale: f64,
) -> Result<MotionGrad> {
    let n = masks.pixels();
    let channels = masks.channels;
    let mut gpred = motion_loss_grad(&fwd.prediction, target)?;
    gpred.u.iter_mut().chain(gpred.v.iter_mut()).for_each(|g| *g *= scale);

    let mut g_masks = vec![0.0; channels * n];
    let mut g_res = vec![0.0; channels * 2 * n];
    let mut phi1_grad = MlpGrad::zeros(phi1.hidden);
    let mut phi2_grad = MlpGrad::zeros(phi2.hidden);
    let mut g_transformed = FlowField::zeros(masks.height, masks.width);

    for c in 0..channels {
        let mc = masks.channel(c);
        let pc = fwd.pooled.0[c];
        let (ru, rv) = (residual.component(c, 0), residual.component(c, 1));
        let mut g_pc = [0.0; 2];
        for p in 0..n {
            let (gu, gv) = (gpred.u[p], gpred.v[p]);
            g_masks[c * n + p] += gu * (pc[0] + ru[p]) + gv * (pc[1] + rv[p]);
            g_pc[0] += gu * mc[p];
            g_pc[1] += gv * mc[p];
            g_res[(c * 2) * n + p] = gu * mc[p];
            g_res[(c * 2 + 1) * n + p] = gv * mc[p];
        }
        let q = fwd.pooled_raw[c];
        let g_q = phi2.backward(q, g_pc, &mut phi2_grad);
        let denom = mc.iter().sum::<f64>() + POOL_EPS;
        for p in 0..n {
            g_transformed.u[p] += g_q[0] * mc[p] / denom;
            g_transformed.v[p] += g_q[1] * mc[p] / denom;
            g_masks[c * n + p] +=
                (g_q[0] * (fwd.transformed.u[p] - q[0]) + g_q[1] * (fwd.transformed.v[p] - q[1])) / denom;
        }
    }
    for p in 0..n {
        phi1.backward(target.at(p), g_transformed.at(p), &mut phi1_grad);
    }
    Ok(MotionGrad { masks: g_masks, residual: g_res, phi1: phi1_grad, phi2: phi2_grad })
}

/// Chain a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward(masks: &MaskStack, grad_masks: &[f64]) -> Vec<f64> {
    let n = masks.pixels();
    let mut out = vec![0.0; grad_masks.len()];
    for p in 0..n {
        let dot: f64 = (0..masks.channels).map(|c| masks.data[c * n + p] * grad_masks[c * n + p]).sum();
        for c in 0..masks.channels {
            let i = c * n + p;
            out[i] = masks.data[i] * (grad_masks[i] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(h: usize, w: usize, vals: &[(f64, f64)]) -> FlowField {
        FlowField::new(h, w, vals.iter().map(|v| v.0).collect(), vals.iter().map(|v| v.1).collect()).unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> MaskStack {
        let logits: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        MaskStack::from_logits(c, h, w, &logits)
    }

    #[test]
    fn pool_of_constant_field() {
        let f = FlowField::constant(3, 3, [2.0, -1.0]);
        let m = Mask::new(3, 3, vec![0.1, 0.0, 0.9, 0.3, 0.2, 0.0, 1.0, 0.5, 0.0]).unwrap();
        let p = guided_pool(&f, &m).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-10 && (p[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn pool_diagonal_mask() {
        let f = field(2, 2, &[(1.0, 0.0), (3.0, 0.0), (5.0, 0.0), (7.0, 0.0)]);
        let m = Mask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // brute force: (1*1 + 7*1) / 2
        let p = guided_pool(&f, &m).unwrap();
        assert!((p[0] - 4.0).abs() < 1e-10 && p[1] == 0.0);
    }

    #[test]
    fn pool_of_empty_mask_is_zero() {
        let f = FlowField::constant(2, 2, [5.0, 5.0]);
        assert_eq!(guided_pool(&f, &Mask::filled(2, 2, 0.0)).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn pool_shape_mismatch() {
        let f = FlowField::zeros(2, 2);
        assert!(matches!(guided_pool(&f, &Mask::filled(3, 2, 1.0)), Err(RcfError::Shape(_))));
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = FlowField::new(3, 4, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect(), (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let m = Mask::new(3, 4, (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let go = [0.7, -1.3];
        let (gf, gm) = guided_pool_backward(&f, &m, go).unwrap();
        let obj = |f: &FlowField, m: &Mask| {
            let p = guided_pool(f, m).unwrap();
            go[0] * p[0] + go[1] * p[1]
        };
        let h = 1e-6;
        for p in 0..12 {
            let mut mp = m.clone();
            mp.data[p] += h;
            let mut mm = m.clone();
            mm.data[p] -= h;
            assert!(((obj(&f, &mp) - obj(&f, &mm)) / (2.0 * h) - gm[p]).abs() < 1e-7);
            let mut fp = f.clone();
            fp.u[p] += h;
            let mut fm = f.clone();
            fm.u[p] -= h;
            assert!(((obj(&fp, &m) - obj(&fm, &m)) / (2.0 * h) - gf.u[p]).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_mlps_reduce_to_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FlowField::new(4, 4, (0..16).map(|_| rng.random_range(-5.0..5.0)).collect(), (0..16).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let m = random_stack(&mut rng, 3, 4, 4);
        let id = VectorMLP::identity(16);
        let pooled = pooled_flows(&f, &m, &id, &id).unwrap();
        for c in 0..3 {
            let direct = guided_pool(&f, &m.channel_mask(c)).unwrap();
            assert!((pooled.0[c][0] - direct[0]).abs() < 1e-12 && (pooled.0[c][1] - direct[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_mlp_is_linear() {
        let f = FlowField::constant(2, 2, [1.0, 1.0]);
        let m = MaskStack::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let p = pooled_flows(&f, &m, &VectorMLP::scaled_identity(16, 2.0), &VectorMLP::identity(16)).unwrap();
        assert!((p.0[0][0] - 2.0).abs() < 1e-9 && (p.0[0][1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn broadcast_half_half() {
        let m = MaskStack::uniform(2, 3, 3);
        let out = broadcast(&PooledFlows(vec![[2.0, 0.0], [0.0, 2.0]]), &m).unwrap();
        assert!(out.u.iter().chain(&out.v).all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn broadcast_binary_masks_are_piecewise_constant() {
        let m = MaskStack::new(2, 1, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = broadcast(&PooledFlows(vec![[1.0, 2.0], [3.0, 4.0]]), &m).unwrap();
        assert_eq!(out.u, vec![1.0, 3.0, 1.0]);
        assert_eq!(out.v, vec![2.0, 4.0, 2.0]);
    }

    #[test]
    fn residual_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_stack(&mut rng, 4, 3, 3);
        let mut data = vec![0.0; 4 * 2 * 9];
        for c in 0..4 {
            data[c * 18..c * 18 + 9].fill(1.5);
            data[c * 18 + 9..c * 18 + 18].fill(-0.5);
        }
        let r = ResidualStack::new(4, 3, 3, 10.0, data).unwrap();
        let out = residual_compose(&r, &m).unwrap();
        assert!(out.u.iter().all(|&x| (x - 1.5).abs() < 1e-12));
        assert!(out.v.iter().all(|&x| (x + 0.5).abs() < 1e-12));
    }

    #[test]
    fn residual_one_hot_takes_owner() {
        let m = MaskStack::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = ResidualStack::new(2, 1, 2, 10.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = residual_compose(&r, &m).unwrap();
        assert_eq!(out.u, vec![1.0, 6.0]);
        assert_eq!(out.v, vec![3.0, 8.0]);
    }

    #[test]
    fn reconstruct_and_loss() {
        let a = field(1, 1, &[(1.0, 2.0)]);
        let z = FlowField::zeros(1, 1);
        assert_eq!(reconstruct(&a, &z).unwrap(), a);
        assert_eq!(reconstruct(&z, &a).unwrap(), a);
        assert_eq!(motion_loss(&a, &z).unwrap(), 3.0);
        assert_eq!(motion_loss(&z, &a).unwrap(), 3.0);
        assert_eq!(motion_loss(&a, &a).unwrap(), 0.0);
        assert!(matches!(motion_loss(&a, &FlowField::zeros(2, 1)), Err(RcfError::Shape(_))));
        assert!(matches!(reconstruct(&a, &FlowField::zeros(2, 1)), Err(RcfError::Shape(_))));
    }

    #[test]
    fn l1_subgradient_at_tie_is_zero() {
        let a = field(1, 2, &[(1.0, 2.0), (0.0, 0.0)]);
        let b = field(1, 2, &[(1.0, 1.0), (0.0, 1.0)]);
        let g = motion_loss_grad(&a, &b).unwrap();
        assert_eq!(g.u, vec![0.0, 0.0]);
        assert_eq!(g.v, vec![0.5, -0.5]);
    }

    #[test]
    fn residual_bound_rejected_when_violated() {
        assert!(ResidualStack::new(1, 1, 1, 1.0, vec![1.0, 0.0]).is_err());
        assert!(ResidualStack::new(1, 1, 1, 1.0, vec![0.999, -0.5]).is_ok());
    }
}
