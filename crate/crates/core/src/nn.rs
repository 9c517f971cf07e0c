//! Minimal layers with hand-written backward passes: 2-D convolution via
//! im2col + GEMM, batch normalization and ReLU, all in `f64`.

use rand::Rng;

/// Dense `N x C x H x W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        &self.data[b * self.item()..(b + 1) * self.item()]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let s = self.item();
        &mut self.data[b * s..(b + 1) * s]
    }

    /// Samples `range` along the batch axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Tensor {
        let s = self.item();
        Tensor::from_vec(end - start, self.c, self.h, self.w, self.data[start * s..end * s].to_vec())
    }

    /// Concatenates along the batch axis.
    pub fn cat_batch(parts: &[&Tensor]) -> Tensor {
        let (c, h, w) = (parts[0].c, parts[0].h, parts[0].w);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert!(p.c == c && p.h == h && p.w == w, "cat_batch shape mismatch");
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(parts: &[&Tensor]) -> Tensor {
        let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                assert!(p.n == n && p.h == h && p.w == w, "cat_channels shape mismatch");
                data.extend_from_slice(p.sample(b));
            }
        }
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Inverse of [`cat_channels`](Self::cat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        assert_eq!(sizes.iter().sum::<usize>(), self.c);
        let plane = self.plane();
        let mut outs: Vec<Tensor> = sizes.iter().map(|&c| Tensor::zeros(self.n, c, self.h, self.w)).collect();
        for b in 0..self.n {
            let src = self.sample(b);
            let mut off = 0;
            for (o, &c) in outs.iter_mut().zip(sizes) {
                o.sample_mut(b).copy_from_slice(&src[off..off + c * plane]);
                off += c * plane;
            }
        }
        outs
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Trainable parameter with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    // row-major strides, swapped for transposed operands
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    cols: Vec<Vec<f64>>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    /// He-uniform weights scaled by `gain`, zero bias. Padding keeps `same` size at stride 1.
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..out_c * in_c * k * k).map(|_| gain * rng.random_range(-bound..bound)).collect();
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_c]),
            cols: Vec::new(),
            in_shape: (0, 0, 0),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.k;
        let mut cols = vec![0.0; self.in_c * k * k * oh * ow];
        let mut row = 0;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let k = self.k;
        let mut row = 0;
        for ci in 0..self.in_c {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn forward(&mut self, x: &Tensor, keep: bool) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let kk = self.in_c * self.k * self.k;
        let p = oh * ow;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        self.cols.clear();
        self.in_shape = (x.n, x.h, x.w);
        for b in 0..x.n {
            let cols = if self.is_pointwise() { x.sample(b).to_vec() } else { self.im2col(x.sample(b), x.h, x.w) };
            let o = out.sample_mut(b);
            for (co, row) in o.chunks_mut(p).enumerate() {
                row.fill(self.bias.value[co]);
            }
            gemm(self.out_c, kk, p, &self.weight.value, false, &cols, false, 1.0, o);
            if keep {
                self.cols.push(cols);
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input` is set.
    pub fn backward(&mut self, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        let (n, h, w) = self.in_shape;
        assert_eq!(self.cols.len(), n, "conv backward without cached forward");
        let kk = self.in_c * self.k * self.k;
        let p = grad.plane();
        let mut gin = need_input.then(|| Tensor::zeros(n, self.in_c, h, w));
        let mut gcols = vec![0.0; kk * p];
        for b in 0..n {
            let g = grad.sample(b);
            for (co, row) in g.chunks(p).enumerate() {
                self.bias.grad[co] += row.iter().sum::<f64>();
            }
            gemm(self.out_c, p, kk, g, false, &self.cols[b], true, 1.0, &mut self.weight.grad);
            if let Some(gin) = gin.as_mut() {
                gemm(kk, self.out_c, p, &self.weight.value, true, g, false, 0.0, &mut gcols);
                if self.is_pointwise() {
                    gin.sample_mut(b).copy_from_slice(&gcols);
                } else {
                    self.col2im(&gcols, h, w, gin.sample_mut(b));
                }
            }
        }
        gin
    }

    pub fn clear_cache(&mut self) {
        self.cols.clear();
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub c: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: (usize, usize),
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: Param::new(vec![1.0; c]),
            beta: Param::new(vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: (0, 0),
        }
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        let mut out = x.clone();
        if !train {
            for b in 0..x.n {
                for ch in 0..self.c {
                    let s = self.gamma.value[ch] / (self.running_var[ch] + BN_EPS).sqrt();
                    let off = (b * self.c + ch) * plane;
                    for v in &mut out.data[off..off + plane] {
                        *v = (*v - self.running_mean[ch]) * s + self.beta.value[ch];
                    }
                }
            }
            return out;
        }
        self.inv_std = vec![0.0; self.c];
        self.xhat = vec![0.0; x.data.len()];
        self.shape = (x.n, plane);
        for ch in 0..self.c {
            let mut mean = 0.0;
            for b in 0..x.n {
                let off = (b * self.c + ch) * plane;
                mean += x.data[off..off + plane].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for b in 0..x.n {
                let off = (b * self.c + ch) * plane;
                var += x.data[off..off + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            var /= count;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            self.inv_std[ch] = inv;
            for b in 0..x.n {
                let off = (b * self.c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x.data[i] - mean) * inv;
                    self.xhat[i] = xh;
                    out.data[i] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean;
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased;
        }
        out
    }

    /// Backward for a training-mode forward.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, plane) = self.shape;
        assert_eq!(grad.data.len(), self.xhat.len(), "batch norm backward without cached forward");
        let count = (n * plane) as f64;
        let mut gin = Tensor::zeros(grad.n, grad.c, grad.h, grad.w);
        for ch in 0..self.c {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                let off = (b * self.c + ch) * plane;
                for i in off..off + plane {
                    sg += grad.data[i];
                    sgx += grad.data[i] * self.xhat[i];
                }
            }
            self.gamma.grad[ch] += sgx;
            self.beta.grad[ch] += sg;
            let k = self.gamma.value[ch] * self.inv_std[ch] / count;
            for b in 0..n {
                let off = (b * self.c + ch) * plane;
                for i in off..off + plane {
                    gin.data[i] = k * (count * grad.data[i] - sg - self.xhat[i] * sgx);
                }
            }
        }
        gin
    }

    pub fn clear_cache(&mut self) {
        self.xhat = Vec::new();
    }
}

/// Conv -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu_mask: Vec<bool>,
}

impl ConvBlock {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self { conv: Conv2d::new(in_c, out_c, 3, stride, 1.0, rng), bn: BatchNorm2d::new(out_c), relu_mask: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.conv.forward(x, train);
        let mut y = self.bn.forward(&y, train);
        if train {
            self.relu_mask = y.data.iter().map(|&v| v > 0.0).collect();
        }
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn backward(&mut self, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        let mut g = grad.clone();
        g.data.iter_mut().zip(&self.relu_mask).for_each(|(v, &m)| {
            if !m {
                *v = 0.0
            }
        });
        let g = self.bn.backward(&g);
        self.conv.backward(&g, need_input)
    }

    pub fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.relu_mask = Vec::new();
    }
}
