//! Brute-force reference implementations shared by the integration tests and
//! the acceptance runner. Written for clarity, not speed, and deliberately
//! structured differently from the library code.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcf::datagen::{FlowField, Frame, Mask};
use rcf::motion::{MaskStack, ResidualStack};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_flow(r: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> FlowField {
    let n = h * w;
    FlowField::new(h, w, (0..n).map(|_| r.random_range(-scale..scale)).collect(), (0..n).map(|_| r.random_range(-scale..scale)).collect())
        .unwrap()
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_frame(r: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    Frame::new(h, w, (0..h * w * 3).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_stack(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> MaskStack {
    let logits: Vec<f64> = (0..c * h * w).map(|_| r.random_range(-3.0..3.0)).collect();
    MaskStack::from_logits(c, h, w, &logits)
}

pub fn random_residuals(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize, bound: f64) -> ResidualStack {
    let raw: Vec<f64> = (0..c * 2 * h * w).map(|_| r.random_range(-2.0..2.0)).collect();
    ResidualStack::from_raw(c, h, w, bound, &raw)
}

/// Mask-weighted average, accumulated row by row over (y, x).
pub fn pool_oracle(f: &FlowField, m: &Mask) -> [f64; 2] {
    let (mut num_u, mut num_v, mut den) = (0.0, 0.0, 0.0);
    for y in 0..f.height {
        for x in 0..f.width {
            let i = y * f.width + x;
            num_u += m.data[i] * f.u[i];
            num_v += m.data[i] * f.v[i];
            den += m.data[i];
        }
    }
    [num_u / (den + 1e-12), num_v / (den + 1e-12)]
}

/// Per-pixel sum over channels of `vec_c * M_c`.
pub fn broadcast_oracle(pooled: &[[f64; 2]], m: &MaskStack) -> FlowField {
    let n = m.height * m.width;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for p in 0..n {
        let weights: Vec<f64> = (0..m.channels).map(|c| m.data[c * n + p]).collect();
        u.push(weights.iter().zip(pooled).map(|(w, q)| w * q[0]).sum());
        v.push(weights.iter().zip(pooled).map(|(w, q)| w * q[1]).sum());
    }
    FlowField::new(m.height, m.width, u, v).unwrap()
}

/// Per-pixel sum over channels of `R_c[p] * M_c[p]`, reading the `[c][u|v][p]` layout directly.
pub fn compose_oracle(r: &ResidualStack, m: &MaskStack) -> FlowField {
    let n = m.height * m.width;
    let mut out = FlowField::zeros(m.height, m.width);
    for p in 0..n {
        for c in 0..m.channels {
            out.u[p] += r.data[(2 * c) * n + p] * m.data[c * n + p];
            out.v[p] += r.data[(2 * c + 1) * n + p] * m.data[c * n + p];
        }
    }
    out
}

pub struct CrfOracleParams {
    pub w1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub w2: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub eps: f64,
}

/// Textbook two-label mean field with a Potts compatibility: each label's
/// energy is its unary plus the kernel mass currently assigned to the other
/// label; marginals are a softmax over the two label energies.
pub fn crf_oracle(mask: &Mask, frame: &Frame, p: &CrfOracleParams) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let n = h * w;
    let kernel = |i: usize, j: usize| -> f64 {
        if i == j {
            return 0.0;
        }
        let (yi, xi, yj, xj) = ((i / w) as f64, (i % w) as f64, (j / w) as f64, (j % w) as f64);
        let d_pos = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
        let a = frame.pixel(i / w, i % w);
        let b = frame.pixel(j / w, j % w);
        let d_col: f64 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum();
        p.w1 * (-d_pos / (2.0 * p.alpha * p.alpha) - d_col / (2.0 * p.beta * p.beta)).exp()
            + p.w2 * (-d_pos / (2.0 * p.gamma * p.gamma)).exp()
    };
    // q[i] = [P(bg), P(fg)]
    let init: Vec<[f64; 2]> = mask
        .data
        .iter()
        .map(|&v| {
            let f = v.clamp(p.eps, 1.0 - p.eps);
            [1.0 - f, f]
        })
        .collect();
    let unary: Vec<[f64; 2]> = init.iter().map(|q| [-q[0].ln(), -q[1].ln()]).collect();
    let mut q = init;
    for _ in 0..p.iterations {
        let mut next = vec![[0.0; 2]; n];
        for i in 0..n {
            let mut energy = unary[i];
            for j in 0..n {
                let k = kernel(i, j);
                energy[0] += k * q[j][1];
                energy[1] += k * q[j][0];
            }
            let lo = energy[0].min(energy[1]);
            let e0 = (-(energy[0] - lo)).exp();
            let e1 = (-(energy[1] - lo)).exp();
            next[i] = [e0 / (e0 + e1), e1 / (e0 + e1)];
        }
        q = next;
    }
    q.iter().map(|q| q[1]).collect()
}

/// Soft normalized cut written as explicit double sums over node pairs.
pub fn ncut_oracle(a: &[f64], n: usize, x: &[f64]) -> f64 {
    let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j];
            cut += x[i] * (1.0 - x[j]) * aij;
            assoc_a += x[i] * aij;
            assoc_b += (1.0 - x[i]) * aij;
        }
    }
    let f = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / (den + 1e-8) };
    f(cut, assoc_a) + f(cut, assoc_b)
}

/// Block-diagonal 0/1 affinity with every entry flipped with probability `noise`
/// (symmetrically, diagonal kept at 1).
pub fn noisy_blocks(r: &mut ChaCha8Rng, sizes: &[usize], noise: f64) -> (usize, Vec<f64>, Vec<usize>) {
    let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &s)| std::iter::repeat_n(k, s)).collect();
    let n = labels.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in i + 1..n {
            let mut v = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            if r.random_bool(noise) {
                v = 1.0 - v;
            }
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    (n, a, labels)
}

/// Binary IoU with the same conventions as the CLI metric, computed from counts.
pub fn iou_oracle(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x > 0.5 && **y > 0.5).count();
    let na = a.data.iter().filter(|x| **x > 0.5).count();
    let nb = b.data.iter().filter(|x| **x > 0.5).count();
    let union = na + nb - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
