//! Exact two-label dense CRF with mean-field inference.

use crate::datagen::{Frame, Mask};
use crate::error::{ensure_shape, RcfError, Result};

/// Unary probabilities are clamped to `[CRF_EPS, 1 - CRF_EPS]` before taking logs.
pub const CRF_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// Weight of the position + color kernel.
    pub w_app_kernel: f64,
    /// Spatial bandwidth of the appearance kernel, in grid cells.
    pub theta_alpha: f64,
    /// Color bandwidth of the appearance kernel (colors in `[0, 1]`).
    pub theta_beta: f64,
    pub w_smooth: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { w_app_kernel: 4.0, theta_alpha: 20.0, theta_beta: 0.2, w_smooth: 2.0, theta_gamma: 3.0, iterations: 5 }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_app_kernel >= 0.0
            && self.w_smooth >= 0.0
            && self.w_app_kernel.is_finite()
            && self.w_smooth.is_finite()
            && [self.theta_alpha, self.theta_beta, self.theta_gamma].iter().all(|t| *t > 0.0 && t.is_finite())
            && self.iterations >= 1;
        if ok {
            Ok(())
        } else {
            Err(RcfError::Config(format!("invalid CRF parameters {self:?}")))
        }
    }

    pub fn without_pairwise(&self) -> Self {
        Self { w_app_kernel: 0.0, w_smooth: 0.0, ..self.clone() }
    }

    /// Flat `key = value` view, same keys as [`set`](Self::set).
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("w_app_kernel", self.w_app_kernel.to_string()),
            ("theta_alpha", self.theta_alpha.to_string()),
            ("theta_beta", self.theta_beta.to_string()),
            ("w_smooth", self.w_smooth.to_string()),
            ("theta_gamma", self.theta_gamma.to_string()),
            ("iterations", self.iterations.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || RcfError::Config(format!("cannot parse crf.{key} = {value:?}"));
        let v = value.trim();
        match key {
            "w_app_kernel" => self.w_app_kernel = v.parse().map_err(|_| bad())?,
            "theta_alpha" => self.theta_alpha = v.parse().map_err(|_| bad())?,
            "theta_beta" => self.theta_beta = v.parse().map_err(|_| bad())?,
            "w_smooth" => self.w_smooth = v.parse().map_err(|_| bad())?,
            "theta_gamma" => self.theta_gamma = v.parse().map_err(|_| bad())?,
            "iterations" => self.iterations = v.parse().map_err(|_| bad())?,
            other => return Err(RcfError::Config(format!("unknown CRF key {other:?}"))),
        }
        Ok(())
    }
}

/// Dense symmetric pairwise kernel with a zero diagonal, stored as its strict
/// upper triangle row by row, plus its row sums.
struct DenseKernel {
    n: usize,
    upper: Vec<f64>,
    row_sum: Vec<f64>,
}

impl DenseKernel {
    fn new(frame: &Frame, p: &CrfParams) -> Self {
        let (h, w) = (frame.height, frame.width);
        let n = h * w;
        // spatial factors depend only on the offset, so tabulate them once
        let (a2, b2, g2) = (2.0 * p.theta_alpha.powi(2), 2.0 * p.theta_beta.powi(2), 2.0 * p.theta_gamma.powi(2));
        let mut app = vec![0.0; h * w];
        let mut smooth = vec![0.0; h * w];
        for dy in 0..h {
            for dx in 0..w {
                let d = (dy * dy + dx * dx) as f64;
                app[dy * w + dx] = p.w_app_kernel * (-d / a2).exp();
                smooth[dy * w + dx] = p.w_smooth * (-d / g2).exp();
            }
        }
        let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        let mut row_sum = vec![0.0; n];
        for i in 0..n {
            let (yi, xi) = (i / w, i % w);
            let ci = &frame.data[i * 3..i * 3 + 3];
            for j in i + 1..n {
                let (yj, xj) = (j / w, j % w);
                let off = yi.abs_diff(yj) * w + xi.abs_diff(xj);
                let mut v = smooth[off];
                if p.w_app_kernel != 0.0 {
                    let cj = &frame.data[j * 3..j * 3 + 3];
                    let dc = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
                    v += app[off] * (-dc / b2).exp();
                }
                upper.push(v);
                row_sum[i] += v;
                row_sum[j] += v;
            }
        }
        Self { n, upper, row_sum }
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        let mut start = 0;
        for i in 0..n {
            let row = &self.upper[start..start + (n - i - 1)];
            start += row.len();
            let (qi, tail) = (q[i], &q[i + 1..]);
            let mut acc = 0.0;
            for ((k, qj), o) in row.iter().zip(tail).zip(&mut out[i + 1..]) {
                acc += k * qj;
                *o += k * qi;
            }
            out[i] += acc;
        }
        out
    }
}

fn check(mask: &Mask, frame: &Frame, params: &CrfParams) -> Result<()> {
    params.validate()?;
    ensure_shape!(
        mask.height == frame.height && mask.width == frame.width && mask.len() == frame.height * frame.width,
        "mask {}x{} and frame {}x{} must share a grid",
        mask.height,
        mask.width,
        frame.height,
        frame.width
    );
    if let Some(v) = mask.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(RcfError::Value(format!("mask value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Foreground marginals after each mean-field iteration.
pub fn crf_mean_field(mask: &Mask, frame: &Frame, params: &CrfParams) -> Result<Vec<Mask>> {
    check(mask, frame, params)?;
    let q0: Vec<f64> = mask.data.iter().map(|v| v.clamp(CRF_EPS, 1.0 - CRF_EPS)).collect();
    // unary difference U_fg - U_bg
    let du: Vec<f64> = q0.iter().map(|q| -q.ln() + (1.0 - q).ln()).collect();
    let kernel = DenseKernel::new(frame, params);
    let mut q = q0;
    let mut trace = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let m_fg = kernel.apply(&q);
        // E_fg - E_bg = du + (row_sum - m_fg) - m_fg
        q = (0..q.len())
            .map(|i| {
                let d = du[i] + kernel.row_sum[i] - 2.0 * m_fg[i];
                logistic(-d)
            })
            .collect();
        trace.push(Mask { height: mask.height, width: mask.width, data: q.clone() });
    }
    Ok(trace)
}

/// Refined foreground marginal of a single-channel soft mask.
pub fn crf_refine(mask: &Mask, frame: &Frame, params: &CrfParams) -> Result<Mask> {
    Ok(crf_mean_field(mask, frame, params)?.pop().expect("at least one iteration"))
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
