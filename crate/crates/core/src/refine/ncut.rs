//! Appearance affinity and the soft normalized cut.

use crate::datagen::FeatureMap;
use crate::error::{ensure_shape, RcfError, Result};

/// Default cosine threshold for an affinity edge.
pub const AFFINITY_TAU: f64 = 0.2;
/// Added to both cut denominators.
pub const NCUT_EPS: f64 = 1e-8;
pub const NCUT_ITERATIONS: usize = 10;
pub const NCUT_STEP: f64 = 1.0;
/// Initial assignments are clamped to `[X_CLAMP, 1 - X_CLAMP]` before the logit.
pub const X_CLAMP: f64 = 1e-4;

/// Dense symmetric 0/1 matrix over feature-grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl AffinityMatrix {
    /// Validates a dense matrix: square, symmetric, entries in {0, 1}.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(data.len() == n * n, "affinity of size {n} needs {} entries, got {}", n * n, data.len());
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                if v != 0.0 && v != 1.0 {
                    return Err(RcfError::Value(format!("affinity entry ({i},{j}) = {v} is not binary")));
                }
                if v != data[j * n + i] {
                    return Err(RcfError::Value(format!("affinity is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

/// `A_ij = 1` iff the cosine similarity of cells i and j is at least `tau`.
pub fn affinity(features: &FeatureMap, tau: f64) -> Result<AffinityMatrix> {
    let n = features.cells();
    let mut unit = Vec::with_capacity(n * features.dim);
    for i in 0..n {
        let c = features.cell(i);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RcfError::Value(format!("feature cell {i} has zero or non-finite norm")));
        }
        unit.extend(c.iter().map(|v| v / norm));
    }
    let d = features.dim;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in i + 1..n {
            let cos: f64 = unit[i * d..(i + 1) * d].iter().zip(&unit[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            if cos >= tau {
                data[i * n + j] = 1.0;
                data[j * n + i] = 1.0;
            }
        }
    }
    Ok(AffinityMatrix { n, data })
}

/// Normalized cut of the soft partition `x` and its gradient w.r.t. `x`.
pub fn ncut_with_grad(a: &AffinityMatrix, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure_shape!(x.len() == a.n, "assignment has {} entries, affinity is {}x{}", x.len(), a.n, a.n);
    let ax = a.apply(x);
    let r: Vec<f64> = a.data.chunks(a.n).map(|row| row.iter().sum()).collect();
    let total: f64 = r.iter().sum();
    let assoc_in: f64 = ax.iter().sum();
    let x_ax: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
    // (1 - x)^T A x
    let cut = assoc_in - x_ax;
    let d1 = assoc_in + NCUT_EPS;
    let d2 = (total - assoc_in) + NCUT_EPS;
    let value = ratio(cut, d1) + ratio(cut, d2);
    // A symmetric: dCut/dx = r - 2Ax, dd1/dx = r, dd2/dx = -r
    let grad = (0..a.n)
        .map(|i| {
            let g_cut = r[i] - 2.0 * ax[i];
            g_cut / d1 + g_cut / d2 - cut * r[i] / (d1 * d1) + cut * r[i] / (d2 * d2)
        })
        .collect();
    Ok((value, grad))
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn ncut_value(a: &AffinityMatrix, x: &[f64]) -> Result<f64> {
    Ok(ncut_with_grad(a, x)?.0)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Minimizes NCut over `x = sigmoid(z)` with `k` Adam steps from `x0`.
pub fn ncut_refine(a: &AffinityMatrix, x0: &[f64], k: usize, step: f64) -> Result<Vec<f64>> {
    ensure_shape!(x0.len() == a.n, "assignment has {} entries, affinity is {}x{}", x0.len(), a.n, a.n);
    if let Some(v) = x0.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(RcfError::Value(format!("initial assignment {v} outside [0, 1]")));
    }
    let mut z: Vec<f64> = x0
        .iter()
        .map(|v| {
            let c = v.clamp(X_CLAMP, 1.0 - X_CLAMP);
            (c / (1.0 - c)).ln()
        })
        .collect();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; a.n];
    let mut v = vec![0.0; a.n];
    for t in 1..=k {
        let x: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
        let (_, gx) = ncut_with_grad(a, &x)?;
        let bc1 = 1.0 - f64::powi(b1, t as i32);
        let bc2 = 1.0 - f64::powi(b2, t as i32);
        for i in 0..a.n {
            let g = gx[i] * x[i] * (1.0 - x[i]);
            if !g.is_finite() {
                return Err(RcfError::Value(format!("non-finite NCut gradient at cell {i}, step {t}")));
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            z[i] -= step * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(z.into_iter().map(sigmoid).collect())
}
