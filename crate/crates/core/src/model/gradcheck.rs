use crate::error::{ensure_shape, Result};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Magnitudes below this are treated as this when forming relative errors.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// ||a - n|| / ||a + n||-style normwise error
    pub norm_rel_error: f64,
}

impl GradReport {
    pub fn from_pair(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let (mut dn, mut sn) = (0.0, 0.0);
        for (a, n) in analytic.iter().zip(&numeric) {
            let d = (a - n).abs();
            max_abs = max_abs.max(d);
            max_rel = max_rel.max(d / a.abs().max(n.abs()).max(GRAD_FLOOR));
            dn += d * d;
            sn += (a.abs() + n.abs()).powi(2);
        }
        let norm_rel_error = if sn == 0.0 { 0.0 } else { dn.sqrt() / sn.sqrt() };
        Self { analytic, numeric, max_rel_error: max_rel, max_abs_error: max_abs, norm_rel_error }
    }
}

/// Compares the gradient returned by `loss_fn` at `point` with central differences
/// on the listed coordinates (all of them when `coords` is `None`).
pub fn grad_check<F>(mut loss_fn: F, point: &[f64], coords: Option<&[usize]>) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = loss_fn(point)?;
    ensure_shape!(grad.len() == point.len(), "gradient has {} entries for {} parameters", grad.len(), point.len());
    let all: Vec<usize> = (0..point.len()).collect();
    let idx = coords.unwrap_or(&all);
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(idx.len());
    let mut analytic = Vec::with_capacity(idx.len());
    for &i in idx {
        ensure_shape!(i < point.len(), "coordinate {i} out of range");
        x[i] = point[i] + FD_STEP;
        let (up, _) = loss_fn(&x)?;
        x[i] = point[i] - FD_STEP;
        let (down, _) = loss_fn(&x)?;
        x[i] = point[i];
        numeric.push((up - down) / (2.0 * FD_STEP));
        analytic.push(grad[i]);
    }
    Ok(GradReport::from_pair(analytic, numeric))
}
