//! Bilinear resampling with half-pixel centers (`align_corners = false`),
//! edge-clamped. The same weights drive both the forward map and its adjoint,
//! so resizing can sit inside a differentiated graph.

/// Precomputed 4-tap sampling weights from an `in_h x in_w` grid to `out_h x out_w`.
#[derive(Debug, Clone)]
pub struct Bilinear {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl Bilinear {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let ys = axis_taps(in_h, out_h);
        let xs = axis_taps(in_w, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * in_w + x1, (1.0 - fy) * fx),
                    (y1 * in_w + x0, fy * (1.0 - fx)),
                    (y1 * in_w + x1, fy * fx),
                ]);
            }
        }
        Self { in_h, in_w, out_h, out_w, taps }
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Resample one plane. `src.len()` must equal `in_len()`.
    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.in_len());
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| src[i] * w).sum())
            .collect()
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back onto the input plane.
    pub fn apply_adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        debug_assert_eq!(grad_out.len(), self.out_len());
        for (t, &g) in self.taps.iter().zip(grad_out) {
            for &(i, w) in t {
                grad_in[i] += g * w;
            }
        }
    }
}

/// One-shot plane resize.
pub fn resize_plane(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if in_h == out_h && in_w == out_w {
        return src.to_vec();
    }
    Bilinear::new(in_h, in_w, out_h, out_w).apply(src)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let src: Vec<f64> = (0..16).map(f64::from).collect();
        let out = resize_plane(&src, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constant_plane_is_preserved() {
        let out = resize_plane(&[0.3; 25], 5, 5, 13, 7);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        let b = Bilinear::new(3, 5, 7, 4);
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..28).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = b.apply(&x);
        let mut aty = vec![0.0; 15];
        b.apply_adjoint(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
