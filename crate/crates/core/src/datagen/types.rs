use crate::error::{ensure_shape, RcfError, Result};
use crate::resize::resize_plane;

/// An RGB frame with values in `[0, 1]`, stored pixel-interleaved in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RcfError::Value("frame must be at least 1x1".into()));
        }
        ensure_shape!(
            data.len() == height * width * 3,
            "frame {height}x{width} needs {} values, got {}",
            height * width * 3,
            data.len()
        );
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(RcfError::Value(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major copy (`3 x H x W`) for the network input.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn resized(&self, height: usize, width: usize) -> Frame {
        let planar = self.to_planar();
        let n_in = self.height * self.width;
        let n_out = height * width;
        let mut data = vec![0.0; n_out * 3];
        for c in 0..3 {
            let plane = resize_plane(&planar[c * n_in..(c + 1) * n_in], self.height, self.width, height, width);
            for (p, v) in plane.into_iter().enumerate() {
                data[p * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
        Frame { height, width, data }
    }
}

/// Dense per-pixel displacement in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            u.len() == height * width && v.len() == height * width,
            "flow {height}x{width} has component lengths {} and {}",
            u.len(),
            v.len()
        );
        let field = Self { height, width, u, v };
        field.check_finite()?;
        Ok(field)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, u: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn constant(height: usize, width: usize, uv: [f64; 2]) -> Self {
        let n = height * width;
        Self { height, width, u: vec![uv[0]; n], v: vec![uv[1]; n] }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, p: usize) -> [f64; 2] {
        [self.u[p], self.v[p]]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.u.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(RcfError::Value("flow field contains non-finite values".into()));
        }
        Ok(())
    }

    /// Resample to another grid. Displacements stay in source-pixel units.
    pub fn resized(&self, height: usize, width: usize) -> FlowField {
        FlowField {
            height,
            width,
            u: resize_plane(&self.u, self.height, self.width, height, width),
            v: resize_plane(&self.v, self.height, self.width, height, width),
        }
    }

    pub fn same_grid(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-cell feature vectors, `dim` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == height * width * dim,
            "feature map {height}x{width}x{dim} needs {} values, got {}",
            height * width * dim,
            data.len()
        );
        let map = Self { height, width, dim, data };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(RcfError::Value("feature map contains non-finite values".into()));
        }
        if self.dim > 0 {
            if let Some(i) = self.data.chunks(self.dim).position(|c| c.iter().all(|&x| x == 0.0)) {
                return Err(RcfError::Value(format!("feature cell {i} is the zero vector")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// A single-channel mask on a grid: soft values in `[0, 1]` or binary `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == height * width,
            "mask {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn resized(&self, height: usize, width: usize) -> Mask {
        Mask { height, width, data: resize_plane(&self.data, self.height, self.width, height, width) }
    }

    pub fn threshold(&self, t: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|v| 1.0 - v).collect() }
    }

    pub fn same_grid(&self, h: usize, w: usize) -> bool {
        self.height == h && self.width == w
    }
}
