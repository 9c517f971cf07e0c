//! Frames, flows and feature maps: file ingestion plus seeded synthetic scenes
//! with analytic ground truth.

mod formats;
mod types;

pub use formats::*;
pub use types::*;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{RcfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Rigid,
    Articulated,
    Reflection,
    StaticObject,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Rigid, Scenario::Articulated, Scenario::Reflection, Scenario::StaticObject];
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Rigid => "rigid",
            Scenario::Articulated => "articulated",
            Scenario::Reflection => "reflection",
            Scenario::StaticObject => "static_object",
        })
    }
}

impl FromStr for Scenario {
    type Err = RcfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(Scenario::Rigid),
            "articulated" => Ok(Scenario::Articulated),
            "reflection" => Ok(Scenario::Reflection),
            "static_object" | "static" => Ok(Scenario::StaticObject),
            other => Err(RcfError::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceParams {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Object velocity (u, v) in pixels per frame.
    pub object_velocity: [f64; 2],
    pub background_velocity: [f64; 2],
    /// Relative velocity of the articulated limb against the body.
    pub delta: [f64; 2],
    pub delta_bound: f64,
    /// Mean semi-axis of the object ellipse in pixels.
    pub object_radius: f64,
    /// Std-dev of i.i.d. Gaussian noise added to the emitted flows (ground truth stays clean).
    pub flow_noise: f64,
    pub feature_stride: usize,
    pub feature_dim: usize,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            object_velocity: [5.0, 1.0],
            background_velocity: [-8.0, -3.0],
            delta: [8.0, 3.0],
            delta_bound: 8.0,
            object_radius: 9.0,
            flow_noise: 0.0,
            feature_stride: 4,
            feature_dim: 16,
        }
    }
}

impl SequenceParams {
    /// Applies one `key = value` override; vectors are written `u,v`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || RcfError::Config(format!("cannot parse synth.{key} = {value:?}"));
        let v = value.trim();
        let pair = || -> Result<[f64; 2]> {
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
        };
        match key {
            "height" => self.height = v.parse().map_err(|_| bad())?,
            "width" => self.width = v.parse().map_err(|_| bad())?,
            "frames" => self.frames = v.parse().map_err(|_| bad())?,
            "object_velocity" => self.object_velocity = pair()?,
            "background_velocity" => self.background_velocity = pair()?,
            "delta" => self.delta = pair()?,
            "delta_bound" => self.delta_bound = v.parse().map_err(|_| bad())?,
            "object_radius" => self.object_radius = v.parse().map_err(|_| bad())?,
            "flow_noise" => self.flow_noise = v.parse().map_err(|_| bad())?,
            "feature_stride" => self.feature_stride = v.parse().map_err(|_| bad())?,
            "feature_dim" => self.feature_dim = v.parse().map_err(|_| bad())?,
            other => return Err(RcfError::Config(format!("unknown synthesis key {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub scenario: Scenario,
    pub seed: u64,
    pub params: SequenceParams,
    pub frames: Vec<Frame>,
    /// Flow from frame t to t+1, as an external estimator would deliver it.
    pub flows: Vec<FlowField>,
    /// Flow from frame t+1 back to t.
    pub backward_flows: Vec<FlowField>,
    pub gt_masks: Vec<Mask>,
    /// Reflection region per frame (all zero outside the reflection scenario).
    pub mirror_masks: Vec<Mask>,
    pub features: Vec<FeatureMap>,
}

/// Color blended into the background below the water line.
const WATER_TINT: [f64; 3] = [0.10, 0.25, 0.45];

/// A band-limited texture: a small sum of seeded sinusoids per color channel.
struct Texture {
    waves: Vec<[f64; 5]>,
    base: [f64; 3],
}

impl Texture {
    /// Frequencies are integer multiples of `2*pi/period`, so a texture with
    /// `period` equal to the grid size tiles without seams.
    fn new(rng: &mut ChaCha8Rng, base: [f64; 3], amplitude: f64, period: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let kx = rng.random_range(1..=4) as f64;
                let ky = rng.random_range(0..=4) as f64;
                let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let channel = rng.random_range(0..3) as f64;
                [
                    sx * kx * std::f64::consts::TAU / period,
                    ky * std::f64::consts::TAU / period,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    amplitude * rng.random_range(0.5..1.0),
                    channel,
                ]
            })
            .collect();
        Self { waves, base }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = w[3] * (w[0] * x + w[1] * y + w[2]).sin();
            // each wave drives one channel strongly and the others weakly
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += if k == w[4] as usize { s } else { 0.3 * s };
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Surface {
    Background,
    Body,
    Limb,
    Mirror,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

struct Scene {
    scenario: Scenario,
    params: SequenceParams,
    bg: Texture,
    body: Texture,
    limb: Texture,
    /// body center at t = 0
    c0: [f64; 2],
    axes: [f64; 2],
    limb_half: [f64; 2],
    water_line: f64,
}

impl Scene {
    fn body_center(&self, t: usize) -> [f64; 2] {
        let v = self.params.object_velocity;
        [self.c0[0] + v[0] * t as f64, self.c0[1] + v[1] * t as f64]
    }

    /// Limb offset relative to its rest position: alternates between 0 and delta,
    /// so the limb moves at v_o + delta on even steps and v_o - delta on odd ones.
    fn limb_offset(&self, t: usize) -> [f64; 2] {
        if t % 2 == 1 {
            self.params.delta
        } else {
            [0.0, 0.0]
        }
    }

    fn limb_center(&self, t: usize) -> [f64; 2] {
        let c = self.body_center(t);
        let o = self.limb_offset(t);
        [c[0] + o[0], c[1] + self.axes[1] + 0.5 * self.limb_half[1] + o[1]]
    }

    fn body_ellipse(&self, t: usize) -> Ellipse {
        let c = self.body_center(t);
        Ellipse { cx: c[0], cy: c[1], ax: self.axes[0], ay: self.axes[1] }
    }

    fn in_limb(&self, t: usize, x: f64, y: f64) -> bool {
        if self.scenario != Scenario::Articulated {
            return false;
        }
        let c = self.limb_center(t);
        (x - c[0]).abs() <= self.limb_half[0] && (y - c[1]).abs() <= self.limb_half[1]
    }

    fn surface(&self, t: usize, x: f64, y: f64) -> Surface {
        if self.in_limb(t, x, y) {
            return Surface::Limb;
        }
        if self.body_ellipse(t).contains(x, y) {
            return Surface::Body;
        }
        if self.scenario == Scenario::Reflection && y > self.water_line {
            let ym = 2.0 * self.water_line - y;
            if self.body_ellipse(t).contains(x, ym) {
                return Surface::Mirror;
            }
        }
        Surface::Background
    }

    fn color(&self, t: usize, x: f64, y: f64) -> [f64; 3] {
        let vb = self.params.background_velocity;
        let bg = |x: f64, y: f64| {
            let c = self.bg.sample(x - vb[0] * t as f64, y - vb[1] * t as f64);
            if self.scenario == Scenario::Reflection && y > self.water_line {
                [0, 1, 2].map(|k| 0.6 * c[k] + 0.4 * WATER_TINT[k])
            } else {
                c
            }
        };
        let c = self.body_center(t);
        match self.surface(t, x, y) {
            Surface::Background => bg(x, y),
            Surface::Body => self.body.sample(x - c[0], y - c[1]),
            Surface::Limb => {
                let l = self.limb_center(t);
                self.limb.sample(x - l[0], y - l[1])
            }
            Surface::Mirror => {
                let ym = 2.0 * self.water_line - y;
                let o = self.body.sample(x - c[0], ym - c[1]);
                let b = bg(x, y);
                [0, 1, 2].map(|k| 0.75 * o[k] + 0.25 * b[k])
            }
        }
    }

    /// Velocity of the surface visible at (x, y) in frame t, for the step t -> t+1.
    fn velocity(&self, t: usize, x: f64, y: f64) -> [f64; 2] {
        let vo = self.params.object_velocity;
        match self.surface(t, x, y) {
            Surface::Background => self.params.background_velocity,
            Surface::Body | Surface::Mirror => vo,
            Surface::Limb => {
                let (a, b) = (self.limb_offset(t), self.limb_offset(t + 1));
                [vo[0] + b[0] - a[0], vo[1] + b[1] - a[1]]
            }
        }
    }

    /// Velocity of the surface visible at (x, y) in frame t+1 for the step t -> t+1.
    fn velocity_at_next(&self, t: usize, x: f64, y: f64) -> [f64; 2] {
        let vo = self.params.object_velocity;
        match self.surface(t + 1, x, y) {
            Surface::Background => self.params.background_velocity,
            Surface::Body | Surface::Mirror => vo,
            Surface::Limb => {
                let (a, b) = (self.limb_offset(t), self.limb_offset(t + 1));
                [vo[0] + b[0] - a[0], vo[1] + b[1] - a[1]]
            }
        }
    }

    /// Horizontal and vertical extent (min, max) of all object-like surfaces over the sequence.
    fn extent_ok(&self) -> bool {
        let p = &self.params;
        let (w, h) = (p.width as f64, p.height as f64);
        (0..p.frames).all(|t| {
            let c = self.body_center(t);
            let mut lo = [c[0] - self.axes[0], c[1] - self.axes[1]];
            let mut hi = [c[0] + self.axes[0], c[1] + self.axes[1]];
            if self.scenario == Scenario::Articulated {
                let l = self.limb_center(t);
                lo[0] = lo[0].min(l[0] - self.limb_half[0]);
                hi[0] = hi[0].max(l[0] + self.limb_half[0]);
                hi[1] = hi[1].max(l[1] + self.limb_half[1]);
            }
            if self.scenario == Scenario::Reflection {
                if hi[1] >= self.water_line {
                    return false;
                }
                hi[1] = 2.0 * self.water_line - lo[1];
            }
            lo[0] >= 0.0 && lo[1] >= 0.0 && hi[0] <= w && hi[1] <= h
        })
    }
}

fn validate(params: &SequenceParams) -> Result<()> {
    if params.frames < 2 {
        return Err(RcfError::Config(format!("need at least 2 frames, got {}", params.frames)));
    }
    if params.height == 0 || params.width == 0 {
        return Err(RcfError::Config("grid must be nonempty".into()));
    }
    if params.feature_stride == 0 || params.feature_dim < 2 {
        return Err(RcfError::Config("feature stride must be >= 1 and dim >= 2".into()));
    }
    let d = params.delta[0].abs().max(params.delta[1].abs());
    if d > params.delta_bound {
        return Err(RcfError::Config(format!("|delta|_inf = {d} exceeds delta_bound {}", params.delta_bound)));
    }
    if !(params.flow_noise >= 0.0) {
        return Err(RcfError::Config("flow noise must be nonnegative".into()));
    }
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Gram-Schmidt `v` against `basis`, then normalize.
fn orthonormalize(mut v: Vec<f64>, basis: &[&[f64]]) -> Vec<f64> {
    for b in basis {
        let d: f64 = v.iter().zip(*b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(*b).for_each(|(x, y)| *x -= d * y);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Generates a deterministic synthetic sequence for `scenario`.
pub fn gen_sequence(scenario: Scenario, params: &SequenceParams, seed: u64) -> Result<SyntheticSequence> {
    validate(params)?;
    let mut params = params.clone();
    if scenario == Scenario::StaticObject {
        params.object_velocity = [0.0, 0.0];
        params.background_velocity = [0.0, 0.0];
    }
    if scenario != Scenario::Articulated {
        params.delta = [0.0, 0.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_C0FFEE);
    let (h, w) = (params.height, params.width);

    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3]| c.map(|v| v + rng.random_range(-0.05..0.05));
    let bg_base = jitter(&mut rng, [0.30, 0.45, 0.55]);
    let obj_base = jitter(&mut rng, [0.80, 0.45, 0.20]);
    let limb_base = jitter(&mut rng, [0.85, 0.75, 0.30]);
    let bg = Texture::new(&mut rng, bg_base, 0.06, w.max(h) as f64);
    let body = Texture::new(&mut rng, obj_base, 0.06, 16.0);
    let limb = Texture::new(&mut rng, limb_base, 0.06, 16.0);

    let r = params.object_radius;
    let axes = [r * rng.random_range(0.9..1.2), r * rng.random_range(0.75..0.95)];
    let limb_half = [r * 0.6, r * 0.7];
    let water_line = h as f64 / 2.0;

    let mut scene = Scene { scenario, params: params.clone(), bg, body, limb, c0: [0.0, 0.0], axes, limb_half, water_line };

    // sample a start position whose trajectory stays in the grid
    let v = params.object_velocity;
    let span = |c: usize| v[c] * (params.frames - 1) as f64;
    let mut placed = false;
    for _ in 0..64 {
        let x_lo = axes[0] - span(0).min(0.0) + 1.0;
        let x_hi = w as f64 - axes[0] - span(0).max(0.0) - 1.0;
        let y_lo = axes[1] - span(1).min(0.0) + 1.0;
        let y_hi = match scenario {
            Scenario::Reflection => water_line - axes[1] - span(1).max(0.0) - 1.0,
            Scenario::Articulated => h as f64 - axes[1] - 2.0 * limb_half[1] - span(1).max(0.0) - 1.0,
            _ => h as f64 - axes[1] - span(1).max(0.0) - 1.0,
        };
        if x_hi < x_lo || y_hi < y_lo {
            break;
        }
        scene.c0 = [rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi)];
        if scene.extent_ok() {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(RcfError::Config(format!(
            "object of radius {r} moving at {v:?} for {} frames does not fit a {h}x{w} grid",
            params.frames
        )));
    }

    let centers = |i: usize| i as f64 + 0.5;
    let n = h * w;
    let mut frames = Vec::with_capacity(params.frames);
    let mut gt_masks = Vec::with_capacity(params.frames);
    let mut mirror_masks = Vec::with_capacity(params.frames);
    let mut surfaces_per_frame = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let mut data = Vec::with_capacity(n * 3);
        let mut gt = vec![0.0; n];
        let mut mirror = vec![0.0; n];
        let mut surfaces = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (centers(x), centers(y));
                let s = scene.surface(t, fx, fy);
                data.extend_from_slice(&scene.color(t, fx, fy));
                let p = y * w + x;
                match s {
                    Surface::Body | Surface::Limb => gt[p] = 1.0,
                    Surface::Mirror => mirror[p] = 1.0,
                    Surface::Background => {}
                }
                surfaces.push(s);
            }
        }
        frames.push(Frame::new(h, w, data)?);
        gt_masks.push(Mask::new(h, w, gt)?);
        mirror_masks.push(Mask::new(h, w, mirror)?);
        surfaces_per_frame.push(surfaces);
    }

    let noise = Normal::new(0.0, params.flow_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut flows = Vec::with_capacity(params.frames - 1);
    let mut backward_flows = Vec::with_capacity(params.frames - 1);
    for t in 0..params.frames - 1 {
        let mut fu = Vec::with_capacity(n);
        let mut fv = Vec::with_capacity(n);
        let mut bu = Vec::with_capacity(n);
        let mut bv = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (centers(x), centers(y));
                let f = scene.velocity(t, fx, fy);
                let b = scene.velocity_at_next(t, fx, fy);
                fu.push(f[0]);
                fv.push(f[1]);
                bu.push(-b[0]);
                bv.push(-b[1]);
            }
        }
        if params.flow_noise > 0.0 {
            for comp in [&mut fu, &mut fv, &mut bu, &mut bv] {
                comp.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
        }
        flows.push(FlowField::new(h, w, fu, fv)?);
        backward_flows.push(FlowField::new(h, w, bu, bv)?);
    }

    let features = gen_features(&params, &surfaces_per_frame, &mut rng)?;

    Ok(SyntheticSequence { scenario, seed, params, frames, flows, backward_flows, gt_masks, mirror_masks, features })
}

/// Per-cell features: background, object and reflection each get a base direction.
/// Object is orthogonal to background; the reflection sits at cosine ~0.9 to background.
fn gen_features(params: &SequenceParams, surfaces: &[Vec<Surface>], rng: &mut ChaCha8Rng) -> Result<Vec<FeatureMap>> {
    let dim = params.feature_dim;
    let stride = params.feature_stride;
    let fh = params.height.div_ceil(stride);
    let fw = params.width.div_ceil(stride);
    let e_bg = random_unit(rng, dim);
    let e_obj = orthonormalize(random_unit(rng, dim), &[&e_bg]);
    let e_perp = orthonormalize(random_unit(rng, dim), &[&e_bg, &e_obj]);
    let e_mirror: Vec<f64> = e_bg.iter().zip(&e_perp).map(|(b, p)| 0.9 * b + 0.436 * p).collect();
    let cell_noise = Normal::new(0.0, 0.04).unwrap();

    let mut maps = Vec::with_capacity(surfaces.len());
    for frame_surfaces in surfaces {
        let mut data = Vec::with_capacity(fh * fw * dim);
        for cy in 0..fh {
            for cx in 0..fw {
                // majority vote over the pixels the cell covers
                let mut counts = [0usize; 3];
                for y in cy * stride..((cy + 1) * stride).min(params.height) {
                    for x in cx * stride..((cx + 1) * stride).min(params.width) {
                        let k = match frame_surfaces[y * params.width + x] {
                            Surface::Background => 0,
                            Surface::Body | Surface::Limb => 1,
                            Surface::Mirror => 2,
                        };
                        counts[k] += 1;
                    }
                }
                let label = (0..3).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
                let base = match label {
                    0 => &e_bg,
                    1 => &e_obj,
                    _ => &e_mirror,
                };
                data.extend(base.iter().map(|&b| b + cell_noise.sample(rng)));
            }
        }
        maps.push(FeatureMap::new(fh, fw, dim, data)?);
    }
    Ok(maps)
}
