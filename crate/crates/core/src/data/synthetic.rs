use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 10] =
    ["disk", "ring", "square", "frame", "triangle", "cross", "star", "crescent", "bars", "half-disk"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub side: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Largest shape-center offset from the image center, as a fraction of the side.
    #[serde(default = "default_shift")]
    pub max_shift: f64,
    /// Shape radius range, as fractions of the side.
    #[serde(default = "default_scale")]
    pub scale: (f64, f64),
    /// Amplitude of the background grating and of per-pixel noise.
    #[serde(default = "default_texture")]
    pub texture: (f64, f64),
}

fn default_shift() -> f64 {
    0.1
}
fn default_scale() -> (f64, f64) {
    (0.16, 0.28)
}
fn default_texture() -> (f64, f64) {
    (0.12, 0.04)
}

impl SyntheticSpec {
    pub fn new(side: usize, per_class: usize, seed: u64) -> Self {
        Self { side, per_class, seed, max_shift: default_shift(), scale: default_scale(), texture: default_texture() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.side % 8 != 0 {
            return Err(Error::config(format!("synthetic side must be a positive multiple of 8, got {}", self.side)));
        }
        let (lo, hi) = self.scale;
        if !(0.0 < lo && lo <= hi && hi < 0.5) || !(0.0..0.5).contains(&self.max_shift) {
            return Err(Error::config("synthetic scale/shift ranges out of bounds"));
        }
        Ok(())
    }
}

/// Approximate signed distance (negative inside) of a unit-size shape at
/// local coordinates `(x, y)`.
fn shape_sdf(class: usize, x: f64, y: f64) -> f64 {
    let len = x.hypot(y);
    let sd_box = |x: f64, y: f64, hx: f64, hy: f64| {
        let (dx, dy) = (x.abs() - hx, y.abs() - hy);
        dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
    };
    match class {
        0 => len - 1.0,
        1 => (len - 0.8).abs() - 0.2,
        2 => sd_box(x, y, 0.8, 0.8),
        3 => sd_box(x, y, 0.85, 0.85).abs() - 0.17,
        4 => {
            // equilateral triangle with circumradius 1
            let k = 3f64.sqrt();
            let (mut px, mut py) = (x.abs() - 0.866, y + 0.5);
            if px + k * py > 0.0 {
                (px, py) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
            }
            px -= px.clamp(-1.732, 0.0);
            -(px.hypot(py)) * py.signum()
        }
        5 => sd_box(x, y, 1.0, 0.28).min(sd_box(x, y, 0.28, 1.0)),
        6 => {
            let a = y.atan2(x);
            let lobe = (5.0 * a).cos() * 0.5 + 0.5;
            (len - (0.45 + 0.6 * lobe)) * 0.7
        }
        7 => (len - 1.0).max(-((x - 0.45).hypot(y) - 0.8)),
        8 => sd_box(x, y - 0.45, 1.0, 0.2).min(sd_box(x, y + 0.45, 1.0, 0.2)),
        _ => (len - 1.0).max(y),
    }
}

fn draw(class: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = spec.side;
    let sf = s as f64;
    let cx = sf / 2.0 + rng.random_range(-spec.max_shift..=spec.max_shift) * sf;
    let cy = sf / 2.0 + rng.random_range(-spec.max_shift..=spec.max_shift) * sf;
    let radius = rng.random_range(spec.scale.0..=spec.scale.1) * sf;
    let rot = rng.random_range(0.0..TAU);
    let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    // foreground differs from the background by at least 0.35 in mean intensity
    let bg_mean = bg.iter().sum::<f64>() / 3.0;
    let fg_mean = if bg_mean > 0.5 { rng.random_range(0.0..bg_mean - 0.35) } else { rng.random_range(bg_mean + 0.35..1.0) };
    let mut fg: [f64; 3] = [0.0; 3];
    for c in &mut fg {
        *c = (fg_mean + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
    }
    let freq = rng.random_range(1.5..5.0) * TAU / sf;
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..TAU);
    let (amp, noise) = spec.texture;
    let (cr, sr) = (rot.cos(), rot.sin());
    let mut out = vec![0f32; 3 * s * s];
    for i in 0..s {
        for j in 0..s {
            let (px, py) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
            let (lx, ly) = ((cr * px + sr * py) / radius, (-sr * px + cr * py) / radius);
            // antialiased coverage from the pixel-space signed distance
            let cover = (0.5 - shape_sdf(class, lx, ly) * radius).clamp(0.0, 1.0);
            let wave = amp * (freq * (j as f64 * theta.cos() + i as f64 * theta.sin()) + phase).sin();
            for c in 0..3 {
                let back = bg[c] + wave + noise * (rng.random::<f64>() * 2.0 - 1.0);
                let v = cover * fg[c] + (1.0 - cover) * back;
                out[c * s * s + i * s + j] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Class-balanced images in class-interleaved order. Train and test use
/// separate generator streams, so the splits never share a draw.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let k = SHAPE_CLASSES.len();
    let n = k * spec.per_class;
    let mut data = Vec::with_capacity(n * 3 * spec.side * spec.side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        data.extend(draw(class, spec, &mut rng));
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(&[n, 3, spec.side, spec.side], data)?,
        labels,
        SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        split,
    )
}
