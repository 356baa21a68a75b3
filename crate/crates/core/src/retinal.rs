//! Foveated resampling about a fixation point.
//!
//! Every output pixel is expressed in polar coordinates about the fixation; its
//! radius is pushed through an exponential radial map that is the identity at
//! the fovea and at the frame boundary, oversampling near the fixation and
//! undersampling the periphery. The angle is preserved.

use serde::{Deserialize, Serialize};

use crate::autodiff::{SamplingGrid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Pixel offset of a fixation from the image center (`dx` along columns,
/// `dy` along rows).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FixationPoint {
    pub dx: f64,
    pub dy: f64,
}

impl FixationPoint {
    pub const CENTER: FixationPoint = FixationPoint { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    /// The five evaluation fixations: center, then the four diagonal offsets
    /// `(±d, ±d)`.
    pub fn five_point(d: f64) -> [FixationPoint; 5] {
        [
            Self::new(0.0, 0.0),
            Self::new(d, d),
            Self::new(d, -d),
            Self::new(-d, d),
            Self::new(-d, -d),
        ]
    }

    pub fn check_range(&self, max_dx: f64, max_dy: f64) -> Result<()> {
        if !self.dx.is_finite() || !self.dy.is_finite() || self.dx.abs() > max_dx || self.dy.abs() > max_dy {
            return Err(Error::Range(format!(
                "fixation ({}, {}) outside (±{}, ±{})",
                self.dx, self.dy, max_dx, max_dy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetinalWarpConfig {
    /// Foveation strength `k`.
    pub strength: f64,
    pub max_offset_x: f64,
    pub max_offset_y: f64,
}

impl RetinalWarpConfig {
    pub const DEFAULT_STRENGTH: f64 = 2.5;

    /// Default geometry for a square image of side `side`: offsets up to `side/4`.
    pub fn for_side(side: usize) -> Self {
        let m = (side / 4) as f64;
        Self { strength: Self::DEFAULT_STRENGTH, max_offset_x: m, max_offset_y: m }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0) || !self.strength.is_finite() {
            return Err(Error::config(format!("foveation strength must be positive, got {}", self.strength)));
        }
        if self.max_offset_x < 0.0 || self.max_offset_y < 0.0 {
            return Err(Error::config("fixation offsets must be non-negative"));
        }
        Ok(())
    }
}

/// Source radius for an output radius: `R·(exp(k·r/R) − 1)/(exp(k) − 1)`.
pub fn radial_warp(r_out: f64, r_norm: f64, strength: f64) -> Result<f64> {
    if !(strength > 0.0) {
        return Err(Error::config(format!("foveation strength must be positive, got {strength}")));
    }
    if !(r_norm > 0.0) {
        return Err(Error::config(format!("normalization radius must be positive, got {r_norm}")));
    }
    Ok(r_norm * (strength * r_out / r_norm).exp_m1() / strength.exp_m1())
}

/// Continuous pixel position of a fixation: image center plus offset.
pub fn fixation_pixel(height: usize, width: usize, fix: FixationPoint) -> (f64, f64) {
    ((height as f64 - 1.0) / 2.0 + fix.dy, (width as f64 - 1.0) / 2.0 + fix.dx)
}

pub fn build_retinal_grid(
    height: usize,
    width: usize,
    fix: FixationPoint,
    cfg: &RetinalWarpConfig,
) -> Result<SamplingGrid> {
    cfg.validate()?;
    if height < 2 || width < 2 {
        return Err(Error::shape(format!("retinal output must be at least 2x2, got {height}x{width}")));
    }
    fix.check_range(cfg.max_offset_x, cfg.max_offset_y)?;
    let (fr, fc) = fixation_pixel(height, width, fix);
    let (hm, wm) = ((height - 1) as f64, (width - 1) as f64);
    let r_norm = [(0.0, 0.0), (0.0, wm), (hm, 0.0), (hm, wm)]
        .iter()
        .map(|&(r, c)| (r - fr).hypot(c - fc))
        .fold(0.0, f64::max);
    let denom = cfg.strength.exp_m1();
    let k = cfg.strength;
    Ok(SamplingGrid::from_fn(height, width, |i, j| {
        let (u, v) = (i as f64 - fr, j as f64 - fc);
        let r = u.hypot(v);
        if r == 0.0 {
            return (fr, fc);
        }
        let scale = r_norm * (k * r / r_norm).exp_m1() / denom / r;
        (fr + u * scale, fc + v * scale)
    }))
}

/// Foveated resampling of an NCHW image; output has the input's spatial size.
pub fn retinal_resample<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    fix: FixationPoint,
    cfg: &RetinalWarpConfig,
) -> Result<Var> {
    let (_, _, h, w) = tape.value(image).dims4()?;
    let grid = build_retinal_grid(h, w, fix, cfg)?;
    tape.grid_sample(image, &grid)
}
