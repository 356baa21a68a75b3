//! Scale-space fragments centered on a fixation.
//!
//! Concentric square crops of increasing size are Gaussian-downsampled to the
//! side of the smallest crop: blur with `sigma = factor/2`, then average-pool
//! with window and stride `factor`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::retinal::FixationPoint;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// Ascending crop sides; the first is the fragment side.
    pub sizes: Vec<usize>,
    /// Largest admissible `|dx|`, `|dy|` in pixels.
    pub max_offset: usize,
}

impl ScaleSpec {
    /// `(S/8, S/4, S/2, 3S/4)` with offsets up to `S/8`; at `S = 320` this is
    /// `40/80/160/240` with `±40`.
    pub fn for_side(side: usize) -> Self {
        let t = side / 8;
        Self { sizes: vec![t, 2 * t, 4 * t, 6 * t], max_offset: t }
    }

    /// Two scales `15/30` with `±1` offsets, for 32×32 inputs.
    pub fn cifar() -> Self {
        Self { sizes: vec![15, 30], max_offset: 1 }
    }

    /// Preset by image side: the two-scale layout at 32, the four-scale
    /// `S/8` layout otherwise.
    pub fn preset(side: usize) -> Self {
        if side == 32 {
            Self::cifar()
        } else {
            Self::for_side(side)
        }
    }

    pub fn target(&self) -> usize {
        self.sizes[0]
    }

    pub fn factors(&self) -> Vec<usize> {
        self.sizes.iter().map(|s| s / self.sizes[0]).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.factors().iter().map(|&f| if f == 1 { 0.0 } else { f as f64 / 2.0 }).collect()
    }

    /// Checks ordering, divisibility and that every crop fits inside a
    /// `side × side` image for every admissible fixation.
    pub fn validate(&self, side: usize) -> Result<()> {
        let Some(&t) = self.sizes.first() else {
            return Err(Error::config("scale spec needs at least one size"));
        };
        if t == 0 {
            return Err(Error::config("scale sizes must be positive"));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("scale sizes must ascend strictly: {:?}", self.sizes)));
        }
        if let Some(s) = self.sizes.iter().find(|&&s| s % t != 0) {
            return Err(Error::config(format!("scale size {s} is not a multiple of {t}")));
        }
        let largest = *self.sizes.last().unwrap();
        let need = largest + 2 * self.max_offset;
        // Crops are placed at floor((side - s)/2) + offset, so odd slack gives one
        // extra pixel on the far side only.
        let low_slack = (side.saturating_sub(largest)) / 2;
        if need > side || low_slack < self.max_offset {
            return Err(Error::config(format!(
                "largest crop {largest} with offsets ±{} does not fit a {side}px image",
                self.max_offset
            )));
        }
        Ok(())
    }
}

/// Top-left corner of an `s×s` crop centered at the fixation.
pub fn crop_origin(height: usize, width: usize, s: usize, fix: FixationPoint) -> Result<(usize, usize)> {
    let top = ((height as i64 - s as i64).div_euclid(2)) + fix.dy.round() as i64;
    let left = ((width as i64 - s as i64).div_euclid(2)) + fix.dx.round() as i64;
    if top < 0 || left < 0 || top as usize + s > height || left as usize + s > width {
        return Err(Error::Range(format!(
            "{s}x{s} crop at fixation ({}, {}) leaves the {height}x{width} image",
            fix.dx, fix.dy
        )));
    }
    Ok((top as usize, left as usize))
}

/// Normalized 1-D Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// How the blur stage is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlurGradient {
    #[default]
    Exact,
    /// Exact forward, identity backward.
    Identity,
}

fn blur_axis<T: Real>(src: &[T], planes: usize, h: usize, w: usize, kernel: &[T], along_rows: bool) -> Vec<T> {
    let r = kernel.len() / 2;
    let mut out = vec![T::zero(); src.len()];
    if along_rows {
        let mut padded = vec![T::zero(); w + 2 * r];
        for (row, dst) in src.chunks(w).zip(out.chunks_mut(w)) {
            padded[..r].fill(row[0]);
            padded[r..r + w].copy_from_slice(row);
            padded[r + w..].fill(row[w - 1]);
            for (x, d) in dst.iter_mut().enumerate() {
                *d = kernel.iter().zip(&padded[x..x + kernel.len()]).fold(T::zero(), |a, (&k, &v)| a + k * v);
            }
        }
    } else {
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let drow = &mut dst[y * w..(y + 1) * w];
                for (t, &k) in kernel.iter().enumerate() {
                    let yy = (y + t).saturating_sub(r).min(h - 1);
                    for (d, &v) in drow.iter_mut().zip(&plane[yy * w..(yy + 1) * w]) {
                        *d = *d + k * v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur_axis`].
fn blur_axis_adjoint<T: Real>(g: &[T], planes: usize, h: usize, w: usize, kernel: &[T], along_rows: bool) -> Vec<T> {
    let r = kernel.len() / 2;
    let mut out = vec![T::zero(); g.len()];
    if along_rows {
        let mut padded = vec![T::zero(); w + 2 * r];
        for (grow, dst) in g.chunks(w).zip(out.chunks_mut(w)) {
            padded.fill(T::zero());
            for (x, &gv) in grow.iter().enumerate() {
                for (p, &k) in padded[x..x + kernel.len()].iter_mut().zip(kernel) {
                    *p = *p + k * gv;
                }
            }
            dst.copy_from_slice(&padded[r..r + w]);
            dst[0] = padded[..r].iter().fold(dst[0], |a, &v| a + v);
            dst[w - 1] = padded[r + w..].iter().fold(dst[w - 1], |a, &v| a + v);
        }
    } else {
        for p in 0..planes {
            let gp = &g[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let grow = &gp[y * w..(y + 1) * w];
                for (t, &k) in kernel.iter().enumerate() {
                    let yy = (y + t).saturating_sub(r).min(h - 1);
                    for (d, &v) in dst[yy * w..(yy + 1) * w].iter_mut().zip(grow) {
                        *d = *d + k * v;
                    }
                }
            }
        }
    }
    out
}

/// Off-tape separable Gaussian blur with edge replication.
pub fn blur_tensor<T: Real>(image: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (b, c, h, w) = image.dims4()?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    let tmp = blur_axis(image.data(), b * c, h, w, &k, true);
    Tensor::new(&[b, c, h, w], blur_axis(&tmp, b * c, h, w, &k, false))
}

/// Separable Gaussian blur with kernel radius `ceil(3σ)` and edge replication;
/// `sigma = 0` is the identity.
pub fn gaussian_blur<T: Real>(tape: &mut Tape<T>, image: Var, sigma: f64) -> Result<Var> {
    gaussian_blur_with(tape, image, sigma, BlurGradient::Exact)
}

pub fn gaussian_blur_with<T: Real>(tape: &mut Tape<T>, image: Var, sigma: f64, grad: BlurGradient) -> Result<Var> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("blur sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image);
    }
    let (b, c, h, w) = tape.value(image).dims4()?;
    let out = blur_tensor(tape.value(image), sigma)?;
    if grad == BlurGradient::Identity {
        return tape.straight_through(image, out);
    }
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    Ok(tape.custom(
        out,
        &[image],
        Box::new(move |g, _| {
            let t = blur_axis_adjoint(g.data(), b * c, h, w, &k, false);
            let d = blur_axis_adjoint(&t, b * c, h, w, &k, true);
            vec![Some(Tensor::new(&[b, c, h, w], d).expect("blur grad"))]
        }),
    ))
}

/// One fragment per scale, each `B×C×t×t`.
#[derive(Debug, Clone)]
pub struct FragmentSet {
    pub fragments: Vec<Var>,
    pub fixation: FixationPoint,
}

pub fn extract_fragments<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    fix: FixationPoint,
    spec: &ScaleSpec,
) -> Result<FragmentSet> {
    extract_fragments_with(tape, image, fix, spec, BlurGradient::Exact)
}

pub fn extract_fragments_with<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    fix: FixationPoint,
    spec: &ScaleSpec,
    grad: BlurGradient,
) -> Result<FragmentSet> {
    let (_, _, h, w) = tape.value(image).dims4()?;
    spec.validate(h.min(w))?;
    fix.check_range(spec.max_offset as f64, spec.max_offset as f64)?;
    let t = spec.target();
    let mut fragments = Vec::with_capacity(spec.sizes.len());
    for &s in &spec.sizes {
        let (top, left) = crop_origin(h, w, s, fix)?;
        let crop = tape.crop(image, top, left, s, s)?;
        let f = s / t;
        let frag = if f == 1 {
            crop
        } else {
            let blurred = gaussian_blur_with(tape, crop, f as f64 / 2.0, grad)?;
            tape.avg_pool2d(blurred, f)?
        };
        fragments.push(frag);
    }
    Ok(FragmentSet { fragments, fixation: fix })
}
