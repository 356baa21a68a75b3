use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Continuous `(row, col)` source coordinates for every output pixel.
///
/// Grids are constants: gradients flow to the sampled image only.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    coords: Vec<(f64, f64)>,
}

impl SamplingGrid {
    pub fn new(height: usize, width: usize, coords: Vec<(f64, f64)>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::shape(format!(
                "grid {height}x{width} needs {} coordinates, got {}",
                height * width,
                coords.len()
            )));
        }
        if coords.iter().any(|(r, c)| !r.is_finite() || !c.is_finite()) {
            return Err(Error::NonFinite("sampling grid coordinates".into()));
        }
        Ok(Self { height, width, coords })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let coords = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, coords }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |i, j| (i as f64, j as f64))
    }

    /// Corner-aligned bilinear resize of the window `[top, top+h) × [left, left+w)`
    /// onto an `out_h × out_w` grid.
    pub fn resize_window(top: f64, left: f64, h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let sy = if out_h > 1 { (h as f64 - 1.0) / (out_h as f64 - 1.0) } else { 0.0 };
        let sx = if out_w > 1 { (w as f64 - 1.0) / (out_w as f64 - 1.0) } else { 0.0 };
        Self::from_fn(out_h, out_w, |i, j| (top + i as f64 * sy, left + j as f64 * sx))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        self.coords[i * self.width + j]
    }

    fn plan<T: Real>(&self, h: usize, w: usize) -> Vec<Tap<T>> {
        let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
        self.coords
            .iter()
            .map(|&(r, c)| {
                let r = r.clamp(0.0, hm);
                let c = c.clamp(0.0, wm);
                let (r0, c0) = (r.floor(), c.floor());
                let (fr, fc) = (r - r0, c - c0);
                let (r0, c0) = (r0 as usize, c0 as usize);
                let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
                Tap {
                    idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
                    wt: [
                        T::lit((1.0 - fr) * (1.0 - fc)),
                        T::lit((1.0 - fr) * fc),
                        T::lit(fr * (1.0 - fc)),
                        T::lit(fr * fc),
                    ],
                }
            })
            .collect()
    }
}

struct Tap<T> {
    idx: [usize; 4],
    wt: [T; 4],
}

/// Off-tape bilinear sampling with border clamping.
pub fn sample_bilinear<T: Real>(image: &Tensor<T>, grid: &SamplingGrid) -> Result<Tensor<T>> {
    let (_, _, h, w) = image.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot sample an empty image"));
    }
    gather(image, &grid.plan::<T>(h, w), grid.height, grid.width)
}

fn gather<T: Real>(image: &Tensor<T>, plan: &[Tap<T>], ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = image.dims4()?;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in image.data().chunks(h * w) {
        out.extend(plan.iter().map(|t| {
            plane[t.idx[0]] * t.wt[0] + plane[t.idx[1]] * t.wt[1] + plane[t.idx[2]] * t.wt[2] + plane[t.idx[3]] * t.wt[3]
        }));
    }
    Tensor::new(&[b, c, ho, wo], out)
}

impl<T: Real> Tape<T> {
    /// Bilinear gather of `image[B,C,H,W]` at the grid's coordinates, producing
    /// `[B,C,H',W']`. Out-of-range coordinates are clamped to the border.
    pub fn grid_sample(&mut self, image: Var, grid: &SamplingGrid) -> Result<Var> {
        let (b, c, h, w) = self.value(image).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("cannot sample an empty image"));
        }
        let plan = grid.plan::<T>(h, w);
        let out = gather(self.value(image), &plan, grid.height, grid.width)?;
        Ok(self.custom(
            out,
            &[image],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); b * c * h * w];
                let hw_out = plan.len();
                for (p, gplane) in g.data().chunks(hw_out).enumerate() {
                    let dplane = &mut d[p * h * w..(p + 1) * h * w];
                    for (t, &gv) in plan.iter().zip(gplane) {
                        for q in 0..4 {
                            dplane[t.idx[q]] = dplane[t.idx[q]] + gv * t.wt[q];
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], d).expect("grid_sample grad"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_is_exact() {
        let img = Tensor::<f32>::from_fn(&[1, 2, 5, 7], |i| (i as f32 * 0.37).sin());
        let out = sample_bilinear(&img, &SamplingGrid::identity(5, 7)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn far_outside_clamps_to_corner() {
        let img = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32 + 1.0);
        let grid = SamplingGrid::from_fn(3, 3, |_, _| (-5.0, -5.0));
        let out = sample_bilinear(&img, &grid).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_pixel_interior_sample() {
        let img = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SamplingGrid::from_fn(1, 1, |i, j| (i as f64 + 0.5, j as f64 + 0.5));
        let out = sample_bilinear(&img, &grid).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn rejects_nonfinite_coords() {
        assert!(SamplingGrid::new(1, 1, vec![(f64::NAN, 0.0)]).is_err());
    }
}
