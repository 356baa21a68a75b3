use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 unpadded convolutions read the image as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, img: &[T], col: &mut [T]) {
        let hw = self.hw_out();
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], img: &mut [T]) {
        let hw = self.hw_out();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let prow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                prow[ix as usize] = prow[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation of `input[B,Cin,H,W]` with `weight[Cout,Cin,kh,kw]`.
    ///
    /// Output side is `(H + 2·padding − kh)/stride + 1`, rounded down.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin} ({:?} vs {:?})",
                self.shape(input),
                self.shape(weight)
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} does not fit {h}x{w} with padding {padding}"
            )));
        }
        let g = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, hw) = (g.k(), g.hw_out());
        let xv = self.value_rc(input);
        let wv = self.value_rc(weight);
        let mut out = vec![T::zero(); b * cout * hw];
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
        for bi in 0..b {
            let img = &xv.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
            let colm: &[T] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut col);
                &col
            };
            gemm(cout, k, hw, wv.data(), false, colm, false, T::zero(), &mut out[bi * cout * hw..(bi + 1) * cout * hw]);
        }
        let out = Tensor::new(&[b, cout, g.ho, g.wo], out)?;
        Ok(self.custom(
            out,
            &[input, weight],
            Box::new(move |grad, need| {
                let gd = grad.data();
                let mut dx = need[0].then(|| vec![T::zero(); b * cin * h * w]);
                let mut dw = need[1].then(|| vec![T::zero(); cout * k]);
                let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
                let mut dcol = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
                for bi in 0..b {
                    let gb = &gd[bi * cout * hw..(bi + 1) * cout * hw];
                    if let Some(dw) = dw.as_mut() {
                        let img = &xv.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
                        let colm: &[T] = if g.is_pointwise() {
                            img
                        } else {
                            g.im2col(img, &mut col);
                            &col
                        };
                        gemm(cout, hw, k, gb, false, colm, true, T::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dimg = &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w];
                        if g.is_pointwise() {
                            gemm(k, cout, hw, wv.data(), true, gb, false, T::zero(), dimg);
                        } else {
                            gemm(k, cout, hw, wv.data(), true, gb, false, T::zero(), &mut dcol);
                            g.col2im(&dcol, dimg);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[b, cin, h, w], d).expect("conv dx")),
                    dw.map(|d| Tensor::new(&[cout, cin, kh, kw], d).expect("conv dw")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 1, 3, 4], |i| i as f32 * 0.5));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn ones_kernel_center_sums_neighbourhood() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_output_size() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 15, 15]));
        let w = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 8, 8]);
    }
}
