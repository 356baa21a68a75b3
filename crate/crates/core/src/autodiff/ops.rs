use rand::Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Batch statistics produced by a training-mode batch norm, used by the caller
/// to update running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub enum NormMode<'a, T: Real> {
    /// Normalize with batch statistics.
    Train,
    /// Frozen running statistics `(mean, var)`.
    Eval(&'a [T], &'a [T]),
}

pub const BN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(v, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let v = av.zip_map(&bv, |x, y| x * y);
        Ok(self.custom(
            v,
            &[a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                    need[1].then(|| g.zip_map(&av, |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.value(a).map(|x| x * s);
        self.custom(v, &[a], Box::new(move |g, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(v, &[a], Box::new(move |g, _| vec![Some(Tensor::full(&shape, g[0]))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let v = av.map(|x| x.max(T::zero()));
        self.custom(
            v,
            &[a],
            Box::new(move |g, _| vec![Some(g.zip_map(&av, |g, x| if x > T::zero() { g } else { T::zero() }))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.custom(v, &[a], Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("same size"))])))
    }

    /// Elementwise mean over equally shaped tensors.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::shape("mean of zero tensors"))?;
        for &v in &vars[1..] {
            self.same_shape(first, v, "mean_of")?;
        }
        let inv = T::one() / T::from_usize_lossy(vars.len());
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            acc.add_assign(self.value(v));
        }
        acc.scale_in_place(inv);
        let n = vars.len();
        Ok(self.custom(acc, vars, Box::new(move |g, _| vec![Some(g.map(|x| x * inv)); n])))
    }

    /// Elementwise max over equally shaped tensors; ties go to the earliest.
    pub fn max_of(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::shape("max of zero tensors"))?;
        for &v in &vars[1..] {
            self.same_shape(first, v, "max_of")?;
        }
        let len = self.value(first).len();
        let mut out = self.value(first).clone();
        let mut arg = vec![0u16; len];
        for (k, &v) in vars.iter().enumerate().skip(1) {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                if x > out[i] {
                    out[i] = x;
                    arg[i] = k as u16;
                }
            }
        }
        let n = vars.len();
        Ok(self.custom(
            out,
            vars,
            Box::new(move |g, need| {
                (0..n)
                    .map(|k| {
                        need[k].then(|| {
                            Tensor::from_fn(g.shape(), |i| if arg[i] as usize == k { g[i] } else { T::zero() })
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of rank {}", base.len())));
        }
        let mut sizes = Vec::with_capacity(vars.len());
        for &v in vars {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape(format!("concat along {axis}: {:?} vs {:?}", s, base)));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &s) in vars.iter().zip(&sizes) {
                let chunk = s * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let in_shapes: Vec<Vec<usize>> = vars.iter().map(|&v| self.shape(v).to_vec()).collect();
        Ok(self.custom(
            out,
            vars,
            Box::new(move |g, need| {
                let mut offsets = Vec::with_capacity(sizes.len());
                let mut acc = 0;
                for &s in &sizes {
                    offsets.push(acc);
                    acc += s;
                }
                (0..sizes.len())
                    .map(|k| {
                        need[k].then(|| {
                            let chunk = sizes[k] * inner;
                            let mut d = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * total * inner + offsets[k] * inner;
                                d.extend_from_slice(&g.data()[start..start + chunk]);
                            }
                            Tensor::new(&in_shapes[k], d).expect("concat grad shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// `[groups·B, ...]` → `[B, ...]` by averaging over the leading groups.
    pub fn mean_groups(&mut self, a: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || groups == 0 || shape[0] % groups != 0 {
            return Err(Error::shape(format!("cannot split {:?} into {groups} groups", shape)));
        }
        let mut out_shape = shape.clone();
        out_shape[0] /= groups;
        let chunk: usize = out_shape.iter().product();
        let inv = T::one() / T::from_usize_lossy(groups);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); chunk];
        for gi in 0..groups {
            for (o, &x) in out.iter_mut().zip(&src[gi * chunk..(gi + 1) * chunk]) {
                *o = *o + x;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |g, _| {
                let scaled: Vec<T> = g.data().iter().map(|&x| x * inv).collect();
                let mut d = Vec::with_capacity(chunk * groups);
                for _ in 0..groups {
                    d.extend_from_slice(&scaled);
                }
                vec![Some(Tensor::new(&shape, d).expect("mean_groups grad"))]
            }),
        ))
    }

    /// `[B,C,H,W]` → `[B,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize_lossy(hw);
        let src = self.value(a).data();
        let out: Vec<T> = (0..b * c).map(|i| src[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(&[b, c], out)?;
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(b * c * hw);
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv * inv).take(hw));
                }
                vec![Some(Tensor::new(&[b, c, h, w], d).expect("gap grad"))]
            }),
        ))
    }

    /// Average pooling with window and stride `k`; trailing rows/cols that do
    /// not fill a window are dropped.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::shape("avg_pool2d window must be positive"));
        }
        if k == 1 {
            return Ok(a);
        }
        let (b, c, h, w) = self.value(a).dims4()?;
        let (ho, wo) = (h / k, w / k);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!("avg_pool2d window {k} larger than {h}x{w}")));
        }
        let inv = T::one() / T::from_usize_lossy(k * k);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..k {
                        let row = &plane[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                        s = s + row.iter().copied().sum::<T>();
                    }
                    out[p * ho * wo + oy * wo + ox] = s * inv;
                }
            }
        }
        let out = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut d = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gd[p * ho * wo + oy * wo + ox] * inv;
                            for dy in 0..k {
                                let base = p * h * w + (oy * k + dy) * w + ox * k;
                                for v in &mut d[base..base + k] {
                                    *v = gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], d).expect("avgpool grad"))]
            }),
        ))
    }

    /// `x[B,In] · wᵀ + b` with `w[Out,In]`, `b[Out]`.
    pub fn dense(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (bsz, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin || self.shape(bias) != [fout] {
            return Err(Error::shape(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(bias)
            )));
        }
        let (xv, wv) = (self.value_rc(x), self.value_rc(w));
        let mut out = vec![T::zero(); bsz * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(bsz, fin, fout, xv.data(), false, wv.data(), true, T::one(), &mut out);
        let out = Tensor::new(&[bsz, fout], out)?;
        Ok(self.custom(
            out,
            &[x, w, bias],
            Box::new(move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut d = vec![T::zero(); bsz * fin];
                    gemm(bsz, fout, fin, gd, false, wv.data(), false, T::zero(), &mut d);
                    Tensor::new(&[bsz, fin], d).expect("dense dx")
                });
                let dw = need[1].then(|| {
                    let mut d = vec![T::zero(); fout * fin];
                    gemm(fout, bsz, fin, gd, true, xv.data(), false, T::zero(), &mut d);
                    Tensor::new(&[fout, fin], d).expect("dense dw")
                });
                let db = need[2].then(|| {
                    let mut d = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::new(&[fout], d).expect("dense db")
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// Per-channel batch normalization of an NCHW tensor.
    ///
    /// Returns the batch statistics in training mode so the caller can update
    /// its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch_norm: {c} channels, gamma {:?}", self.shape(gamma))));
        }
        let hw = h * w;
        let n = b * hw;
        let eps = T::lit(BN_EPS);
        let xv = self.value_rc(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::shape("training batch norm needs more than one value per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s = s + xv.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / T::from_usize_lossy(n);
                    let mut q = T::zero();
                    for bi in 0..b {
                        for &v in &xv.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / T::from_usize_lossy(n);
                }
                let unbiased = var.iter().map(|&v| v * T::from_usize_lossy(n) / T::from_usize_lossy(n - 1)).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            NormMode::Eval(m, v) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm running statistics length mismatch"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); b * c * hw];
        let mut out = vec![T::zero(); b * c * hw];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        let training = stats.is_some();
        let v = self.custom(
            out,
            &[x, gamma, beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            sum_g[ch] = sum_g[ch] + gd[i];
                            sum_gx[ch] = sum_gx[ch] + gd[i] * xhat[i];
                        }
                    }
                }
                let dx = need[0].then(|| {
                    let mut d = vec![T::zero(); b * c * hw];
                    let nf = T::from_usize_lossy(n);
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            if training {
                                let mg = sum_g[ch] / nf;
                                let mgx = sum_gx[ch] / nf;
                                for i in off..off + hw {
                                    d[i] = k * (gd[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in off..off + hw {
                                    d[i] = k * gd[i];
                                }
                            }
                        }
                    }
                    Tensor::new(&[b, c, h, w], d).expect("bn dx")
                });
                let dgamma = need[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("bn dgamma"));
                let dbeta = need[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("bn dbeta"));
                vec![dx, dgamma, dbeta]
            }),
        );
        Ok((v, stats))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = Tensor::from_fn(self.shape(a), |i| self.value(a)[i] * mask[i]);
        Ok(self.custom(v, &[a], Box::new(move |g, _| vec![Some(Tensor::from_fn(g.shape(), |i| g[i] * mask[i]))])))
    }

    /// Crops a `h×w` window with top-left corner `(top, left)` from an NCHW tensor.
    pub fn crop(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (b, c, ih, iw) = self.value(a).dims4()?;
        if top + h > ih || left + w > iw {
            return Err(Error::Range(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {ih}x{iw} image"
            )));
        }
        if (top, left, h, w) == (0, 0, ih, iw) {
            return Ok(a);
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            for y in 0..h {
                let s = p * ih * iw + (top + y) * iw + left;
                out.extend_from_slice(&src[s..s + w]);
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); b * c * ih * iw];
                let gd = g.data();
                for p in 0..b * c {
                    for y in 0..h {
                        let s = p * ih * iw + (top + y) * iw + left;
                        d[s..s + w].copy_from_slice(&gd[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                vec![Some(Tensor::new(&[b, c, ih, iw], d).expect("crop grad"))]
            }),
        ))
    }
}

/// Row-wise softmax of a `[B,K]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2], vec![-1.5, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_of_two_logit_vectors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let m = tape.mean_of(&[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn dropout_rate_075_binomial_count() {
        // Binomial(1000, 0.75): mean 750, sd ≈ 13.7, so ±50 is beyond 3.6 sd.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1000]));
        let y = tape.dropout(x, 0.75, &mut rng).unwrap();
        let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((700..=800).contains(&zeros), "zeros {zeros}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn concat_mismatch_is_shape_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.concat(&[a, b], 1), Err(Error::Shape(_))));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[5, 3]);
    }

    #[test]
    fn eval_batch_norm_is_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 1, 2], |i| i as f64));
        let g = tape.constant(Tensor::new(&[2], vec![2.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![0.5, 0.0]).unwrap());
        let mean = [1.0, 0.0];
        let var = [4.0 - BN_EPS, 1.0 - BN_EPS];
        let (y, stats) = tape.batch_norm(x, g, b, NormMode::Eval(&mean, &var)).unwrap();
        assert!(stats.is_none());
        let out = tape.value(y).data();
        let expect = [2.0 * (0.0 - 1.0) / 2.0 + 0.5, 2.0 * 0.0 / 2.0 + 0.5, 2.0, 3.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 0.0, 0.0], 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0).abs() < 1e-12);
    }
}
