use super::ops::softmax_rows;
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Tape<T> {
    /// Row-wise softmax of `[B,K]` logits.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        let p = softmax_rows(self.value(logits).data(), k);
        let out = Tensor::new(&[b, k], p.clone())?;
        Ok(self.custom(
            out,
            &[logits],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); b * k];
                for r in 0..b {
                    let (pr, gr) = (&p[r * k..(r + 1) * k], &g.data()[r * k..(r + 1) * k]);
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..k {
                        d[r * k + i] = pr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(Tensor::new(&[b, k], d).expect("softmax grad"))]
            }),
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::shape(format!("{} targets for a batch of {b}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape(format!("target class {t} out of {k} classes")));
        }
        let mut dist = vec![T::zero(); b * k];
        for (r, &t) in targets.iter().enumerate() {
            dist[r * k + t] = T::one();
        }
        self.soft_cross_entropy(logits, Tensor::new(&[b, k], dist)?)
    }

    /// Cross-entropy against per-row target distributions `[B,K]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if k < 2 {
            return Err(Error::shape("cross-entropy needs at least two classes"));
        }
        if targets.shape() != [b, k] {
            return Err(Error::shape(format!("targets {:?} for logits {:?}", targets.shape(), [b, k])));
        }
        let x = self.value(logits).data();
        let mut loss = T::zero();
        let mut p = Vec::with_capacity(b * k);
        for r in 0..b {
            let row = &x[r * k..(r + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for i in 0..k {
                let t = targets[r * k + i];
                if t != T::zero() {
                    loss = loss - t * (row[i] - lse);
                }
                p.push((row[i] - lse).exp());
            }
        }
        let inv_b = T::one() / T::from_usize_lossy(b);
        let out = Tensor::scalar(loss * inv_b);
        Ok(self.custom(
            out,
            &[logits],
            Box::new(move |g, _| {
                let s = g[0] * inv_b;
                let d = (0..b * k).map(|i| (p[i] - targets[i]) * s).collect();
                vec![Some(Tensor::new(&[b, k], d).expect("ce grad"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 10]));
        let ce = tape.softmax_cross_entropy(l, &[3]).unwrap();
        assert!((tape.value(ce)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_target_gives_zero_loss() {
        let mut tape = Tape::<f32>::new();
        let mut logits = Tensor::zeros(&[1, 10]);
        logits[2] = 1000.0;
        let l = tape.constant(logits);
        let ce = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert!(tape.value(ce)[0].abs() < 1e-6);
        assert!(tape.value(ce)[0].is_finite());
    }

    #[test]
    fn target_out_of_range_rejected() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.softmax_cross_entropy(l, &[3]).is_err());
    }
}
