use rand::{Rng, RngCore};

use super::model::AttackModel;
use super::pgd::{check_input, finite_logits};
use super::{is_adversarial, Criterion, Distances};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::zoo::standard_normal;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConfig {
    pub iterations: usize,
    /// Initial orthogonal step, relative to the current distance.
    pub spherical_step: f64,
    /// Initial contraction toward the original, relative to the current distance.
    pub source_step: f64,
    /// Multiplicative adaptation factor.
    pub adapt: f64,
    /// Proposals per adaptation window.
    pub window: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self { iterations: 1000, spherical_step: 1e-2, source_step: 1e-1, adapt: 1.5, window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryResult<T: Real> {
    /// Closest adversarial found.
    pub adversarial: Tensor<T>,
    pub distances: Distances,
    pub iterations: usize,
    pub accepted: usize,
    /// Best L2 distance after each iteration.
    pub trace: Vec<f64>,
}

fn decide<T: Real, M: AttackModel<T> + ?Sized>(model: &M, x: &Tensor<T>, label: usize, c: Criterion) -> Result<bool> {
    let logits = finite_logits(model.logits(x)?)?;
    Ok(is_adversarial(logits.data(), label, c))
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Decision-based random walk along the adversarial boundary toward `x`,
/// starting at the adversarial `x_init`. Only criterion decisions are used.
pub fn boundary_attack<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    x_init: &Tensor<T>,
    label: usize,
    criterion: Criterion,
    cfg: &BoundaryConfig,
    rng: &mut dyn RngCore,
) -> Result<BoundaryResult<T>> {
    check_input(x, label, model.classes())?;
    if x_init.shape() != x.shape() {
        return Err(Error::shape("boundary start and original differ in shape"));
    }
    if !decide(model, x_init, label, criterion)? {
        return Err(Error::Precondition("boundary attack start is not adversarial".into()));
    }
    let orig: Vec<f64> = x.to_f64_vec();
    let mut cur: Vec<f64> = x_init.to_f64_vec();
    let to_tensor = |v: &[f64]| Tensor::from_fn(x.shape(), |i| T::lit(v[i]));
    let l2 = |v: &[f64]| v.iter().zip(&orig).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut best = to_tensor(&cur);
    let mut best_d = l2(&cur);
    let (mut sph, mut src) = (cfg.spherical_step, cfg.source_step);
    let (mut sph_hits, mut sph_tries, mut src_hits, mut src_tries) = (0usize, 0usize, 0usize, 0usize);
    let mut accepted = 0;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let dist = l2(&cur);
        if dist == 0.0 {
            trace.push(best_d);
            continue;
        }
        // orthogonal proposal on the sphere of radius `dist` around x
        let dir: Vec<f64> = cur.iter().zip(&orig).map(|(c, o)| (o - c) / dist).collect();
        let mut eta: Vec<f64> = (0..cur.len()).map(|_| standard_normal(rng)).collect();
        let along: f64 = eta.iter().zip(&dir).map(|(e, d)| e * d).sum();
        for (e, d) in eta.iter_mut().zip(&dir) {
            *e -= along * d;
        }
        let en = eta.iter().map(|e| e * e).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let mut sphere: Vec<f64> = cur.iter().zip(&eta).map(|(c, e)| c + sph * dist * e / en).collect();
        let sd = l2(&sphere);
        for (s, o) in sphere.iter_mut().zip(&orig) {
            *s = clip01(o + (*s - o) * dist / sd);
        }
        sph_tries += 1;
        let sphere_t = to_tensor(&sphere);
        if decide(model, &sphere_t, label, criterion)? {
            sph_hits += 1;
            let cand: Vec<f64> = sphere.iter().zip(&orig).map(|(s, o)| clip01(s + src * (o - s))).collect();
            src_tries += 1;
            let cand_t = to_tensor(&cand);
            if decide(model, &cand_t, label, criterion)? {
                src_hits += 1;
                accepted += 1;
                cur = cand;
                let d = l2(&cur);
                if d < best_d {
                    best_d = d;
                    best = cand_t;
                }
            }
        }
        if sph_tries == cfg.window {
            sph = if sph_hits * 2 > sph_tries { sph * cfg.adapt } else { sph / cfg.adapt };
            (sph_hits, sph_tries) = (0, 0);
        }
        if src_tries == cfg.window {
            src = if src_hits * 2 > src_tries { src * cfg.adapt } else { src / cfg.adapt };
            src = src.min(0.9);
            (src_hits, src_tries) = (0, 0);
        }
        trace.push(best_d);
    }
    Ok(BoundaryResult {
        distances: Distances::between(&best, x),
        adversarial: best,
        iterations: cfg.iterations,
        accepted,
        trace,
    })
}

/// Adversarial starting point from uniform noise: the first of up to 100
/// noise images satisfying the criterion, pulled toward `x` by bisection on
/// the blend factor. `None` when no draw is adversarial.
pub(super) fn noise_start<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    criterion: Criterion,
    rng: &mut dyn RngCore,
) -> Result<Option<Tensor<T>>> {
    for _ in 0..100 {
        let noise = Tensor::from_fn(x.shape(), |_| T::lit(rng.random::<f64>()));
        if !decide(model, &noise, label, criterion)? {
            continue;
        }
        let blend = |a: f64| x.zip_map(&noise, |o, n| o + (n - o) * T::lit(a));
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..12 {
            let mid = (lo + hi) / 2.0;
            if decide(model, &blend(mid), label, criterion)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        return Ok(Some(blend(hi)));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::LinearModel;
    use super::*;

    fn model() -> LinearModel<f64> {
        // class 1 wins iff x0 + x1 > 1
        let w = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        LinearModel::new(w, Tensor::new(&[2], vec![0.0, -1.0]).unwrap()).unwrap()
    }

    fn img(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn approaches_the_decision_boundary() {
        let (m, x) = (model(), img(&[0.3, 0.3]));
        let start = img(&[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BoundaryConfig { iterations: 300, ..Default::default() };
        let r = boundary_attack(&m, &x, &start, 0, Criterion::Misclassify(1), &cfg, &mut rng).unwrap();
        // closest adversarial is at distance 0.4/√2 ≈ 0.283
        let exact = 0.4 / 2f64.sqrt();
        assert!(r.distances.l2 >= exact - 1e-9 && r.distances.l2 < exact * 1.05, "{}", r.distances.l2);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(decide(&m, &r.adversarial, 0, Criterion::Misclassify(1)).unwrap());
        assert!(r.accepted > 0);
    }

    #[test]
    fn non_adversarial_start_is_rejected() {
        let (m, x) = (model(), img(&[0.3, 0.3]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = boundary_attack(&m, &x, &x, 0, Criterion::Misclassify(1), &BoundaryConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn noise_start_is_adversarial() {
        let (m, x) = (model(), img(&[0.3, 0.3]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = noise_start(&m, &x, 0, Criterion::Misclassify(1), &mut rng).unwrap().unwrap();
        assert!(decide(&m, &s, 0, Criterion::Misclassify(1)).unwrap());
        assert!(s[0] + s[1] - 1.0 < 0.01);
    }
}
