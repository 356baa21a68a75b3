use rand::{Rng, RngCore};

use super::boundary::{boundary_attack, noise_start, BoundaryConfig};
use super::model::{AttackModel, View};
use super::{
    attack_loss, is_adversarial, project, project_about, step_direction, Algorithm, AttackConfig, AttackResult,
    Criterion, Distances, Metric,
};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq)]
enum Grad {
    Exact,
    Surrogate,
    Eot(usize),
}

enum Update {
    Step,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

pub(super) fn check_input<T: Real>(x: &Tensor<T>, label: usize, classes: usize) -> Result<()> {
    let (b, ..) = x.dims4()?;
    if b != 1 {
        return Err(Error::shape(format!("attacks take one image at a time, got a batch of {b}")));
    }
    if label >= classes {
        return Err(Error::shape(format!("label {label} out of {classes} classes")));
    }
    Ok(())
}

pub(super) fn finite_logits<T: Real>(logits: Tensor<T>) -> Result<Tensor<T>> {
    if logits.all_finite() {
        Ok(logits)
    } else {
        Err(Error::NonFinite(format!("model logits {:?}", logits.to_f64_vec())))
    }
}

/// Loss gradient at `x`, plus the evaluation logits at `x` when the
/// gradient pass computed them.
fn loss_gradient<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    criterion: Criterion,
    mode: Grad,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let one = |view: View<'_>| -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let logits = model.logits_on_tape(&mut tape, xv, view)?;
        let values = finite_logits(tape.value(logits).clone())?;
        let loss = attack_loss(&mut tape, logits, criterion, label)?;
        let grad = tape.backward(loss)?.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((grad, values))
    };
    match mode {
        Grad::Exact => one(View::Ensemble).map(|(g, l)| (g, Some(l))),
        Grad::Surrogate => one(View::Surrogate).map(|(g, l)| (g, Some(l))),
        Grad::Eot(n) => {
            let mut acc = Tensor::zeros(x.shape());
            for _ in 0..n {
                acc.add_assign(&one(View::RandomFixation(&mut *rng))?.0);
            }
            acc.scale_in_place(T::lit(1.0 / n as f64));
            Ok((acc, None))
        }
    }
}

/// Result plus the last iterate, which a transfer attack evaluates on another
/// model when the source attack never succeeds.
struct Trajectory<T: Real> {
    result: AttackResult<T>,
    last: Tensor<T>,
}

fn random_start<T: Real>(x: &Tensor<T>, cfg: &AttackConfig, rng: &mut dyn RngCore) -> Tensor<T> {
    let r = cfg.init_radius;
    let noise = Tensor::from_fn(x.shape(), |_| T::lit(rng.random_range(-r..=r)));
    let delta = project(&noise, cfg.eps, cfg.metric);
    x.zip_map(&delta, |a, d| (a + d).max(T::zero()).min(T::one()))
}

fn iterate<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    grad_mode: Grad,
    mut update: Update,
    rng: &mut dyn RngCore,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    check_input(x, label, model.classes())?;
    let lambda = cfg.step_size();
    let mut cur = if cfg.init_radius > 0.0 { random_start(x, cfg, rng) } else { x.clone() };
    let (mut grad, _) = loss_gradient(model, &cur, label, cfg.criterion, grad_mode, rng)?;
    for it in 1..=cfg.iterations {
        let step = match &mut update {
            Update::Step => step_direction(&grad, cfg.metric).map(|d| d * T::lit(lambda)),
            Update::Adam { m, v, t } => {
                *t += 1;
                let (c1, c2) = (1.0 - ADAM_BETA1.powi(*t), 1.0 - ADAM_BETA2.powi(*t));
                let mut out = Vec::with_capacity(m.len());
                for ((mi, vi), g) in m.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    let g = g.as_f64();
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                    out.push(T::lit(lambda * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS)));
                }
                Tensor::new(grad.shape(), out)?
            }
        };
        let candidate = cur.zip_map(&step, |a, s| a + s);
        cur = project_about(x, &candidate, cfg.eps, cfg.metric);
        let logits = if it < cfg.iterations {
            let (g, logits) = loss_gradient(model, &cur, label, cfg.criterion, grad_mode, rng)?;
            grad = g;
            match logits {
                Some(l) => l,
                None => finite_logits(model.logits(&cur)?)?,
            }
        } else {
            finite_logits(model.logits(&cur)?)?
        };
        let done = is_adversarial(logits.data(), label, cfg.criterion);
        if done || it == cfg.iterations {
            let result = AttackResult {
                success: done,
                adversarial: done.then(|| cur.clone()),
                iters_used: it,
                distances: Distances::between(&cur, x),
                logits,
            };
            return Ok(Trajectory { result, last: cur });
        }
    }
    unreachable!("iterations validated to be at least 1")
}

fn grad_mode(cfg: &AttackConfig) -> Grad {
    if cfg.eot_samples > 0 {
        Grad::Eot(cfg.eot_samples)
    } else {
        Grad::Exact
    }
}

/// Iterative projected gradient ascent on the attack loss, returning the
/// first iterate that satisfies the criterion.
pub fn pgd<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<AttackResult<T>> {
    Ok(iterate(model, x, label, cfg, grad_mode(cfg), Update::Step, rng)?.result)
}

/// Single full-ε L∞ sign step.
pub fn fgsm<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<AttackResult<T>> {
    let single = AttackConfig {
        algorithm: Algorithm::Fgsm,
        metric: Metric::Linf,
        iterations: 1,
        step_const: -1.0,
        init_radius: 0.0,
        ..cfg.clone()
    };
    pgd(model, x, label, &single, rng)
}

/// PGD whose step is the bias-corrected ADAM update scaled by `λ`.
pub fn pgd_adam<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<AttackResult<T>> {
    let n = x.len();
    let update = Update::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
    Ok(iterate(model, x, label, cfg, grad_mode(cfg), update, rng)?.result)
}

/// PGD through the surrogate backward pass (identity in place of the
/// sampling mechanisms); forward values stay exact.
pub fn bpda_pgd<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<AttackResult<T>> {
    if cfg.eot_samples > 0 {
        return Err(Error::config("BPDA gradients are defined for the evaluation ensemble only; set eot_samples = 0"));
    }
    Ok(iterate(model, x, label, cfg, Grad::Surrogate, Update::Step, rng)?.result)
}

/// PGD on `source` (stopping at the first source-adversarial iterate, or
/// running to the end), judged by the criterion on `target`.
pub fn transfer_attack<T: Real, S: AttackModel<T> + ?Sized, M: AttackModel<T> + ?Sized>(
    source: &S,
    target: &M,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<AttackResult<T>> {
    check_input(x, label, target.classes())?;
    if source.classes() != target.classes() {
        return Err(Error::config("transfer source and target disagree on the class count"));
    }
    let traj = iterate(source, x, label, cfg, grad_mode(cfg), Update::Step, rng)?;
    let example = traj.result.adversarial.unwrap_or(traj.last);
    let logits = finite_logits(target.logits(&example)?)?;
    let success = is_adversarial(logits.data(), label, cfg.criterion);
    Ok(AttackResult {
        success,
        distances: Distances::between(&example, x),
        adversarial: success.then_some(example),
        iters_used: traj.result.iters_used,
        logits,
    })
}

/// Runs any configured attack. Transfer attacks need `source`; the boundary
/// attack starts from a random-noise adversarial and succeeds when its
/// closest adversarial lies within ε.
pub fn run_attack<T: Real, M: AttackModel<T> + ?Sized>(
    model: &M,
    source: Option<&dyn AttackModel<T>>,
    x: &Tensor<T>,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<AttackResult<T>> {
    match cfg.algorithm {
        Algorithm::Pgd => pgd(model, x, label, cfg, rng),
        Algorithm::Fgsm => fgsm(model, x, label, cfg, rng),
        Algorithm::PgdAdam => pgd_adam(model, x, label, cfg, rng),
        Algorithm::BpdaPgd => bpda_pgd(model, x, label, cfg, rng),
        Algorithm::Transfer => {
            let src = source.ok_or_else(|| Error::config("transfer attack needs a source model"))?;
            transfer_attack(src, model, x, label, cfg, rng)
        }
        Algorithm::Boundary => {
            check_input(x, label, model.classes())?;
            let Some(start) = noise_start(model, x, label, cfg.criterion, rng)? else {
                let logits = finite_logits(model.logits(x)?)?;
                return Ok(AttackResult {
                    success: false,
                    adversarial: None,
                    iters_used: 0,
                    distances: Distances::default(),
                    logits,
                });
            };
            let bcfg = BoundaryConfig { iterations: cfg.iterations, ..BoundaryConfig::default() };
            let b = boundary_attack(model, x, &start, label, cfg.criterion, &bcfg, rng)?;
            let within = b.distances.get(cfg.metric) <= cfg.eps + 1e-6;
            let logits = finite_logits(model.logits(&b.adversarial)?)?;
            Ok(AttackResult {
                success: within,
                distances: b.distances,
                adversarial: within.then_some(b.adversarial),
                iters_used: b.iterations,
                logits,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{LinearModel, Metric};
    use super::*;

    /// Two-class model on `d` pixels with logit margin `w·x + b` for class 1.
    fn binary(w: &[f64], b: f64) -> LinearModel<f64> {
        let d = w.len();
        let mut weight = vec![0.0; 2 * d];
        weight[d..].copy_from_slice(w);
        LinearModel::new(Tensor::new(&[2, d], weight).unwrap(), Tensor::new(&[2], vec![0.0, b]).unwrap()).unwrap()
    }

    fn img(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn linear_pgd_reaches_closed_form_corner() {
        // class 0 holds while w·x + b < 0; ascent pushes every pixel by ε·sign(w)
        let w = [1.0, -2.0, 0.5, 3.0];
        let model = binary(&w, -2.0);
        let x = img(&[0.5, 0.5, 0.5, 0.5]);
        let eps = 0.05;
        let mut cfg = AttackConfig::pgd_linf(eps);
        cfg.criterion = Criterion::Targeted(0.99);
        let r = pgd(&model, &x, 0, &cfg, &mut rng()).unwrap();
        let expect: Vec<f64> = x.data().iter().zip(&w).map(|(a, wi)| a + eps * wi.signum()).collect();
        assert!(!r.success);
        for (a, b) in r.logits.data().iter().zip([0.0, -2.0 + 0.5 * 2.5 + eps * 6.5]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((r.distances.linf - eps).abs() < 1e-12);
        let direct = model.logits(&img(&expect)).unwrap();
        assert_eq!(direct.data(), r.logits.data());
    }

    #[test]
    fn ascent_moves_margin_toward_adversarial_side() {
        let model = binary(&[2.0, -1.0], -0.5);
        let x = img(&[0.3, 0.6]);
        let before = model.logits(&x).unwrap();
        let r = pgd(&model, &x, 0, &AttackConfig::pgd_linf(0.01), &mut rng()).unwrap();
        let margin = |l: &Tensor<f64>| l[1] - l[0];
        assert!(margin(&r.logits) > margin(&before));
    }

    #[test]
    fn fgsm_is_one_full_step_pgd() {
        let model = binary(&[1.0, -1.0, 0.2], 0.1);
        let x = img(&[0.2, 0.9, 0.4]);
        let f = fgsm(&model, &x, 0, &AttackConfig::fgsm(0.1, Criterion::Misclassify(1)), &mut rng()).unwrap();
        let mut p = AttackConfig::pgd_linf(0.1);
        p.iterations = 1;
        p.step_const = -1.0;
        assert_eq!(f, pgd(&model, &x, 0, &p, &mut rng()).unwrap());
    }

    #[test]
    fn zero_budget_and_zero_gradient_leave_input() {
        let model = binary(&[1.0, 1.0], -1.0);
        let x = img(&[0.2, 0.1]);
        let r = fgsm(&model, &x, 0, &AttackConfig::fgsm(0.0, Criterion::Misclassify(1)), &mut rng()).unwrap();
        assert!(!r.success);
        assert_eq!(r.distances, Distances::default());
        let flat = binary(&[0.0, 0.0], -1.0);
        let r = pgd(&flat, &x, 0, &AttackConfig::pgd_linf(0.3), &mut rng()).unwrap();
        assert!(!r.success && r.iters_used == 5);
        assert_eq!(r.distances.l1, 0.0);
        let r = pgd_adam(&flat, &x, 0, &AttackConfig::pgd_linf(0.3), &mut rng()).unwrap();
        assert_eq!(r.distances.l1, 0.0);
    }

    #[test]
    fn early_exit_returns_first_success() {
        let model = binary(&[1.0, 1.0], -1.05);
        let x = img(&[0.5, 0.5]);
        let r = pgd(&model, &x, 0, &AttackConfig::pgd_linf(0.3), &mut rng()).unwrap();
        assert!(r.success);
        assert_eq!(r.iters_used, 1);
        assert!(is_adversarial(r.logits.data(), 0, Criterion::Misclassify(1)));
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let model = binary(&[1.0, -2.0, 0.5], -5.0);
        let x = img(&[0.4, 0.5, 0.6]);
        let mut cfg = AttackConfig::pgd_linf(0.02);
        cfg.iterations = 1;
        let a = pgd_adam(&model, &x, 0, &cfg, &mut rng()).unwrap();
        let p = pgd(&model, &x, 0, &cfg, &mut rng()).unwrap();
        for (u, v) in a.logits.data().iter().zip(p.logits.data()) {
            assert!((u - v).abs() < 1e-6);
        }
        assert!((a.distances.linf - p.distances.linf).abs() < 1e-6);
    }

    #[test]
    fn transfer_onto_itself_matches_white_box() {
        let model = binary(&[1.0, -1.0, 2.0], -1.2);
        let x = img(&[0.3, 0.4, 0.2]);
        for eps in [0.0, 0.02, 0.3] {
            let cfg = AttackConfig { algorithm: Algorithm::Transfer, ..AttackConfig::pgd_linf(eps) };
            let t = transfer_attack(&model, &model, &x, 0, &cfg, &mut rng()).unwrap();
            assert_eq!(t, pgd(&model, &x, 0, &cfg, &mut rng()).unwrap());
            if eps == 0.0 {
                assert!(!t.success);
            }
        }
    }

    #[test]
    fn bounded_attacks_stay_in_ball_and_box() {
        let model = binary(&[3.0, -1.0, 2.0, -4.0, 1.0, 0.5], -0.3);
        let x = img(&[0.0, 1.0, 0.5, 0.95, 0.02, 0.3]);
        for metric in [Metric::L1, Metric::L2, Metric::Linf] {
            for algorithm in [Algorithm::Pgd, Algorithm::PgdAdam, Algorithm::Fgsm] {
                let cfg = AttackConfig {
                    algorithm,
                    metric,
                    init_radius: 0.1,
                    iterations: 10,
                    ..AttackConfig::pgd_linf(0.2)
                };
                let r = run_attack(&model, None, &x, 0, &cfg, &mut rng()).unwrap();
                let m = if algorithm == Algorithm::Fgsm { Metric::Linf } else { metric };
                assert!(r.distances.get(m) <= 0.2 + 1e-9);
                if let Some(a) = &r.adversarial {
                    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn rejects_batches_and_missing_source() {
        let model = binary(&[1.0, 1.0], 0.0);
        let two = Tensor::<f64>::zeros(&[2, 1, 1, 2]);
        assert!(pgd(&model, &two, 0, &AttackConfig::pgd_linf(0.1), &mut rng()).is_err());
        let cfg = AttackConfig { algorithm: Algorithm::Transfer, ..AttackConfig::pgd_linf(0.1) };
        assert!(matches!(run_attack(&model, None, &img(&[0.1, 0.1]), 0, &cfg, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_with_random_start() {
        let model = binary(&[1.0, -1.0, 0.3], -0.4);
        let x = img(&[0.5, 0.5, 0.5]);
        let cfg = AttackConfig { init_radius: 0.05, ..AttackConfig::pgd_linf(0.05) };
        let a = pgd(&model, &x, 0, &cfg, &mut rng()).unwrap();
        assert_eq!(a, pgd(&model, &x, 0, &cfg, &mut rng()).unwrap());
    }
}
