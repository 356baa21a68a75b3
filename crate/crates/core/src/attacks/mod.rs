//! Adversarial attacks: the PGD family, transfer, decision-based boundary
//! attack and BPDA, with their success criteria and Lp geometry.

mod boundary;
mod model;
mod pgd;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use boundary::{boundary_attack, BoundaryConfig, BoundaryResult};
pub use model::{AttackModel, LinearModel, View};
pub use pgd::{bpda_pgd, fgsm, pgd, pgd_adam, run_attack, transfer_attack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    L1,
    L2,
    Linf,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Linf => "linf",
        }
    }

    pub fn norm<T: Real>(self, v: &[T]) -> f64 {
        match self {
            Metric::L1 => v.iter().map(|x| x.as_f64().abs()).sum(),
            Metric::L2 => v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt(),
            Metric::Linf => v.iter().map(|x| x.as_f64().abs()).fold(0.0, f64::max),
        }
    }
}

/// Success predicate of an attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// True class not among the `k` largest logits.
    Misclassify(usize),
    /// Class `(true + 1) mod K` reaches probability above `p`; `p = 0.5`
    /// instead requires the target to be the top-1 class.
    Targeted(f64),
}

impl Criterion {
    pub fn is_targeted(self) -> bool {
        matches!(self, Criterion::Targeted(_))
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Criterion::Misclassify(0) => Err(Error::config("misclassify_k needs k >= 1")),
            Criterion::Targeted(p) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::config(format!("target probability {p} outside (0,1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::Misclassify(k) => write!(f, "misclassify_{k}"),
            Criterion::Targeted(p) => write!(f, "targeted_{}", (p * 100.0).round() as u32),
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let bad = || Error::config(format!("unknown criterion '{s}'"));
        let c = if let Some(k) = s.strip_prefix("misclassify_") {
            Criterion::Misclassify(k.parse().map_err(|_| bad())?)
        } else if let Some(x) = s.strip_prefix("targeted_") {
            Criterion::Targeted(x.parse::<f64>().map_err(|_| bad())? / 100.0)
        } else {
            return Err(bad());
        };
        c.validate()?;
        Ok(c)
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "1" => Ok(Metric::L1),
            "l2" | "2" => Ok(Metric::L2),
            "linf" | "inf" | "l_inf" => Ok(Metric::Linf),
            _ => Err(Error::config(format!("unknown distance metric '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Pgd,
    Fgsm,
    PgdAdam,
    Boundary,
    Transfer,
    BpdaPgd,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Pgd => "pgd",
            Algorithm::Fgsm => "fgsm",
            Algorithm::PgdAdam => "pgd_adam",
            Algorithm::Boundary => "boundary",
            Algorithm::Transfer => "transfer",
            Algorithm::BpdaPgd => "bpda_pgd",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pgd" => Algorithm::Pgd,
            "fgsm" => Algorithm::Fgsm,
            "pgd_adam" => Algorithm::PgdAdam,
            "boundary" => Algorithm::Boundary,
            "transfer" => Algorithm::Transfer,
            "bpda_pgd" | "bpda" => Algorithm::BpdaPgd,
            _ => return Err(Error::config(format!("unknown attack algorithm '{s}'"))),
        })
    }
}

string_serde!(Criterion);
string_serde!(Metric);
string_serde!(Algorithm);

/// One attack run. The step size is always derived: `λ = (ε/0.3)·c`, or
/// `λ = ε` for a negative step constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub algorithm: Algorithm,
    pub metric: Metric,
    pub iterations: usize,
    pub step_const: f64,
    pub eps: f64,
    pub criterion: Criterion,
    /// Random-fixation gradient samples per step (0 = exact ensemble gradient).
    #[serde(default)]
    pub eot_samples: usize,
    /// Radius of the uniform random start (0 starts at the original image).
    #[serde(default)]
    pub init_radius: f64,
}

impl AttackConfig {
    /// 5-step L∞ PGD with `λ = ε/3` against `misclassify_1`.
    pub fn pgd_linf(eps: f64) -> Self {
        Self {
            algorithm: Algorithm::Pgd,
            metric: Metric::Linf,
            iterations: 5,
            step_const: 0.1,
            eps,
            criterion: Criterion::Misclassify(1),
            eot_samples: 0,
            init_radius: 0.0,
        }
    }

    pub fn fgsm(eps: f64, criterion: Criterion) -> Self {
        Self {
            algorithm: Algorithm::Fgsm,
            metric: Metric::Linf,
            iterations: 1,
            step_const: -1.0,
            eps,
            criterion,
            eot_samples: 0,
            init_radius: 0.0,
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn step_size(&self) -> f64 {
        step_size(self.eps, self.step_const)
    }

    /// Identifier independent of ε, used to name curves.
    pub fn id(&self) -> String {
        let mut id = format!(
            "{}-{}-i{}-c{}-{}",
            self.algorithm, self.metric, self.iterations, self.step_const, self.criterion
        );
        if self.eot_samples > 0 {
            id.push_str(&format!("-eot{}", self.eot_samples));
        }
        if self.init_radius > 0.0 {
            id.push_str(&format!("-init{}", self.init_radius));
        }
        id
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::config(format!("eps must be finite and non-negative, got {}", self.eps)));
        }
        if self.iterations == 0 {
            return Err(Error::config("attack iterations must be at least 1"));
        }
        if !self.step_const.is_finite() || self.step_const == 0.0 {
            return Err(Error::config("step constant must be non-zero"));
        }
        if !(self.init_radius >= 0.0) || !self.init_radius.is_finite() {
            return Err(Error::config("random-init radius must be finite and non-negative"));
        }
        self.criterion.validate()
    }
}

/// `λ = (ε/0.3)·c`; a negative constant means a full-ε step.
pub fn step_size(eps: f64, step_const: f64) -> f64 {
    if step_const < 0.0 {
        eps
    } else {
        eps / 0.3 * step_const
    }
}

/// Class the targeted criteria aim for.
pub fn target_class(label: usize, classes: usize) -> usize {
    (label + 1) % classes
}

/// Loss ascended by the attacks: `+CE(true)` untargeted, `−CE(target)` targeted.
pub fn attack_loss<T: Real>(tape: &mut Tape<T>, logits: Var, criterion: Criterion, label: usize) -> Result<Var> {
    let k = tape.shape(logits)[1];
    match criterion {
        Criterion::Misclassify(_) => tape.softmax_cross_entropy(logits, &[label]),
        Criterion::Targeted(_) => {
            let ce = tape.softmax_cross_entropy(logits, &[target_class(label, k)])?;
            Ok(tape.scale(ce, -1.0))
        }
    }
}

/// Number of classes ranked above `class` (ties: the lower index ranks first).
pub fn rank_of<T: Real>(logits: &[T], class: usize) -> usize {
    let v = logits[class];
    logits.iter().enumerate().filter(|&(j, &x)| x > v || (x == v && j < class)).count()
}

/// Whether one row of logits satisfies the criterion for `label`.
pub fn is_adversarial<T: Real>(logits: &[T], label: usize, criterion: Criterion) -> bool {
    match criterion {
        Criterion::Misclassify(k) => rank_of(logits, label) >= k,
        Criterion::Targeted(p) => {
            let t = target_class(label, logits.len());
            if p == 0.5 {
                rank_of(logits, t) == 0
            } else {
                softmax_rows(logits, logits.len())[t].as_f64() > p
            }
        }
    }
}

/// Euclidean projection of `delta` onto the ε-ball of `metric`.
pub fn project<T: Real>(delta: &Tensor<T>, eps: f64, metric: Metric) -> Tensor<T> {
    match metric {
        Metric::Linf => {
            let e = T::lit(eps);
            delta.map(|d| d.max(-e).min(e))
        }
        Metric::L2 => {
            let n = Metric::L2.norm(delta.data());
            if n > eps {
                let s = T::lit(eps / n);
                delta.map(|d| d * s)
            } else {
                delta.clone()
            }
        }
        Metric::L1 => {
            if Metric::L1.norm(delta.data()) <= eps {
                return delta.clone();
            }
            let theta = l1_threshold(delta.data(), eps);
            delta.map(|d| {
                let a = d.as_f64().abs() - theta;
                if a > 0.0 {
                    T::lit(a.copysign(d.as_f64()))
                } else {
                    T::zero()
                }
            })
        }
    }
}

/// Soft threshold θ with `Σ max(|vᵢ| − θ, 0) = ε` (sort-based).
fn l1_threshold<T: Real>(v: &[T], eps: f64) -> f64 {
    let mut u: Vec<f64> = v.iter().map(|x| x.as_f64().abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - eps) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Unit step for `metric`: sign, L2-normalized or L1-normalized gradient
/// (zero for a zero gradient).
pub fn step_direction<T: Real>(grad: &Tensor<T>, metric: Metric) -> Tensor<T> {
    match metric {
        Metric::Linf => grad.map(|g| {
            if g > T::zero() {
                T::one()
            } else if g < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }),
        Metric::L2 | Metric::L1 => {
            let n = metric.norm(grad.data());
            if n == 0.0 {
                return grad.map(|_| T::zero());
            }
            let s = T::lit(1.0 / n);
            grad.map(|g| g * s)
        }
    }
}

/// `clip_[0,1](x + project(candidate − x))`.
///
/// The radius shrinks by twice the measured excess (up to 8 times) while the
/// rounded result lies more than `1e-12·max(1, ε)` outside the ball.
pub fn project_about<T: Real>(x: &Tensor<T>, candidate: &Tensor<T>, eps: f64, metric: Metric) -> Tensor<T> {
    let raw = candidate.zip_map(x, |c, o| c - o);
    let mut radius = eps;
    let mut out = x.clone();
    for _ in 0..8 {
        let delta = project(&raw, radius, metric);
        out = x.zip_map(&delta, |o, d| (o + d).max(T::zero()).min(T::one()));
        let realized: Vec<f64> = out.data().iter().zip(x.data()).map(|(a, o)| a.as_f64() - o.as_f64()).collect();
        let excess = metric.norm(&realized) - eps;
        if excess <= 1e-12 * eps.max(1.0) {
            return out;
        }
        radius = (radius - 2.0 * excess).max(0.0);
    }
    out
}

/// Outcome of a bounded attack on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T: Real> {
    pub success: bool,
    /// The first iterate satisfying the criterion.
    pub adversarial: Option<Tensor<T>>,
    /// Iterations run (the successful one, or all of them).
    pub iters_used: usize,
    /// Distances of the returned (or last) iterate from the original.
    pub distances: Distances,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distances {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl Distances {
    pub fn between<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Self {
        let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() - y.as_f64()).collect();
        Self { l1: Metric::L1.norm(&d), l2: Metric::L2.norm(&d), linf: Metric::Linf.norm(&d) }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::L1 => self.l1,
            Metric::L2 => self.l2,
            Metric::Linf => self.linf,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn projected_f32_images_stay_inside_the_ball() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for metric in [Metric::L1, Metric::L2, Metric::Linf] {
            for eps in [0.01, 1.0, 8.0] {
                let x = Tensor::<f32>::from_fn(&[1, 3, 32, 32], |_| rng.random_range(0.0..1.0));
                let noise = Tensor::<f32>::from_fn(x.shape(), |_| rng.random_range(-0.3..0.3));
                let cand = x.zip_map(&noise, |a, b| a + b);
                let adv = project_about(&x, &cand, eps, metric);
                let d: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, o)| *a as f64 - *o as f64).collect();
                assert!(metric.norm(&d) <= eps + 1e-9, "{metric} ε={eps}: {}", metric.norm(&d));
                assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn criterion_tags_roundtrip() {
        for s in ["misclassify_1", "misclassify_3", "misclassify_10", "targeted_50", "targeted_80"] {
            assert_eq!(s.parse::<Criterion>().unwrap().to_string(), s);
        }
        assert_eq!("TARGETED_80".parse::<Criterion>().unwrap(), Criterion::Targeted(0.8));
        assert!("misclassify_0".parse::<Criterion>().is_err());
    }

    #[test]
    fn step_rule() {
        assert!((AttackConfig::pgd_linf(0.3).step_size() - 0.1).abs() < 1e-15);
        assert!((step_size(0.03, 0.025) - 0.0025).abs() < 1e-15);
        assert_eq!(AttackConfig::fgsm(0.01, Criterion::Misclassify(3)).step_size(), 0.01);
    }

    #[test]
    fn targeted_probability_rule() {
        // label 2 → target 3 with probability ≈ 0.85
        let logits = [0.0f64, 0.0, 0.0, (0.85f64 / 0.05 * 3.0f64.recip()).ln() + 1.0986, 0.0];
        let p = softmax_rows(&logits, 5)[3];
        assert!(p > 0.8, "{p}");
        assert!(is_adversarial(&logits, 2, Criterion::Targeted(0.8)));
        assert!(!is_adversarial(&[0.0f64, 0.0, 0.0, 1.0, 0.0], 2, Criterion::Targeted(0.8)));
        assert!(is_adversarial(&[0.0f64, 0.0, 0.0, 1.0, 0.0], 2, Criterion::Targeted(0.5)));
    }

    #[test]
    fn misclassify_ranks() {
        let logits = [0.1f64, 0.9, 0.5, 0.0];
        assert!(is_adversarial(&logits, 2, Criterion::Misclassify(1)));
        assert!(!is_adversarial(&logits, 2, Criterion::Misclassify(3)));
        // exact tie at top-1: adversarial iff the other class has the lower index
        let tie = [1.0f64, 1.0, 0.0];
        assert!(is_adversarial(&tie, 1, Criterion::Misclassify(1)));
        assert!(!is_adversarial(&tie, 0, Criterion::Misclassify(1)));
    }

    #[test]
    fn untargeted_loss_is_ln_k_for_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 10]));
        let loss = attack_loss(&mut tape, l, Criterion::Misclassify(1), 4).unwrap();
        assert!((tape.value(loss)[0] - 10f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 10];
        sat[5] = 1000.0;
        let s = tape.constant(Tensor::new(&[1, 10], sat).unwrap());
        let loss = attack_loss(&mut tape, s, Criterion::Targeted(0.8), 4).unwrap();
        let v = tape.value(loss)[0];
        assert!(v <= 0.0 && v > -1e-9);
    }

    #[test]
    fn projections() {
        assert_eq!(project(&t(&[0.02]), 0.01, Metric::Linf).data(), &[0.01]);
        for m in [Metric::L1, Metric::L2, Metric::Linf] {
            assert_eq!(project(&t(&[0.1, -0.2]), 1.0, m), t(&[0.1, -0.2]));
        }
        assert_eq!(project(&t(&[2.0, 1.0]), 1.0, Metric::L1), t(&[1.0, 0.0]));
        let p = project(&t(&[3.0, 4.0]), 1.0, Metric::L2);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn directions() {
        let g = t(&[3.0, -4.0]);
        assert_eq!(step_direction(&g, Metric::Linf), t(&[1.0, -1.0]));
        let d = step_direction(&g, Metric::L2);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] + 0.8).abs() < 1e-12);
        let d = step_direction(&g, Metric::L1);
        assert!((d[0] - 3.0 / 7.0).abs() < 1e-12);
        for m in [Metric::L1, Metric::L2, Metric::Linf] {
            assert_eq!(step_direction(&t(&[0.0, 0.0]), m), t(&[0.0, 0.0]));
        }
    }

    #[test]
    fn serde_config_names() {
        let c = AttackConfig::pgd_linf(0.01);
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(j["metric"], "linf");
        assert_eq!(j["criterion"], "misclassify_1");
        assert_eq!(j["algorithm"], "pgd");
        assert_eq!(serde_json::from_value::<AttackConfig>(j).unwrap(), c);
        assert_eq!(c.id(), "pgd-linf-i5-c0.1-misclassify_1");
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(v in prop::collection::vec(-3.0f64..3.0, 1..12), eps in 0.01f64..2.0) {
            let d = t(&v);
            for m in [Metric::L1, Metric::L2, Metric::Linf] {
                let p = project(&d, eps, m);
                prop_assert!(m.norm(p.data()) <= eps + 1e-9);
                let pp = project(&p, eps, m);
                if m == Metric::Linf {
                    prop_assert_eq!(&pp, &p);
                } else {
                    for (a, b) in pp.data().iter().zip(p.data()) {
                        prop_assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
