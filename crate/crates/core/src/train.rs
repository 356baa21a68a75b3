//! Optimizers, learning-rate schedules, augmentation and the training loop.

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::zoo::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
    },
    Sgd {
        #[serde(default = "momentum")]
        momentum: f64,
        #[serde(default = "weight_decay")]
        weight_decay: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn momentum() -> f64 {
    0.9
}
fn weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    /// `(epoch, multiplier)` milestones, sorted by epoch.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimizerConfig {
    /// ADAM at 0.001 with the 200-epoch CIFAR-10 milestones.
    pub fn cifar() -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 },
            lr: 1e-3,
            schedule: vec![(80, 0.1), (120, 0.01), (160, 0.001), (180, 0.0005)],
            batch_size: 180,
            epochs: 200,
        }
    }

    /// SGD at 0.1 with the 90-epoch ImageNet milestones.
    pub fn imagenet() -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum: 0.9, weight_decay: 1e-4 },
            lr: 0.1,
            schedule: vec![(30, 0.1), (60, 0.01), (80, 0.001)],
            batch_size: 256,
            epochs: 90,
        }
    }

    /// ADAM at 0.003 for 20 epochs with ×0.1 drops at 60% and 85%, sized for
    /// desk backbones on a few thousand images.
    pub fn desk() -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 },
            lr: 3e-3,
            schedule: vec![(12, 0.1), (17, 0.01)],
            batch_size: 64,
            epochs: 20,
        }
    }

    /// Same configuration over `epochs` epochs, milestones scaled proportionally.
    pub fn rescaled(&self, epochs: usize) -> Self {
        let f = epochs as f64 / self.epochs as f64;
        let schedule = self.schedule.iter().map(|&(e, m)| (((e as f64) * f).round() as usize, m)).collect();
        Self { schedule, epochs, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.schedule.windows(2).any(|w| w[0].0 > w[1].0 || w[1].1 > w[0].1) {
            return Err(Error::config("schedule must be sorted with non-increasing multipliers"));
        }
        if self.schedule.iter().any(|&(_, m)| !(m > 0.0)) {
            return Err(Error::config("schedule multipliers must be positive"));
        }
        Ok(())
    }
}

/// Piecewise-constant multiplier: 1 before the first milestone, otherwise
/// the multiplier of the last milestone reached.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule.iter().take_while(|&&(e, _)| e <= epoch).last().map_or(1.0, |&(_, m)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Reflect padding before the random crop (0 disables cropping).
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { pad: 4, flip_prob: 0.5 }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip probability {} outside [0,1]", self.flip_prob)));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Random crop after reflect padding, then a random horizontal flip, per image.
pub fn augment<T: Real>(images: &Tensor<T>, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (b, c, h, w) = images.dims4()?;
    let mut out = Vec::with_capacity(images.len());
    let src = images.data();
    for bi in 0..b {
        let p = cfg.pad as i64;
        let (dy, dx) = if cfg.pad > 0 {
            (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
        } else {
            (0, 0)
        };
        let flip = rng.random::<f64>() < cfg.flip_prob;
        for ch in 0..c {
            let plane = &src[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for y in 0..h {
                let sy = reflect(y as isize + dy, h);
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    out.push(plane[sy * w + reflect(xx as isize + dx, w)]);
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

/// Bias-corrected ADAM on every trainable parameter.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, beta1: f64, beta2: f64) {
    if state.m.len() != store.len() {
        state.m = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        state.v = state.m.clone();
        state.t = 0;
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t);
    let c2 = 1.0 - beta2.powi(state.t);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let step = T::lit(lr / c1);
    let c2s = T::lit(c2.sqrt());
    let eps = T::lit(1e-8);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable() {
            continue;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *w = *w - step * *m / (v.sqrt() / c2s + eps);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SgdState<T: Real> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn velocity(&self, i: usize) -> Option<&Tensor<T>> {
        self.velocity.get(i)
    }

    pub fn velocity_mut(&mut self, i: usize) -> Option<&mut Tensor<T>> {
        self.velocity.get_mut(i)
    }
}

/// `v ← μv + (g + wd·w)`, `w ← w − lr·v`; decay applies to weights only.
pub fn sgd_momentum_step<T: Real>(store: &mut ParamStore<T>, state: &mut SgdState<T>, lr: f64, mu: f64, wd: f64) {
    if state.velocity.len() != store.len() {
        state.velocity = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    let (lr, mu) = (T::lit(lr), T::lit(mu));
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable() {
            continue;
        }
        let wd = T::lit(if p.decays() { wd } else { 0.0 });
        for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(state.velocity[i].data_mut()) {
            *v = mu * *v + g + wd * *w;
            *w = *w - lr * *v;
        }
    }
}

enum OptState<T: Real> {
    Adam(AdamState<T>, f64, f64),
    Sgd(SgdState<T>, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,lr,train_loss,eval_acc")?;
    for m in metrics {
        let acc = m.eval_acc.map_or(String::new(), |a| format!("{a:.6}"));
        writeln!(f, "{},{},{:.6},{}", m.epoch, m.lr, m.train_loss, acc)?;
    }
    Ok(())
}

/// Evaluation-mode fixation-ensemble logits for a dataset, in batches.
pub fn predict_dataset(net: &Network<f32>, ds: &Dataset, batch: usize) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for start in (0..ds.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(ds.len())).collect();
        let (imgs, _) = ds.batch(&idx)?;
        parts.push(net.predict(&imgs)?);
    }
    let k = net.spec().classes;
    let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[ds.len(), k], data)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the fixation ensemble.
pub fn accuracy(net: &Network<f32>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let logits = predict_dataset(net, ds, 32)?;
    let k = net.spec().classes;
    let correct = logits.data().chunks(k).zip(&ds.labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains in place. Data order, augmentation, fixations and dropout masks are
/// all drawn from one generator seeded with `seed`.
pub fn train(
    net: &mut Network<f32>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    opt: &OptimizerConfig,
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    opt.validate()?;
    aug.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = match opt.kind {
        OptimizerKind::Adam { beta1, beta2 } => OptState::Adam(AdamState::default(), beta1, beta2),
        OptimizerKind::Sgd { momentum, weight_decay } => OptState::Sgd(SgdState::default(), momentum, weight_decay),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let lr = opt.lr * lr_at(&opt.schedule, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (imgs, labels) = train_set.batch(chunk)?;
            let imgs = augment(&imgs, aug, &mut rng)?;
            let mut tape = Tape::new();
            let p = net.bind(&mut tape, true);
            let (loss, out) = net.training_loss(&mut tape, &p, &imgs, &labels, &mut rng)?;
            let lv = tape.value(loss)[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss {lv} at epoch {epoch}, sample {seen}")));
            }
            let mut grads = tape.backward(loss)?;
            net.collect_grads(&p, &mut grads);
            net.update_running_stats(&out);
            match &mut state {
                OptState::Adam(s, b1, b2) => adam_step(net.params_mut(), s, lr, *b1, *b2),
                OptState::Sgd(s, mu, wd) => sgd_momentum_step(net.params_mut(), s, lr, *mu, *wd),
            }
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        let eval_acc = eval_set.map(|ds| accuracy(net, ds)).transpose()?;
        let m = EpochMetrics { epoch, lr, train_loss: loss_sum / seen.max(1) as f64, eval_acc };
        info!("epoch {epoch}: lr {lr:.2e} loss {:.4} eval {:?}", m.train_loss, m.eval_acc);
        log.push(m);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn scalar_store(w: f32, kind: ParamKind) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::full(&[3], w), kind);
        s
    }

    #[test]
    fn cifar_schedule_milestones() {
        let s = OptimizerConfig::cifar().schedule;
        assert_eq!(lr_at(&s, 79), 1.0);
        assert_eq!(lr_at(&s, 80), 0.1);
        assert_eq!(lr_at(&s, 185), 0.0005);
        assert_eq!(lr_at(&[], 1000), 1.0);
        assert_eq!(lr_at(&OptimizerConfig::imagenet().schedule, 75), 0.01);
    }

    #[test]
    fn rescaled_schedule_is_proportional() {
        let s = OptimizerConfig::cifar().rescaled(20);
        assert_eq!(s.schedule, vec![(8, 0.1), (12, 0.01), (16, 0.001), (18, 0.0005)]);
        s.validate().unwrap();
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = scalar_store(1.0, ParamKind::Weight);
        s.get_mut(0).grad = Tensor::new(&[3], vec![0.3, -2.0, 1e-3]).unwrap();
        let mut st = AdamState::default();
        adam_step(&mut s, &mut st, 0.001, 0.9, 0.999);
        for &v in s.get(0).value.data() {
            let d = (v - 1.0).abs();
            assert!((0.00099..=0.001001).contains(&d), "{d}");
        }
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = scalar_store(0.7, ParamKind::Weight);
        adam_step(&mut s, &mut AdamState::default(), 0.001, 0.9, 0.999);
        assert!(s.get(0).value.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut s = scalar_store(1.0, ParamKind::Weight);
        let mut st = AdamState::default();
        let mut prev = 1.0f32;
        for _ in 0..10 {
            let w = s.get(0).value[0];
            s.get_mut(0).grad = Tensor::full(&[3], 2.0 * w);
            adam_step(&mut s, &mut st, 0.01, 0.9, 0.999);
            let now = s.get(0).value[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let mut s = scalar_store(1.0, ParamKind::Weight);
        s.get_mut(0).grad = Tensor::full(&[3], 0.5);
        let mut st = SgdState::default();
        sgd_momentum_step(&mut s, &mut st, 0.1, 0.0, 0.0);
        assert!((s.get(0).value[0] - 0.95).abs() < 1e-7);

        // zero gradient still moves by −lr·μ·v
        s.get_mut(0).grad = Tensor::zeros(&[3]);
        let before = s.get(0).value[0];
        sgd_momentum_step(&mut s, &mut st, 0.1, 0.9, 0.0);
        assert!((before - s.get(0).value[0] - 0.1 * 0.9 * 0.5).abs() < 1e-7);
    }

    #[test]
    fn momentum_converges_faster() {
        let steps = |mu: f64| {
            let mut s = scalar_store(1.0, ParamKind::Weight);
            let mut st = SgdState::default();
            for k in 0..10_000 {
                let w = s.get(0).value[0];
                if w.abs() < 1e-3 {
                    return k;
                }
                s.get_mut(0).grad = Tensor::full(&[3], 0.2 * w);
                sgd_momentum_step(&mut s, &mut st, 0.05, mu, 0.0);
            }
            10_000
        };
        assert!(steps(0.9) < steps(0.0));
    }

    #[test]
    fn weight_decay_skips_norm_and_bias() {
        for (kind, moves) in [(ParamKind::Weight, true), (ParamKind::Norm, false), (ParamKind::Bias, false)] {
            let mut s = scalar_store(1.0, kind);
            sgd_momentum_step(&mut s, &mut SgdState::default(), 0.1, 0.9, 1e-4);
            assert_eq!(s.get(0).value[0] != 1.0, moves, "{kind:?}");
        }
    }

    #[test]
    fn flip_rate_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f32>::from_fn(&[1, 1, 1, 2], |i| i as f32);
        let cfg = AugmentationConfig { pad: 0, flip_prob: 0.5 };
        let flips = (0..10_000).filter(|_| augment(&img, &cfg, &mut rng).unwrap()[0] == 1.0).count();
        assert!((4850..=5150).contains(&flips), "{flips}");
    }

    #[test]
    fn reflect_pad_crop_stays_in_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |i| (i % 64) as f32);
        let out = augment(&img, &AugmentationConfig { pad: 4, flip_prob: 0.0 }, &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|&v| (0.0..64.0).contains(&v)));
        assert_eq!(reflect(-1, 8), 1);
        assert_eq!(reflect(8, 8), 6);
    }

    #[test]
    fn metrics_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = [EpochMetrics { epoch: 0, lr: 0.001, train_loss: 1.5, eval_acc: Some(0.25) }];
        write_metrics_csv(&m, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,lr,train_loss,eval_acc");
        assert_eq!(text.lines().nth(1).unwrap(), "0,0.001,1.500000,0.250000");
    }
}
