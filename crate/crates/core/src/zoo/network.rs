use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{BackboneSpec, Family, Fusion, ModelSpec};
use crate::autodiff::{BatchStats, NormMode, SamplingGrid, Tape, Var};
use crate::cortical::{self, BlurGradient};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::retinal::{self, FixationPoint};
use crate::tensor::{Real, Tensor};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    weight: usize,
    bn: Bn,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct Block {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct Trunk {
    stem: ConvBn,
    pool: usize,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: usize,
    bias: usize,
}

/// How the network is run.
pub enum Mode<'a> {
    /// Batch statistics, dropout active; the generator drives dropout masks.
    Train(&'a mut dyn RngCore),
    /// Frozen statistics; deterministic.
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Differentiation of the sampling mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MechanismGrad {
    #[default]
    Exact,
    /// Exact forward; the retinal warp and the scale-space blur are treated
    /// as the identity on the backward pass.
    Identity,
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    fn get(&self, i: usize) -> Var {
        self.vars[i].expect("trainable parameter bound")
    }

    /// Tape handle of parameter `i` (`None` for buffers).
    pub fn var(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }
}

/// Result of one forward pass.
pub struct Outputs<T: Real> {
    pub logits: Var,
    /// Per-branch logits of branched families.
    pub aux: Vec<Var>,
    stats: Vec<(Bn, BatchStats<T>)>,
}

pub struct Network<T: Real> {
    spec: ModelSpec,
    params: ParamStore<T>,
    trunks: Vec<Trunk>,
    head: Dense,
    aux: Vec<Dense>,
    input_side: usize,
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(std * standard_normal(self.rng)))
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.store.push(format!("{name}.gamma"), Tensor::ones(&[c]), ParamKind::Norm),
            beta: self.store.push(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Norm),
            mean: self.store.push(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            var: self.store.push(format!("{name}.running_var"), Tensor::ones(&[c]), ParamKind::Buffer),
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let w = self.he_normal(&[cout, cin, k, k], cin * k * k);
        ConvBn {
            weight: self.store.push(format!("{name}.weight"), w, ParamKind::Weight),
            bn: self.bn(&format!("{name}.bn"), cout),
            stride,
            padding: k / 2,
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = self.he_normal(&[fout, fin], fin);
        Dense {
            weight: self.store.push(format!("{name}.weight"), w, ParamKind::Weight),
            bias: self.store.push(format!("{name}.bias"), Tensor::zeros(&[fout]), ParamKind::Bias),
        }
    }

    fn trunk(&mut self, name: &str, spec: &BackboneSpec, channels: usize) -> Trunk {
        let stem = self.conv_bn(&format!("{name}.stem"), channels, spec.stem_width, 3, spec.stem_stride);
        let mut cin = spec.stem_width;
        let mut blocks = Vec::new();
        for (si, st) in spec.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let stride = if bi == 0 { st.stride } else { 1 };
                let p = format!("{name}.stage{si}.block{bi}");
                let first = self.conv_bn(&format!("{p}.conv1"), cin, st.width, 3, stride);
                let second = self.conv_bn(&format!("{p}.conv2"), st.width, st.width, 3, 1);
                let shortcut = (stride != 1 || cin != st.width)
                    .then(|| self.conv_bn(&format!("{p}.shortcut"), cin, st.width, 1, stride));
                blocks.push(Block { first, second, shortcut });
                cin = st.width;
            }
        }
        Trunk { stem, pool: spec.stem_pool, blocks }
    }
}

/// Box–Muller draw from N(0, 1).
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl<T: Real> Network<T> {
    /// Builds a network with He-normal weights drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let (input_side, trunk_specs) = spec.trunks();
        let trunks: Vec<Trunk> = trunk_specs
            .iter()
            .enumerate()
            .map(|(i, t)| b.trunk(&format!("trunk{i}"), t, spec.channels))
            .collect();
        let widths: Vec<usize> = trunk_specs.iter().map(BackboneSpec::out_width).collect();
        let fused = match spec.family.fusion() {
            Fusion::Max | Fusion::Mean => widths[0],
            Fusion::Concat | Fusion::ConcatDropout(_) => widths.iter().sum(),
        };
        let head = b.dense("head", fused, spec.classes);
        let aux = if spec.family.is_branched() {
            widths.iter().enumerate().map(|(i, &w)| b.dense(&format!("aux{i}"), w, spec.classes)).collect()
        } else {
            Vec::new()
        };
        let params = b.store;
        Ok(Self { spec: spec.clone(), params, trunks, head, aux, input_side })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Side length of the images the trunks receive.
    pub fn trunk_input_side(&self) -> usize {
        self.input_side
    }

    /// Records every trainable parameter on the tape; gradients are tracked
    /// only when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| p.trainable().then(|| tape.leaf(p.value.clone(), track)))
            .collect();
        Bound { vars }
    }

    fn check_fixation(&self, fix: FixationPoint) -> Result<()> {
        let m = self.spec.max_offset() as f64;
        if self.spec.family.fixation_free() {
            return Ok(());
        }
        fix.check_range(m, m)
    }

    /// Applies the family's input mechanism; returns one tensor per trunk.
    fn mechanism(&self, tape: &mut Tape<T>, x: Var, fix: FixationPoint, grad: MechanismGrad) -> Result<Vec<Var>> {
        self.check_fixation(fix)?;
        let spec = &self.spec;
        let g = &spec.geometry;
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != spec.channels || h != spec.image_side || w != spec.image_side {
            return Err(Error::shape(format!(
                "{} model expects {}x{}x{} inputs, got {c}x{h}x{w}",
                spec.family, spec.channels, spec.image_side, spec.image_side
            )));
        }
        let blur = match grad {
            MechanismGrad::Exact => BlurGradient::Exact,
            MechanismGrad::Identity => BlurGradient::Identity,
        };
        let coarse = |tape: &mut Tape<T>| -> Result<Var> {
            let (top, left) = cortical::crop_origin(h, w, g.coarse_crop, fix)?;
            tape.crop(x, top, left, g.coarse_crop, g.coarse_crop)
        };
        Ok(match spec.family {
            Family::Standard => vec![x],
            Family::Ensembling => vec![x; self.trunks.len()],
            Family::Coarse => vec![coarse(tape)?],
            Family::Retinal => vec![self.retina(tape, x, fix, grad)?],
            Family::UniformResampling => {
                let crop = coarse(tape)?;
                let s = g.coarse_crop;
                let grid = SamplingGrid::resize_window(0.0, 0.0, s, s, h, w);
                vec![tape.grid_sample(crop, &grid)?]
            }
            Family::GaussianBlur => {
                let crop = coarse(tape)?;
                vec![cortical::gaussian_blur_with(tape, crop, spec.blur_sigma, blur)?]
            }
            Family::GaussianDownsample => {
                let largest = *g.cortical.sizes.last().expect("validated scale spec");
                let (top, left) = cortical::crop_origin(h, w, largest, fix)?;
                let crop = tape.crop(x, top, left, largest, largest)?;
                let f = largest / g.cortical.target();
                let blurred = cortical::gaussian_blur_with(tape, crop, f as f64 / 2.0, blur)?;
                vec![tape.avg_pool2d(blurred, f)?]
            }
            Family::CombinedRetinalCortical => {
                let warped = self.retina(tape, x, fix, grad)?;
                cortical::extract_fragments_with(tape, warped, fix, &g.cortical, blur)?.fragments
            }
            Family::Cortical | Family::CorticalMaxpool | Family::CorticalAvgpool | Family::CorticalDropout75 => {
                cortical::extract_fragments_with(tape, x, fix, &g.cortical, blur)?.fragments
            }
        })
    }

    fn retina(&self, tape: &mut Tape<T>, x: Var, fix: FixationPoint, grad: MechanismGrad) -> Result<Var> {
        let cfg = self.spec.retinal_config();
        match grad {
            MechanismGrad::Exact => retinal::retinal_resample(tape, x, fix, &cfg),
            MechanismGrad::Identity => {
                let (_, _, h, w) = tape.value(x).dims4()?;
                let grid = retinal::build_retinal_grid(h, w, fix, &cfg)?;
                let warped = crate::autodiff::sample_bilinear(tape.value(x), &grid)?;
                tape.straight_through(x, warped)
            }
        }
    }

    fn conv_bn(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        cb: &ConvBn,
        train: bool,
        stats: &mut Vec<(Bn, BatchStats<T>)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, p.get(cb.weight), cb.stride, cb.padding)?;
        let mode = if train {
            NormMode::Train
        } else {
            NormMode::Eval(self.params.get(cb.bn.mean).value.data(), self.params.get(cb.bn.var).value.data())
        };
        let (out, s) = tape.batch_norm(y, p.get(cb.bn.gamma), p.get(cb.bn.beta), mode)?;
        if let Some(s) = s {
            stats.push((cb.bn, s));
        }
        Ok(out)
    }

    fn run_trunk(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        trunk: &Trunk,
        x: Var,
        train: bool,
        stats: &mut Vec<(Bn, BatchStats<T>)>,
    ) -> Result<Var> {
        let mut h = self.conv_bn(tape, p, x, &trunk.stem, train, stats)?;
        h = tape.relu(h);
        h = tape.avg_pool2d(h, trunk.pool)?;
        for block in &trunk.blocks {
            let a = self.conv_bn(tape, p, h, &block.first, train, stats)?;
            let a = tape.relu(a);
            let a = self.conv_bn(tape, p, a, &block.second, train, stats)?;
            let skip = match &block.shortcut {
                Some(s) => self.conv_bn(tape, p, h, s, train, stats)?,
                None => h,
            };
            let sum = tape.add(a, skip)?;
            h = tape.relu(sum);
        }
        tape.global_avg_pool(h)
    }

    /// Forward pass over groups of images, each group with its own fixation.
    ///
    /// Every `(x, fixation)` item is an `N×C×S×S` tensor; the mechanism is
    /// applied per item and the results are stacked along the batch axis in
    /// item order before the trunks run.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        items: &[(Var, FixationPoint)],
        mut mode: Mode<'_>,
        grad: MechanismGrad,
    ) -> Result<Outputs<T>> {
        if items.is_empty() {
            return Err(Error::shape("forward needs at least one input"));
        }
        let train = mode.is_train();
        let mut per_trunk: Vec<Vec<Var>> = vec![Vec::with_capacity(items.len()); self.trunks.len()];
        for &(x, fix) in items {
            for (slot, v) in per_trunk.iter_mut().zip(self.mechanism(tape, x, fix, grad)?) {
                slot.push(v);
            }
        }
        let mut stats = Vec::new();
        let mut embeddings = Vec::with_capacity(self.trunks.len());
        for (trunk, inputs) in self.trunks.iter().zip(&per_trunk) {
            let x = if inputs.len() == 1 { inputs[0] } else { tape.concat(inputs, 0)? };
            embeddings.push(self.run_trunk(tape, p, trunk, x, train, &mut stats)?);
        }
        let aux = self
            .aux
            .iter()
            .zip(&embeddings)
            .map(|(d, &e)| tape.dense(e, p.get(d.weight), p.get(d.bias)))
            .collect::<Result<Vec<_>>>()?;
        let fused = match self.spec.family.fusion() {
            _ if embeddings.len() == 1 => embeddings[0],
            Fusion::Concat => tape.concat(&embeddings, 1)?,
            Fusion::Max => tape.max_of(&embeddings)?,
            Fusion::Mean => tape.mean_of(&embeddings)?,
            Fusion::ConcatDropout(rate) => {
                let cat = tape.concat(&embeddings, 1)?;
                match &mut mode {
                    Mode::Train(rng) => tape.dropout(cat, rate, &mut **rng)?,
                    Mode::Eval => cat,
                }
            }
        };
        let logits = tape.dense(fused, p.get(self.head.weight), p.get(self.head.bias))?;
        Ok(Outputs { logits, aux, stats })
    }

    /// Logits of a single fixation, in evaluation mode.
    pub fn forward_single_fixation(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        fix: FixationPoint,
    ) -> Result<Outputs<T>> {
        self.forward(tape, p, &[(x, fix)], Mode::Eval, MechanismGrad::Exact)
    }

    /// Evaluation-mode logits averaged over the family's evaluation
    /// fixations (a single pass for fixation-free families).
    pub fn predict_fixation_ensemble(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.predict_with(tape, p, x, MechanismGrad::Exact)
    }

    pub fn predict_with(&self, tape: &mut Tape<T>, p: &Bound, x: Var, grad: MechanismGrad) -> Result<Var> {
        let fixes = self.spec.eval_fixations();
        let items: Vec<(Var, FixationPoint)> = fixes.iter().map(|&f| (x, f)).collect();
        let out = self.forward(tape, p, &items, Mode::Eval, grad)?;
        if fixes.len() == 1 {
            Ok(out.logits)
        } else {
            tape.mean_groups(out.logits, fixes.len())
        }
    }

    /// Evaluation-mode logits for a batch, off-tape.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = self.predict_fixation_ensemble(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Inputs the trunks see for one fixation (one per branch), off-tape.
    pub fn views(&self, images: &Tensor<T>, fix: FixationPoint) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let vars = self.mechanism(&mut tape, x, fix, MechanismGrad::Exact)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Uniform integer training fixation in the family's range.
    pub fn sample_fixation<R: Rng + ?Sized>(&self, rng: &mut R) -> FixationPoint {
        let m = self.spec.max_offset() as i64;
        if m == 0 {
            return FixationPoint::CENTER;
        }
        FixationPoint::new(rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64)
    }

    /// Cross-entropy of the main head plus `aux_weight` times each branch's
    /// auxiliary cross-entropy.
    pub fn loss_from(&self, tape: &mut Tape<T>, out: &Outputs<T>, labels: &[usize]) -> Result<Var> {
        let main = tape.softmax_cross_entropy(out.logits, labels)?;
        if out.aux.is_empty() || self.spec.aux_weight == 0.0 {
            return Ok(main);
        }
        let mut terms = vec![main];
        for &a in &out.aux {
            let ce = tape.softmax_cross_entropy(a, labels)?;
            terms.push(tape.scale(ce, self.spec.aux_weight));
        }
        let n = terms.len() as f64;
        let mean = tape.mean_of(&terms)?;
        Ok(tape.scale(mean, n))
    }

    /// Training-mode loss for a batch: one random fixation per image.
    ///
    /// Returns the loss and the forward outputs (whose batch statistics feed
    /// [`Network::update_running_stats`]).
    pub fn training_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: &Tensor<T>,
        labels: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Outputs<T>)> {
        let (n, ..) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let fix = self.sample_fixation(rng);
            items.push((tape.constant(images.batch_item(i)?), fix));
        }
        let out = self.forward(tape, p, &items, Mode::Train(rng), MechanismGrad::Exact)?;
        let loss = self.loss_from(tape, &out, labels)?;
        Ok((loss, out))
    }

    /// Exponential moving average of batch-norm statistics.
    pub fn update_running_stats(&mut self, out: &Outputs<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (bn, s) in &out.stats {
            for (slot, batch) in [(bn.mean, &s.mean), (bn.var, &s.var)] {
                let run = &mut self.params.get_mut(slot).value;
                for (r, &b) in run.data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    /// Copies gradients of bound parameters into the store (overwriting).
    pub fn collect_grads(&mut self, p: &Bound, grads: &mut crate::autodiff::Gradients<T>) {
        for (i, v) in p.vars.iter().enumerate() {
            let param = self.params.get_mut(i);
            match v.and_then(|v| grads.take(v)) {
                Some(g) => param.grad = g,
                None => param.grad.data_mut().fill(T::zero()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::spec::Geometry;

    fn small(family: Family, side: usize) -> ModelSpec {
        let mut s = ModelSpec::new(family, side, 10, BackboneSpec::cifar_style(4, 1));
        s.geometry = Geometry::for_side(side);
        s
    }

    fn image(side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, side, side], |_| rng.random::<f64>())
    }

    #[test]
    fn resnet20_parameter_count() {
        let spec = ModelSpec::new(Family::Standard, 32, 10, BackboneSpec::resnet20());
        let a = Network::<f32>::build(&spec, 1).unwrap();
        let b = Network::<f32>::build(&spec, 1).unwrap();
        // 3×3 convs + 1×1 shortcuts + BN affine + 64→10 head
        assert_eq!(a.param_count(), 272_474);
        assert_eq!(a.param_count(), b.param_count());
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn seeds_change_values_not_shapes() {
        let spec = small(Family::Cortical, 32);
        let a = Network::<f32>::build(&spec, 1).unwrap();
        let b = Network::<f32>::build(&spec, 2).unwrap();
        let first = a.params().iter().position(|p| p.kind == ParamKind::Weight).unwrap();
        assert_ne!(a.params().get(first).value, b.params().get(first).value);
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.value.shape(), y.value.shape());
        }
    }

    #[test]
    fn every_family_builds_and_runs() {
        for side in [32, 64] {
            for family in Family::ALL {
                let net = Network::<f32>::build(&small(family, side), 3).unwrap();
                let logits = net.predict(&image(side, 1).cast()).unwrap();
                assert_eq!(logits.shape(), &[1, 10], "{family} at {side}");
                assert!(logits.all_finite());
            }
        }
    }

    #[test]
    fn standard_ignores_fixation() {
        let net = Network::<f64>::build(&small(Family::Standard, 32), 4).unwrap();
        let img = image(32, 2);
        let run = |fix| {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape, false);
            let x = tape.constant(img.clone());
            let out = net.forward_single_fixation(&mut tape, &p, x, fix).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(FixationPoint::CENTER), run(FixationPoint::new(4.0, 4.0)));
        assert_eq!(run(FixationPoint::CENTER), net.predict(&img).unwrap());
    }

    #[test]
    fn out_of_range_fixation_rejected() {
        let net = Network::<f32>::build(&small(Family::Retinal, 32), 4).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape, false);
        let x = tape.constant(image(32, 3).cast());
        assert!(matches!(
            net.forward_single_fixation(&mut tape, &p, x, FixationPoint::new(9.0, 0.0)),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn ensemble_is_bit_deterministic() {
        let net = Network::<f32>::build(&small(Family::Cortical, 64), 5).unwrap();
        let img = image(64, 4).cast();
        assert_eq!(net.predict(&img).unwrap(), net.predict(&img).unwrap());
    }

    #[test]
    fn ensemble_is_mean_of_single_fixations() {
        let net = Network::<f64>::build(&small(Family::Retinal, 32), 6).unwrap();
        let img = image(32, 5);
        let mut acc = vec![0.0; 10];
        for fix in net.spec().eval_fixations() {
            let mut tape = Tape::new();
            let p = net.bind(&mut tape, false);
            let x = tape.constant(img.clone());
            let out = net.forward_single_fixation(&mut tape, &p, x, fix).unwrap();
            for (a, v) in acc.iter_mut().zip(tape.value(out.logits).data()) {
                *a += v / 5.0;
            }
        }
        let ens = net.predict(&img).unwrap();
        for (a, b) in acc.iter().zip(ens.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_live_branch_ignores_other_fragments() {
        let spec = small(Family::Cortical, 32);
        let mut net = Network::<f64>::build(&spec, 7).unwrap();
        // zero the head columns fed by branch 1 so only branch 0 reaches the logits
        let head_w = net.params().find("head.weight").unwrap();
        let w0 = spec.trunks().1[0].out_width();
        let w = &mut net.params_mut().get_mut(head_w).value;
        let cols = w.shape()[1];
        for r in 0..10 {
            for c in w0..cols {
                w[r * cols + c] = 0.0;
            }
        }
        // pixels inside the 30 crop but outside the 15 crop only reach branch 1
        let img = image(32, 6);
        let mut pert = img.clone();
        for (i, v) in pert.data_mut().iter_mut().enumerate() {
            let (r, c) = ((i / 32) % 32, i % 32);
            if r < 8 || c < 8 {
                *v = 1.0 - *v;
            }
        }
        let mut tape = Tape::new();
        let p = net.bind(&mut tape, false);
        let a = tape.constant(img);
        let b = tape.constant(pert);
        let la = net.forward_single_fixation(&mut tape, &p, a, FixationPoint::CENTER).unwrap();
        let lb = net.forward_single_fixation(&mut tape, &p, b, FixationPoint::CENTER).unwrap();
        assert_eq!(tape.value(la.logits), tape.value(lb.logits));
        assert_ne!(tape.value(la.aux[1]), tape.value(lb.aux[1]));
    }

    #[test]
    fn aux_loss_with_uniform_heads() {
        let spec = small(Family::Cortical, 64);
        assert_eq!(spec.branch_count(), 4);
        let mut net = Network::<f64>::build(&spec, 8).unwrap();
        for p in net.params_mut().iter_mut() {
            if p.name.starts_with("head.") || p.name.starts_with("aux") {
                p.value.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let p = net.bind(&mut tape, false);
        let x = tape.constant(image(64, 7));
        let out = net.forward_single_fixation(&mut tape, &p, x, FixationPoint::CENTER).unwrap();
        let loss = net.loss_from(&mut tape, &out, &[3]).unwrap();
        let want = (1.0 + 4.0 * 0.3) * 10f64.ln();
        assert!((tape.value(loss)[0] - want).abs() < 1e-12);

        let mut plain = net.spec().clone();
        plain.aux_weight = 0.0;
        net.spec = plain;
        let loss0 = net.loss_from(&mut tape, &out, &[3]).unwrap();
        let main = tape.softmax_cross_entropy(out.logits, &[3]).unwrap();
        assert_eq!(tape.value(loss0)[0], tape.value(main)[0]);
    }

    #[test]
    fn retinal_training_fixations_cover_range() {
        let spec = ModelSpec::new(Family::Retinal, 320, 10, BackboneSpec::resnet18_class(8));
        let net = Network::<f32>::build(&spec, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<FixationPoint> = (0..10_000).map(|_| net.sample_fixation(&mut rng)).collect();
        for axis in [|f: &FixationPoint| f.dx, |f: &FixationPoint| f.dy] {
            let v: Vec<f64> = draws.iter().map(axis).collect();
            assert_eq!(v.iter().cloned().fold(f64::INFINITY, f64::min), -80.0);
            assert_eq!(v.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 80.0);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 3.0, "mean {mean}");
        }
    }

    #[test]
    fn ensemble_gradient_reaches_input_for_every_family() {
        for family in Family::ALL {
            let net = Network::<f64>::build(&small(family, 32), 9).unwrap();
            let mut tape = Tape::new();
            let p = net.bind(&mut tape, false);
            let x = tape.leaf(image(32, 8), true);
            let y = net.predict_fixation_ensemble(&mut tape, &p, x).unwrap();
            let loss = tape.softmax_cross_entropy(y, &[2]).unwrap();
            let g = tape.backward(loss).unwrap();
            let gx = g.get(x).unwrap();
            assert!(gx.max_abs() > 0.0, "{family}");
        }
    }

    #[test]
    fn training_step_updates_running_stats() {
        let mut net = Network::<f32>::build(&small(Family::Coarse, 32), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs = Tensor::from_fn(&[4, 3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let mut tape = Tape::new();
        let p = net.bind(&mut tape, true);
        let (loss, out) = net.training_loss(&mut tape, &p, &imgs, &[0, 1, 2, 3], &mut rng).unwrap();
        let mut g = tape.backward(loss).unwrap();
        net.update_running_stats(&out);
        net.collect_grads(&p, &mut g);
        let m = net.params().find("trunk0.stem.bn.running_mean").unwrap();
        assert!(net.params().get(m).value.max_abs() > 0.0);
        let w = net.params().find("head.weight").unwrap();
        assert!(net.params().get(w).grad.max_abs() > 0.0);
    }
}
