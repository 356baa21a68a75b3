//! Brute-force reference computations checked against the implementation.
//!
//! Every oracle here is written with plain nested loops over `f64` slices and
//! calls none of the numeric kernels it checks: convolutions are direct sums,
//! the Gaussian blur is a dense 2-D stencil, bilinear sampling uses a tent
//! kernel over the whole image, the L1 projection is solved by enumerating
//! the faces of the ball, and gradients come from central differences.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{self, AttackConfig, LinearModel, Metric};
use crate::autodiff::{NormMode, SamplingGrid, Tape, Var};
use crate::cortical::{blur_tensor, gaussian_blur};
use crate::error::{Error, Result};
use crate::retinal::radial_warp;
use crate::tensor::Tensor;
use crate::train::{augment, AugmentationConfig};
use crate::zoo::{BackboneSpec, Family, ModelSpec, Network};

/// How a case's error is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Abs,
    Rel,
}

/// Outcome of one oracle case.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub case: String,
    /// Leading oracle values (at most [`SHOWN`]).
    pub oracle: Vec<f64>,
    /// Leading implementation values, aligned with `oracle`.
    pub implementation: Vec<f64>,
    /// Number of values compared.
    pub compared: usize,
    pub max_abs_err: f64,
    /// `max |a − b| / max(max |a|, max |b|)`.
    pub max_rel_err: f64,
    pub measure: Measure,
    pub tolerance: f64,
    pub pass: bool,
}

pub const SHOWN: usize = 8;

impl OracleReport {
    pub fn compare(case: impl Into<String>, oracle: &[f64], implementation: &[f64], measure: Measure, tolerance: f64) -> Self {
        let case = case.into();
        let (max_abs_err, max_rel_err) = if oracle.len() != implementation.len() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            errors(oracle, implementation)
        };
        let err = match measure {
            Measure::Abs => max_abs_err,
            Measure::Rel => max_rel_err,
        };
        Self {
            case,
            oracle: oracle.iter().take(SHOWN).copied().collect(),
            implementation: implementation.iter().take(SHOWN).copied().collect(),
            compared: oracle.len(),
            max_abs_err,
            max_rel_err,
            measure,
            tolerance,
            pass: err.is_finite() && err <= tolerance,
        }
    }

    /// Folds several comparisons of the same case into one report keeping the
    /// worst errors.
    fn merge(case: &str, parts: Vec<OracleReport>) -> Self {
        let mut out = parts.first().cloned().unwrap_or_else(|| {
            OracleReport::compare(case, &[], &[1.0], Measure::Abs, 0.0)
        });
        out.case = case.to_string();
        for p in parts.iter().skip(1) {
            out.compared += p.compared;
            out.max_abs_err = out.max_abs_err.max(p.max_abs_err);
            out.max_rel_err = out.max_rel_err.max(p.max_rel_err);
            out.pass &= p.pass;
        }
        out
    }
}

fn errors(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut abs = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        if !x.is_finite() || !y.is_finite() {
            return (f64::INFINITY, f64::INFINITY);
        }
        abs = abs.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    let rel = if scale > 0.0 { abs / scale } else { abs };
    (abs, rel)
}

/// Runs every oracle case; deterministic for a given seed.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    out.extend(convolution_cases(seed)?);
    out.extend(op_gradient_cases(seed)?);
    out.extend(sampling_cases(seed)?);
    out.extend(blur_cases(seed)?);
    out.extend(warp_cases()?);
    out.push(l1_projection_case(seed, 100)?);
    out.push(linear_pgd_case(seed)?);
    out.extend(binomial_cases(seed)?);
    out.push(pipeline_gradient_case(seed)?);
    out.push(OracleReport::merge("grad.end_to_end.f64", end_to_end_gradient_cases(seed, 20)?));
    Ok(out)
}

/// Writes one JSON object per report.
pub fn write_jsonl(reports: &[OracleReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Human-readable table of the reports followed by a pass count.
pub fn summary(reports: &[OracleReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let err = match r.measure {
            Measure::Abs => r.max_abs_err,
            Measure::Rel => r.max_rel_err,
        };
        let _ = writeln!(
            s,
            "{} {:<34} n={:<6} {:?} err {:.3e} (tol {:.1e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.case,
            r.compared,
            r.measure,
            err,
            r.tolerance
        );
    }
    let passed = reports.iter().filter(|r| r.pass).count();
    let _ = writeln!(s, "{passed}/{} oracle cases passed", reports.len());
    s
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    t.cast()
}

// ---------------------------------------------------------------------------
// convolution

/// Direct cross-correlation with zero padding.
pub fn conv2d_reference(
    input: &[f64],
    dims: [usize; 4],
    weight: &[f64],
    wdims: [usize; 4],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, w] = dims;
    let [cout, _, kh, kw] = wdims;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * stride + i) as isize - padding as isize;
                                let sx = (x * stride + j) as isize - padding as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let iv = input[((n * cin + c) * h + sy as usize) * w + sx as usize];
                                acc += iv * weight[((o * cin + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + y) * wo + x] = acc;
                }
            }
        }
    }
    (out, [b, cout, ho, wo])
}

fn conv_forward(input: &Tensor<f64>, weight: &Tensor<f64>, stride: usize, padding: usize) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let y = tape.conv2d(x, w, stride, padding)?;
    Ok(tape.value(y).clone())
}

fn convolution_cases(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let ones = Tensor::<f64>::ones(&[1, 1, 3, 3]);
    let y = conv_forward(&ones, &ones, 1, 1)?;
    out.push(OracleReport::compare("conv.ones_center", &[9.0], &[y.data()[4]], Measure::Abs, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let mut parts = Vec::new();
    for (k, stride, padding) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 2, 0), (5, 2, 1)] {
        let dims = [2, 3, rng.random_range(7..12), rng.random_range(7..12)];
        let wdims = [4, 3, k, k];
        let x = random_tensor(&mut rng, &dims, -1.0, 1.0);
        let w = random_tensor(&mut rng, &wdims, -1.0, 1.0);
        let (want, shape) = conv2d_reference(x.data(), dims, w.data(), wdims, stride, padding);
        let got = conv_forward(&x, &w, stride, padding)?;
        let mut r = OracleReport::compare("conv.nested_loop", &want, got.data(), Measure::Rel, 1e-12);
        if got.shape() != shape {
            r.pass = false;
        }
        parts.push(r);
    }
    out.push(OracleReport::merge("conv.nested_loop", parts));
    Ok(out)
}

// ---------------------------------------------------------------------------
// finite differences

/// Central difference of `f` along coordinate `i` of `x`.
///
/// A one-sided difference pair that disagrees by more than the smooth-case
/// bound means a ReLU or max kink lies inside the stencil; the step is then
/// shrunk until the stencil no longer straddles it.
fn central_difference<F>(f: &F, x: &Tensor<f64>, i: usize, step: f64, f0: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut h = step;
    let mut last = 0.0;
    for _ in 0..4 {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let (fp, fm) = (f(&xp)?, f(&xm)?);
        let c = (fp - fm) / (2.0 * h);
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let noise = 8.0 * f64::EPSILON * f0.abs().max(1.0) / h;
        last = c;
        if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()) + noise {
            return Ok(c);
        }
        h /= 10.0;
    }
    Ok(last)
}

/// Finite-difference gradient of `f` at the given coordinates.
fn fd_gradient<F>(f: &F, x: &Tensor<f64>, coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let f0 = f(x)?;
    coords.iter().map(|&i| central_difference(f, x, i, step, f0)).collect()
}

/// Scalar loss `Σ r ⊙ op(inputs)` for a fixed random weighting `r`.
type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn weighted_loss(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Analytic and finite-difference gradients of `Σ r ⊙ op(...)` with respect
/// to input `which`.
fn op_gradients(op: &OpFn, inputs: &[Tensor<f64>], which: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = op(&mut tape, &vars)?;
        tape.shape(y).to_vec()
    };
    let weights = random_tensor(rng, &out_shape, -1.0, 1.0);
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| tape.constant(if k == which { x.clone() } else { t.clone() }))
            .collect();
        let y = op(&mut tape, &vars)?;
        let l = weighted_loss(&mut tape, y, &weights)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(k, t)| tape.leaf(t.clone(), k == which)).collect();
    let y = op(&mut tape, &vars)?;
    let l = weighted_loss(&mut tape, y, &weights)?;
    let grads = tape.backward(l)?;
    let analytic = grads
        .get(vars[which])
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[which].len()]);
    let coords: Vec<usize> = (0..inputs[which].len()).collect();
    let numeric = fd_gradient(&eval, &inputs[which], &coords, 1e-6)?;
    Ok((analytic, numeric))
}

struct OpCase {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    which: Vec<usize>,
    op: Box<OpFn>,
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn op_cases() -> Vec<OpCase> {
    fn sample_grid(h: usize, w: usize) -> SamplingGrid {
        SamplingGrid::from_fn(5, 6, move |i, j| {
            let r = (i as f64 * 1.37 + j as f64 * 0.61) % (h as f64 + 2.0) - 1.0;
            let c = (j as f64 * 1.53 + i as f64 * 0.29) % (w as f64 + 2.0) - 1.0;
            (r + 0.013, c + 0.027)
        })
    }
    vec![
        OpCase {
            name: "conv2d",
            inputs: Box::new(|r| vec![random_tensor(r, &[2, 2, 6, 7], -1.0, 1.0), random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0)]),
            which: vec![0, 1],
            op: Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1)),
        },
        OpCase {
            name: "relu",
            inputs: Box::new(|r| vec![away_from_zero(r, &[3, 7])]),
            which: vec![0],
            op: Box::new(|t, v| Ok(t.relu(v[0]))),
        },
        OpCase {
            name: "add_mul",
            inputs: Box::new(|r| vec![random_tensor(r, &[2, 5], -1.0, 1.0), random_tensor(r, &[2, 5], -1.0, 1.0)]),
            which: vec![0, 1],
            op: Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                t.mul(s, v[0])
            }),
        },
        OpCase {
            name: "dense",
            inputs: Box::new(|r| {
                vec![
                    random_tensor(r, &[3, 5], -1.0, 1.0),
                    random_tensor(r, &[4, 5], -1.0, 1.0),
                    random_tensor(r, &[4], -1.0, 1.0),
                ]
            }),
            which: vec![0, 1, 2],
            op: Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        },
        OpCase {
            name: "batch_norm.train",
            inputs: Box::new(|r| {
                vec![
                    random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0),
                    random_tensor(r, &[2], 0.5, 1.5),
                    random_tensor(r, &[2], -0.5, 0.5),
                ]
            }),
            which: vec![0, 1, 2],
            op: Box::new(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Train)?.0)),
        },
        OpCase {
            name: "batch_norm.eval",
            inputs: Box::new(|r| {
                vec![
                    random_tensor(r, &[2, 2, 3, 3], -1.0, 1.0),
                    random_tensor(r, &[2], 0.5, 1.5),
                    random_tensor(r, &[2], -0.5, 0.5),
                ]
            }),
            which: vec![0, 1, 2],
            op: Box::new(|t, v| {
                let (mean, var) = ([0.1, -0.2], [0.7, 1.3]);
                Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Eval(&mean, &var))?.0)
            }),
        },
        OpCase {
            name: "concat",
            inputs: Box::new(|r| vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[2, 4], -1.0, 1.0)]),
            which: vec![0, 1],
            op: Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        },
        OpCase {
            name: "global_avg_pool",
            inputs: Box::new(|r| vec![random_tensor(r, &[2, 3, 4, 5], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.global_avg_pool(v[0])),
        },
        OpCase {
            name: "avg_pool2d",
            inputs: Box::new(|r| vec![random_tensor(r, &[1, 2, 6, 6], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.avg_pool2d(v[0], 3)),
        },
        OpCase {
            name: "mean_of",
            inputs: Box::new(|r| vec![random_tensor(r, &[2, 4], -1.0, 1.0), random_tensor(r, &[2, 4], -1.0, 1.0)]),
            which: vec![0, 1],
            op: Box::new(|t, v| t.mean_of(&[v[0], v[1]])),
        },
        OpCase {
            name: "max_of",
            inputs: Box::new(|r| {
                let a = random_tensor(r, &[2, 4], -1.0, 1.0);
                let b = a.map(|x| if (x * 1000.0) as i64 % 2 == 0 { x + 0.3 } else { x - 0.3 });
                vec![a, b]
            }),
            which: vec![0, 1],
            op: Box::new(|t, v| t.max_of(&[v[0], v[1]])),
        },
        OpCase {
            name: "mean_groups",
            inputs: Box::new(|r| vec![random_tensor(r, &[6, 4], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.mean_groups(v[0], 3)),
        },
        OpCase {
            name: "crop",
            inputs: Box::new(|r| vec![random_tensor(r, &[1, 2, 6, 7], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.crop(v[0], 1, 2, 4, 3)),
        },
        OpCase {
            name: "grid_sample",
            inputs: Box::new(|r| vec![random_tensor(r, &[1, 2, 5, 6], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.grid_sample(v[0], &sample_grid(5, 6))),
        },
        OpCase {
            name: "gaussian_blur",
            inputs: Box::new(|r| vec![random_tensor(r, &[1, 2, 7, 6], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| gaussian_blur(t, v[0], 1.0)),
        },
        OpCase {
            name: "dropout",
            inputs: Box::new(|r| vec![random_tensor(r, &[3, 8], -1.0, 1.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(5))),
        },
        OpCase {
            name: "softmax",
            inputs: Box::new(|r| vec![random_tensor(r, &[3, 5], -2.0, 2.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.softmax(v[0])),
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: Box::new(|r| vec![random_tensor(r, &[4, 10], -3.0, 3.0)]),
            which: vec![0],
            op: Box::new(|t, v| t.softmax_cross_entropy(v[0], &[1, 7, 0, 9])),
        },
    ]
}

/// Every registered op in 64-bit against central differences over 20 seeds.
fn op_gradient_cases(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut parts = Vec::new();
        for s in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(s));
            let inputs = (case.inputs)(&mut rng);
            for &which in &case.which {
                let (a, n) = op_gradients(case.op.as_ref(), &inputs, which, &mut rng)?;
                parts.push(OracleReport::compare(case.name, &n, &a, Measure::Rel, 1e-6));
            }
        }
        out.push(OracleReport::merge(&format!("grad.{}.f64", case.name), parts));
    }

    // The 32-bit analytic gradients against 64-bit reference losses.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x32);
    let x = random_tensor(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let reference = |x: &[f64]| conv2d_reference(x, [1, 2, 8, 8], w.data(), [3, 2, 3, 3], 1, 1).0.iter().sum::<f64>();
    out.push(f32_check("grad.conv2d_sum.f32", &x, reference, |t, v| {
        let wv = t.constant(to_f32(&w));
        let y = t.conv2d(v, wv, 1, 1)?;
        Ok(t.sum(y))
    })?);
    let logits = random_tensor(&mut rng, &[4, 10], -3.0, 3.0);
    let targets = [2, 4, 6, 8];
    let reference = |z: &[f64]| {
        z.chunks(10)
            .zip(targets)
            .map(|(row, t)| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
            })
            .sum::<f64>()
            / 4.0
    };
    out.push(f32_check("grad.softmax_cross_entropy.f32", &logits, reference, |t, v| t.softmax_cross_entropy(v, &targets))?);

    // The 64-bit sum-of-conv example on a 1×2×8×8 input.
    let f = |x: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv2d(xv, wv, 1, 1)?;
        let l = t.sum(y);
        Ok(t.value(l).data()[0])
    };
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let wv = t.constant(w.clone());
    let y = t.conv2d(xv, wv, 1, 1)?;
    let l = t.sum(y);
    let g = t.backward(l)?;
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = fd_gradient(&f, &x, &coords, 1e-6)?;
    out.push(OracleReport::compare("grad.conv2d_sum.f64", &numeric, g.get(xv).map(|g| g.data()).unwrap_or(&[]), Measure::Rel, 1e-6));
    Ok(out)
}

/// Analytic 32-bit gradient of `build` against central differences of the
/// 64-bit reference loss with step 1e-3.
fn f32_check(
    case: &str,
    x: &Tensor<f64>,
    reference: impl Fn(&[f64]) -> f64,
    build: impl Fn(&mut Tape<f32>, Var) -> Result<Var>,
) -> Result<OracleReport> {
    let mut t = Tape::new();
    let v = t.leaf(to_f32(x), true);
    let l = build(&mut t, v)?;
    let g = t.backward(l)?;
    let analytic: Vec<f64> = g.get(v).map(|g| g.to_f64_vec()).unwrap_or_default();
    let xs = to_f32(x).to_f64_vec();
    let h = 1e-3;
    let numeric: Vec<f64> = (0..xs.len())
        .map(|i| {
            let mut p = xs.clone();
            p[i] += h;
            let mut m = xs.clone();
            m[i] -= h;
            (reference(&p) - reference(&m)) / (2.0 * h)
        })
        .collect();
    Ok(OracleReport::compare(case, &numeric, &analytic, Measure::Rel, 1e-3))
}

// ---------------------------------------------------------------------------
// sampling

/// Bilinear sample as a tent-kernel sum over every pixel after clamping the
/// coordinate into the image.
pub fn bilinear_reference(plane: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    let r = r.max(0.0).min((h - 1) as f64);
    let c = c.max(0.0).min((w - 1) as f64);
    let mut acc = 0.0;
    for i in 0..h {
        let wr = (1.0 - (r - i as f64).abs()).max(0.0);
        if wr == 0.0 {
            continue;
        }
        for j in 0..w {
            let wc = (1.0 - (c - j as f64).abs()).max(0.0);
            acc += wr * wc * plane[i * w + j];
        }
    }
    acc
}

fn grid_forward(image: &Tensor<f64>, grid: &SamplingGrid) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let y = tape.grid_sample(x, grid)?;
    Ok(tape.value(y).clone())
}

fn sampling_cases(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let img = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])?;
    let half = SamplingGrid::new(1, 1, vec![(0.5, 0.5)])?;
    let y = grid_forward(&img, &half)?;
    out.push(OracleReport::compare("bilinear.half_pixel", &[1.5], y.data(), Measure::Abs, 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1);
    let mut parts = Vec::new();
    for _ in 0..10 {
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let image = random_tensor(&mut rng, &[2, 2, h, w], -1.0, 1.0);
        let (ho, wo) = (rng.random_range(1..6), rng.random_range(1..6));
        let coords: Vec<(f64, f64)> = (0..ho * wo)
            .map(|_| (rng.random_range(-2.0..h as f64 + 1.0), rng.random_range(-2.0..w as f64 + 1.0)))
            .collect();
        let grid = SamplingGrid::new(ho, wo, coords.clone())?;
        let got = grid_forward(&image, &grid)?;
        let want: Vec<f64> = image
            .data()
            .chunks(h * w)
            .flat_map(|plane| coords.iter().map(|&(r, c)| bilinear_reference(plane, h, w, r, c)).collect::<Vec<_>>())
            .collect();
        parts.push(OracleReport::compare("bilinear.tent", &want, got.data(), Measure::Rel, 1e-12));
    }
    out.push(OracleReport::merge("bilinear.tent", parts));
    Ok(out)
}

// ---------------------------------------------------------------------------
// blur

/// Dense 2-D Gaussian stencil of radius `ceil(3σ)`, normalized over the
/// square window, with edge replication.
pub fn gaussian_blur_reference(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let mut norm = 0.0;
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            norm += (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -rad..=rad {
                for dx in -rad..=rad {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let k = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                    acc += k * plane[sy * w + sx];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

fn blur_cases(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let mut impulse = Tensor::<f64>::zeros(&[1, 1, 7, 7]);
    impulse.data_mut()[24] = 1.0;
    let got = blur_tensor(&impulse, 1.0)?;
    let mut want = Vec::with_capacity(49);
    let g1: Vec<f64> = (-3i32..=3).map(|t| (-(t * t) as f64 / 2.0).exp()).collect();
    let s: f64 = g1.iter().sum();
    for a in &g1 {
        for b in &g1 {
            want.push(a * b / (s * s));
        }
    }
    out.push(OracleReport::compare("blur.impulse_outer_product", &want, got.data(), Measure::Rel, 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB2);
    let mut parts = Vec::new();
    for sigma in [0.5, 1.0, 1.5, 2.0, 3.5] {
        let (h, w) = (rng.random_range(4..16), rng.random_range(4..16));
        let image = random_tensor(&mut rng, &[2, 3, h, w], 0.0, 1.0);
        let got = blur_tensor(&image, sigma)?;
        let want: Vec<f64> = image.data().chunks(h * w).flat_map(|p| gaussian_blur_reference(p, h, w, sigma)).collect();
        parts.push(OracleReport::compare("blur.dense", &want, got.data(), Measure::Rel, 1e-12));
    }
    out.push(OracleReport::merge("blur.dense", parts));
    Ok(out)
}

// ---------------------------------------------------------------------------
// warp

fn warp_cases() -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let big_r = 226.27;
    let k = 1e-6;
    let got = radial_warp(big_r / 2.0, big_r, k)?;
    out.push(OracleReport::compare("warp.identity_limit", &[big_r / 2.0], &[got], Measure::Abs, 1e-4 * big_r));

    // Second-order expansion of R·expm1(k r/R)/expm1(k) in k.
    let mut want = Vec::new();
    let mut have = Vec::new();
    for i in 0..=20 {
        let r = big_r * i as f64 / 20.0;
        want.push(r + k * r * (r - big_r) / (2.0 * big_r));
        have.push(radial_warp(r, big_r, k)?);
    }
    out.push(OracleReport::compare("warp.series_first_order", &want, &have, Measure::Abs, 1e-9 * big_r));

    // Slope at the fovea and at the rim: k/(e^k−1) and k·e^k/(e^k−1).
    let k: f64 = 2.5;
    let big_r = 160.0 * std::f64::consts::SQRT_2;
    let e = k.exp();
    let h = 1e-4;
    let slope0 = (radial_warp(h, big_r, k)? - radial_warp(0.0, big_r, k)?) / h;
    let slope_r = (radial_warp(big_r, big_r, k)? - radial_warp(big_r - h, big_r, k)?) / h;
    let mut r = OracleReport::compare("warp.slopes", &[k / (e - 1.0), k * e / (e - 1.0)], &[slope0, slope_r], Measure::Rel, 1e-5);
    let step0 = radial_warp(1.0, big_r, k)? - radial_warp(0.0, big_r, k)?;
    let step_r = radial_warp(big_r, big_r, k)? - radial_warp(big_r - 1.0, big_r, k)?;
    r.pass &= step0 < 1.0 && step_r > 1.0;
    out.push(r);
    Ok(out)
}

// ---------------------------------------------------------------------------
// L1 projection

/// Euclidean projection onto `{x : ‖x‖₁ ≤ eps}` by enumerating every face.
///
/// A face is a sign pattern `s ∈ {−1,0,1}ⁿ`; on it the problem is
/// `min ½‖x−v‖²` subject to `Σ sᵢxᵢ = eps` and `xᵢ = 0` off the support,
/// whose stationary point is `xᵢ = vᵢ − λsᵢ` with
/// `λ = (Σ sᵢvᵢ − eps)/|support|`. Points that leave their orthant are
/// discarded and the feasible candidate closest to `v` wins.
pub fn l1_projection_reference(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len();
    assert!(n <= 12, "face enumeration is exponential");
    if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
        return v.to_vec();
    }
    let mut best = vec![0.0; n];
    let mut best_cost: f64 = v.iter().map(|x| x * x).sum::<f64>() / 2.0;
    if eps == 0.0 {
        return best;
    }
    let total = 3usize.pow(n as u32);
    let mut signs = vec![0i8; n];
    for code in 1..total {
        let mut c = code;
        for s in signs.iter_mut() {
            *s = (c % 3) as i8 - 1;
            c /= 3;
        }
        let support = signs.iter().filter(|&&s| s != 0).count();
        if support == 0 {
            continue;
        }
        let dot: f64 = signs.iter().zip(v).map(|(&s, &x)| s as f64 * x).sum();
        let lambda = (dot - eps) / support as f64;
        let x: Vec<f64> = signs.iter().zip(v).map(|(&s, &vi)| if s == 0 { 0.0 } else { vi - lambda * s as f64 }).collect();
        if signs.iter().zip(&x).any(|(&s, &xi)| s as f64 * xi < 0.0) {
            continue;
        }
        let cost: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
        if cost < best_cost {
            best_cost = cost;
            best = x;
        }
    }
    best
}

/// Random 10-dimensional vectors projected onto random L1 balls.
pub fn l1_projection_case(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut parts = Vec::new();
    let fixed = Tensor::new(&[2], vec![2.0, 1.0])?;
    let got = attacks::project(&fixed, 1.0, Metric::L1);
    parts.push(OracleReport::compare("l1", &l1_projection_reference(&[2.0, 1.0], 1.0), got.data(), Measure::Abs, 1e-6));
    for _ in 0..cases {
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x.abs()).sum();
        let eps = norm * rng.random_range(0.05..1.2);
        let got = attacks::project(&Tensor::new(&[10], v.clone())?, eps, Metric::L1);
        parts.push(OracleReport::compare("l1", &l1_projection_reference(&v, eps), got.data(), Measure::Abs, 1e-6));
    }
    Ok(OracleReport::merge("l1_projection.qp", parts))
}

// ---------------------------------------------------------------------------
// linear PGD

/// Binary linear models `logit₁ − logit₀ = w·x + b` whose worst case inside
/// the budget is still correctly classified, so PGD runs all five steps and
/// must land on `clip(x − ε·sign(w)·label_sign)`.
fn linear_pgd_case(seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9D);
    let mut parts = Vec::new();
    for trial in 0..10 {
        let d = 12;
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let eps = rng.random_range(0.01..0.2);
        let label = trial % 2;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let worst: Vec<f64> = x
            .iter()
            .zip(&w)
            .map(|(&xi, &wi)| (xi - eps * wi.signum() * sign).clamp(0.0, 1.0))
            .collect();
        let dot = |z: &[f64]| z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let b = -dot(&worst) + sign * rng.random_range(0.5..1.5);
        let mut weight = vec![0.0; d];
        weight.extend_from_slice(&w);
        let model = LinearModel::new(Tensor::new(&[2, d], weight)?, Tensor::new(&[2], vec![0.0, b])?)?;
        let cfg = AttackConfig::pgd_linf(eps);
        let xt = Tensor::new(&[1, 1, 1, d], x.clone())?;
        let res = attacks::pgd(&model, &xt, label, &cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
        let want_logits = [0.0, dot(&worst) + b];
        let linf = x.iter().zip(&worst).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let mut r = OracleReport::compare(
            "linear_pgd",
            &[want_logits[0], want_logits[1], linf],
            &[res.logits.data()[0], res.logits.data()[1], res.distances.linf],
            Measure::Abs,
            1e-9,
        );
        r.pass &= !res.success && 5.0 * cfg.step_size() >= eps;
        parts.push(r);
    }
    Ok(OracleReport::merge("pgd.linear_closed_form", parts))
}

// ---------------------------------------------------------------------------
// binomial statistics

/// `P(|X − np| ≤ band)` for `X ~ Binomial(n, p)` by a direct log-space sum.
pub fn binomial_band_mass(n: u64, p: f64, band: f64) -> f64 {
    let mean = n as f64 * p;
    let mut ln_fact = vec![0.0f64; n as usize + 1];
    for i in 1..=n as usize {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    (0..=n)
        .filter(|&k| (k as f64 - mean).abs() <= band)
        .map(|k| {
            let (k, n) = (k as usize, n as usize);
            (ln_fact[n] - ln_fact[k] - ln_fact[n - k] + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
        })
        .sum()
}

fn binomial_cases(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1000]));
    let y = tape.dropout(x, 0.75, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let vals = tape.value(y).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64;
    let survivor = vals.iter().copied().find(|&v| v != 0.0).unwrap_or(0.0);
    let mut r = OracleReport::compare("dropout.zero_count", &[750.0], &[zeros], Measure::Abs, 50.0);
    r.pass &= binomial_band_mass(1000, 0.75, 50.0) > 0.999;
    out.push(r);
    out.push(OracleReport::compare("dropout.survivor_scale", &[4.0], &[survivor], Measure::Abs, 1e-12));

    let n = 10_000;
    let pair = Tensor::from_fn(&[n, 1, 1, 2], |i| (i % 2) as f64);
    let cfg = AugmentationConfig { pad: 0, flip_prob: 0.5 };
    let flipped = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xF1))?;
    let flips = flipped.data().chunks(2).filter(|c| c[0] == 1.0).count() as f64;
    let mut r = OracleReport::compare("augment.flip_count", &[5000.0], &[flips], Measure::Abs, 150.0);
    r.pass &= binomial_band_mass(n as u64, 0.5, 150.0) > 0.99;
    out.push(r);
    Ok(out)
}

// ---------------------------------------------------------------------------
// end-to-end gradients

/// Input gradient of the evaluation-mode cross-entropy of a freshly built
/// network against central differences at `coords` random input positions.
pub fn network_gradient_check(net: &Network<f64>, x: &Tensor<f64>, label: usize, coords: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let loss = |x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let p = net.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = net.predict_fixation_ensemble(&mut tape, &p, xv)?;
        let l = tape.softmax_cross_entropy(logits, &[label])?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let p = net.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let logits = net.predict_fixation_ensemble(&mut tape, &p, xv)?;
    let l = tape.softmax_cross_entropy(logits, &[label])?;
    let grads = tape.backward(l)?;
    let g = grads.get(xv).ok_or_else(|| Error::shape("input gradient missing"))?;
    let picked: Vec<usize> = if coords >= x.len() {
        (0..x.len()).collect()
    } else {
        rand::seq::index::sample(rng, x.len(), coords).into_vec()
    };
    let analytic: Vec<f64> = picked.iter().map(|&i| g.data()[i]).collect();
    let numeric = fd_gradient(&loss, x, &picked, 1e-6)?;
    Ok((analytic, numeric))
}

/// A small network with randomized normalization statistics so every layer
/// is a non-trivial affine map.
fn gradient_network(family: Family, side: usize, seed: u64) -> Result<Network<f64>> {
    let spec = ModelSpec::new(family, side, 10, BackboneSpec::desk(4, side));
    let mut net = Network::<f64>::build(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    for p in net.params_mut().iter_mut() {
        let range = if p.name.ends_with("running_mean") || p.name.ends_with("beta") {
            -0.2..0.2
        } else if p.name.ends_with("running_var") {
            0.5..2.0
        } else if p.name.ends_with("gamma") {
            0.5..1.5
        } else {
            continue;
        };
        for v in p.value.data_mut() {
            *v = rng.random_range(range.clone());
        }
    }
    Ok(net)
}

/// Retinal, cortical and combined networks at sides 16–32, 64-bit, each
/// checked at 64 random input coordinates with tolerance 1e-6.
pub fn end_to_end_gradient_cases(seed: u64, count: usize) -> Result<Vec<OracleReport>> {
    const FAMILIES: [Family; 3] = [Family::Retinal, Family::Cortical, Family::CombinedRetinalCortical];
    const SIDES: [usize; 5] = [16, 20, 24, 28, 32];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let family = FAMILIES[i % FAMILIES.len()];
        let side = SIDES[(i / FAMILIES.len() + i) % SIDES.len()];
        let case_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let net = gradient_network(family, side, case_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let x = random_tensor(&mut rng, &[1, 3, side, side], 0.0, 1.0);
        let label = rng.random_range(0..10);
        let (a, n) = network_gradient_check(&net, &x, label, 64, &mut rng)?;
        out.push(OracleReport::compare(format!("grad.end_to_end.{}.{side}", family.name()), &n, &a, Measure::Rel, 1e-6));
    }
    Ok(out)
}

/// Retinal warp into a small convnet and cross-entropy on a 1×3×16×16 input,
/// every coordinate checked.
fn pipeline_gradient_case(seed: u64) -> Result<OracleReport> {
    let net = gradient_network(Family::Retinal, 16, seed ^ 0x16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x16);
    let x = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let (a, n) = network_gradient_check(&net, &x, 3, usize::MAX, &mut rng)?;
    Ok(OracleReport::compare("grad.retinal_pipeline_16", &n, &a, Measure::Rel, 1e-3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_conv_identity_kernel() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (y, shape) = conv2d_reference(&x, [1, 1, 4, 4], &[1.0], [1, 1, 1, 1], 1, 0);
        assert_eq!(shape, [1, 1, 4, 4]);
        assert_eq!(y, x);
    }

    #[test]
    fn l1_reference_examples() {
        assert_eq!(l1_projection_reference(&[2.0, 1.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(l1_projection_reference(&[0.2, -0.1], 1.0), vec![0.2, -0.1]);
        let p = l1_projection_reference(&[1.0, -1.0, 0.5], 1.0);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] + 0.5).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn tent_bilinear_matches_hand_formula() {
        let plane = [0.0, 1.0, 2.0, 3.0];
        assert!((bilinear_reference(&plane, 2, 2, 0.5, 0.5) - 1.5).abs() < 1e-15);
        assert_eq!(bilinear_reference(&plane, 2, 2, -5.0, -5.0), 0.0);
        assert_eq!(bilinear_reference(&plane, 2, 2, 9.0, 9.0), 3.0);
    }

    #[test]
    fn binomial_band_mass_is_a_probability() {
        let all = binomial_band_mass(20, 0.3, 100.0);
        assert!((all - 1.0).abs() < 1e-12);
        let exact: f64 = (0..=20u64)
            .filter(|&k| (k as f64 - 6.0).abs() <= 2.0)
            .map(|k| {
                let c = (0..k).fold(1.0, |acc, i| acc * (20 - i) as f64 / (i + 1) as f64);
                c * 0.3f64.powi(k as i32) * 0.7f64.powi(20 - k as i32)
            })
            .sum();
        assert!((binomial_band_mass(20, 0.3, 2.0) - exact).abs() < 1e-12);
    }

    #[test]
    fn report_pass_follows_tolerance() {
        assert!(OracleReport::compare("a", &[1.0, 2.0], &[1.0, 2.0 + 1e-9], Measure::Abs, 1e-8).pass);
        assert!(!OracleReport::compare("a", &[1.0, 2.0], &[1.0, 2.1], Measure::Rel, 1e-3).pass);
        assert!(!OracleReport::compare("a", &[1.0], &[f64::NAN], Measure::Abs, 1.0).pass);
        assert!(!OracleReport::compare("a", &[1.0], &[1.0, 2.0], Measure::Abs, 1.0).pass);
    }

    #[test]
    fn small_cases_pass() {
        for r in convolution_cases(3).unwrap().into_iter().chain(sampling_cases(3).unwrap()).chain(blur_cases(3).unwrap()) {
            assert!(r.pass, "{r:?}");
        }
        for r in warp_cases().unwrap() {
            assert!(r.pass, "{r:?}");
        }
        assert!(l1_projection_case(3, 20).unwrap().pass);
        assert!(linear_pgd_case(3).unwrap().pass);
        for r in binomial_cases(3).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn op_gradients_pass() {
        for r in op_gradient_cases(11).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn end_to_end_gradients_pass() {
        for r in end_to_end_gradient_cases(2, 3).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }
}
