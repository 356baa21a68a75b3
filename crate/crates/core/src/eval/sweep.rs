use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{robust_accuracy, RobustnessCurve};
use crate::attacks::{run_attack, Algorithm, AttackConfig, AttackModel, Criterion, Metric};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::argmax;

/// One `(image, attack, ε)` outcome, streamed as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub model: String,
    pub attack_id: String,
    pub image_id: usize,
    pub eps: f64,
    pub algo: Algorithm,
    pub metric: Metric,
    pub iters: usize,
    pub step_const: f64,
    pub criterion: Criterion,
    /// Top-1 natural correctness, independent of the attack criterion.
    pub nat_correct: bool,
    pub success: bool,
    /// Distance of the adversarial example in the attack metric.
    pub distance: Option<f64>,
    pub iters_used: usize,
    /// Success taken over from a smaller ε of the same attack.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub carried: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub model_id: String,
    /// Attack templates; their `eps` is replaced by each grid value.
    pub attacks: Vec<AttackConfig>,
    pub eps_grid: Vec<f64>,
    pub seed: u64,
    /// JSON-lines destination for per-image records.
    pub records_path: Option<PathBuf>,
    /// Keep complete images already in `records_path` instead of starting over.
    pub resume: bool,
    /// Images attacked per parallel batch between flushes.
    pub chunk: usize,
}

impl SweepOptions {
    pub fn new(model_id: impl Into<String>, attacks: Vec<AttackConfig>, eps_grid: Vec<f64>, seed: u64) -> Self {
        Self { model_id: model_id.into(), attacks, eps_grid, seed, records_path: None, resume: false, chunk: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub curves: Vec<RobustnessCurve>,
    /// Records ordered by image, then attack, then ε.
    pub records: Vec<AttackRecord>,
    pub natural_accuracy: f64,
    /// Records whose attack raised an error.
    pub errors: usize,
}

fn effective_metric(cfg: &AttackConfig) -> Metric {
    if cfg.algorithm == Algorithm::Fgsm {
        Metric::Linf
    } else {
        cfg.metric
    }
}

fn stream_seed(seed: u64, attack_id: &str, eps: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(attack_id.as_bytes());
    h.update(eps.to_bits().to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::config("empty eps grid"));
    }
    if let Some(e) = grid.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::config(format!("invalid eps {e} in grid")));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

fn natural_predictions<M: AttackModel<f32> + Sync + ?Sized>(model: &M, ds: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts = idx
        .par_chunks(32)
        .map(|c| {
            let (x, _) = ds.batch(c)?;
            let logits = model.logits(&x)?;
            let k = logits.shape()[1];
            Ok(logits.data().chunks(k).map(argmax).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

#[allow(clippy::too_many_arguments)]
fn attack_image<M: AttackModel<f32> + Sync + ?Sized>(
    model: &M,
    source: Option<&(dyn AttackModel<f32> + Sync)>,
    ds: &Dataset,
    image_id: usize,
    nat_correct: bool,
    source_correct: bool,
    grid: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<AttackRecord>> {
    let (x, labels) = ds.batch(&[image_id])?;
    let label = labels[0];
    let mut out = Vec::with_capacity(opts.attacks.len() * grid.len());
    for atk in &opts.attacks {
        let id = atk.id();
        let metric = effective_metric(atk);
        let mut carried: Option<f64> = None;
        for &eps in grid {
            let mut rec = AttackRecord {
                model: opts.model_id.clone(),
                attack_id: id.clone(),
                image_id,
                eps,
                algo: atk.algorithm,
                metric: atk.metric,
                iters: atk.iterations,
                step_const: atk.step_const,
                criterion: atk.criterion,
                nat_correct,
                success: false,
                distance: None,
                iters_used: 0,
                carried: false,
                error: None,
            };
            let skip_transfer = atk.algorithm == Algorithm::Transfer && !source_correct;
            if !nat_correct || skip_transfer {
                out.push(rec);
                continue;
            }
            if let Some(d) = carried.filter(|d| *d <= eps + 1e-6) {
                rec.success = true;
                rec.distance = Some(d);
                rec.carried = true;
                out.push(rec);
                continue;
            }
            let cfg = atk.with_eps(eps);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, &id, eps));
            rng.set_stream(image_id as u64);
            let src = source.map(|s| s as &dyn AttackModel<f32>);
            match run_attack(model, src, &x, label, &cfg, &mut rng) {
                Ok(r) => {
                    rec.success = r.success;
                    rec.iters_used = r.iters_used;
                    if r.success {
                        let d = r.distances.get(metric);
                        rec.distance = Some(d);
                        carried = Some(d);
                    }
                }
                Err(e @ (Error::Config(_) | Error::Shape(_))) => return Err(e),
                Err(e) => {
                    warn!("{} image {image_id} {id} eps {eps}: {e}", opts.model_id);
                    rec.error = Some(e.to_string());
                }
            }
            out.push(rec);
        }
    }
    Ok(out)
}

/// Existing records grouped by image, keeping only images whose record set
/// is complete.
fn load_complete(path: &PathBuf, opts: &SweepOptions, grid: &[f64]) -> Result<BTreeMap<usize, Vec<AttackRecord>>> {
    let mut by_image: BTreeMap<usize, Vec<AttackRecord>> = BTreeMap::new();
    if !path.exists() {
        return Ok(by_image);
    }
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        match serde_json::from_str::<AttackRecord>(&line) {
            Ok(r) if r.model == opts.model_id => by_image.entry(r.image_id).or_default().push(r),
            Ok(_) => {}
            Err(_) => warn!("ignoring unreadable record line in {}", path.display()),
        }
    }
    let want: HashSet<(String, u64)> = opts
        .attacks
        .iter()
        .flat_map(|a| grid.iter().map(move |e| (a.id(), e.to_bits())))
        .collect();
    by_image.retain(|_, recs| {
        let have: HashSet<(String, u64)> = recs.iter().map(|r| (r.attack_id.clone(), r.eps.to_bits())).collect();
        have == want && recs.len() == want.len()
    });
    for recs in by_image.values_mut() {
        let order = |r: &AttackRecord| {
            let a = opts.attacks.iter().position(|a| a.id() == r.attack_id).unwrap_or(usize::MAX);
            let e = grid.iter().position(|e| e.to_bits() == r.eps.to_bits()).unwrap_or(usize::MAX);
            (a, e)
        };
        recs.sort_by_key(order);
    }
    Ok(by_image)
}

fn write_records(w: &mut impl Write, recs: &[AttackRecord]) -> Result<()> {
    for r in recs {
        serde_json::to_writer(&mut *w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Natural top-1 pass, then every attack at every ε on the naturally
/// correct images. A success at one ε is carried to the larger budgets of
/// the same attack, so every curve is non-increasing in ε.
pub fn epsilon_sweep<M: AttackModel<f32> + Sync + ?Sized>(
    model: &M,
    source: Option<&(dyn AttackModel<f32> + Sync)>,
    ds: &Dataset,
    opts: &SweepOptions,
) -> Result<SweepOutput> {
    let grid = sorted_grid(&opts.eps_grid)?;
    for a in &opts.attacks {
        a.validate()?;
        if a.algorithm == Algorithm::Transfer && source.is_none() {
            return Err(Error::config("transfer attack configured without a source model"));
        }
    }
    if ds.is_empty() {
        return Err(Error::Counts("cannot sweep an empty dataset".into()));
    }
    let preds = natural_predictions(model, ds)?;
    let nat: Vec<bool> = preds.iter().zip(&ds.labels).map(|(p, l)| p == l).collect();
    let src_nat: Vec<bool> = match source {
        Some(s) => natural_predictions(s, ds)?.iter().zip(&ds.labels).map(|(p, l)| p == l).collect(),
        None => vec![true; ds.len()],
    };
    let natural_accuracy = robust_accuracy(ds.len(), nat.iter().filter(|c| !**c).count(), 0)?;
    info!("{}: natural accuracy {natural_accuracy:.4} on {} images", opts.model_id, ds.len());

    let mut done = match (&opts.records_path, opts.resume) {
        (Some(p), true) => load_complete(p, opts, &grid)?,
        _ => BTreeMap::new(),
    };
    done.retain(|&i, _| i < ds.len());
    let mut sink = match &opts.records_path {
        Some(p) => {
            let mut w = BufWriter::new(OpenOptions::new().create(true).write(true).truncate(true).open(p)?);
            for recs in done.values() {
                write_records(&mut w, recs)?;
            }
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    if !done.is_empty() {
        info!("{}: resuming with {} images already complete", opts.model_id, done.len());
    }
    let todo: Vec<usize> = (0..ds.len()).filter(|i| !done.contains_key(i)).collect();
    for chunk in todo.chunks(opts.chunk.max(1)) {
        let results = chunk
            .par_iter()
            .map(|&i| attack_image(model, source, ds, i, nat[i], src_nat[i], &grid, opts))
            .collect::<Result<Vec<_>>>()?;
        for (&i, recs) in chunk.iter().zip(results) {
            if let Some(w) = sink.as_mut() {
                write_records(w, &recs)?;
            }
            done.insert(i, recs);
        }
        if let Some(w) = sink.as_mut() {
            w.flush()?;
        }
    }

    let records: Vec<AttackRecord> = done.into_values().flatten().collect();
    for r in &records {
        if r.nat_correct != nat[r.image_id] {
            return Err(Error::Counts(format!("stored natural flag of image {} disagrees with the model", r.image_id)));
        }
    }
    let nat_mis = nat.iter().filter(|c| !**c).count();
    let mut curves = Vec::with_capacity(opts.attacks.len());
    for a in &opts.attacks {
        let id = a.id();
        let mut points = Vec::with_capacity(grid.len());
        for &eps in &grid {
            let adv = records
                .iter()
                .filter(|r| r.attack_id == id && r.eps.to_bits() == eps.to_bits() && r.success)
                .count();
            points.push((eps, robust_accuracy(ds.len(), nat_mis, adv)?));
        }
        curves.push(RobustnessCurve { model: opts.model_id.clone(), attack_id: id, points });
    }
    let errors = records.iter().filter(|r| r.error.is_some()).count();
    Ok(SweepOutput { curves, records, natural_accuracy, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::LinearModel;
    use crate::data::Split;
    use crate::tensor::Tensor;

    /// Class 1 iff mean pixel > 0.5; images at mean 0.1..0.9.
    fn setup() -> (LinearModel<f32>, Dataset) {
        let d = 4;
        let w = Tensor::new(&[2, d], vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap();
        let m = LinearModel::new(w, Tensor::new(&[2], vec![0.0, -0.5]).unwrap()).unwrap();
        let levels = [0.1f32, 0.3, 0.45, 0.49, 0.55, 0.7, 0.9, 0.2];
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let data: Vec<f32> = levels.iter().flat_map(|&v| [v; 4]).collect();
        let ds = Dataset::new(Tensor::new(&[8, 1, 2, 2], data).unwrap(), labels, vec!["a".into(), "b".into()], Split::Test)
            .unwrap();
        (m, ds)
    }

    #[test]
    fn sweep_filters_and_counts() {
        let (m, ds) = setup();
        let opts = SweepOptions::new("lin", vec![AttackConfig::pgd_linf(0.0)], vec![0.5, 0.0, 0.01, 0.1], 1);
        let out = epsilon_sweep(&m, None, &ds, &opts).unwrap();
        // image 7 (0.2, labelled 1) is naturally wrong
        assert_eq!(out.natural_accuracy, 7.0 / 8.0);
        let c = &out.curves[0];
        assert_eq!(c.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.0, 0.01, 0.1, 0.5]);
        assert_eq!(c.points[0].1, out.natural_accuracy);
        assert!(c.points.windows(2).all(|w| w[1].1 <= w[0].1));
        // margins 0.4 0.2 0.05 0.01 0.05 0.2 0.4: eps 0.01 breaks none strictly, 0.1 breaks 3, 0.5 all
        assert_eq!(c.points[2].1, 1.0 - 4.0 / 8.0);
        assert_eq!(c.points[3].1, 0.0);
        assert!(out.records.iter().filter(|r| !r.nat_correct).all(|r| !r.success && r.iters_used == 0));
        assert!(out.records.iter().any(|r| r.carried));
    }

    #[test]
    fn resume_reproduces_records() {
        let (m, ds) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut opts = SweepOptions::new("lin", vec![AttackConfig::pgd_linf(0.0)], vec![0.01, 0.1], 1);
        opts.records_path = Some(path.clone());
        opts.chunk = 3;
        let full = epsilon_sweep(&m, None, &ds, &opts).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // cut the file mid-way through a line
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        opts.resume = true;
        let again = epsilon_sweep(&m, None, &ds, &opts).unwrap();
        assert_eq!(again.curves, full.curves);
        assert_eq!(again.records, full.records);
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn transfer_needs_source() {
        let (m, ds) = setup();
        let a = AttackConfig { algorithm: Algorithm::Transfer, ..AttackConfig::pgd_linf(0.0) };
        assert!(epsilon_sweep(&m, None, &ds, &SweepOptions::new("lin", vec![a], vec![0.1], 1)).is_err());
    }
}
