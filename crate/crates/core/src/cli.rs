//! Subcommands behind the `fixlab` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::attacks::AttackModel;
use crate::checkpoint;
use crate::oracles;
use crate::config::RunConfig;
use crate::data::{read_image, resize_and_center_crop, write_image, RgbImage, Split};
use crate::error::{Error, Result};
use crate::eval::{emit_reports, epsilon_sweep, improvement_over_best_baseline, RobustnessCurve, SweepOptions};
use crate::retinal::FixationPoint;
use crate::train::{train, write_metrics_csv};
use crate::zoo::{Family, ModelSpec, Network};

#[derive(Debug, Parser)]
#[command(name = "fixlab", version, about = "Fixation-based sampling models and adversarial robustness sweeps")]
pub struct Cli {
    /// Worker threads for data loading and attacks (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every model family listed in the config.
    Train(RunArgs),
    /// Attack trained models over the ε grid and write curves.
    Sweep(RunArgs),
    /// Train (when missing) and sweep the baselines plus every ablation variant.
    Ablate(RunArgs),
    /// Write the inputs a sampling mechanism produces for one image.
    WarpPreview(WarpArgs),
    /// Rebuild charts and deltas from a curves CSV.
    Report(ReportArgs),
    /// Check the implementation against brute-force reference computations.
    Oracles(OracleArgs),
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-lines report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Keep completed per-image attack records from an interrupted sweep.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Model family whose mechanism is previewed.
    #[arg(long, default_value = "retinal")]
    pub family: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Side the image is resized and center-cropped to.
    #[arg(long, default_value_t = 128)]
    pub side: usize,
    /// 5 for the evaluation fixations, 1 for the center only.
    #[arg(long, default_value_t = 5)]
    pub fixations: usize,
    #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding `curves.csv`; reports are rewritten in place.
    #[arg(long)]
    pub out: PathBuf,
    /// Config supplying baselines and delta budgets.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Exit status: 0 success, 2 configuration error, 3 runtime failure.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

#[derive(Debug, Serialize)]
struct ResolvedAttack {
    id: String,
    eps: f64,
    step_const: f64,
    step_size: f64,
}

#[derive(Debug, Serialize)]
struct ModelManifest {
    family: Family,
    max_offset: usize,
    eval_fixations: Vec<FixationPoint>,
    checkpoint: String,
    checkpoint_sha256: Option<String>,
    spec: ModelSpec,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    eps_grid: Vec<f64>,
    attacks: Vec<ResolvedAttack>,
    models: Vec<ModelManifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<serde_json::Value>,
    config: &'a RunConfig,
}

/// Config after command-line overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(s) = args.seed_override {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cfg: &RunConfig, family: Family) -> PathBuf {
    cfg.out.join("models").join(format!("{family}.fvrb"))
}

fn resolved_attacks(cfg: &RunConfig) -> Vec<ResolvedAttack> {
    let grid = cfg.eps_grid();
    cfg.attack_templates()
        .iter()
        .flat_map(|t| {
            grid.iter().map(move |&eps| {
                let a = t.at(eps);
                ResolvedAttack { id: a.id(), eps, step_const: a.step_const, step_size: a.step_size() }
            })
        })
        .collect()
}

fn model_manifest(cfg: &RunConfig, spec: &ModelSpec) -> Result<ModelManifest> {
    let path = checkpoint_path(cfg, spec.family);
    let checkpoint_sha256 = match std::fs::read(&path) {
        Ok(b) => Some(checkpoint::sha256_hex(&b)),
        Err(_) => None,
    };
    Ok(ModelManifest {
        family: spec.family,
        max_offset: spec.max_offset(),
        eval_fixations: spec.eval_fixations(),
        checkpoint: path.display().to_string(),
        checkpoint_sha256,
        spec: spec.clone(),
    })
}

fn write_manifest(path: &Path, m: &Manifest<'_>) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn manifest<'a>(command: &'a str, cfg: &'a RunConfig, models: Vec<ModelManifest>) -> Manifest<'a> {
    Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        eps_grid: cfg.eps_grid(),
        attacks: resolved_attacks(cfg),
        models,
        metrics: None,
        config: cfg,
    }
}

fn train_family(cfg: &RunConfig, family: Family, train_set: &crate::data::Dataset, test_set: &crate::data::Dataset) -> Result<()> {
    let spec = cfg.model_spec(family, train_set.classes.len())?;
    let mut net = Network::<f32>::build(&spec, cfg.seed)?;
    info!("training {family} ({} parameters) on {} images", net.param_count(), train_set.len());
    let metrics = train(&mut net, train_set, Some(test_set), &cfg.train.optimizer, &cfg.train.augment, cfg.seed.wrapping_add(1))?;
    let dir = cfg.out.join("models");
    std::fs::create_dir_all(&dir)?;
    checkpoint::save(net.params(), &checkpoint_path(cfg, family))?;
    write_metrics_csv(&metrics, &dir.join(format!("{family}.metrics.csv")))?;
    let acc = metrics.last().and_then(|m| m.eval_acc).unwrap_or(f64::NAN);
    info!("{family}: test accuracy {acc:.4}");
    let mut m = manifest("train", cfg, vec![model_manifest(cfg, &spec)?]);
    m.metrics = Some(serde_json::json!({ "test_accuracy": acc, "epochs": metrics.len() }));
    write_manifest(&dir.join(format!("{family}.manifest.json")), &m)
}

/// Trains each configured family and writes checkpoint, metrics and manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_set = cfg.load_split(Split::Train)?;
    let test_set = cfg.load_split(Split::Test)?;
    for &family in &cfg.model.families {
        train_family(cfg, family, &train_set, &test_set)?;
    }
    Ok(())
}

pub fn load_network(cfg: &RunConfig, family: Family, classes: usize) -> Result<Network<f32>> {
    let path = checkpoint_path(cfg, family);
    if !path.exists() {
        return Err(Error::config(format!("missing checkpoint {} (run `fixlab train` first)", path.display())));
    }
    let mut net = Network::<f32>::build(&cfg.model_spec(family, classes)?, cfg.seed)?;
    checkpoint::load_into(net.params_mut(), &path)?;
    Ok(net)
}

/// Outcome of a sweep over several families.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub curves: Vec<RobustnessCurve>,
    pub natural_accuracy: Vec<(Family, f64)>,
    /// Attacks that failed with a model error.
    pub errors: usize,
}

fn sweep_families(cfg: &RunConfig, families: &[Family], subdir: &str, resume: bool) -> Result<SweepSummary> {
    let test_set = cfg.load_split(Split::Test)?;
    let classes = test_set.classes.len();
    let attacks: Vec<_> = cfg.attack_templates().iter().map(|t| t.at(0.0)).collect();
    let needs_source = attacks.iter().any(|a| a.algorithm == crate::attacks::Algorithm::Transfer);
    let source = if needs_source { Some(load_network(cfg, cfg.transfer_source(), classes)?) } else { None };
    let nets = families.iter().map(|&f| load_network(cfg, f, classes)).collect::<Result<Vec<_>>>()?;
    let dir = cfg.out.join(subdir);
    std::fs::create_dir_all(dir.join("records"))?;
    let mut curves = Vec::new();
    let mut natural_accuracy = Vec::new();
    let mut errors = 0;
    for (net, &family) in nets.iter().zip(families) {
        let mut opts = SweepOptions::new(family.name(), attacks.clone(), cfg.eps_grid(), cfg.seed);
        opts.records_path = Some(dir.join("records").join(format!("{family}.jsonl")));
        opts.resume = resume;
        info!("sweeping {family} on {} test images", test_set.len());
        let src = source.as_ref().map(|s| s as &(dyn AttackModel<f32> + Sync));
        let out = epsilon_sweep(net, src, &test_set, &opts)?;
        errors += out.errors;
        natural_accuracy.push((family, out.natural_accuracy));
        curves.extend(out.curves);
    }
    let baselines = cfg.baselines();
    let base_names: Vec<&str> = baselines.iter().map(|f| f.name()).collect();
    let grid = cfg.eps_grid();
    let delta_eps: Vec<f64> =
        cfg.delta_eps().into_iter().filter(|e| grid.iter().any(|g| (g - e).abs() <= 1e-12)).collect();
    let have_baselines = baselines.iter().all(|b| families.contains(b));
    let deltas = if have_baselines && !delta_eps.is_empty() {
        improvement_over_best_baseline(&curves, &base_names, &delta_eps)?
    } else {
        Vec::new()
    };
    emit_reports(&curves, &deltas, &dir)?;
    let models = nets.iter().map(|n| model_manifest(cfg, n.spec())).collect::<Result<Vec<_>>>()?;
    let mut m = manifest(subdir, cfg, models);
    m.metrics = Some(serde_json::json!({
        "natural_accuracy": natural_accuracy.iter().map(|(f, a)| (f.name(), a)).collect::<std::collections::BTreeMap<_, _>>(),
        "attack_errors": errors,
    }));
    write_manifest(&dir.join("manifest.json"), &m)?;
    Ok(SweepSummary { curves, natural_accuracy, errors })
}

/// Sweeps every configured family; fails when a checkpoint is missing.
pub fn cmd_sweep(cfg: &RunConfig, resume: bool) -> Result<SweepSummary> {
    sweep_families(cfg, &cfg.model.families, "sweep", resume)
}

/// Baselines followed by every ablation variant.
pub fn ablation_families(cfg: &RunConfig) -> Vec<Family> {
    let mut fams = cfg.baselines();
    for f in Family::ABLATIONS {
        if !fams.contains(&f) {
            fams.push(f);
        }
    }
    fams
}

pub fn cmd_ablate(cfg: &RunConfig, resume: bool) -> Result<SweepSummary> {
    let fams = ablation_families(cfg);
    let missing: Vec<Family> = fams.iter().copied().filter(|&f| !checkpoint_path(cfg, f).exists()).collect();
    if !missing.is_empty() {
        let train_set = cfg.load_split(Split::Train)?;
        let test_set = cfg.load_split(Split::Test)?;
        for f in missing {
            train_family(cfg, f, &train_set, &test_set)?;
        }
    }
    sweep_families(cfg, &fams, "ablate", resume)
}

/// Writes one image per (fixation, branch view); returns the paths.
pub fn cmd_warp_preview(args: &WarpArgs) -> Result<Vec<PathBuf>> {
    let family: Family = args.family.parse()?;
    if family.fixation_free() {
        return Err(Error::config(format!("{family} has no sampling mechanism to preview")));
    }
    if !matches!(args.fixations, 1 | 5) {
        return Err(Error::config("--fixations must be 1 or 5"));
    }
    let image = resize_and_center_crop(&read_image(&args.image)?.to_tensor(), args.side)?;
    let spec = ModelSpec::new(family, args.side, 10, crate::zoo::BackboneSpec::desk(4, args.side));
    spec.validate()?;
    let net = Network::<f32>::build(&spec, 0)?;
    let fixations = if args.fixations == 1 { vec![FixationPoint::CENTER] } else { spec.eval_fixations() };
    std::fs::create_dir_all(&args.out)?;
    let ext = match args.format {
        ImageFormat::Png => "png",
        ImageFormat::Ppm => "ppm",
    };
    let mut written = Vec::new();
    for (fi, fix) in fixations.iter().enumerate() {
        let views = net.views(&image, *fix)?;
        for (vi, v) in views.iter().enumerate() {
            let name = if views.len() == 1 {
                format!("{family}_fix{fi}.{ext}")
            } else {
                format!("{family}_fix{fi}_scale{vi}.{ext}")
            };
            let path = args.out.join(name);
            write_image(&RgbImage::from_tensor(v)?, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn parse_curves_csv(text: &str) -> Result<Vec<RobustnessCurve>> {
    let mut curves: Vec<RobustnessCurve> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("curves.csv line {}: {line}", n + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let eps: f64 = cols[2].parse().map_err(|_| bad())?;
        let acc: f64 = cols[3].parse().map_err(|_| bad())?;
        match curves.iter_mut().find(|c| c.model == cols[0] && c.attack_id == cols[1]) {
            Some(c) => c.points.push((eps, acc)),
            None => curves.push(RobustnessCurve { model: cols[0].into(), attack_id: cols[1].into(), points: vec![(eps, acc)] }),
        }
    }
    Ok(curves)
}

/// Re-emits charts and deltas from `out/curves.csv`.
pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let path = args.out.join("curves.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let curves = parse_curves_csv(&text)?;
    let baselines = cfg.as_ref().map_or_else(|| Family::BASELINES.to_vec(), |c| c.baselines());
    let names: Vec<&str> = baselines.iter().map(|f| f.name()).collect();
    let delta_eps = cfg.as_ref().map_or_else(|| crate::eval::SMALL_EPS.to_vec(), |c| c.delta_eps());
    let present = |e: f64| curves.iter().all(|c| c.accuracy_at(e).is_some());
    let delta_eps: Vec<f64> = delta_eps.into_iter().filter(|&e| present(e)).collect();
    let have = names.iter().all(|b| curves.iter().any(|c| c.model == *b));
    let deltas = if have && !delta_eps.is_empty() {
        improvement_over_best_baseline(&curves, &names, &delta_eps)?
    } else {
        Vec::new()
    };
    emit_reports(&curves, &deltas, &args.out)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(&resolve_config(&a)?),
        Command::Sweep(a) => finish(cmd_sweep(&resolve_config(&a)?, a.resume)?),
        Command::Ablate(a) => finish(cmd_ablate(&resolve_config(&a)?, a.resume)?),
        Command::WarpPreview(a) => {
            for p in cmd_warp_preview(&a)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Report(a) => cmd_report(&a),
        Command::Oracles(a) => cmd_oracles(&a),
    }
}

fn cmd_oracles(args: &OracleArgs) -> Result<()> {
    let reports = oracles::run_oracle_suite(args.seed)?;
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        oracles::write_jsonl(&reports, path)?;
    }
    print!("{}", oracles::summary(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.case.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("oracle cases failed: {}", failed.join(", "))))
    }
}

fn finish(s: SweepSummary) -> Result<()> {
    for (f, a) in &s.natural_accuracy {
        println!("{f}: natural accuracy {a:.4}");
    }
    for c in &s.curves {
        let pts: Vec<String> = c.points.iter().map(|(e, a)| format!("{e}:{a:.3}")).collect();
        println!("{} {} {}", c.model, c.attack_id, pts.join(" "));
    }
    if s.errors > 0 {
        return Err(Error::NonFinite(format!("{} attacks failed with model errors; see the records", s.errors)));
    }
    Ok(())
}
