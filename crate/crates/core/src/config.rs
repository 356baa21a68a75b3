//! TOML run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{Algorithm, AttackConfig, Criterion, Metric};
use crate::checkpoint::sha256_hex;
use crate::data::{generate_synthetic, load_cifar10_binary, load_image_tree, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{CIFAR_EPS_GRID, IMAGENET_EPS_GRID, SMALL_EPS};
use crate::train::{AugmentationConfig, OptimizerConfig};
use crate::zoo::{BackboneSpec, Family, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    ImageTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Image side; fixed at 32 for CIFAR-10.
    #[serde(default)]
    pub side: Option<usize>,
    /// CIFAR-10 batch directory, or an image tree with `train/` and `test/`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Use only the first `n` training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Evaluate only the first `n` test images.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_train_per_class() -> usize {
    300
}
fn default_test_per_class() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Small three-stage residual network sized for CPU runs.
    Desk,
    Resnet20,
    Resnet18,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub families: Vec<Family>,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneKind,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub aux_weight: Option<f64>,
    #[serde(default)]
    pub retinal_strength: Option<f64>,
}

fn default_backbone() -> BackboneKind {
    BackboneKind::Desk
}
fn default_width() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentationConfig,
}

pub fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::desk()
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { optimizer: default_optimizer(), augment: AugmentationConfig::default() }
    }
}

/// One attack row; ε comes from the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_step_const")]
    pub step_const: f64,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default)]
    pub eot_samples: usize,
    #[serde(default)]
    pub init_radius: f64,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Pgd
}
fn default_metric() -> Metric {
    Metric::Linf
}
fn default_iterations() -> usize {
    5
}
fn default_step_const() -> f64 {
    0.1
}
fn default_criterion() -> Criterion {
    Criterion::Misclassify(1)
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            algorithm: default_algorithm(),
            metric: default_metric(),
            iterations: default_iterations(),
            step_const: default_step_const(),
            criterion: default_criterion(),
            eot_samples: 0,
            init_radius: 0.0,
        }
    }
}

impl AttackSection {
    pub fn at(&self, eps: f64) -> AttackConfig {
        AttackConfig {
            algorithm: self.algorithm,
            metric: self.metric,
            iterations: self.iterations,
            step_const: self.step_const,
            eps,
            criterion: self.criterion,
            eot_samples: self.eot_samples,
            init_radius: self.init_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Defaults to the CIFAR grid up to side 64 and the ImageNet grid above.
    #[serde(default)]
    pub eps: Option<Vec<f64>>,
    /// Baseline families for improvement deltas (default standard and coarse).
    #[serde(default)]
    pub baselines: Option<Vec<Family>>,
    /// Budgets at which deltas are reported (default 0.005, 0.01, 0.02).
    #[serde(default)]
    pub delta_eps: Option<Vec<f64>>,
    /// Source family of transfer attacks (default standard).
    #[serde(default)]
    pub transfer_source: Option<Family>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackSection>,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn side(&self) -> Result<usize> {
        match (self.dataset.kind, self.dataset.side) {
            (DatasetKind::Cifar10, None | Some(32)) => Ok(32),
            (DatasetKind::Cifar10, Some(s)) => Err(Error::config(format!("CIFAR-10 images are 32x32, not {s}"))),
            (_, Some(s)) => Ok(s),
            (_, None) => Err(Error::config("dataset.side is required")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.side()?;
        if matches!(self.dataset.kind, DatasetKind::Cifar10 | DatasetKind::ImageTree) && self.dataset.path.is_none() {
            return Err(Error::config("dataset.path is required for cifar10 and image-tree datasets"));
        }
        if self.model.families.is_empty() {
            return Err(Error::config("model.families must list at least one family"));
        }
        if self.model.width == 0 {
            return Err(Error::config("model.width must be positive"));
        }
        for f in &self.model.families {
            self.model_spec(*f, 10)?.validate()?;
        }
        self.train.optimizer.validate()?;
        self.train.augment.validate()?;
        for a in &self.attacks {
            a.at(0.0).validate()?;
        }
        if let Some(e) = self.sweep.eps.as_ref().and_then(|g| g.iter().find(|e| !(**e >= 0.0))) {
            return Err(Error::config(format!("invalid eps {e} in sweep.eps")));
        }
        if side % 8 != 0 && self.dataset.kind == DatasetKind::Synthetic {
            return Err(Error::config("synthetic dataset side must be a multiple of 8"));
        }
        Ok(())
    }

    pub fn eps_grid(&self) -> Vec<f64> {
        match &self.sweep.eps {
            Some(g) => g.clone(),
            None if self.side().unwrap_or(32) <= 64 => CIFAR_EPS_GRID.to_vec(),
            None => IMAGENET_EPS_GRID.to_vec(),
        }
    }

    pub fn baselines(&self) -> Vec<Family> {
        self.sweep.baselines.clone().unwrap_or_else(|| Family::BASELINES.to_vec())
    }

    pub fn delta_eps(&self) -> Vec<f64> {
        self.sweep.delta_eps.clone().unwrap_or_else(|| SMALL_EPS.to_vec())
    }

    pub fn transfer_source(&self) -> Family {
        self.sweep.transfer_source.unwrap_or(Family::Standard)
    }

    /// Attack rows, or 5-step L∞ PGD at `λ = ε/3` when none are configured.
    pub fn attack_templates(&self) -> Vec<AttackSection> {
        if self.attacks.is_empty() {
            vec![AttackSection::default()]
        } else {
            self.attacks.clone()
        }
    }

    pub fn model_spec(&self, family: Family, classes: usize) -> Result<ModelSpec> {
        let side = self.side()?;
        let backbone = match self.model.backbone {
            BackboneKind::Desk => BackboneSpec::desk(self.model.width, side),
            BackboneKind::Resnet20 => BackboneSpec::resnet20(),
            BackboneKind::Resnet18 => BackboneSpec::resnet18_class(self.model.width),
        };
        let mut spec = ModelSpec::new(family, side, classes, backbone);
        if let Some(a) = self.model.aux_weight {
            spec.aux_weight = a;
        }
        if let Some(k) = self.model.retinal_strength {
            spec.retinal_strength = k;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let d = &self.dataset;
        let side = self.side()?;
        let ds = match d.kind {
            DatasetKind::Synthetic => {
                let per_class = match split {
                    Split::Train => d.train_per_class,
                    Split::Test => d.test_per_class,
                };
                generate_synthetic(&SyntheticSpec::new(side, per_class, self.seed), split)?
            }
            DatasetKind::Cifar10 => load_cifar10_binary(d.path.as_ref().expect("validated"), split)?,
            DatasetKind::ImageTree => {
                let sub = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                load_image_tree(&d.path.as_ref().expect("validated").join(sub), side, split)?.dataset
            }
        };
        let limit = match split {
            Split::Train => d.train_limit,
            Split::Test => d.test_limit,
        };
        match limit {
            Some(n) if n < ds.len() => ds.take(n),
            _ => Ok(ds),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 7
out = "runs/demo"

[dataset]
kind = "synthetic"
side = 32
train_per_class = 10

[model]
families = ["standard", "retinal"]

[train.optimizer]
kind = "adam"
lr = 0.001
batch_size = 32
epochs = 2
schedule = [[1, 0.1]]

[[attack]]
algorithm = "pgd"
metric = "linf"
iterations = 5
step_const = 0.1
criterion = "misclassify_1"

[[attack]]
algorithm = "fgsm"
step_const = -1
criterion = "targeted_80"
"#;

    #[test]
    fn parses_table_rows() {
        let c = RunConfig::from_toml(BASIC).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.attacks.len(), 2);
        assert_eq!(c.attacks[1].criterion, Criterion::Targeted(0.8));
        assert_eq!(c.eps_grid(), CIFAR_EPS_GRID.to_vec());
        assert!((c.attacks[0].at(0.03).step_size() - 0.01).abs() < 1e-15);
        assert_eq!(c.train.optimizer.schedule, vec![(1, 0.1)]);
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn missing_seed_is_named() {
        let text = BASIC.replace("seed = 7", "");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml(&BASIC.replace("\"retinal\"", "\"fovea\"")).is_err());
        assert!(RunConfig::from_toml(&BASIC.replace("side = 32", "side = 30")).is_err());
        assert!(RunConfig::from_toml(&BASIC.replace("kind = \"synthetic\"", "kind = \"cifar10\"")).is_err());
        assert!(RunConfig::from_toml(&BASIC.replace("iterations = 5", "iterations = 0")).is_err());
    }

    #[test]
    fn large_side_uses_imagenet_grid() {
        let c = RunConfig::from_toml(&BASIC.replace("side = 32", "side = 128")).unwrap();
        assert_eq!(c.eps_grid(), IMAGENET_EPS_GRID.to_vec());
    }
}
