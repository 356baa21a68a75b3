use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cortical::ScaleSpec;
use crate::error::{Error, Result};
use crate::retinal::{FixationPoint, RetinalWarpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Standard,
    Coarse,
    Retinal,
    Cortical,
    UniformResampling,
    GaussianBlur,
    GaussianDownsample,
    Ensembling,
    CorticalMaxpool,
    CorticalAvgpool,
    CorticalDropout75,
    CombinedRetinalCortical,
}

impl Family {
    pub const ALL: [Family; 12] = [
        Family::Standard,
        Family::Coarse,
        Family::Retinal,
        Family::Cortical,
        Family::UniformResampling,
        Family::GaussianBlur,
        Family::GaussianDownsample,
        Family::Ensembling,
        Family::CorticalMaxpool,
        Family::CorticalAvgpool,
        Family::CorticalDropout75,
        Family::CombinedRetinalCortical,
    ];

    pub const BASELINES: [Family; 2] = [Family::Standard, Family::Coarse];

    /// Variants compared against the baselines by the ablation harness.
    pub const ABLATIONS: [Family; 8] = [
        Family::UniformResampling,
        Family::GaussianBlur,
        Family::GaussianDownsample,
        Family::Ensembling,
        Family::CorticalMaxpool,
        Family::CorticalAvgpool,
        Family::CorticalDropout75,
        Family::CombinedRetinalCortical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Standard => "standard",
            Family::Coarse => "coarse",
            Family::Retinal => "retinal",
            Family::Cortical => "cortical",
            Family::UniformResampling => "uniform-resampling",
            Family::GaussianBlur => "gaussian-blur",
            Family::GaussianDownsample => "gaussian-downsample",
            Family::Ensembling => "ensembling",
            Family::CorticalMaxpool => "cortical-maxpool",
            Family::CorticalAvgpool => "cortical-avgpool",
            Family::CorticalDropout75 => "cortical-dropout75",
            Family::CombinedRetinalCortical => "combined-retinal-cortical",
        }
    }

    /// Families whose branches fuse scale-space fragments.
    pub fn is_cortical(self) -> bool {
        matches!(
            self,
            Family::Cortical
                | Family::CorticalMaxpool
                | Family::CorticalAvgpool
                | Family::CorticalDropout75
                | Family::CombinedRetinalCortical
        )
    }

    pub fn is_branched(self) -> bool {
        self.is_cortical() || self == Family::Ensembling
    }

    /// No mechanism: predictions do not depend on the fixation.
    pub fn fixation_free(self) -> bool {
        matches!(self, Family::Standard | Family::Ensembling)
    }

    pub fn fusion(self) -> Fusion {
        match self {
            Family::CorticalMaxpool => Fusion::Max,
            Family::CorticalAvgpool => Fusion::Mean,
            Family::CorticalDropout75 => Fusion::ConcatDropout(0.75),
            _ => Fusion::Concat,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    Concat,
    Max,
    Mean,
    /// Concatenation followed by training-time dropout at the given rate.
    ConcatDropout(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Residual trunk: 3×3 stem, optional average pooling, then stages of basic blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stem_pool: usize,
    pub stages: Vec<StageSpec>,
}

impl BackboneSpec {
    /// CIFAR ResNet-20: 16/32/64 filters, three blocks per stage.
    pub fn resnet20() -> Self {
        Self::cifar_style(16, 3)
    }

    /// ResNet-20 layout with base width `w` and `blocks` blocks per stage.
    pub fn cifar_style(w: usize, blocks: usize) -> Self {
        Self {
            stem_width: w,
            stem_stride: 1,
            stem_pool: 1,
            stages: vec![
                StageSpec { width: w, blocks, stride: 1 },
                StageSpec { width: 2 * w, blocks, stride: 2 },
                StageSpec { width: 4 * w, blocks, stride: 2 },
            ],
        }
    }

    /// ResNet-18 layout (four stages of two blocks) with base width `w` and a
    /// stride-2 stem followed by 2× pooling.
    pub fn resnet18_class(w: usize) -> Self {
        Self {
            stem_width: w,
            stem_stride: 2,
            stem_pool: 2,
            stages: vec![
                StageSpec { width: w, blocks: 2, stride: 1 },
                StageSpec { width: 2 * w, blocks: 2, stride: 2 },
                StageSpec { width: 4 * w, blocks: 2, stride: 2 },
                StageSpec { width: 8 * w, blocks: 2, stride: 2 },
            ],
        }
    }

    /// Compact residual trunk for desk experiments: base width `w`, one block
    /// per stage, three stages; high-resolution inputs get a stride-2 stem and
    /// 2× pooling.
    pub fn desk(w: usize, side: usize) -> Self {
        let hi = side > 64;
        Self {
            stem_width: w,
            stem_stride: if hi { 2 } else { 1 },
            stem_pool: if hi { 2 } else { 1 },
            stages: vec![
                StageSpec { width: w, blocks: 1, stride: 1 },
                StageSpec { width: 2 * w, blocks: 1, stride: 2 },
                StageSpec { width: 4 * w, blocks: 1, stride: 2 },
            ],
        }
    }

    /// Per-branch trunk for `branches` parallel branches: every width becomes
    /// `round(w/√B)`; the stem runs at stride 1 without pooling.
    pub fn branch(&self, branches: usize) -> Self {
        let s = (branches as f64).sqrt();
        let scale = |w: usize| ((w as f64 / s).round() as usize).max(1);
        Self {
            stem_width: scale(self.stem_width),
            stem_stride: 1,
            stem_pool: 1,
            stages: self.stages.iter().map(|st| StageSpec { width: scale(st.width), ..*st }).collect(),
        }
    }

    /// Same widths, stride-1 stem without pooling (trunk for small fragments).
    pub fn fragment_trunk(&self) -> Self {
        Self { stem_stride: 1, stem_pool: 1, ..self.clone() }
    }

    pub fn out_width(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.stem_stride == 0 || self.stem_pool == 0 {
            return Err(Error::config("backbone stem width, stride and pool must be positive"));
        }
        if self.stages.iter().any(|s| s.width == 0 || s.blocks == 0 || s.stride == 0) {
            return Err(Error::config("backbone stages need positive width, blocks and stride"));
        }
        Ok(())
    }

    /// Multiply-accumulate count of one forward pass on a `side × side` input
    /// with `channels` channels (convolutions only).
    pub fn macs(&self, side: usize, channels: usize) -> u64 {
        let conv_out = |s: usize, k: usize, stride: usize| (s + 2 * (k / 2) - k) / stride + 1;
        let mut s = conv_out(side, 3, self.stem_stride);
        let mut total = (s * s * channels * self.stem_width * 9) as u64;
        s /= self.stem_pool;
        let mut cin = self.stem_width;
        for st in &self.stages {
            for b in 0..st.blocks {
                let stride = if b == 0 { st.stride } else { 1 };
                let so = conv_out(s, 3, stride);
                total += (so * so * cin * st.width * 9) as u64;
                total += (so * so * st.width * st.width * 9) as u64;
                if stride != 1 || cin != st.width {
                    total += (so * so * cin * st.width) as u64;
                }
                s = so;
                cin = st.width;
            }
        }
        total
    }
}

/// Fixation geometry of every mechanism for one image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub side: usize,
    pub coarse_crop: usize,
    pub coarse_offset: usize,
    pub retinal_offset: usize,
    pub cortical: ScaleSpec,
}

impl Geometry {
    /// Presets: at 32 the CIFAR layout (24px crops ±4, retinal ±8, cortical
    /// 15/30 ±1), at 320 the ImageNet layout (224px crops ±48, retinal ±80,
    /// cortical 40/80/160/240 ±40), otherwise the 320 layout scaled by `S/320`.
    pub fn for_side(side: usize) -> Self {
        match side {
            32 => Self { side, coarse_crop: 24, coarse_offset: 4, retinal_offset: 8, cortical: ScaleSpec::cifar() },
            _ => {
                let coarse_offset = ((side as f64) * 48.0 / 320.0).round() as usize;
                Self {
                    side,
                    coarse_crop: side - 2 * coarse_offset,
                    coarse_offset,
                    retinal_offset: side / 4,
                    cortical: ScaleSpec::for_side(side),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_crop + 2 * self.coarse_offset > self.side || self.coarse_crop == 0 {
            return Err(Error::config(format!(
                "coarse crop {} with offsets ±{} does not fit {}px",
                self.coarse_crop, self.coarse_offset, self.side
            )));
        }
        if 2 * self.retinal_offset >= self.side {
            return Err(Error::config("retinal offsets must stay inside the image"));
        }
        self.cortical.validate(self.side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub image_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub classes: usize,
    pub backbone: BackboneSpec,
    pub geometry: Geometry,
    #[serde(default = "default_strength")]
    pub retinal_strength: f64,
    /// Weight of each branch's auxiliary cross-entropy (branched families).
    #[serde(default = "default_aux")]
    pub aux_weight: f64,
    /// Blur of the Gaussian-blur ablation.
    #[serde(default = "default_blur")]
    pub blur_sigma: f64,
}

fn default_channels() -> usize {
    3
}
fn default_strength() -> f64 {
    RetinalWarpConfig::DEFAULT_STRENGTH
}
fn default_aux() -> f64 {
    0.3
}
fn default_blur() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn new(family: Family, image_side: usize, classes: usize, backbone: BackboneSpec) -> Self {
        Self {
            family,
            image_side,
            channels: 3,
            classes,
            backbone,
            geometry: Geometry::for_side(image_side),
            retinal_strength: default_strength(),
            aux_weight: default_aux(),
            blur_sigma: default_blur(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("at least two classes required"));
        }
        if self.channels == 0 {
            return Err(Error::config("at least one channel required"));
        }
        if self.geometry.side != self.image_side {
            return Err(Error::config(format!(
                "geometry is for {}px but the model takes {}px",
                self.geometry.side, self.image_side
            )));
        }
        if !(self.aux_weight >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::config("aux weight and blur sigma must be non-negative"));
        }
        self.backbone.validate()?;
        self.geometry.validate()?;
        self.retinal_config().validate()
    }

    pub fn retinal_config(&self) -> RetinalWarpConfig {
        let m = self.geometry.retinal_offset as f64;
        RetinalWarpConfig { strength: self.retinal_strength, max_offset_x: m, max_offset_y: m }
    }

    pub fn branch_count(&self) -> usize {
        if self.family.is_branched() {
            self.geometry.cortical.sizes.len()
        } else {
            1
        }
    }

    /// Largest admissible fixation offset per axis (0 for fixation-free families).
    pub fn max_offset(&self) -> usize {
        let g = &self.geometry;
        match self.family {
            Family::Standard | Family::Ensembling => 0,
            Family::Coarse | Family::UniformResampling | Family::GaussianBlur => g.coarse_offset,
            Family::Retinal => g.retinal_offset,
            Family::Cortical
            | Family::CorticalMaxpool
            | Family::CorticalAvgpool
            | Family::CorticalDropout75
            | Family::GaussianDownsample
            | Family::CombinedRetinalCortical => g.cortical.max_offset,
        }
    }

    /// Evaluation fixations: the center and the four `(±m, ±m)` corners, or
    /// the center alone for fixation-free families.
    pub fn eval_fixations(&self) -> Vec<FixationPoint> {
        if self.family.fixation_free() {
            vec![FixationPoint::CENTER]
        } else {
            FixationPoint::five_point(self.max_offset() as f64).to_vec()
        }
    }

    /// Backbone input side and the trunk specs for each branch.
    pub fn trunks(&self) -> (usize, Vec<BackboneSpec>) {
        let g = &self.geometry;
        let b = self.branch_count();
        match self.family {
            Family::Standard | Family::Retinal | Family::UniformResampling => (self.image_side, vec![self.backbone.clone()]),
            Family::Coarse | Family::GaussianBlur => (g.coarse_crop, vec![self.backbone.clone()]),
            Family::GaussianDownsample => (g.cortical.target(), vec![self.backbone.fragment_trunk()]),
            Family::Ensembling => {
                let mut branch = self.backbone.branch(b);
                branch.stem_stride = self.backbone.stem_stride;
                branch.stem_pool = self.backbone.stem_pool;
                (self.image_side, vec![branch; b])
            }
            _ => (g.cortical.target(), vec![self.backbone.branch(b); b]),
        }
    }

    /// Convolution multiply-accumulates of one single-fixation forward pass.
    pub fn macs(&self) -> u64 {
        let (side, trunks) = self.trunks();
        trunks.iter().map(|t| t.macs(side, self.channels)).sum()
    }
}
