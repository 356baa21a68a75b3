//! Classifier families: baselines, fixation mechanisms and ablation variants.

mod network;
mod spec;

pub(crate) use network::standard_normal;
pub use network::{Bound, MechanismGrad, Mode, Network, Outputs};
pub use spec::{BackboneSpec, Family, Fusion, Geometry, ModelSpec, StageSpec};
