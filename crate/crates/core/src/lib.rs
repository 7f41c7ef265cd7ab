//! Dual-view lesion detection at desk scale: a shared backbone over CC/MLO
//! mammography views, a fusion pixel decoder with deformable cross-view
//! attention, a view-interactive query decoder, a lesion linker, composite
//! Hungarian-matched losses, FROC-style evaluation, and a synthetic phantom
//! dataset generator.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linker;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod types;
pub mod vitd;

pub use config::{AugmentFlags, FileConfig, LossWeights, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use types::{CaseAnnotation, ImagePair, InstanceGt, Laterality, View};
