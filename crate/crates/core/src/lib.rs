//! Adaptive per-patient fine-tuning of a 3-D encoder-decoder segmentation
//! network on synthetic multi-fraction cohorts.
//!
//! The crate is layered bottom-up:
//!
//! * [`volume`]: voxel grids, label maps, resampling and MetaImage I/O.
//! * [`phantom`]: deterministic synthetic cohorts with per-fraction deformation.
//! * [`autodiff`]: a tape-based reverse-mode engine with the layer set the
//!   networks need.
//! * [`segnet`]: the two baseline architectures, checkpoints and tiled inference.
//! * [`trainer`]: patch sampling, rectified Adam and base-model training.
//! * [`adapt`]: sequential head-only adaptation across treatment fractions.
//! * [`metrics`]: DSC / MSD / HD95 and the Wilcoxon signed-rank test.
//! * [`gradcheck`]: finite-difference checks of the tape's gradients.

pub mod adapt;
pub mod autodiff;
pub mod gradcheck;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod segnet;
pub mod trainer;
pub mod volume;

pub use volume::{Geometry, LabelMap3, OrganLabel, Volume3};
