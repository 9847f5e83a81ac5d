//! Cascaded liver and lesion segmentation with dense 3D CRF refinement.
//!
//! The crate is organised along the pipeline:
//!
//! * [`volume`]: volume types, MetaImage I/O, cropping and resampling.
//! * [`preprocess`]: HU windowing, per-slice histogram equalisation and
//!   training-time augmentation.
//! * [`fcn`]: a small fully convolutional unary model trained with a
//!   class-weighted cross-entropy loss.
//! * [`crf`]: dense CRF energy, Gaussian message filtering (direct and
//!   permutohedral lattice) and mean-field inference.
//! * [`cascade`]: two-stage liver → lesion orchestration and label fusion.
//! * [`metrics`]: VOE, RVD, ASD, MSD and Dice.
//! * [`tuner`]: random search over CRF parameters.
//! * [`phantom`]: synthetic abdomen phantoms with ground truth.

pub mod cascade;
pub mod crf;
pub mod error;
pub mod fcn;
pub mod kv;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod tuner;
pub mod volume;

pub use error::{Error, Result};
