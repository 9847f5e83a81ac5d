//! Dense fully connected 3D CRF with Potts pairwise terms.
//!
//! The pairwise kernel mixes a spatial Gaussian over voxel positions in mm
//! and a bilateral Gaussian over positions plus intensity. Inference is
//! synchronous mean field; message passing is Gaussian filtering, done
//! exactly on tiny inputs and by [`FastGaussianFilter`] otherwise.

mod energy;
mod features;
mod filter;
mod lattice;
mod meanfield;
mod params;

pub use energy::{
    brute_force_map, energy, energy_terms, EnergyTerms, BRUTE_FORCE_MAX_LABELINGS, ENERGY_MAX_VOXELS, UNARY_FLOOR,
};
pub use features::{Features, GridLayout};
pub use filter::{
    gaussian_filter_direct, gaussian_filter_fast, FastGaussianFilter, DIRECT_FILTER_MAX_POINTS, MAX_WINDOW_VOXELS,
    TRUNCATION_WIDTHS,
};
pub use lattice::{PermutohedralLattice, DEFAULT_BLUR_PASSES};
pub use meanfield::{infer, infer_with, meanfield_step, InferOptions, Inference, MeanField, QDistribution};
pub use params::{CrfParams, DEFAULT_ITERATIONS};
