//! Volumetric building blocks for cerebellum lobule segmentation: grids and the
//! label taxonomy, stride decomposition, multi-atlas label fusion, seeded
//! perturbations, evaluation statistics and procedural phantoms.

pub mod augment;
pub mod error;
pub mod evalstats;
pub mod fusion;
pub mod par;
pub mod phantom;
pub mod resample;
pub mod stride;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{GridGeometry, LabelGrid, LabelTaxonomy, VoxelGrid};
