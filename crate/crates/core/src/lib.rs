//! Two-stage metal-artifact suppression and kVCT to MVCT translation.
//!
//! Stage 1 ([`prenet`]) cleans kVCT slices in the Haar wavelet domain; stage 2
//! ([`transnet`]) translates the cleaned volume into the MVCT domain with a
//! hybrid CNN / Transformer encoder and a deeply supervised decoder.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod filters;
pub mod io;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod prenet;
pub mod teacher;
pub mod train;
pub mod transnet;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
