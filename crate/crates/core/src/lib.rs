//! k3m: multi-modal item representations over product images,
//! titles and a product knowledge graph, plus the modality-missing and
//! modality-noise benchmark harness used to measure robustness.

pub mod corruption;
pub mod data_model;
pub mod encoders;
pub mod error;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
