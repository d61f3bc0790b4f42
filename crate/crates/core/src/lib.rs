//! Source label adaptation (SLA) for semi-supervised domain adaptation,
//! at desk scale: a small MLP classifier, synthetic shifted domains, the
//! PPC label-adaptation pipeline, baselines and diagnostics.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiments;
pub mod mathcore;
pub mod nnet;
pub mod sla;
pub mod trainer;

pub use error::{Result, SlaError};
