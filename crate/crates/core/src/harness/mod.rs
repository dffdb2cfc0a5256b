//! Training runs, comparisons, gradient checks and run inspection.

pub mod compare;
pub mod config;
pub mod csvio;
pub mod gradcheck;
pub mod inspect;
pub mod run;

pub use compare::{compare, CompareReport};
pub use config::{DatasetKind, ExperimentConfig};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use inspect::{inspect_overlap, OverlapSummary};
pub use run::{run, Manifest, RunStatus, RunSummary};
