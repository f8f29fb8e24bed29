//! Segmentation-for-classification of tumors in dual-phase 3D volumes.
//!
//! A phantom generator, a deeply supervised 3D encoder-decoder, sliding-window
//! voting, connected-component retention with a voxel-count rule, a Pool3
//! classification baseline, and a cross-validation harness.

pub mod clsnet;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod manifest;
pub mod modelfile;
pub mod nn;
pub mod phantom;
pub mod postclassify;
pub mod rng;
pub mod segnet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{CaseRecord, Dims, LabelMask, Phase, PhaseData, Volume3D};
pub use clsnet::{ClsConfig, ClsHead, RoiBox};
pub use config::RunConfig;
pub use evaluation::{CvMode, CvReport, EvalReport};
pub use manifest::DatasetManifest;
pub use postclassify::{CaseDecision, Connectivity, PostOptions, Verdict};
pub use segnet::{SegModel, SegNetConfig};
