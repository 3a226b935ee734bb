//! Data formats and the synthetic corpus generator.
//!
//! Three interchange formats live here: binary snippet-feature files
//! (`.tagf`), ActivityNet-style annotation JSON, and prediction JSON. All
//! readers validate eagerly and fail with precise error kinds so the CLI can
//! distinguish bad inputs from runtime faults.

mod annotations;
mod features;
mod synthetic;

pub use annotations::{
    read_annotations, read_predictions, write_annotations, write_predictions, AnnotationSet,
    Instance, Prediction, Subset, VideoAnnotations,
};
pub use features::{read_features, write_features, write_matrix, FeatureSequence};
pub use synthetic::{generate_synthetic, SyntheticSpec};
