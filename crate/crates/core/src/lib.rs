//! Visual localization and mapping toolkit: a text-and-binary dataset
//! format, pose geometry, image pairing with late fusion of retrieval
//! scores, descriptor matching, SFM and RGBD map building, P3P/RANSAC
//! localization, rig and sequence completion and benchmark metrics.

// Parameter checks use `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datastore;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod localization;
pub mod mapping;
pub mod matching;
pub mod pairing;
pub mod pipeline;
pub mod postproc;
pub mod profile;
pub mod synth;

pub use datastore::{load_dataset, save_dataset, Dataset, DatastoreError, FeatureArray, FeatureSet, KeypointMatch, ReconstructedMap};
pub use evaluation::{bucket_recall, median_errors, pose_error, EvaluationError, Report, ThresholdBins};
pub use fusion::{fuse_scores, FusionError, FusionMethod, FusionParams};
pub use geometry::{Camera, Point2, Point3, Pose};
pub use localization::{
    localize_all, localize_query, LocalizationError, LocalizationResult, LocalizeParams, PnPConfig, Provenance,
};
pub use mapping::{rgbd_map, triangulate_map, MapperConfig, MappingError};
pub use matching::{MatchParams, MatchingError};
pub use pairing::{PairList, PairingError};
pub use pipeline::{run_pipeline, PipelineConfig};
pub use postproc::{postprocess, rig_complete, sequence_complete, PostprocMode, SequenceParams};
pub use profile::Profile;
pub use synth::{generate_scene, SynthConfig, SynthConfigError, SynthScene};

use thiserror::Error;

/// Any failure of the library, for callers that chain stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("invalid synthetic scene: {0}")]
    Synth(#[from] SynthConfigError),
    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    /// True for bad parameters, as opposed to bad or missing data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Synth(_)
                | Error::Fusion(FusionError::InvalidParams(_) | FusionError::UnknownMethod(_))
                | Error::Pairing(PairingError::InvalidParams(_))
                | Error::Matching(MatchingError::InvalidParams(_))
                | Error::Mapping(MappingError::InvalidParams(_))
                | Error::Evaluation(EvaluationError::InvalidBins(_))
        ) || matches!(self, Error::Localization(LocalizationError::InvalidInput(m)) if m.starts_with("invalid PnP"))
    }
}
