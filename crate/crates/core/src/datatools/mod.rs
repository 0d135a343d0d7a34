//! Demonstration preprocessing: percentile normalization and low-motion
//! filtering.

mod motion;
mod normalize;

pub use motion::{
    filter_corpus, filter_low_motion, geodesic_angle_deg, parse_demo_jsonl, CorpusFilterSummary, DemoTrajectory,
    FilteredDemo, Frame, MotionThresholds, Pose, ROTATION_THRESHOLD_DEG, TRANSLATION_THRESHOLD_M,
};
pub use normalize::{
    denormalize_value, fit_normalizer, normalize_value, percentile_sorted, Denormalized, Normalizer,
    NormalizerRegistry, Percentiles, CLIP, NORMALIZER_TABLE_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {0} does not match the first sample's shape")]
    RaggedSample(usize),
    #[error("non-finite value in cell (dim {dim}, timestep {timestep})")]
    NonFinite { dim: usize, timestep: usize },
    #[error("constant cell (dim {dim}, timestep {timestep}): p02 == p98")]
    ConstantCell { dim: usize, timestep: usize },
    #[error("unknown cell (dim {dim}, timestep {timestep})")]
    UnknownCell { dim: usize, timestep: usize },
    #[error("normalizer for source {normalizer:?} applied to data from {data:?}")]
    SourceMismatch { normalizer: String, data: String },
    #[error("no normalizer for source {0:?}")]
    UnknownSource(String),
    #[error("duplicate normalizer for source {0:?}")]
    DuplicateSource(String),
    #[error("unsupported normalizer table header {0:?}")]
    TableVersion(String),
    #[error("normalizer table for {0:?} is incomplete")]
    IncompleteTable(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Write(#[source] std::io::Error),
    #[error("rotation block cannot be orthonormalized")]
    MalformedRotation,
    #[error("demo {0:?} has no frames")]
    EmptyDemo(String),
    #[error("demo {demo_id:?}: timestamp at frame {frame} does not increase")]
    NonIncreasingTime { demo_id: String, frame: usize },
    #[error("demo line {line}: {reason}")]
    BadDemoLine { line: usize, reason: String },
}

impl PartialEq for DataError {
    fn eq(&self, other: &Self) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other) && self.to_string() == other.to_string()
    }
}
