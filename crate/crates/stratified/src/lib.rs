//! Stratified segmentation: anchor organs first, then mid-level organs
//! conditioned on the anchor probabilities, then small organs found by
//! heat-map detection and segmented inside cropped volumes of interest.

pub mod branch;
pub mod error;
pub mod fusion;
pub mod maps;
pub mod pipeline;
pub mod train;
pub mod voi;

pub use branch::{
    predict_anchor, predict_detector, predict_midlevel, predict_sh, predict_single, Branch, BranchModel, NetShape,
};
pub use error::{Result, StratError};
pub use fusion::fuse_predictions;
pub use maps::{detect_centers, gaussian_heatmap, Detection, HeatMap, ProbMap};
pub use pipeline::{Pipeline, PipelineOutput};
pub use train::{train_branch, CaseData, Context, EpochRecord, Persist, TrainConfig, TrainOutcome};
pub use voi::{crop_voi, ExtentTable, VoiRegion};
