//! Detection → tracking → alignment → selection simulator.

pub mod align;
pub mod detect;
pub mod select;
pub mod timing;
pub mod tracker;

pub use align::{align_face, estimate_similarity, AlignmentTemplate, SimilarityTransform, ALIGNMENT_TEMPLATE_112};
pub use detect::{read_scenario, write_scenario, Detector, GroundTruthDetector, SlidingWindowDetector};
pub use select::{
    simulate, write_selections, FaceScorer, MonetScorer, Pipeline, PipelineConfig, ScoredFace, SelectionRecord,
    SimulationResult, TopK,
};
pub use timing::{timing_probe, Stage, StageTiming, TimingProbe, TimingReport};
pub use tracker::{
    associate_bidirectional, update_tracks, Detection, Matching, Track, TrackEvent, TrackStatus, TrackerParams,
    TrackerState,
};
