//! From embeddings to calibrated decisions and error rates.

pub mod backend;
pub mod calibration;
pub mod embedding;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod qm;
pub mod snorm;
pub mod trials;

pub use backend::GaussianBackend;
pub use calibration::{calibrate_train, CalibrationModel, CalibrationTrial};
pub use embedding::{cosine_score, enroll_model, SpeakerEmbedding};
pub use fusion::fuse;
pub use io::{Archive, Label, ScoredTrial, TrialKey, UtteranceMeta};
pub use metrics::{eer, min_dcf, DcfParams};
pub use qm::{qm_duration, qm_enroll_count, QualityMeasure, TrialQuality};
pub use snorm::{cohort_stats_from_scores, snorm, Cohort, CohortStats};
pub use trials::{make_calibration_trials, GeneratedTrial, LabeledUtterance, Trial};
