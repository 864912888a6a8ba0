//! Curriculum dataset construction and bidirectional evaluation for
//! egocentric task-progress reasoning.
//!
//! The pipeline ingests manipulation trajectories with subtask metadata
//! ([`corpus`]), samples short-horizon and long-horizon frame pairs in both
//! presentation orders ([`sampling`]), attaches stage context
//! ([`planner`], [`builder`]) and evaluates model backends ([`modelgw`])
//! on the resulting pairs ([`evalharness`]).

pub mod builder;
pub mod config;
pub mod corpus;
pub mod evalharness;
pub mod modelgw;
pub mod planner;
pub mod promptkit;
pub mod sampling;
pub mod synthetic;

pub use builder::{
    attach_context, build_stage, to_training_record, BuildConfig, BuildReport, BuildSources, Context, DatasetSample,
    MessagePart, Quotas, SampleLine, Stage, TrainingRecord,
};
pub use config::RunConfig;
pub use corpus::{load_manifest, subtask_index, validate_corpus, Corpus, FrameRef, Subtask, SubtaskSkeleton, Trajectory};
pub use evalharness::{
    bias_metrics, completion_curve, compute_metrics, render_report, rescore, run_eval, Averaging, CompletionCurve,
    MetricsReport, RawResult,
};
pub use modelgw::{BackendConfig, GatewayError, ModelBackend, PolicyBackend, PolicyKind, Query, Response};
pub use planner::{PlannedSkeleton, Provenance};
pub use promptkit::{parse_verdict, render_long_prompt, render_short_prompt, PromptText, Templates, Verdict};
pub use sampling::{
    classify_window, downsample, interval_bin, orient, Choice, Direction, IntervalBin, Level, OrientedPair,
    WindowClass,
};
