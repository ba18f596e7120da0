//! Utterance-level multimodal emotion recognition.
//!
//! A media bundle is segmented into utterances by voice activity, each
//! utterance is turned into fixed-shape visual, acoustic and textual inputs,
//! encoded, and scored by a late-fusion head. Results stream out as NDJSON
//! events.

pub mod archive;
pub mod backend;
pub mod calibrate;
pub mod config;
pub mod encoder;
pub mod extract;
pub mod fixtures;
pub mod fusion;
pub mod media;
pub mod orchestrator;
pub mod train;
pub mod vad;

pub use archive::{ArchiveError, ModelArchive, ModelConfig};
pub use calibrate::{apply_thresholds, calibrate, evaluate, Thresholds, ThresholdsFile};
pub use config::PipelineConfig;
pub use fusion::{EMOTIONS, N_EMOTIONS};
pub use media::{load_bundle, MediaBundle};
pub use orchestrator::{Event, EventSink, Pipeline, RunControl, VideoResult};
