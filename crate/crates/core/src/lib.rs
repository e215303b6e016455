//! Mask-based post-filtering of coded speech in the STFT domain.
//!
//! Clean/coded pairs come from a manifest, either as files or synthesized
//! with a surrogate degrader. A network predicts a real-valued gain in
//! (0, 2) per time-frequency bin from a short causal context of coded
//! log-magnitudes; the gain scales the coded magnitude and the coded phase
//! is kept.

pub mod degrade;
pub mod dsp;
pub mod error;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;

pub use degrade::{DegradeProfile, Preset};
pub use dsp::{AudioBuffer, SignalRole};
pub use error::{Error, ErrorClass, Result};
pub use manifest::{Manifest, Split};
pub use mask::{MaskConfig, MaskHistogram, MaskKind, MaskMatrix};
pub use metrics::MetricReport;
pub use nn::{ModelKind, ModelSpec, SavedModel, TrainConfig};
pub use pipeline::{PipelineConfig, PostFilter};
