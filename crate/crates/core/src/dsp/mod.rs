//! Signal-domain primitives: audio buffers and WAV I/O, the 512-point
//! sqrt-Hann STFT, log-magnitude features, real cepstra and preprocessing.

pub mod audio;
pub mod cepstrum;
pub mod features;
pub mod filter;
pub mod stft;

pub use audio::{read_wav, write_wav, AudioBuffer, SignalRole, WavEncoding, SAMPLE_RATE};
pub use cepstrum::{cepstrum_to_magnitude, real_cepstrum};
pub use features::{denormalize, log_magnitude, normalize, FeatureMatrix, NormStats, LOG_FLOOR};
pub use filter::{active_rms, band_limit, level_normalize, BAND_LIMIT_HZ, TARGET_LEVEL_DB};
pub use stft::{istft, sqrt_hann, stft, Spectrogram, StftConfig, FRAME_LEN, HOP, N_BINS, N_PROCESSED};
