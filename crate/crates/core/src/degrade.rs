//! Sources of (clean, coded) pairs.
//!
//! [`surrogate_code`] is a deterministic spectral degrader that stands in for
//! a low-rate speech codec: log-magnitudes are floored relative to the frame
//! peak (spectral valleys fill up), quantized on a per-band uniform grid,
//! jittered in proportion to the step size, and the upper band loses energy.
//! Every change is a gain applied to the clean STFT, so the error is
//! correlated with the signal and vanishes where the signal is zero.
//!
//! [`load_pair`] ingests externally coded files and compensates codec delay
//! by cross-correlation.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{istft, read_wav, stft, AudioBuffer, SignalRole, StftConfig, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Quality presets standing in for codec bitrate modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    QLow,
    QMid,
    QHigh,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::QLow, Preset::QMid, Preset::QHigh];

    pub fn name(self) -> &'static str {
        match self {
            Preset::QLow => "q_low",
            Preset::QMid => "q_mid",
            Preset::QHigh => "q_high",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset '{s}'")))
    }
}

/// Upper edges (Hz) of the quantizer bands.
pub const BAND_EDGES_HZ: [f64; 4] = [1000.0, 2000.0, 4000.0, 8001.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeProfile {
    pub preset: Preset,
    /// Quantizer step in dB for each band of [`BAND_EDGES_HZ`].
    pub steps_db: [f64; 4],
    /// Standard deviation of the dB jitter as a fraction of the step.
    pub jitter: f64,
    /// Bins quieter than the frame peak by more than this are raised to it.
    pub valley_range_db: f64,
    /// Above this frequency the spectrum is additionally attenuated.
    pub hf_loss_start_hz: f64,
    pub hf_loss_db: f64,
    pub seed: u64,
}

impl DegradeProfile {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (steps_db, valley_range_db, hf_loss_start_hz, hf_loss_db) = match preset {
            Preset::QLow => ([5.0, 6.0, 8.0, 10.0], 35.0, 3500.0, 4.0),
            Preset::QMid => ([3.0, 4.0, 5.0, 6.0], 45.0, 4500.0, 3.0),
            Preset::QHigh => ([1.5, 2.0, 2.5, 3.0], 55.0, 5500.0, 2.0),
        };
        Self {
            preset,
            steps_db,
            jitter: 0.3,
            valley_range_db,
            hf_loss_start_hz,
            hf_loss_db,
            seed,
        }
    }

    fn step_for(&self, freq_hz: f64) -> f64 {
        let band = BAND_EDGES_HZ
            .iter()
            .position(|&e| freq_hz < e)
            .unwrap_or(BAND_EDGES_HZ.len() - 1);
        self.steps_db[band]
    }
}

/// Degrades a clean buffer; the result has the same length.
///
/// Buffers shorter than one STFT frame come back unchanged.
pub fn surrogate_code(clean: &AudioBuffer, profile: &DegradeProfile) -> Result<AudioBuffer> {
    let cfg = StftConfig::default();
    if clean.len() < cfg.frame_len {
        return Ok(clean.clone().with_role(SignalRole::Coded));
    }
    let mut spec = stft(clean, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let bin_hz = SAMPLE_RATE as f64 / cfg.fft_len as f64;

    for mut frame in spec.frames.rows_mut() {
        let peak_db = frame
            .iter()
            .filter(|c| c.norm() > 0.0)
            .map(|c| 20.0 * c.norm().log10())
            .fold(f64::NEG_INFINITY, f64::max);
        for (k, x) in frame.iter_mut().enumerate() {
            // draw for every bin so the stream does not depend on the signal
            let z: f64 = unit.sample(&mut rng);
            let mag = x.norm();
            if mag == 0.0 {
                continue;
            }
            let freq = k as f64 * bin_hz;
            let step = profile.step_for(freq);
            let level = (20.0 * mag.log10()).max(peak_db - profile.valley_range_db);
            let mut q = step * (level / step).round() + profile.jitter * step * z;
            if freq >= profile.hf_loss_start_hz {
                q -= profile.hf_loss_db;
            }
            *x *= 10f64.powf(q / 20.0) / mag;
        }
    }
    let mut out = istft(&spec, &cfg)?.into_samples();
    out.resize(clean.len(), 0.0);
    AudioBuffer::new(out, clean.sample_rate(), SignalRole::Coded)
}

/// Result of cross-correlation delay compensation.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub clean: AudioBuffer,
    pub coded: AudioBuffer,
    /// Delay of the coded signal relative to clean, in samples.
    pub lag: i64,
    /// Normalized correlation at the chosen lag.
    pub correlation: f64,
    /// False when the correlation peak was too weak to trust; the pair is then unshifted.
    pub aligned: bool,
}

/// Minimum normalized correlation for an alignment to be accepted.
pub const MIN_ALIGN_CORRELATION: f64 = 0.2;

/// Finds the lag in `-max_lag..=max_lag` maximizing
/// `sum_n clean[n] * coded[n + lag]`, normalized by the signal energies.
pub fn estimate_lag(clean: &[f64], coded: &[f64], max_lag: usize) -> (i64, f64) {
    let ec: f64 = clean.iter().map(|v| v * v).sum();
    let ed: f64 = coded.iter().map(|v| v * v).sum();
    let norm = (ec * ed).sqrt();
    if norm == 0.0 {
        return (0, 0.0);
    }
    let mut best = (0i64, f64::NEG_INFINITY);
    let max_lag = max_lag as i64;
    for lag in -max_lag..=max_lag {
        let (a, b) = if lag >= 0 {
            let l = lag as usize;
            if l >= coded.len() {
                continue;
            }
            (clean, &coded[l..])
        } else {
            let l = (-lag) as usize;
            if l >= clean.len() {
                continue;
            }
            (&clean[l..], coded)
        };
        let r: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / norm;
        // ties keep the earliest lag in the scan
        if r > best.1 {
            best = (lag, r);
        }
    }
    best
}

/// Shifts and truncates a clean/coded pair to a common, delay-compensated length.
pub fn align_pair(clean: &AudioBuffer, coded: &AudioBuffer, max_lag: usize) -> Result<AlignedPair> {
    let (lag, correlation) = estimate_lag(clean.samples(), coded.samples(), max_lag);
    let aligned = correlation >= MIN_ALIGN_CORRELATION;
    let (c, d): (&[f64], &[f64]) = if !aligned {
        log::warn!(
            "alignment failed: correlation peak {correlation:.3} below {MIN_ALIGN_CORRELATION}; pair left unshifted"
        );
        (clean.samples(), coded.samples())
    } else if lag >= 0 {
        (clean.samples(), &coded.samples()[lag as usize..])
    } else {
        (&clean.samples()[(-lag) as usize..], coded.samples())
    };
    let n = c.len().min(d.len());
    Ok(AlignedPair {
        clean: AudioBuffer::new(c[..n].to_vec(), clean.sample_rate(), SignalRole::Clean)?,
        coded: AudioBuffer::new(d[..n].to_vec(), coded.sample_rate(), SignalRole::Coded)?,
        lag: if aligned { lag } else { 0 },
        correlation,
        aligned,
    })
}

/// Reads a clean WAV and an externally coded WAV and aligns them.
pub fn load_pair(
    clean_path: impl AsRef<Path>,
    coded_path: impl AsRef<Path>,
    max_lag: usize,
) -> Result<AlignedPair> {
    let clean = read_wav(clean_path, SignalRole::Clean)?;
    let coded = read_wav(coded_path, SignalRole::Coded)?;
    align_pair(&clean, &coded, max_lag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::WavEncoding;
    use crate::metrics::segmental_snr;
    use crate::synth::{synth_utterance, SynthStyle};
    use rand::Rng;

    fn speech() -> AudioBuffer {
        synth_utterance(21, SynthStyle::A, 1.5).unwrap()
    }

    #[test]
    fn silence_stays_silent() {
        let z = AudioBuffer::from_samples(vec![0.0; 4000], SignalRole::Clean).unwrap();
        let out = surrogate_code(&z, &DegradeProfile::preset(Preset::QLow, 1)).unwrap();
        assert!(out.is_silent());
        assert_eq!(out.len(), 4000);
    }

    #[test]
    fn deterministic_and_length_preserving() {
        let x = speech();
        let p = DegradeProfile::preset(Preset::QMid, 3);
        let a = surrogate_code(&x, &p).unwrap();
        let b = surrogate_code(&x, &p).unwrap();
        assert_eq!(a.len(), x.len());
        assert_eq!(
            a.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn lower_preset_is_worse() {
        let x = speech();
        let low = surrogate_code(&x, &DegradeProfile::preset(Preset::QLow, 3)).unwrap();
        let high = surrogate_code(&x, &DegradeProfile::preset(Preset::QHigh, 3)).unwrap();
        let s_low = segmental_snr(&x, &low, 256).unwrap();
        let s_high = segmental_snr(&x, &high, 256).unwrap();
        assert!(s_low < s_high, "{s_low} vs {s_high}");
        let lsd_low = crate::metrics::log_spectral_distance(&x, &low).unwrap();
        let lsd_high = crate::metrics::log_spectral_distance(&x, &high).unwrap();
        assert!(lsd_low > lsd_high);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("q_ultra".parse::<Preset>().is_err());
    }

    #[test]
    fn recovers_known_delay() {
        let x = speech();
        let mut delayed = vec![0.0; 37];
        delayed.extend_from_slice(x.samples());
        let coded = AudioBuffer::from_samples(delayed, SignalRole::Coded).unwrap();
        let pair = align_pair(&x, &coded, 200).unwrap();
        assert!(pair.aligned);
        assert_eq!(pair.lag, 37);
        let (lag, corr) = estimate_lag(pair.clean.samples(), pair.coded.samples(), 0);
        assert_eq!(lag, 0);
        assert!(corr > 0.99);
    }

    #[test]
    fn identical_files_have_zero_lag() {
        let dir = tempfile::tempdir().unwrap();
        let x = speech();
        let a = dir.path().join("a.wav");
        let b = dir.path().join("b.wav");
        crate::dsp::write_wav(&a, &x, WavEncoding::Float32).unwrap();
        crate::dsp::write_wav(&b, &x, WavEncoding::Float32).unwrap();
        let pair = load_pair(&a, &b, 100).unwrap();
        assert_eq!(pair.lag, 0);
        assert!(pair.aligned);
        assert!(load_pair(dir.path().join("missing.wav"), &b, 10).is_err());
    }

    #[test]
    fn unrelated_noise_fails_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let pair = align_pair(
            &AudioBuffer::from_samples(a, SignalRole::Clean).unwrap(),
            &AudioBuffer::from_samples(b, SignalRole::Coded).unwrap(),
            100,
        )
        .unwrap();
        assert!(!pair.aligned);
        assert_eq!(pair.lag, 0);
        assert_eq!(pair.clean.len(), 8000);
    }
}
