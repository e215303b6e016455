use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only sample rate accepted by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// What a buffer holds within the clean → coded → enhanced chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalRole {
    Clean,
    Coded,
    Enhanced,
}

/// Mono 16 kHz audio with samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
    pub role: SignalRole,
}

impl AudioBuffer {
    /// Wraps samples, rejecting other sample rates and non-finite values.
    pub fn new(samples: Vec<f64>, sample_rate: u32, role: SignalRole) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
            role,
        })
    }

    pub fn from_samples(samples: Vec<f64>, role: SignalRole) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE, role)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_role(mut self, role: SignalRole) -> Self {
        self.role = role;
        self
    }

    /// Keeps only the first `len` samples.
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
            role: self.role,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|&s| s == 0.0)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// On-disk sample encoding for WAV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

/// Reads a mono 16 kHz WAV file (16-bit PCM or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>, role: SignalRole) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate(spec.sample_rate));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioBuffer::new(samples, spec.sample_rate, role)
}

/// Writes a buffer as a mono 16 kHz WAV file.
///
/// PCM output clips to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = match encoding {
        WavEncoding::Pcm16 => hound::WavSpec {
            channels: 1,
            sample_rate: buf.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        },
        WavEncoding::Float32 => hound::WavSpec {
            channels: 1,
            sample_rate: buf.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &buf.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_other_rates_and_nan() {
        assert!(matches!(
            AudioBuffer::new(vec![0.0; 4], 8000, SignalRole::Clean),
            Err(Error::SampleRate(8000))
        ));
        assert!(matches!(
            AudioBuffer::from_samples(vec![0.0, f64::NAN], SignalRole::Clean),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn wav_round_trip_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f64> = (0..400).map(|i| ((i as f64) * 0.05).sin() * 0.5).collect();
        let buf = AudioBuffer::from_samples(samples.clone(), SignalRole::Clean).unwrap();

        let p = dir.path().join("f.wav");
        write_wav(&p, &buf, WavEncoding::Float32).unwrap();
        let back = read_wav(&p, SignalRole::Clean).unwrap();
        for (a, b) in back.samples().iter().zip(&samples) {
            assert!((a - b).abs() < 1e-7);
        }

        let p = dir.path().join("i.wav");
        write_wav(&p, &buf, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&p, SignalRole::Clean).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.samples().iter().zip(&samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rejects_stereo_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&p, SignalRole::Coded),
            Err(Error::InvalidInput(_))
        ));
    }
}
