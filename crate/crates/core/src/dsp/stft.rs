use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::audio::{AudioBuffer, SignalRole};
use crate::error::{Error, Result};

/// 32 ms at 16 kHz.
pub const FRAME_LEN: usize = 512;
pub const HOP: usize = 256;
pub const N_BINS: usize = FRAME_LEN / 2 + 1;
/// Bins 0..205 cover 0 to 6.4 kHz; the rest is passed through untouched.
pub const N_PROCESSED: usize = 205;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub n_bins: usize,
    pub n_processed: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: FRAME_LEN,
            hop: HOP,
            fft_len: FRAME_LEN,
            n_bins: N_BINS,
            n_processed: N_PROCESSED,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("stft: {msg}")));
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return bad("frame_len must be even and at least 2");
        }
        if self.hop * 2 != self.frame_len {
            return bad("hop must be frame_len / 2");
        }
        if self.fft_len != self.frame_len {
            return bad("fft_len must equal frame_len");
        }
        if self.n_bins != self.fft_len / 2 + 1 {
            return bad("n_bins must be fft_len / 2 + 1");
        }
        if self.n_processed > self.n_bins {
            return bad("n_processed exceeds n_bins");
        }
        Ok(())
    }

    /// Number of whole frames in a signal of `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Length of the overlap-added signal for `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }
}

/// Periodic square-root Hann window.
///
/// Its square overlap-adds to one at 50 % overlap, so it serves as both
/// analysis and synthesis window.
pub fn sqrt_hann(frame_len: usize) -> Result<Vec<f64>> {
    if frame_len == 0 || frame_len % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "window length must be even and nonzero, got {frame_len}"
        )));
    }
    let n = frame_len as f64;
    Ok((0..frame_len)
        .map(|i| {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos();
            hann.max(0.0).sqrt()
        })
        .collect())
}

/// Complex STFT frames, `T × n_bins`, on a linear magnitude scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<Complex64>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Magnitudes of the first `n_processed` bins.
    pub fn processed_magnitudes(&self) -> Array2<f64> {
        let k = self.config.n_processed;
        self.frames
            .slice(ndarray::s![.., ..k])
            .mapv(|c| c.norm())
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }
}

/// Forward STFT without pre-padding; a trailing partial frame is dropped.
pub fn stft(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let x = buf.samples();
    if x.len() < cfg.frame_len {
        return Err(Error::TooShort {
            len: x.len(),
            need: cfg.frame_len,
        });
    }
    let window = sqrt_hann(cfg.frame_len)?;
    let frames = cfg.frame_count(x.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let mut out = Array2::<Complex64>::zeros((frames, cfg.n_bins));
    let mut scratch = vec![Complex64::default(); cfg.fft_len];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, s) in scratch.iter_mut().enumerate() {
            *s = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process(&mut scratch);
        for (k, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = scratch[k];
        }
    }
    Ok(Spectrogram {
        frames: out,
        config: *cfg,
    })
}

/// Inverse STFT: inverse FFT per frame, synthesis window, overlap-add.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<AudioBuffer> {
    cfg.validate()?;
    if spec.config != *cfg {
        return Err(Error::InvalidConfig(
            "spectrogram was produced with a different STFT configuration".into(),
        ));
    }
    if spec.frames.ncols() != cfg.n_bins {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bins", cfg.n_bins),
            actual: format!("{} bins", spec.frames.ncols()),
        });
    }
    let window = sqrt_hann(cfg.frame_len)?;
    let frames = spec.num_frames();
    let n = cfg.fft_len;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0; cfg.synthesis_len(frames)];
    let mut scratch = vec![Complex64::default(); n];
    for t in 0..frames {
        let row = spec.frames.row(t);
        for k in 0..cfg.n_bins {
            scratch[k] = row[k];
        }
        // Hermitian extension of the half spectrum.
        for k in cfg.n_bins..n {
            scratch[k] = row[n - k].conj();
        }
        scratch[0].im = 0.0;
        scratch[n / 2].im = 0.0;
        ifft.process(&mut scratch);
        let start = t * cfg.hop;
        for i in 0..cfg.frame_len {
            out[start + i] += scratch[i].re / n as f64 * window[i];
        }
    }
    AudioBuffer::from_samples(out, SignalRole::Enhanced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn buf(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::from_samples(samples, SignalRole::Clean).unwrap()
    }

    #[test]
    fn window_closed_form_points() {
        let w = sqrt_hann(4).unwrap();
        let h = 0.5f64.sqrt();
        let expect = [0.0, h, 1.0, h];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = sqrt_hann(512).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[256] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_squares_overlap_add_to_one() {
        let w = sqrt_hann(512).unwrap();
        let worst = (0..256)
            .map(|i| (w[i] * w[i] + w[i + 256] * w[i + 256] - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn window_rejects_odd_and_zero() {
        assert!(sqrt_hann(0).is_err());
        assert!(sqrt_hann(511).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = stft(&buf(vec![0.0; 1024]), &StftConfig::default()).unwrap();
        assert_eq!(s.frames.dim(), (3, 257));
        assert!(s.frames.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn frame_count_for_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..8192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = stft(&buf(x), &StftConfig::default()).unwrap();
        assert_eq!(s.num_frames(), 31);
    }

    #[test]
    fn bin_centered_cosine_peaks_at_its_bin_and_matches_direct_dft() {
        let k0 = 32usize;
        let x: Vec<f64> = (0..512)
            .map(|n| (2.0 * std::f64::consts::PI * k0 as f64 * n as f64 / 512.0).cos())
            .collect();
        let s = stft(&buf(x.clone()), &StftConfig::default()).unwrap();
        let mags = s.magnitudes();
        let peak = mags
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k0);

        // direct DFT of the windowed frame
        let w = sqrt_hann(512).unwrap();
        for k in [0usize, 31, 32, 33, 100, 256] {
            let mut acc = Complex64::default();
            for n in 0..512 {
                let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                acc += Complex64::from_polar(x[n] * w[n], ph);
            }
            assert!((acc - s.frames[[0, k]]).norm() < 1e-9);
        }
    }

    #[test]
    fn short_signal_rejected() {
        let err = stft(&buf(vec![0.0; 511]), &StftConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooShort { len: 511, need: 512 }));
    }

    #[test]
    fn istft_lengths_and_zero() {
        let cfg = StftConfig::default();
        let spec = Spectrogram {
            frames: Array2::zeros((1, 257)),
            config: cfg,
        };
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), 512);
        assert!(y.is_silent());
    }

    #[test]
    fn istft_rejects_mismatched_config() {
        let cfg = StftConfig::default();
        let spec = Spectrogram {
            frames: Array2::zeros((2, 257)),
            config: StftConfig {
                n_processed: 100,
                ..cfg
            },
        };
        assert!(matches!(istft(&spec, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = istft(&stft(&buf(x.clone()), &cfg).unwrap(), &cfg).unwrap();
        let end = y.len() - cfg.frame_len;
        let peak = x[cfg.frame_len..end].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = (cfg.frame_len..end)
            .map(|i| (y.samples()[i] - x[i]).abs())
            .fold(0.0f64, f64::max);
        assert!(worst / peak < 1e-12, "{worst}");
    }
}
