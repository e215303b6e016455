//! Objective quality measures: log-spectral distance and segmental SNR.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, AudioBuffer, StftConfig};
use crate::error::{Error, Result};

const LSD_EPS: f64 = 1e-12;
pub const SEG_FRAME: usize = 256;
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;
/// Frames more than this far below the loudest reference frame are skipped.
const SEG_ACTIVITY_DB: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lsd_db: f64,
    pub seg_snr_db: f64,
}

fn check_lengths(a: &AudioBuffer, b: &AudioBuffer) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", a.len()),
            actual: format!("{} samples", b.len()),
        });
    }
    Ok(())
}

/// Frame-averaged RMS difference of dB magnitudes over the processed bins.
pub fn spectral_lsd(reference: &Array2<f64>, test: &Array2<f64>, bins: usize) -> Result<f64> {
    if reference.dim() != test.dim() || reference.ncols() < bins {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", reference.dim()),
            actual: format!("{:?}", test.dim()),
        });
    }
    if reference.nrows() == 0 || bins == 0 {
        return Err(Error::Empty("no frames for log-spectral distance".into()));
    }
    let total: f64 = reference
        .rows()
        .into_iter()
        .zip(test.rows())
        .map(|(r, t)| {
            let ms = r
                .iter()
                .zip(t.iter())
                .take(bins)
                .map(|(a, b)| {
                    let d = 20.0 * (a + LSD_EPS).log10() - 20.0 * (b + LSD_EPS).log10();
                    d * d
                })
                .sum::<f64>()
                / bins as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / reference.nrows() as f64)
}

/// Log-spectral distance between two aligned signals, in dB.
pub fn log_spectral_distance(reference: &AudioBuffer, test: &AudioBuffer) -> Result<f64> {
    check_lengths(reference, test)?;
    let cfg = StftConfig::default();
    let r = stft(reference, &cfg)?.magnitudes();
    let t = stft(test, &cfg)?.magnitudes();
    spectral_lsd(&r, &t, cfg.n_processed)
}

/// Segmental SNR over non-overlapping frames, each clamped to [-10, 35] dB,
/// averaged over frames whose reference energy is within 40 dB of the peak.
pub fn segmental_snr(reference: &AudioBuffer, test: &AudioBuffer, frame: usize) -> Result<f64> {
    check_lengths(reference, test)?;
    if frame == 0 {
        return Err(Error::InvalidConfig("segment length must be nonzero".into()));
    }
    let frames: Vec<(f64, f64)> = reference
        .samples()
        .chunks_exact(frame)
        .zip(test.samples().chunks_exact(frame))
        .map(|(r, t)| {
            let sig: f64 = r.iter().map(|v| v * v).sum();
            let err: f64 = r.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            (sig, err)
        })
        .collect();
    let peak = frames.iter().map(|f| f.0).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::NoActiveFrames);
    }
    let threshold = peak * 10f64.powf(-SEG_ACTIVITY_DB / 10.0);
    let snrs: Vec<f64> = frames
        .iter()
        .filter(|(sig, _)| *sig >= threshold)
        .map(|(sig, err)| {
            let snr = if *err == 0.0 {
                SEG_SNR_MAX_DB
            } else {
                10.0 * (sig / err).log10()
            };
            snr.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB)
        })
        .collect();
    if snrs.is_empty() {
        return Err(Error::NoActiveFrames);
    }
    Ok(snrs.iter().sum::<f64>() / snrs.len() as f64)
}

pub fn evaluate(reference: &AudioBuffer, test: &AudioBuffer) -> Result<MetricReport> {
    Ok(MetricReport {
        lsd_db: log_spectral_distance(reference, test)?,
        seg_snr_db: segmental_snr(reference, test, SEG_FRAME)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SignalRole;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn buf(x: Vec<f64>) -> AudioBuffer {
        AudioBuffer::from_samples(x, SignalRole::Clean).unwrap()
    }

    #[test]
    fn identical_signals() {
        let x = buf(noise(1, 4096));
        assert_eq!(log_spectral_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(segmental_snr(&x, &x, 256).unwrap(), 35.0);
    }

    #[test]
    fn doubled_signal_is_six_db() {
        let x = noise(2, 4096);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = log_spectral_distance(&buf(x), &buf(y)).unwrap();
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-9, "{d}");
    }

    #[test]
    fn calibrated_ten_db_noise() {
        let x = noise(3, 256 * 20);
        let n = noise(4, 256 * 20);
        let mut y = x.clone();
        for (xs, (ns, ys)) in x
            .chunks(256)
            .zip(n.chunks(256).zip(y.chunks_mut(256)))
        {
            let ps: f64 = xs.iter().map(|v| v * v).sum();
            let pn: f64 = ns.iter().map(|v| v * v).sum();
            let g = (ps / pn / 10.0).sqrt();
            for ((yv, xv), nv) in ys.iter_mut().zip(xs).zip(ns) {
                *yv = xv + g * nv;
            }
        }
        let snr = segmental_snr(&buf(x), &buf(y), 256).unwrap();
        assert!((snr - 10.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn silent_reference_has_no_active_frames() {
        let z = buf(vec![0.0; 1024]);
        let x = buf(noise(5, 1024));
        assert!(matches!(
            segmental_snr(&z, &x, 256),
            Err(Error::NoActiveFrames)
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = buf(noise(6, 1024));
        let b = buf(noise(6, 1000));
        assert!(log_spectral_distance(&a, &b).is_err());
        assert!(segmental_snr(&a, &b, 256).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lsd_of_scaled_copy(c in 0.05f64..20.0, seed in 0u64..1000) {
            let x = noise(seed, 2048);
            let y: Vec<f64> = x.iter().map(|v| c * v).collect();
            let d = log_spectral_distance(&buf(x), &buf(y)).unwrap();
            prop_assert!((d - (20.0 * c.log10()).abs()).abs() < 1e-8);
        }
    }
}
