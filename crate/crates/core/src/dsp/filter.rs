//! Preprocessing stand-ins for ITU-T P.341 band limiting and P.56 level
//! alignment. Neither is bit-exact with the ITU tools.

use crate::dsp::audio::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Default upper band edge.
pub const BAND_LIMIT_HZ: f64 = 7000.0;
/// Centre of the low-frequency transition band (pass above ~95 Hz, stop below ~45 Hz).
pub const HIGHPASS_CENTER_HZ: f64 = 70.0;
/// The low-pass transition is centred this far above the cutoff so that the
/// cutoff itself stays in the passband.
const LOWPASS_OFFSET_HZ: f64 = 200.0;
const TAPS: usize = 1025;
const STOPBAND_DB: f64 = 60.0;

/// Default active speech level in dB relative to full scale.
pub const TARGET_LEVEL_DB: f64 = -26.0;
const LEVEL_FRAME: usize = 256;
const ACTIVITY_RANGE_DB: f64 = 30.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed linear-phase band-pass taps.
pub fn band_pass_taps(low_hz: f64, high_hz: f64) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let beta = 0.1102 * (STOPBAND_DB - 8.7);
    let mid = (TAPS - 1) as f64 / 2.0;
    let norm = bessel_i0(beta);
    let (lo, hi) = (2.0 * low_hz / fs, 2.0 * high_hz / fs);
    (0..TAPS)
        .map(|n| {
            let m = n as f64 - mid;
            let r = m / mid;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm;
            w * (hi * sinc(hi * m) - lo * sinc(lo * m))
        })
        .collect()
}

/// Zero-phase (delay-compensated) FIR band limiting to roughly 70 Hz – `cutoff_hz`.
///
/// At least 40 dB of attenuation above `cutoff_hz + 400` and below 40 Hz,
/// under 0.5 dB ripple from 100 Hz up to `cutoff_hz - 200`.
pub fn band_limit(buf: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    if buf.sample_rate() != SAMPLE_RATE {
        return Err(Error::SampleRate(buf.sample_rate()));
    }
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    if !(cutoff_hz > HIGHPASS_CENTER_HZ && cutoff_hz + LOWPASS_OFFSET_HZ < nyquist) {
        return Err(Error::InvalidConfig(format!(
            "band limit cutoff {cutoff_hz} Hz out of range"
        )));
    }
    let h = band_pass_taps(HIGHPASS_CENTER_HZ, cutoff_hz + LOWPASS_OFFSET_HZ);
    let delay = (TAPS - 1) / 2;
    let x = buf.samples();
    let n = x.len() as isize;
    let y: Vec<f64> = (0..x.len() as isize)
        .map(|i| {
            // y[i] = sum_j h[j] x[i + delay - j]
            let j_lo = (i + delay as isize - (n - 1)).max(0) as usize;
            let j_hi = ((i + delay as isize).min(TAPS as isize - 1)) as usize;
            (j_lo..=j_hi)
                .map(|j| h[j] * x[(i + delay as isize - j as isize) as usize])
                .sum()
        })
        .collect();
    AudioBuffer::new(y, buf.sample_rate(), buf.role)
}

/// Active-frame RMS: RMS over 16 ms frames whose energy is within 30 dB of
/// the loudest frame. Zero for an all-zero signal.
pub fn active_rms(samples: &[f64]) -> f64 {
    let energies: Vec<(f64, usize)> = samples
        .chunks(LEVEL_FRAME)
        .map(|c| (c.iter().map(|s| s * s).sum::<f64>(), c.len()))
        .collect();
    let peak = energies
        .iter()
        .map(|(e, n)| e / *n as f64)
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let threshold = peak * 10f64.powf(-ACTIVITY_RANGE_DB / 10.0);
    let (e, n) = energies
        .iter()
        .filter(|(e, n)| e / *n as f64 >= threshold)
        .fold((0.0, 0usize), |(ae, an), (e, n)| (ae + e, an + n));
    (e / n as f64).sqrt()
}

/// Scales the buffer so its active-frame RMS equals `10^(target_db / 20)`.
/// Returns the scaled buffer and the applied factor.
pub fn level_normalize(buf: &AudioBuffer, target_db: f64) -> Result<(AudioBuffer, f64)> {
    let rms = active_rms(buf.samples());
    if rms == 0.0 {
        return Err(Error::CannotNormalize);
    }
    let scale = 10f64.powf(target_db / 20.0) / rms;
    let y = buf.samples().iter().map(|s| s * scale).collect();
    Ok((AudioBuffer::new(y, buf.sample_rate(), buf.role)?, scale))
}
