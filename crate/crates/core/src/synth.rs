//! Seeded speech-like test material: voiced segments built from formant-shaped
//! harmonics with a drifting pitch, fricative noise bursts and pauses over a
//! faint noise floor. Two styles stand in for two recording corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioBuffer, SignalRole, SAMPLE_RATE};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthStyle {
    /// Mixed male/female pitch, neutral vowels.
    A,
    /// Higher pitch, brighter formants, shorter pauses.
    B,
}

struct StyleParams {
    f0: (f64, f64),
    f1: (f64, f64),
    f2: (f64, f64),
    f3: (f64, f64),
    tilt_hz: f64,
    pause_ms: (f64, f64),
    fricative_hz: (f64, f64),
}

impl SynthStyle {
    fn params(self) -> StyleParams {
        match self {
            SynthStyle::A => StyleParams {
                f0: (85.0, 230.0),
                f1: (300.0, 800.0),
                f2: (850.0, 2300.0),
                f3: (2300.0, 3200.0),
                tilt_hz: 500.0,
                pause_ms: (60.0, 220.0),
                fricative_hz: (2500.0, 6000.0),
            },
            SynthStyle::B => StyleParams {
                f0: (140.0, 300.0),
                f1: (350.0, 950.0),
                f2: (1000.0, 2700.0),
                f3: (2600.0, 3600.0),
                tilt_hz: 800.0,
                pause_ms: (40.0, 140.0),
                fricative_hz: (3000.0, 7000.0),
            },
        }
    }
}

const NOISE_FLOOR: f64 = 3e-5;
const RAMP_MS: f64 = 20.0;
const ENV_BLOCK: usize = 32;

fn ms(v: f64) -> usize {
    (v * SAMPLE_RATE as f64 / 1000.0) as usize
}

fn spectral_envelope(f: f64, formants: &[(f64, f64); 3], tilt_hz: f64) -> f64 {
    let peaks: f64 = formants
        .iter()
        .enumerate()
        .map(|(i, &(fc, bw))| {
            let g = [1.0, 0.6, 0.35][i];
            let x = (f - fc) / (bw / 2.0);
            g / (1.0 + x * x)
        })
        .sum();
    (peaks + 0.01) / (1.0 + f / tilt_hz)
}

/// Raised-cosine fade-in and fade-out over `RAMP_MS`.
fn ramp(i: usize, len: usize) -> f64 {
    let r = ms(RAMP_MS).min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= r {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / r as f64).cos()
    }
}

fn voiced(rng: &mut ChaCha8Rng, p: &StyleParams, len: usize, out: &mut Vec<f64>) {
    let fs = SAMPLE_RATE as f64;
    let f0_start = rng.random_range(p.f0.0..p.f0.1);
    let f0_end = f0_start * rng.random_range(0.8..1.2);
    let pick = |rng: &mut ChaCha8Rng, r: (f64, f64)| rng.random_range(r.0..r.1);
    let start = [pick(rng, p.f1), pick(rng, p.f2), pick(rng, p.f3)];
    let end = [pick(rng, p.f1), pick(rng, p.f2), pick(rng, p.f3)];
    let bws = [
        rng.random_range(60.0..120.0),
        rng.random_range(90.0..160.0),
        rng.random_range(150.0..250.0),
    ];
    let gain = 0.1 * 10f64.powf(rng.random_range(-6.0..3.0) / 20.0);
    let max_harm = (7800.0 / (f0_start.min(f0_end) * 0.95)) as usize;
    let mut phases: Vec<f64> = (0..max_harm).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut amps = vec![0.0; max_harm];
    for i in 0..len {
        let pos = i as f64 / len as f64;
        let f0 = f0_start + (f0_end - f0_start) * pos;
        if i % ENV_BLOCK == 0 {
            let formants = [0, 1, 2].map(|j| (start[j] + (end[j] - start[j]) * pos, bws[j]));
            for (h, a) in amps.iter_mut().enumerate() {
                let f = (h + 1) as f64 * f0;
                *a = if f < 7800.0 {
                    spectral_envelope(f, &formants, p.tilt_hz)
                } else {
                    0.0
                };
            }
        }
        let mut s = 0.0;
        for (h, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
            *ph += (h + 1) as f64 * f0 / fs;
            *ph -= ph.floor();
            if *a > 0.0 {
                s += a * (2.0 * std::f64::consts::PI * *ph).sin();
            }
        }
        out.push(gain * ramp(i, len) * s);
    }
}

fn fricative(rng: &mut ChaCha8Rng, p: &StyleParams, len: usize, out: &mut Vec<f64>) {
    let fs = SAMPLE_RATE as f64;
    let fc = rng.random_range(p.fricative_hz.0..p.fricative_hz.1);
    let r: f64 = 0.9;
    let theta = 2.0 * std::f64::consts::PI * fc / fs;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let gain = 0.02 * 10f64.powf(rng.random_range(-6.0..3.0) / 20.0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut y1, mut y2, mut x1) = (0.0, 0.0, 0.0);
    for i in 0..len {
        let x: f64 = normal.sample(rng);
        // first difference tilts the excitation upwards before the resonator
        let y = (x - x1) + a1 * y1 + a2 * y2;
        x1 = x;
        y2 = y1;
        y1 = y;
        out.push(gain * ramp(i, len) * y * (1.0 - r));
    }
}

/// One utterance of roughly `duration_s` seconds.
pub fn synth_utterance(seed: u64, style: SynthStyle, duration_s: f64) -> Result<AudioBuffer> {
    let p = style.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (duration_s * SAMPLE_RATE as f64) as usize;
    let mut out = Vec::with_capacity(total + ms(400.0));
    // short lead-in pause
    out.resize(ms(rng.random_range(40.0..120.0)), 0.0);
    while out.len() < total {
        let u: f64 = rng.random();
        if u < 0.6 {
            let len = ms(rng.random_range(120.0..350.0));
            voiced(&mut rng, &p, len, &mut out);
        } else if u < 0.8 {
            let len = ms(rng.random_range(60.0..150.0));
            fricative(&mut rng, &p, len, &mut out);
        } else {
            let len = ms(rng.random_range(p.pause_ms.0..p.pause_ms.1));
            out.resize(out.len() + len, 0.0);
        }
    }
    out.truncate(total);
    let normal = Normal::new(0.0, NOISE_FLOOR).unwrap();
    for s in out.iter_mut() {
        *s += normal.sample(&mut rng);
    }
    AudioBuffer::from_samples(out, SignalRole::Clean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synth_utterance(4, SynthStyle::A, 1.0).unwrap();
        let b = synth_utterance(4, SynthStyle::A, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16000);
        assert!(a.samples().iter().all(|s| s.abs() < 1.0));
        assert!(a.rms() > 1e-3);
        let c = synth_utterance(5, SynthStyle::A, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn styles_differ() {
        let a = synth_utterance(1, SynthStyle::A, 0.5).unwrap();
        let b = synth_utterance(1, SynthStyle::B, 0.5).unwrap();
        assert_ne!(a, b);
    }
}
