//! Mask arithmetic: ideal ratio masks, bounding, the modified mask and
//! target used for training, mask application with the coded phase, mask
//! statistics and the oracle experiments.

use ndarray::{s, Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    cepstrum_to_magnitude, istft, real_cepstrum, sqrt_hann, stft, AudioBuffer, SignalRole,
    Spectrogram, StftConfig, FRAME_LEN, LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::metrics;

/// Division guard in the ratio mask.
pub const DEFAULT_GAMMA: f64 = 1e-9;
pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_RHO: f64 = 1.0;
/// Number of low quefrencies replaced in the cepstral oracle.
pub const CEPSTRUM_KEEP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Irm,
    Bounded,
    Modified,
    Predicted,
}

/// Real-valued gains, `T × 205`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub values: Array2<f64>,
    pub kind: MaskKind,
}

impl MaskMatrix {
    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub rho: f64,
    /// Oracle bound; `None` leaves the mask unbounded.
    pub bound: Option<f64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            rho: DEFAULT_RHO,
            bound: None,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if !(self.rho >= 0.0 && self.rho <= self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= rho <= alpha, got rho={} alpha={}",
                self.rho, self.alpha
            )));
        }
        if let Some(b) = self.bound {
            if !(b > 0.0) {
                return Err(Error::InvalidConfig(format!("bound must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// `|X| / (|X̃| + γ)`, unbounded.
///
/// The ratio mask proper asks for `γ > 0`; `γ = 0` is accepted so the
/// training algebra can be checked exactly, and yields 0 where both
/// magnitudes are 0.
pub fn compute_irm(clean_mag: &Array2<f64>, coded_mag: &Array2<f64>, gamma: f64) -> Result<MaskMatrix> {
    same_shape(clean_mag, coded_mag)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be nonnegative, got {gamma}")));
    }
    let values = Zip::from(clean_mag)
        .and(coded_mag)
        .map_collect(|&c, &d| {
            let den = d + gamma;
            if den == 0.0 {
                0.0
            } else {
                c / den
            }
        });
    Ok(MaskMatrix {
        values,
        kind: MaskKind::Irm,
    })
}

/// Elementwise `min(mask, bound)`; an infinite bound is the identity.
pub fn bound_mask(m: &MaskMatrix, bound: f64) -> Result<MaskMatrix> {
    if !(bound > 0.0) {
        return Err(Error::InvalidConfig(format!("bound must be positive, got {bound}")));
    }
    Ok(MaskMatrix {
        values: m.values.mapv(|v| v.min(bound)),
        kind: MaskKind::Bounded,
    })
}

/// Keeps ratio-mask values up to `alpha` and replaces the rest with `rho`.
pub fn modified_mask(irm: &MaskMatrix, cfg: &MaskConfig) -> Result<MaskMatrix> {
    if irm.kind != MaskKind::Irm {
        return Err(Error::InvalidInput(format!(
            "modified mask needs a ratio mask, got {:?}",
            irm.kind
        )));
    }
    cfg.validate()?;
    let (alpha, rho) = (cfg.alpha, cfg.rho);
    Ok(MaskMatrix {
        values: irm.values.mapv(|v| if v <= alpha { v } else { rho }),
        kind: MaskKind::Modified,
    })
}

/// Training target magnitudes `M̃ · |X̃|`.
pub fn modified_target(m: &MaskMatrix, coded_mag: &Array2<f64>) -> Result<Array2<f64>> {
    same_shape(&m.values, coded_mag)?;
    Ok(&m.values * coded_mag)
}

/// Scales the processed bins of the coded spectrogram by the mask.
///
/// Phase is the coded phase; bins at or above the mask width pass through.
pub fn apply_mask(m: &MaskMatrix, coded: &Spectrogram) -> Result<Spectrogram> {
    if m.num_frames() != coded.num_frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", coded.num_frames()),
            actual: format!("{} frames", m.num_frames()),
        });
    }
    let k = m.values.ncols();
    if k > coded.frames.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("at most {} bins", coded.frames.ncols()),
            actual: format!("{k} bins"),
        });
    }
    let mut out = coded.clone();
    Zip::from(out.frames.slice_mut(s![.., ..k]))
        .and(&m.values)
        .for_each(|x, &g| *x *= g);
    Ok(out)
}

/// Replaces the magnitudes of the first `mags.ncols()` bins, keeping the coded phase.
pub fn replace_magnitudes(coded: &Spectrogram, mags: &Array2<f64>) -> Result<Spectrogram> {
    if mags.nrows() != coded.num_frames() || mags.ncols() > coded.frames.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", coded.frames.dim()),
            actual: format!("{:?}", mags.dim()),
        });
    }
    let k = mags.ncols();
    let mut out = coded.clone();
    Zip::from(out.frames.slice_mut(s![.., ..k]))
        .and(mags)
        .for_each(|x, &mag| {
            let n = x.norm();
            *x = if n > 0.0 {
                *x * (mag / n)
            } else {
                Complex64::new(mag, 0.0)
            };
        });
    Ok(out)
}

/// Bucket upper edges: [0,1], (1,2], (2,5], (5,∞].
pub const HISTOGRAM_EDGES: [f64; 5] = [0.0, 1.0, 2.0, 5.0, f64::INFINITY];

/// Distribution of mask values over the four threshold regions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskHistogram {
    pub counts: [u64; 4],
}

impl MaskHistogram {
    pub fn bucket_of(v: f64) -> usize {
        if v <= 1.0 {
            0
        } else if v <= 2.0 {
            1
        } else if v <= 5.0 {
            2
        } else {
            3
        }
    }

    pub fn add(&mut self, m: &MaskMatrix) {
        for &v in m.values.iter() {
            self.counts[Self::bucket_of(v)] += 1;
        }
    }

    pub fn merge(&mut self, other: &MaskHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> [f64; 4] {
        let n = self.total() as f64;
        if n == 0.0 {
            return [0.0; 4];
        }
        self.counts.map(|c| c as f64 / n)
    }

    pub fn labels() -> [&'static str; 4] {
        ["[0,1]", "(1,2]", "(2,5]", "(5,inf]"]
    }
}

pub fn mask_histogram(m: &MaskMatrix) -> Result<MaskHistogram> {
    if m.values.is_empty() {
        return Err(Error::Empty("mask has no values".into()));
    }
    let mut h = MaskHistogram::default();
    h.add(m);
    Ok(h)
}

/// Cepstral oracle: the first `k_keep` quefrencies of the coded frame's real
/// cepstrum (and their mirror images) are taken from the clean frame, and
/// the result is mapped back to a 257-bin magnitude spectrum.
pub fn oracle_cepstrum_substitute(
    coded_frame: &[f64],
    clean_frame: &[f64],
    k_keep: usize,
) -> Result<Vec<f64>> {
    if coded_frame.len() != FRAME_LEN || clean_frame.len() != FRAME_LEN {
        return Err(Error::InvalidInput(format!(
            "cepstral oracle needs two {FRAME_LEN}-sample frames, got {} and {}",
            coded_frame.len(),
            clean_frame.len()
        )));
    }
    let w = sqrt_hann(FRAME_LEN)?;
    let mut c = real_cepstrum(coded_frame, &w, LOG_FLOOR)?;
    let clean = real_cepstrum(clean_frame, &w, LOG_FLOOR)?;
    for q in 0..k_keep.min(FRAME_LEN) {
        c[q] = clean[q];
        if q > 0 {
            c[FRAME_LEN - q] = clean[FRAME_LEN - q];
        }
    }
    cepstrum_to_magnitude(&c)
}

/// One row of an oracle sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub system: OracleSystem,
    /// Log-spectral distance of the enhanced STFT magnitudes against clean.
    pub lsd_db: f64,
    /// Log-spectral distance after synthesis and re-analysis.
    pub lsd_resynth_db: f64,
    pub seg_snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OracleSystem {
    Coded,
    Bound(f64),
    Cepstrum,
}

impl std::fmt::Display for OracleSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleSystem::Coded => write!(f, "coded"),
            OracleSystem::Bound(b) if b.is_infinite() => write!(f, "mask_inf"),
            OracleSystem::Bound(b) => write!(f, "mask_{b}"),
            OracleSystem::Cepstrum => write!(f, "cepstrum_{CEPSTRUM_KEEP}"),
        }
    }
}

/// Truncates a clean/coded pair to the shorter length, refusing pairs whose
/// lengths differ by more than one frame.
pub fn align_lengths(clean: &AudioBuffer, coded: &AudioBuffer) -> Result<(AudioBuffer, AudioBuffer)> {
    let diff = clean.len().abs_diff(coded.len());
    if diff > FRAME_LEN {
        return Err(Error::Alignment(format!(
            "clean has {} samples, coded has {}",
            clean.len(),
            coded.len()
        )));
    }
    let n = clean.len().min(coded.len());
    Ok((clean.truncated(n), coded.truncated(n)))
}

/// Oracle enhancement of one pair with `min(IRM, b)` for each bound, plus
/// the coded baseline and (optionally) the cepstral oracle.
pub fn oracle_sweep(
    clean: &AudioBuffer,
    coded: &AudioBuffer,
    bounds: &[f64],
    gamma: f64,
    include_cepstrum: bool,
) -> Result<Vec<OracleRow>> {
    let cfg = StftConfig::default();
    let (clean, coded) = align_lengths(clean, coded)?;
    let clean_spec = stft(&clean, &cfg)?;
    let coded_spec = stft(&coded, &cfg)?;
    let clean_mag = clean_spec.magnitudes();
    let irm = compute_irm(
        &clean_spec.processed_magnitudes(),
        &coded_spec.processed_magnitudes(),
        gamma,
    )?;

    let score = |enhanced: &Spectrogram, system: OracleSystem| -> Result<OracleRow> {
        let lsd_db = metrics::spectral_lsd(&clean_mag, &enhanced.magnitudes(), cfg.n_processed)?;
        let signal = istft(enhanced, &cfg)?.with_role(SignalRole::Enhanced);
        let reference = clean.truncated(signal.len());
        Ok(OracleRow {
            system,
            lsd_db,
            lsd_resynth_db: metrics::log_spectral_distance(&reference, &signal)?,
            seg_snr_db: metrics::segmental_snr(&reference, &signal, metrics::SEG_FRAME)?,
        })
    };

    let mut rows = Vec::with_capacity(bounds.len() + 2);
    rows.push({
        let mut row = score(&coded_spec, OracleSystem::Coded)?;
        // the coded signal needs no synthesis
        row.lsd_resynth_db = metrics::log_spectral_distance(&clean, &coded)?;
        row.seg_snr_db = metrics::segmental_snr(&clean, &coded, metrics::SEG_FRAME)?;
        row
    });
    for &b in bounds {
        let m = bound_mask(&irm, b)?;
        rows.push(score(&apply_mask(&m, &coded_spec)?, OracleSystem::Bound(b))?);
    }
    if include_cepstrum {
        let enhanced = cepstrum_oracle_spectrogram(&clean, &coded, &coded_spec)?;
        rows.push(score(&enhanced, OracleSystem::Cepstrum)?);
    }
    Ok(rows)
}

/// Applies the cepstral oracle frame by frame over the processed bins.
pub fn cepstrum_oracle_spectrogram(
    clean: &AudioBuffer,
    coded: &AudioBuffer,
    coded_spec: &Spectrogram,
) -> Result<Spectrogram> {
    let cfg = coded_spec.config;
    let t = coded_spec.num_frames();
    let mut mags = Array2::<f64>::zeros((t, cfg.n_processed));
    for i in 0..t {
        let start = i * cfg.hop;
        let range = start..start + cfg.frame_len;
        let mag = oracle_cepstrum_substitute(
            &coded.samples()[range.clone()],
            &clean.samples()[range],
            CEPSTRUM_KEEP,
        )?;
        for (dst, src) in mags.row_mut(i).iter_mut().zip(mag) {
            *dst = src;
        }
    }
    replace_magnitudes(coded_spec, &mags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn irm(values: Array2<f64>) -> MaskMatrix {
        MaskMatrix {
            values,
            kind: MaskKind::Irm,
        }
    }

    #[test]
    fn irm_points() {
        let m = compute_irm(&array![[1.0, 3.0, 1.0]], &array![[2.0, 3.0, 0.0]], 1e-9).unwrap();
        assert!((m.values[[0, 0]] - 0.5).abs() < 1e-9);
        assert!((m.values[[0, 1]] - 1.0).abs() < 1e-9);
        assert!((m.values[[0, 2]] - 1e9).abs() < 1e-3);
        assert!(compute_irm(&array![[1.0]], &array![[1.0, 2.0]], 1e-9).is_err());
    }

    #[test]
    fn bound_points() {
        let m = irm(array![[3.7, 0.4]]);
        assert_eq!(bound_mask(&m, 2.0).unwrap().values, array![[2.0, 0.4]]);
        assert_eq!(bound_mask(&m, 1.0).unwrap().values, array![[1.0, 0.4]]);
        assert_eq!(bound_mask(&m, f64::INFINITY).unwrap().values, m.values);
    }

    #[test]
    fn modified_mask_points() {
        let cfg = MaskConfig::default();
        let m = modified_mask(&irm(array![[2.0, 2.5, 0.3]]), &cfg).unwrap();
        assert_eq!(m.values, array![[2.0, 1.0, 0.3]]);
        let bad = MaskConfig { rho: 3.0, ..cfg };
        assert!(matches!(
            modified_mask(&irm(array![[1.0]]), &bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn modified_target_points() {
        let ones = MaskMatrix {
            values: Array2::ones((2, 3)),
            kind: MaskKind::Modified,
        };
        let coded = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(modified_target(&ones, &coded).unwrap(), coded);
        let half = MaskMatrix {
            values: array![[0.5]],
            kind: MaskKind::Modified,
        };
        assert_eq!(modified_target(&half, &array![[4.0]]).unwrap(), array![[2.0]]);
    }

    #[test]
    fn modified_target_recovers_clean_below_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = Array2::from_shape_fn((6, 20), |_| rng.random_range(0.01..3.0));
        let coded = Array2::from_shape_fn((6, 20), |_| rng.random_range(0.01..3.0));
        let r = compute_irm(&clean, &coded, 0.0).unwrap();
        let m = modified_mask(&r, &MaskConfig::default()).unwrap();
        let target = modified_target(&m, &coded).unwrap();
        for ((t, c), i) in target.iter().zip(&clean).zip(&r.values) {
            if *i <= 2.0 {
                assert!((t - c).abs() <= 1e-9 * c);
            }
        }
    }

    fn random_spec(seed: u64, t: usize) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spectrogram {
            frames: Array2::from_shape_fn((t, 257), |_| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
            config: StftConfig::default(),
        }
    }

    #[test]
    fn apply_identity_and_zero() {
        let coded = random_spec(1, 4);
        let ones = MaskMatrix {
            values: Array2::ones((4, 205)),
            kind: MaskKind::Predicted,
        };
        assert_eq!(apply_mask(&ones, &coded).unwrap(), coded);

        let mut v = Array2::ones((4, 205));
        v[[2, 17]] = 0.0;
        let m = MaskMatrix {
            values: v,
            kind: MaskKind::Predicted,
        };
        let out = apply_mask(&m, &coded).unwrap();
        assert_eq!(out.frames[[2, 17]].norm(), 0.0);

        let short = MaskMatrix {
            values: Array2::ones((3, 205)),
            kind: MaskKind::Predicted,
        };
        assert!(apply_mask(&short, &coded).is_err());
    }

    #[test]
    fn oracle_mask_inverts_ratio() {
        let coded = random_spec(2, 5);
        let clean = random_spec(3, 5);
        let irm = compute_irm(
            &clean.processed_magnitudes(),
            &coded.processed_magnitudes(),
            1e-9,
        )
        .unwrap();
        let out = apply_mask(&irm, &coded).unwrap().processed_magnitudes();
        let cm = coded.processed_magnitudes();
        for ((o, c), d) in out.iter().zip(clean.processed_magnitudes().iter()).zip(&cm) {
            if *d > 1e-3 {
                assert!((o - c).abs() <= 1e-6 * c, "{o} vs {c}");
            }
        }
    }

    #[test]
    fn histogram_points() {
        let h = mask_histogram(&irm(Array2::ones((3, 4)))).unwrap();
        assert_eq!(h.fractions(), [1.0, 0.0, 0.0, 0.0]);
        let h = mask_histogram(&irm(array![[0.5, 1.5, 3.0, 7.0]])).unwrap();
        assert_eq!(h.fractions(), [0.25; 4]);
        let h = mask_histogram(&irm(array![[1.0, 2.0, 5.0, 5.0000001]])).unwrap();
        assert_eq!(h.counts, [1, 1, 1, 1]);
        assert!(mask_histogram(&irm(Array2::zeros((0, 205)))).is_err());
    }

    fn frame(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn windowed_mag(x: &[f64]) -> Vec<f64> {
        let b = AudioBuffer::from_samples(x.to_vec(), SignalRole::Clean).unwrap();
        stft(&b, &StftConfig::default()).unwrap().magnitudes().row(0).to_vec()
    }

    #[test]
    fn cepstrum_substitution_edge_cases() {
        let coded = frame(7);
        let clean = frame(8);
        let coded_mag = windowed_mag(&coded);
        let clean_mag = windowed_mag(&clean);

        let same = oracle_cepstrum_substitute(&coded, &coded, 64).unwrap();
        let none = oracle_cepstrum_substitute(&coded, &clean, 0).unwrap();
        let full = oracle_cepstrum_substitute(&coded, &clean, 512).unwrap();
        for k in 0..257 {
            assert!((same[k] - coded_mag[k]).abs() <= 1e-6 * coded_mag[k]);
            assert!((none[k] - coded_mag[k]).abs() <= 1e-6 * coded_mag[k]);
            assert!((full[k] - clean_mag[k]).abs() <= 1e-6 * clean_mag[k]);
        }
        assert!(oracle_cepstrum_substitute(&coded[..100], &clean, 64).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn modified_mask_range(vals in proptest::collection::vec(0.0f64..50.0, 1..40),
                               alpha in 0.5f64..4.0, frac in 0.0f64..1.0) {
            let cfg = MaskConfig { alpha, rho: frac * alpha, ..MaskConfig::default() };
            let n = vals.len();
            let m = modified_mask(&irm(Array2::from_shape_vec((1, n), vals).unwrap()), &cfg).unwrap();
            prop_assert!(m.values.iter().all(|&v| (0.0..=alpha).contains(&v)));
        }

        #[test]
        fn histogram_fractions_sum_to_one(vals in proptest::collection::vec(0.0f64..20.0, 1..200)) {
            let n = vals.len();
            let h = mask_histogram(&irm(Array2::from_shape_vec((1, n), vals).unwrap())).unwrap();
            let s: f64 = h.fractions().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert_eq!(h.total(), n as u64);
        }

        #[test]
        fn apply_mask_keeps_phase_and_upper_band(seed in 0u64..500) {
            let coded = random_spec(seed, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let m = MaskMatrix {
                values: Array2::from_shape_fn((3, 205), |_| rng.random_range(0.01..2.0)),
                kind: MaskKind::Predicted,
            };
            let out = apply_mask(&m, &coded).unwrap();
            for t in 0..3 {
                for k in 0..257 {
                    let (a, b) = (out.frames[[t, k]], coded.frames[[t, k]]);
                    if k >= 205 {
                        prop_assert_eq!(a, b);
                    } else {
                        prop_assert!((a.arg() - b.arg()).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn bounding_error_is_monotone(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = Array2::from_shape_fn((4, 30), |_| rng.random_range(0.0..5.0));
            let coded = Array2::from_shape_fn((4, 30), |_| rng.random_range(0.01..5.0));
            let r = compute_irm(&clean, &coded, 1e-9).unwrap();
            let bounds = [1.0, 2.0, 4.0, 10.0, f64::INFINITY];
            let errs: Vec<Array2<f64>> = bounds.iter().map(|&b| {
                let m = bound_mask(&r, b).unwrap();
                (&m.values * &coded - &clean).mapv(f64::abs)
            }).collect();
            for w in errs.windows(2) {
                for (hi, lo) in w[1].iter().zip(w[0].iter()) {
                    prop_assert!(*hi <= *lo + 1e-12);
                }
            }
        }
    }
}
