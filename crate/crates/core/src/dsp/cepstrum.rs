use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::stft::FRAME_LEN;
use crate::error::{Error, Result};

/// Real cepstrum of a windowed 512-sample frame:
/// `IDFT(ln(max(|DFT(w · frame)|, floor_eps)))`, real part.
pub fn real_cepstrum(frame: &[f64], window: &[f64], floor_eps: f64) -> Result<Vec<f64>> {
    if frame.len() != FRAME_LEN || window.len() != FRAME_LEN {
        return Err(Error::InvalidInput(format!(
            "cepstrum needs {FRAME_LEN}-sample frame and window, got {} and {}",
            frame.len(),
            window.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = frame
        .iter()
        .zip(window)
        .map(|(x, w)| Complex64::new(x * w, 0.0))
        .collect();
    planner.plan_fft_forward(FRAME_LEN).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex64::new(c.norm().max(floor_eps).ln(), 0.0);
    }
    planner.plan_fft_inverse(FRAME_LEN).process(&mut buf);
    Ok(buf.iter().map(|c| c.re / FRAME_LEN as f64).collect())
}

/// Magnitude spectrum (first `FRAME_LEN / 2 + 1` bins) of a real cepstrum:
/// `exp(Re(DFT(c)))`.
pub fn cepstrum_to_magnitude(cepstrum: &[f64]) -> Result<Vec<f64>> {
    if cepstrum.len() != FRAME_LEN {
        return Err(Error::InvalidInput(format!(
            "cepstrum must have {FRAME_LEN} coefficients, got {}",
            cepstrum.len()
        )));
    }
    let mut buf: Vec<Complex64> = cepstrum.iter().map(|&c| Complex64::new(c, 0.0)).collect();
    FftPlanner::<f64>::new()
        .plan_fft_forward(FRAME_LEN)
        .process(&mut buf);
    Ok(buf[..FRAME_LEN / 2 + 1].iter().map(|c| c.re.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::features::LOG_FLOOR;
    use crate::dsp::stft::sqrt_hann;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn impulse_with_rectangular_window_is_flat() {
        let mut frame = vec![0.0; 512];
        frame[0] = 0.7;
        let rect = vec![1.0; 512];
        let c = real_cepstrum(&frame, &rect, LOG_FLOOR).unwrap();
        // |DFT| = 0.7 in every bin, so the mean log-magnitude is ln 0.7
        assert!((c[0] - 0.7f64.ln()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_frame_hits_floor() {
        let w = sqrt_hann(512).unwrap();
        let c = real_cepstrum(&vec![0.0; 512], &w, LOG_FLOOR).unwrap();
        assert!((c[0] - LOG_FLOOR.ln()).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn exponentiated_cepstrum_reproduces_magnitude() {
        let w = sqrt_hann(512).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = real_cepstrum(&frame, &w, LOG_FLOOR).unwrap();
        let mag = cepstrum_to_magnitude(&c).unwrap();

        let mut direct: Vec<Complex64> = frame
            .iter()
            .zip(&w)
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(512).process(&mut direct);
        for k in 0..257 {
            let d = direct[k].norm();
            assert!((mag[k] - d).abs() <= 1e-6 * d, "bin {k}");
        }
    }

    #[test]
    fn wrong_length_rejected() {
        let w = sqrt_hann(512).unwrap();
        assert!(real_cepstrum(&[0.0; 100], &w, LOG_FLOOR).is_err());
        assert!(cepstrum_to_magnitude(&[0.0; 10]).is_err());
    }
}
