//! STFT power spectrum, HTK mel filterbank, log-mel, MFCC means and mel statistics.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{DescriptorError, FrameConfig};
use crate::audio_io::Waveform;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Squared-magnitude STFT, shape `[frames, n_fft / 2 + 1]`.
///
/// Only full frames are used; a trailing partial frame is dropped.
pub fn stft_power(w: &Waveform, cfg: &FrameConfig) -> Result<Array2<f64>, DescriptorError> {
    let sr = w.sample_rate();
    cfg.validate(sr)?;
    let frame_len = cfg.frame_len(sr);
    let hop = cfg.hop_len(sr);
    let n_fft = cfg.n_fft(sr);
    let samples = w.samples();
    if samples.len() < frame_len {
        return Err(DescriptorError::TooShort {
            needed: frame_len,
            got: samples.len(),
        });
    }
    let n_frames = 1 + (samples.len() - frame_len) / hop;
    let n_bins = n_fft / 2 + 1;
    let window = periodic_hann(frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut out = Array2::<f64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let frame = &samples[t * hop..t * hop + frame_len];
        for (slot, (s, win)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(s * win, 0.0);
        }
        buf[frame_len..].fill(Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, c) in row.iter_mut().zip(&buf[..n_bins]) {
            *dst = c.norm_sqr();
        }
    }
    Ok(out)
}

/// Triangular mel filters, shape `[n_mels, n_fft / 2 + 1]`.
///
/// Centers are equally spaced on the HTK mel scale between `fmin` and `fmax`;
/// weights are the triangle evaluated at each FFT bin frequency.
pub fn mel_filterbank(cfg: &FrameConfig, sample_rate: u32) -> Result<Array2<f64>, DescriptorError> {
    cfg.validate(sample_rate)?;
    let n_fft = cfg.n_fft(sample_rate);
    let n_bins = n_fft / 2 + 1;
    let sr = f64::from(sample_rate);
    let fmax = cfg.fmax(sample_rate);

    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(fmax);
    let n_points = cfg.n_mels + 2;
    let edges: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect();

    let bin_of = |hz: f64| (hz * n_fft as f64 / sr).round() as i64;
    for (i, pair) in edges.windows(2).enumerate() {
        if bin_of(pair[0]) == bin_of(pair[1]) {
            return Err(DescriptorError::DegenerateBank {
                filter: i,
                n_fft,
                n_mels: cfg.n_mels,
            });
        }
    }

    let mut bank = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sr / n_fft as f64;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            bank[[m, k]] = rise.min(fall).max(0.0);
        }
        if bank.row(m).iter().all(|&v| v <= 0.0) {
            return Err(DescriptorError::DegenerateBank {
                filter: m,
                n_fft,
                n_mels: cfg.n_mels,
            });
        }
    }
    Ok(bank)
}

/// Center frequencies (Hz) of each filter produced by [`mel_filterbank`].
pub fn mel_center_frequencies(cfg: &FrameConfig, sample_rate: u32) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax(sample_rate));
    let n_points = cfg.n_mels + 2;
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect()
}

/// `ln(max(bank · power_frame, floor))` per frame, shape `[frames, n_mels]`.
pub fn log_mel_spectrogram(
    power: ArrayView2<'_, f64>,
    bank: ArrayView2<'_, f64>,
    log_floor: f64,
) -> Result<Array2<f64>, DescriptorError> {
    if power.ncols() != bank.ncols() {
        return Err(DescriptorError::ShapeMismatch {
            power_bins: power.ncols(),
            bank_bins: bank.ncols(),
        });
    }
    let mut mel = power.dot(&bank.t());
    mel.mapv_inplace(|e| e.max(log_floor).ln());
    Ok(mel)
}

/// Orthonormal DCT-II basis, shape `[n_out, n_in]`.
fn dct2_basis(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
    })
}

/// Per-frame orthonormal DCT-II over the mel axis, first `n_mfcc` coefficients,
/// averaged over frames.
pub fn compute_mfcc_mean(
    logmel: ArrayView2<'_, f64>,
    n_mfcc: usize,
) -> Result<Vec<f64>, DescriptorError> {
    let (n_frames, n_mels) = logmel.dim();
    if n_frames == 0 {
        return Err(DescriptorError::TooShort { needed: 1, got: 0 });
    }
    if n_mfcc == 0 || n_mfcc > n_mels {
        return Err(DescriptorError::InvalidConfig(format!(
            "n_mfcc {n_mfcc} must be in 1..={n_mels}"
        )));
    }
    let basis = dct2_basis(n_mfcc, n_mels);
    let cepstra = logmel.dot(&basis.t());
    Ok(cepstra
        .mean_axis(Axis(0))
        .expect("at least one frame")
        .to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelStats {
    pub bin_mean: Vec<f64>,
    /// Population variance per bin.
    pub bin_var: Vec<f64>,
    pub global_max: f64,
    pub global_min: f64,
}

pub fn compute_mel_stats(logmel: ArrayView2<'_, f64>) -> Result<MelStats, DescriptorError> {
    let n_frames = logmel.nrows();
    if n_frames == 0 || logmel.ncols() == 0 {
        return Err(DescriptorError::TooShort { needed: 1, got: 0 });
    }
    let global_max = logmel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let global_min = logmel.iter().copied().fold(f64::INFINITY, f64::min);
    // rounding in the sum can push a mean one ulp past the extrema
    let bin_mean: Vec<f64> = logmel
        .mean_axis(Axis(0))
        .expect("non-empty")
        .iter()
        .map(|m| m.clamp(global_min, global_max))
        .collect();
    let bin_var = logmel
        .axis_iter(Axis(1))
        .zip(&bin_mean)
        .map(|(col, &mu)| col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n_frames as f64)
        .collect();
    Ok(MelStats {
        bin_mean,
        bin_var,
        global_max,
        global_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn wave(samples: Vec<f64>, sr: u32) -> Waveform {
        Waveform::new(samples, sr, "t").unwrap()
    }

    #[test]
    fn mel_of_700_hz() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn zero_signal_gives_zero_power() {
        let w = wave(vec![0.0; 4000], 16000);
        let p = stft_power(&w, &FrameConfig::default()).unwrap();
        assert_eq!(p.ncols(), 257);
        assert_eq!(p.nrows(), 1 + (4000 - 400) / 160);
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_signal() {
        let w = wave(vec![0.1; 399], 16000);
        assert!(matches!(
            stft_power(&w, &FrameConfig::default()),
            Err(DescriptorError::TooShort {
                needed: 400,
                got: 399
            })
        ));
    }

    #[test]
    fn filterbank_rows_positive_and_centers_increasing() {
        for sr in [8000, 16000, 22050, 44100, 48000] {
            let cfg = FrameConfig::default();
            let bank = mel_filterbank(&cfg, sr).unwrap();
            assert_eq!(bank.dim(), (40, cfg.n_fft(sr) / 2 + 1));
            for row in bank.rows() {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!(row.iter().any(|&v| v > 0.0));
            }
            let centers = mel_center_frequencies(&cfg, sr);
            assert!(centers.windows(2).all(|c| c[1] > c[0]));
        }
    }

    #[test]
    fn too_many_mels_is_degenerate() {
        let cfg = FrameConfig {
            n_mels: 256,
            ..FrameConfig::default()
        };
        assert!(matches!(
            mel_filterbank(&cfg, 16000),
            Err(DescriptorError::DegenerateBank { .. })
        ));
    }

    #[test]
    fn log_mel_floor_and_scaling() {
        let power = Array2::<f64>::zeros((3, 5));
        let bank = Array2::<f64>::ones((2, 5));
        let lm = log_mel_spectrogram(power.view(), bank.view(), 1e-10).unwrap();
        assert!(lm.iter().all(|&v| v == 1e-10f64.ln()));

        let power = array![[1.0, 2.0, 3.0, 4.0, 5.0]];
        let base = log_mel_spectrogram(power.view(), bank.view(), 1e-10).unwrap();
        let scaled = log_mel_spectrogram((&power * 7.5).view(), bank.view(), 1e-10).unwrap();
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((b - a - 7.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_mel_hand_matrix() {
        // bank · p = [1*2 + 0.5*4 + 0*6, 0*2 + 0.5*4 + 1*6] = [4, 8]
        let power = array![[2.0, 4.0, 6.0]];
        let bank = array![[1.0, 0.5, 0.0], [0.0, 0.5, 1.0]];
        let lm = log_mel_spectrogram(power.view(), bank.view(), 1e-10).unwrap();
        assert!((lm[[0, 0]] - 4f64.ln()).abs() < 1e-15);
        assert!((lm[[0, 1]] - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_mel_shape_mismatch() {
        let power = Array2::<f64>::zeros((1, 4));
        let bank = Array2::<f64>::zeros((2, 5));
        assert!(log_mel_spectrogram(power.view(), bank.view(), 1e-10).is_err());
    }

    #[test]
    fn mfcc_of_constant_frames() {
        let v = -3.25;
        let lm = Array2::from_elem((4, 16), v);
        let c = compute_mfcc_mean(lm.view(), 13).unwrap();
        assert!((c[0] - v * 16f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mfcc_of_identical_frames_equals_single_frame() {
        let frame = array![[0.3, -1.2, 4.0, 2.2, 0.0, 1.5]];
        let single = compute_mfcc_mean(frame.view(), 4).unwrap();
        let stacked =
            ndarray::concatenate(Axis(0), &[frame.view(), frame.view(), frame.view()]).unwrap();
        let mean = compute_mfcc_mean(stacked.view(), 4).unwrap();
        for (a, b) in single.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mfcc_rejects_too_many_coefficients() {
        let lm = Array2::<f64>::zeros((2, 8));
        assert!(compute_mfcc_mean(lm.view(), 9).is_err());
    }

    #[test]
    fn mel_stats_hand_cases() {
        let one = array![[1.0, -2.0, 3.0]];
        let s = compute_mel_stats(one.view()).unwrap();
        assert_eq!(s.bin_var, vec![0.0; 3]);
        assert_eq!(s.global_max, 3.0);
        assert_eq!(s.global_min, -2.0);

        let two = array![[0.0, 0.0], [2.0, 2.0]];
        let s = compute_mel_stats(two.view()).unwrap();
        assert_eq!(s.bin_mean, vec![1.0, 1.0]);
        assert_eq!(s.bin_var, vec![1.0, 1.0]);
    }
}
