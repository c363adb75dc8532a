//! Acoustic descriptor extraction.
//!
//! A descriptor bundle summarizes one utterance with temporal statistics
//! (RMS, zero-crossing rate, clipping ratio, duration), the frame-averaged
//! MFCC vector, and per-bin / global statistics of the log-mel spectrogram.

mod spectral;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{duration_seconds, Waveform};

pub use spectral::{
    compute_mel_stats, compute_mfcc_mean, hz_to_mel, log_mel_spectrogram, mel_center_frequencies,
    mel_filterbank, mel_to_hz, periodic_hann, stft_power, MelStats,
};

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("mel filter {filter} collapses onto a neighbouring FFT bin (n_fft={n_fft}, n_mels={n_mels})")]
    DegenerateBank {
        filter: usize,
        n_fft: usize,
        n_mels: usize,
    },
    #[error("invalid frame configuration: {0}")]
    InvalidConfig(String),
    #[error("power spectrum has {power_bins} bins but filterbank expects {bank_bins}")]
    ShapeMismatch { power_bins: usize, bank_bins: usize },
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Framing and filterbank parameters. Millisecond values are converted to
/// samples at the waveform's native rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Defaults to the smallest power of two holding one frame.
    pub n_fft: Option<usize>,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin_hz: f64,
    /// Defaults to Nyquist.
    pub fmax_hz: Option<f64>,
    pub log_floor: f64,
    pub clip_threshold: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_fft: None,
            n_mels: 40,
            n_mfcc: 13,
            fmin_hz: 0.0,
            fmax_hz: None,
            log_floor: 1e-10,
            clip_threshold: 0.99,
        }
    }
}

impl FrameConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        ((self.frame_ms * f64::from(sample_rate) / 1000.0).round() as usize).max(1)
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        ((self.hop_ms * f64::from(sample_rate) / 1000.0).round() as usize).max(1)
    }

    pub fn n_fft(&self, sample_rate: u32) -> usize {
        self.n_fft
            .unwrap_or_else(|| self.frame_len(sample_rate).next_power_of_two())
    }

    pub fn fmax(&self, sample_rate: u32) -> f64 {
        self.fmax_hz.unwrap_or(f64::from(sample_rate) / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), DescriptorError> {
        let bad = |m: String| Err(DescriptorError::InvalidConfig(m));
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.frame_ms) {
            return bad(format!(
                "need 0 < hop_ms ({}) <= frame_ms ({})",
                self.hop_ms, self.frame_ms
            ));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad(format!(
                "need 1 <= n_mfcc ({}) <= n_mels ({})",
                self.n_mfcc, self.n_mels
            ));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        let fmax = self.fmax(sample_rate);
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax && fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin_hz ({}) < fmax_hz ({fmax}) <= {nyquist}",
                self.fmin_hz
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!(
                "log_floor must be positive, got {}",
                self.log_floor
            ));
        }
        if !(self.clip_threshold > 0.0 && self.clip_threshold <= 1.0) {
            return bad(format!(
                "clip_threshold must be in (0, 1], got {}",
                self.clip_threshold
            ));
        }
        if self.n_fft(sample_rate) < self.frame_len(sample_rate) {
            return bad(format!(
                "n_fft {} shorter than frame of {} samples",
                self.n_fft(sample_rate),
                self.frame_len(sample_rate)
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticDescriptors {
    pub rms: f64,
    pub zcr: f64,
    pub clipping_ratio: f64,
    pub duration_s: f64,
    pub mfcc_mean: Vec<f64>,
    pub mel_bin_mean: Vec<f64>,
    pub mel_bin_var: Vec<f64>,
    pub mel_global_max: f64,
    pub mel_global_min: f64,
}

impl AcousticDescriptors {
    /// Checks the bundle invariants, returning the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !(self.rms >= 0.0) {
            return Err(format!("rms {} is negative", self.rms));
        }
        if !(0.0..=1.0).contains(&self.zcr) {
            return Err(format!("zcr {} outside [0,1]", self.zcr));
        }
        if !(0.0..=1.0).contains(&self.clipping_ratio) {
            return Err(format!(
                "clipping_ratio {} outside [0,1]",
                self.clipping_ratio
            ));
        }
        if !(self.duration_s > 0.0) {
            return Err(format!("duration_s {} not positive", self.duration_s));
        }
        if let Some(m) = self
            .mel_bin_mean
            .iter()
            .find(|&&m| m < self.mel_global_min || m > self.mel_global_max)
        {
            return Err(format!(
                "mel bin mean {m} outside [{}, {}]",
                self.mel_global_min, self.mel_global_max
            ));
        }
        if let Some(v) = self.mel_bin_var.iter().find(|&&v| !(v >= 0.0)) {
            return Err(format!("mel bin variance {v} negative"));
        }
        Ok(())
    }
}

pub fn compute_rms(w: &Waveform) -> f64 {
    let s = w.samples();
    (s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64).sqrt()
}

/// Fraction of adjacent pairs whose signs differ; zero counts as positive.
pub fn compute_zcr(w: &Waveform) -> Result<f64, DescriptorError> {
    let s = w.samples();
    if s.len() < 2 {
        return Err(DescriptorError::TooShort {
            needed: 2,
            got: s.len(),
        });
    }
    let crossings = s
        .windows(2)
        .filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0))
        .count();
    Ok(crossings as f64 / (s.len() - 1) as f64)
}

/// Fraction of samples with `|s| >= threshold`. `threshold` must lie in `(0, 1]`.
pub fn compute_clipping_ratio(w: &Waveform, threshold: f64) -> f64 {
    debug_assert!(threshold > 0.0 && threshold <= 1.0);
    let s = w.samples();
    s.iter().filter(|x| x.abs() >= threshold).count() as f64 / s.len() as f64
}

pub fn extract_all(
    w: &Waveform,
    cfg: &FrameConfig,
) -> Result<AcousticDescriptors, DescriptorError> {
    cfg.validate(w.sample_rate())?;
    let power = stft_power(w, cfg)?;
    let bank = mel_filterbank(cfg, w.sample_rate())?;
    let logmel = log_mel_spectrogram(power.view(), bank.view(), cfg.log_floor)?;
    let mfcc_mean = compute_mfcc_mean(logmel.view(), cfg.n_mfcc)?;
    let stats = compute_mel_stats(logmel.view())?;
    Ok(AcousticDescriptors {
        rms: compute_rms(w),
        zcr: compute_zcr(w)?,
        clipping_ratio: compute_clipping_ratio(w, cfg.clip_threshold),
        duration_s: duration_seconds(w),
        mfcc_mean,
        mel_bin_mean: stats.bin_mean,
        mel_bin_var: stats.bin_var,
        mel_global_max: stats.global_max,
        mel_global_min: stats.global_min,
    })
}

/// Rounds to `digits` significant decimal digits.
pub fn round_significant(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let s = format!("{:.*e}", digits.saturating_sub(1), x);
    s.parse().expect("formatted float parses")
}

/// One line of the JSON-lines feature cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub utt_id: String,
    #[serde(flatten)]
    pub descriptors: AcousticDescriptors,
}

impl FeatureRecord {
    /// Copy with every real rounded to 6 significant digits, as written to the cache.
    pub fn rounded(&self) -> Self {
        let r = |x: f64| round_significant(x, 6);
        let rv = |v: &[f64]| v.iter().copied().map(r).collect::<Vec<_>>();
        let d = &self.descriptors;
        Self {
            utt_id: self.utt_id.clone(),
            descriptors: AcousticDescriptors {
                rms: r(d.rms),
                zcr: r(d.zcr),
                clipping_ratio: r(d.clipping_ratio),
                duration_s: r(d.duration_s),
                mfcc_mean: rv(&d.mfcc_mean),
                mel_bin_mean: rv(&d.mel_bin_mean),
                mel_bin_var: rv(&d.mel_bin_var),
                mel_global_max: r(d.mel_global_max),
                mel_global_min: r(d.mel_global_min),
            },
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.rounded()).expect("descriptor record serializes")
    }
}

pub fn write_feature_cache(path: &Path, records: &[FeatureRecord]) -> Result<(), DescriptorError> {
    let cache_err = |e: std::io::Error| DescriptorError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(cache_err)?);
    for rec in records {
        writeln!(out, "{}", rec.to_json_line()).map_err(cache_err)?;
    }
    out.flush().map_err(cache_err)
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<FeatureRecord>, DescriptorError> {
    let cache_err = |message: String| DescriptorError::Cache {
        path: path.display().to_string(),
        message,
    };
    let f = File::open(path).map_err(|e| cache_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| cache_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
