//! RIFF/WAVE loading into a normalized mono [`Waveform`].
//!
//! Integer PCM (8/16/24/32 bit) is scaled by `2^(bits-1)` so that the most
//! negative code maps to exactly `-1.0`. IEEE float input is clamped into
//! `[-1, 1]` and the number of clamped samples is kept on the waveform.
//! Multichannel input is averaged per frame. No resampling is done.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed RIFF/WAVE container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no data frames")]
    EmptyAudio,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("sample {index} is {value}, outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono, full-scale normalized audio at its native sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
    source_id: String,
    clamped_samples: usize,
}

impl Waveform {
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(AudioError::SampleOutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
            clamped_samples: 0,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Number of float samples that were outside `[-1, 1]` on load and got clamped.
    pub fn clamped_samples(&self) -> usize {
        self.clamped_samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }
}

pub fn duration_seconds(w: &Waveform) -> f64 {
    w.samples.len() as f64 / f64::from(w.sample_rate)
}

#[derive(Debug, Clone, Copy)]
enum SampleFormat {
    Int(u16),
    Float32,
}

#[derive(Debug, Clone, Copy)]
struct FmtChunk {
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    format: SampleFormat,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, stem)
}

fn malformed(msg: impl Into<String>) -> AudioError {
    AudioError::MalformedContainer(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes an in-memory RIFF/WAVE image.
pub fn decode_wav(bytes: &[u8], source_id: impl Into<String>) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 {
        return Err(malformed("file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(malformed("missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing WAVE form type"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let declared_end = body_start.saturating_add(size);
        match id {
            b"fmt " => {
                if declared_end > bytes.len() {
                    return Err(malformed("fmt chunk runs past end of file"));
                }
                fmt = Some(parse_fmt(&bytes[body_start..declared_end])?);
            }
            b"data" => {
                // Streaming writers often leave the size unset; take what is there.
                let end = declared_end.min(bytes.len());
                data = Some(&bytes[body_start..end]);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = declared_end.saturating_add(size & 1);
    }

    let fmt = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("no data chunk"))?;
    let block = fmt.block_align as usize;
    let frames = data.len() / block;
    if frames == 0 {
        return Err(AudioError::EmptyAudio);
    }

    let channels = fmt.channels as usize;
    let bytes_per_sample = block / channels;
    let mut clamped = 0usize;
    let mut samples = Vec::with_capacity(frames);
    for frame in data.chunks_exact(block) {
        let mut acc = 0.0;
        for ch in frame.chunks_exact(bytes_per_sample) {
            let mut v = decode_sample(ch, fmt.format);
            if !(-1.0..=1.0).contains(&v) || v.is_nan() {
                clamped += 1;
                v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            }
            acc += v;
        }
        samples.push(acc / channels as f64);
    }

    let mut w = Waveform::new(samples, fmt.sample_rate, source_id)?;
    w.clamped_samples = clamped;
    Ok(w)
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, AudioError> {
    if body.len() < 16 {
        return Err(malformed("fmt chunk shorter than 16 bytes"));
    }
    let mut code = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12);
    let bits = u16_at(body, 14);

    if code == FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(malformed("extensible fmt chunk shorter than 40 bytes"));
        }
        // first two bytes of the sub-format GUID carry the plain format code
        code = u16_at(body, 24);
    }
    if channels == 0 {
        return Err(malformed("zero channels"));
    }
    if sample_rate == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    let format = match (code, bits) {
        (FORMAT_PCM, 8 | 16 | 24 | 32) => SampleFormat::Int(bits),
        (FORMAT_IEEE_FLOAT, 32) => SampleFormat::Float32,
        (FORMAT_PCM | FORMAT_IEEE_FLOAT, b) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format code {code} with {b} bits per sample"
            )))
        }
        (c, _) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format code {c:#06x}"
            )))
        }
    };
    let expected_align = channels as usize * (bits as usize / 8);
    if block_align as usize != expected_align {
        return Err(malformed(format!(
            "block_align {block_align} does not match {channels} channels of {bits} bits"
        )));
    }
    Ok(FmtChunk {
        channels,
        sample_rate,
        block_align,
        format,
    })
}

fn decode_sample(b: &[u8], format: SampleFormat) -> f64 {
    match format {
        SampleFormat::Int(8) => (f64::from(b[0]) - 128.0) / 128.0,
        SampleFormat::Int(16) => f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0,
        SampleFormat::Int(24) => {
            let v = i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8;
            f64::from(v) / 8_388_608.0
        }
        SampleFormat::Int(32) => {
            f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])) / 2_147_483_648.0
        }
        SampleFormat::Int(_) => unreachable!("bit depth validated in parse_fmt"),
        SampleFormat::Float32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
    }
}

/// Encodes samples as a mono 16-bit PCM WAV image. Samples are scaled by
/// 32768 and saturated to the i16 range.
pub fn encode_wav_pcm16(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let code = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&code.to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(
    path: impl AsRef<Path>,
    samples: &[f64],
    sample_rate: u32,
) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io_err = |source| AudioError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode_wav_pcm16(samples, sample_rate))
        .map_err(io_err)
}
