//! Pseudo-labels, manifests and the naive DNSMOS/VQScore ensemble.
//!
//! DNSMOS lives on the MOS scale `[1, 5]`, VQScore on `[0, 1]`. Both are
//! mapped onto the unit interval with their fixed theoretical ranges,
//! averaged, and the average is mapped back onto `[1, 5]`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MOS_RANGE: (f64, f64) = (1.0, 5.0);
pub const DNSMOS_RANGE: (f64, f64) = (1.0, 5.0);
pub const VQSCORE_RANGE: (f64, f64) = (0.0, 1.0);

const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("score {score} outside [{lo}, {hi}]")]
    OutOfRange { score: f64, lo: f64, hi: f64 },
    #[error("invalid pseudo-labels: {0}")]
    InvalidPseudoLabels(String),
    #[error("manifest row {row}: duplicate utt_id {id:?}")]
    DuplicateId { row: usize, id: String },
    #[error("manifest is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("manifest row {row}: {field}={value} out of range")]
    RangeViolation {
        row: usize,
        field: &'static str,
        value: f64,
    },
    #[error("manifest row {row}: {field} is empty")]
    MissingValue { row: usize, field: &'static str },
    #[error("manifest row {row}: {field}={text:?} is not a number")]
    InvalidNumber {
        row: usize,
        field: &'static str,
        text: String,
    },
    #[error("external scorer `{command}` failed: {message}")]
    Scorer { command: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub dnsmos: f64,
    pub vqscore: f64,
}

impl PseudoLabels {
    pub fn new(dnsmos: f64, vqscore: f64) -> Result<Self, LabelError> {
        if !(DNSMOS_RANGE.0..=DNSMOS_RANGE.1).contains(&dnsmos) {
            return Err(LabelError::InvalidPseudoLabels(format!(
                "dnsmos {dnsmos} outside [1, 5]"
            )));
        }
        if !(VQSCORE_RANGE.0..=VQSCORE_RANGE.1).contains(&vqscore) {
            return Err(LabelError::InvalidPseudoLabels(format!(
                "vqscore {vqscore} outside [0, 1]"
            )));
        }
        Ok(Self { dnsmos, vqscore })
    }
}

/// `(score - lo) / (hi - lo)`; scores up to 1e-9 outside the range are clipped.
pub fn normalize_to_unit(score: f64, lo: f64, hi: f64) -> Result<f64, LabelError> {
    debug_assert!(lo < hi);
    if !(score >= lo - RANGE_TOLERANCE && score <= hi + RANGE_TOLERANCE) {
        return Err(LabelError::OutOfRange { score, lo, hi });
    }
    Ok(((score - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Unit-scale average of the two normalized pseudo-labels.
pub fn unit_average(p: &PseudoLabels) -> f64 {
    let dns = normalize_to_unit(p.dnsmos, DNSMOS_RANGE.0, DNSMOS_RANGE.1)
        .expect("PseudoLabels holds dnsmos in range");
    (dns + p.vqscore) / 2.0
}

/// NaiveEnsemble on the MOS scale: `1 + 4 * ((dnsmos - 1) / 4 + vqscore) / 2`.
pub fn naive_ensemble(p: &PseudoLabels) -> f64 {
    MOS_RANGE.0 + (MOS_RANGE.1 - MOS_RANGE.0) * unit_average(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub utt_id: String,
    /// As written in the manifest; see [`Manifest::wav_path`] for resolution.
    pub wav_path: PathBuf,
    pub dnsmos: f64,
    pub vqscore: f64,
    pub mos_truth: Option<f64>,
    pub system: Option<String>,
    pub condition: Option<String>,
}

impl ManifestRow {
    pub fn pseudo_labels(&self) -> PseudoLabels {
        PseudoLabels {
            dnsmos: self.dnsmos,
            vqscore: self.vqscore,
        }
    }
}

/// Runs an external command per utterance and reads one real from stdout.
///
/// The template is split on whitespace; every `{wav}` inside an argument is
/// replaced by the audio path. No shell is involved.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScorer {
    template: String,
}

impl ExternalScorer {
    pub fn new(template: impl Into<String>) -> Result<Self, LabelError> {
        let template = template.into();
        if template.split_whitespace().next().is_none() {
            return Err(LabelError::Scorer {
                command: template,
                message: "empty command template".into(),
            });
        }
        Ok(Self { template })
    }

    pub fn score(&self, wav: &Path) -> Result<f64, LabelError> {
        let wav = wav.to_string_lossy();
        let mut argv = self
            .template
            .split_whitespace()
            .map(|a| a.replace("{wav}", &wav));
        let program = argv.next().expect("validated non-empty");
        let fail = |message: String| LabelError::Scorer {
            command: self.template.clone(),
            message,
        };
        let out = Command::new(&program)
            .args(argv)
            .output()
            .map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|_| fail(format!("stdout {:?} is not a single real", text.trim())))
    }
}

/// Optional per-utterance scorers that replace the manifest's pseudo-label columns.
#[derive(Debug, Clone, Default)]
pub struct ScoreOverrides {
    pub dnsmos: Option<ExternalScorer>,
    pub vqscore: Option<ExternalScorer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative wav paths are resolved against.
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn wav_path(&self, row: &ManifestRow) -> PathBuf {
        if row.wav_path.is_absolute() {
            row.wav_path.clone()
        } else {
            self.base_dir.join(&row.wav_path)
        }
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, LabelError> {
    load_manifest_with(path, &ScoreOverrides::default())
}

/// Loads a manifest, letting `overrides` supply pseudo-labels. Columns whose
/// scorer is set may be left blank.
pub fn load_manifest_with(path: &Path, overrides: &ScoreOverrides) -> Result<Manifest, LabelError> {
    let file = std::fs::File::open(path).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rows = parse_manifest(file, &base_dir, overrides)?;
    Ok(Manifest { base_dir, rows })
}

struct Columns {
    utt_id: usize,
    wav_path: usize,
    dnsmos: usize,
    vqscore: usize,
    mos_truth: Option<usize>,
    system: Option<usize>,
    condition: Option<usize>,
}

pub fn parse_manifest<R: Read>(
    reader: R,
    base_dir: &Path,
    overrides: &ScoreOverrides,
) -> Result<Vec<ManifestRow>, LabelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &'static str| find(name).ok_or(LabelError::MissingColumn(name));
    let cols = Columns {
        utt_id: need("utt_id")?,
        wav_path: need("wav_path")?,
        dnsmos: need("dnsmos")?,
        vqscore: need("vqscore")?,
        mos_truth: find("mos_truth"),
        system: find("system"),
        condition: find("condition"),
    };

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        let opt_cell = |idx: Option<usize>| idx.map(cell).filter(|s| !s.is_empty());

        let utt_id = cell(cols.utt_id).to_string();
        if utt_id.is_empty() {
            return Err(LabelError::MissingValue {
                row,
                field: "utt_id",
            });
        }
        if !seen.insert(utt_id.clone()) {
            return Err(LabelError::DuplicateId { row, id: utt_id });
        }
        let wav_path = PathBuf::from(cell(cols.wav_path));
        let resolved = if wav_path.is_absolute() {
            wav_path.clone()
        } else {
            base_dir.join(&wav_path)
        };

        let dnsmos = match &overrides.dnsmos {
            Some(s) => s.score(&resolved)?,
            None => parse_real(cell(cols.dnsmos), row, "dnsmos")?,
        };
        let vqscore = match &overrides.vqscore {
            Some(s) => s.score(&resolved)?,
            None => parse_real(cell(cols.vqscore), row, "vqscore")?,
        };
        check_range(dnsmos, DNSMOS_RANGE, row, "dnsmos")?;
        check_range(vqscore, VQSCORE_RANGE, row, "vqscore")?;
        let mos_truth = opt_cell(cols.mos_truth)
            .map(|s| parse_real(s, row, "mos_truth"))
            .transpose()?;
        if let Some(m) = mos_truth {
            check_range(m, MOS_RANGE, row, "mos_truth")?;
        }

        rows.push(ManifestRow {
            utt_id,
            wav_path,
            dnsmos,
            vqscore,
            mos_truth,
            system: opt_cell(cols.system).map(str::to_string),
            condition: opt_cell(cols.condition).map(str::to_string),
        });
    }
    Ok(rows)
}

fn parse_real(text: &str, row: usize, field: &'static str) -> Result<f64, LabelError> {
    if text.is_empty() {
        return Err(LabelError::MissingValue { row, field });
    }
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(LabelError::InvalidNumber {
            row,
            field,
            text: text.to_string(),
        }),
    }
}

fn check_range(
    v: f64,
    (lo, hi): (f64, f64),
    row: usize,
    field: &'static str,
) -> Result<(), LabelError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(LabelError::RangeViolation {
            row,
            field,
            value: v,
        })
    }
}

/// Writes the manifest back out with an extra `naive_ensemble` column.
pub fn write_ensemble_csv<W: Write>(writer: W, rows: &[ManifestRow]) -> Result<(), LabelError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "utt_id",
        "wav_path",
        "dnsmos",
        "vqscore",
        "mos_truth",
        "system",
        "condition",
        "naive_ensemble",
    ])?;
    for r in rows {
        w.write_record([
            r.utt_id.clone(),
            r.wav_path.display().to_string(),
            r.dnsmos.to_string(),
            r.vqscore.to_string(),
            r.mos_truth.map(|m| m.to_string()).unwrap_or_default(),
            r.system.clone().unwrap_or_default(),
            r.condition.clone().unwrap_or_default(),
            format!("{:?}", naive_ensemble(&r.pseudo_labels())),
        ])?;
    }
    w.flush().map_err(|source| LabelError::Io {
        path: "<ensemble output>".into(),
        source,
    })
}
