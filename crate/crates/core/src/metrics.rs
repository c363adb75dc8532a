//! Correlation metrics between predicted and listener MOS, plus the
//! report/scatter artifacts.
//!
//! Both coefficients use population moments. The `1/n` factors cancel, so
//! they are never applied explicitly. Spearman is Pearson over average
//! (fractional) ranks, which stays exact under ties.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::Manifest;
use crate::meta_eval::{PredictionRow, PredictionStatus};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired observations, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("correlation undefined: {0} vector is constant")]
    DegenerateInput(&'static str),
    #[error("no ground-truth MOS for scored utterance {0:?}")]
    MissingTruth(String),
    #[error("no successfully scored utterances")]
    NoScoredUtterances,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFewSamples(x.len()));
    }
    if let Some(i) = x
        .iter()
        .zip(y)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(MetricError::NonFinite(i));
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn pearson_lcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::DegenerateInput("first"));
    }
    if syy == 0.0 {
        return Err(MetricError::DegenerateInput("second"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation coefficient with average-rank tie handling.
pub fn spearman_srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    pearson_lcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPair {
    pub truth: f64,
    pub prediction: f64,
    pub utt_id: String,
    pub system: Option<String>,
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub n_failed: usize,
    pub lcc: f64,
    pub srcc: f64,
    pub pairs: Vec<ScatterPair>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportSummary {
    pub n: usize,
    pub n_failed: usize,
    pub lcc: f64,
    pub srcc: f64,
}

impl EvalReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            n: self.n,
            n_failed: self.n_failed,
            lcc: self.lcc,
            srcc: self.srcc,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Joins predictions with manifest truths and scores the successful ones.
///
/// Failed predictions only contribute to `n_failed`.
pub fn build_report(
    predictions: &[PredictionRow],
    manifest: &Manifest,
) -> Result<EvalReport, MetricError> {
    let by_id: BTreeMap<&str, _> = manifest
        .rows
        .iter()
        .map(|r| (r.utt_id.as_str(), r))
        .collect();
    let mut pairs = Vec::new();
    let mut n_failed = 0;
    for p in predictions {
        let mos = match (p.status, p.mos) {
            (PredictionStatus::Ok, Some(mos)) => mos,
            _ => {
                n_failed += 1;
                continue;
            }
        };
        let row = by_id
            .get(p.utt_id.as_str())
            .ok_or_else(|| MetricError::MissingTruth(p.utt_id.clone()))?;
        let truth = row
            .mos_truth
            .ok_or_else(|| MetricError::MissingTruth(p.utt_id.clone()))?;
        pairs.push(ScatterPair {
            truth,
            prediction: mos,
            utt_id: p.utt_id.clone(),
            system: row.system.clone(),
            condition: row.condition.clone(),
        });
    }
    if pairs.is_empty() {
        return Err(MetricError::NoScoredUtterances);
    }
    let truth: Vec<f64> = pairs.iter().map(|p| p.truth).collect();
    let pred: Vec<f64> = pairs.iter().map(|p| p.prediction).collect();
    Ok(EvalReport {
        n: pairs.len(),
        n_failed,
        lcc: pearson_lcc(&pred, &truth)?,
        srcc: spearman_srcc(&pred, &truth)?,
        pairs,
    })
}

pub fn write_scatter<W: Write>(writer: W, pairs: &[ScatterPair]) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["truth", "prediction", "utt_id", "system", "condition"])?;
    for p in pairs {
        w.write_record([
            p.truth.to_string(),
            p.prediction.to_string(),
            p.utt_id.clone(),
            p.system.clone().unwrap_or_default(),
            p.condition.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one CSV row per scored pair for external plotting.
pub fn emit_scatter(report: &EvalReport, path: &Path) -> Result<(), MetricError> {
    write_scatter(std::fs::File::create(path)?, &report.pairs)
}

pub fn read_scatter<R: Read>(reader: R) -> Result<Vec<ScatterPair>, MetricError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<ScatterPair>() {
        let mut p = rec?;
        p.system = p.system.filter(|s| !s.is_empty());
        p.condition = p.condition.filter(|s| !s.is_empty());
        out.push(p);
    }
    Ok(out)
}

/// Splits pairs by system tag; untagged pairs go under `None`.
pub fn group_by_system(pairs: &[ScatterPair]) -> BTreeMap<Option<String>, Vec<ScatterPair>> {
    let mut groups: BTreeMap<Option<String>, Vec<ScatterPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.system.clone()).or_default().push(p.clone());
    }
    groups
}
