//! Minibatch dispatch.
//!
//! Rows are cut into consecutive minibatches; each minibatch becomes one
//! prompt and one fresh backend request. A minibatch whose request or answer
//! fails is retried, then marked failed without aborting the run. Up to
//! `max_in_flight` minibatches run at once; results are reassembled in input
//! order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{Backend, BackendConfig, BackendError};
use super::prompt::{serialize_prompt, PromptError, PromptItem, PromptMode};
use super::response::{parse_response, Prediction, ResponseError};
use super::FewShotExample;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("backend unreachable after retries: {0}")]
    BackendUnreachable(BackendError),
    #[error("fatal backend error: {0}")]
    Fatal(BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid backend configuration: {0}")]
    Config(BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    Backend(BackendError),
    Response(ResponseError),
}

impl std::fmt::Display for AttemptError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttemptError::Backend(e) => write!(f, "{e}"),
            AttemptError::Response(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub index: usize,
    pub utt_ids: Vec<String>,
    pub attempts: u32,
    /// Raw text of every response received, in attempt order.
    pub responses: Vec<String>,
    /// Set when the minibatch ultimately failed.
    pub error: Option<AttemptError>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Scored(Prediction),
    Failed { utt_id: String, reason: String },
}

impl Outcome {
    pub fn utt_id(&self) -> &str {
        match self {
            Outcome::Scored(p) => &p.utt_id,
            Outcome::Failed { utt_id, .. } => utt_id,
        }
    }

    pub fn mos(&self) -> Option<f64> {
        match self {
            Outcome::Scored(p) => Some(p.mos),
            Outcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// One entry per input row, in input order.
    pub outcomes: Vec<Outcome>,
    pub batches: Vec<BatchReport>,
    pub clamped: usize,
}

/// Non-fatal: some minibatches failed and their rows were left unscored.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialFailure {
    pub failed_batches: Vec<usize>,
    pub failed_utterances: usize,
}

impl BatchOutcome {
    pub fn n_scored(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, Outcome::Scored(_)))
            .count()
    }

    pub fn n_failed(&self) -> usize {
        self.outcomes.len() - self.n_scored()
    }

    pub fn partial_failure(&self) -> Option<PartialFailure> {
        let failed: Vec<usize> = self
            .batches
            .iter()
            .filter(|b| b.error.is_some())
            .map(|b| b.index)
            .collect();
        (!failed.is_empty()).then(|| PartialFailure {
            failed_batches: failed,
            failed_utterances: self.n_failed(),
        })
    }

    pub fn prediction_rows(&self) -> Vec<PredictionRow> {
        self.outcomes.iter().map(PredictionRow::from).collect()
    }
}

/// Splits `n` rows into consecutive minibatch ranges of `batch_size`.
pub fn minibatch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    (0..n)
        .step_by(batch_size)
        .map(|start| start..(start + batch_size).min(n))
        .collect()
}

struct BatchResult {
    report: BatchReport,
    predictions: Option<Vec<Prediction>>,
    clamped: usize,
}

fn run_one(
    index: usize,
    items: &[PromptItem],
    mode: PromptMode,
    support: Option<&[FewShotExample]>,
    backend: &dyn Backend,
    max_retries: u32,
) -> Result<BatchResult, RunError> {
    let prompt = serialize_prompt(items, mode, support)?;
    let ids: Vec<String> = items.iter().map(|i| i.utt_id.clone()).collect();
    let mut report = BatchReport {
        index,
        utt_ids: ids.clone(),
        attempts: 0,
        responses: Vec::new(),
        error: None,
    };
    for _ in 0..=max_retries {
        report.attempts += 1;
        let err = match backend.complete(&prompt) {
            Ok(text) => {
                report.responses.push(text.clone());
                match parse_response(&text, &ids) {
                    Ok(parsed) => {
                        report.error = None;
                        return Ok(BatchResult {
                            report,
                            clamped: parsed.clamped,
                            predictions: Some(parsed.predictions),
                        });
                    }
                    Err(e) => AttemptError::Response(e),
                }
            }
            Err(e) if e.is_fatal() => return Err(RunError::Fatal(e)),
            Err(e) => AttemptError::Backend(e),
        };
        log::warn!("minibatch {index} attempt {}: {err}", report.attempts);
        report.error = Some(err);
    }
    Ok(BatchResult {
        report,
        predictions: None,
        clamped: 0,
    })
}

/// Rates `rows` in minibatches of `cfg.batch_size`, one stateless request each.
pub fn run_batched(
    rows: &[PromptItem],
    mode: PromptMode,
    support: Option<&[FewShotExample]>,
    backend: &dyn Backend,
    cfg: &BackendConfig,
) -> Result<BatchOutcome, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let ranges = minibatch_ranges(rows.len(), cfg.batch_size);
    let slots: Vec<Mutex<Option<BatchResult>>> = ranges.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let fatal: Mutex<Option<RunError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..cfg.max_in_flight.min(ranges.len()) {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(range) = ranges.get(i) else { break };
                match run_one(
                    i,
                    &rows[range.clone()],
                    mode,
                    support,
                    backend,
                    cfg.max_retries,
                ) {
                    Ok(res) => *slots[i].lock().expect("slot lock") = Some(res),
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        fatal.lock().expect("fatal lock").get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = fatal.into_inner().expect("fatal lock") {
        return Err(e);
    }

    let mut outcomes = Vec::with_capacity(rows.len());
    let mut batches = Vec::with_capacity(ranges.len());
    let mut clamped = 0;
    for (slot, range) in slots.into_iter().zip(&ranges) {
        let res = slot
            .into_inner()
            .expect("slot lock")
            .expect("every minibatch ran");
        clamped += res.clamped;
        match res.predictions {
            Some(preds) => outcomes.extend(preds.into_iter().map(Outcome::Scored)),
            None => {
                let reason = res
                    .report
                    .error
                    .as_ref()
                    .map(ToString::to_string)
                    .unwrap_or_default();
                outcomes.extend(rows[range.clone()].iter().map(|r| Outcome::Failed {
                    utt_id: r.utt_id.clone(),
                    reason: reason.clone(),
                }));
            }
        }
        batches.push(res.report);
    }

    let all_failed = !batches.is_empty() && batches.iter().all(|b| b.error.is_some());
    if all_failed {
        let transport = batches.iter().rev().find_map(|b| match &b.error {
            Some(AttemptError::Backend(e)) if e.is_transport() => Some(e.clone()),
            _ => None,
        });
        if let Some(e) = transport {
            return Err(RunError::BackendUnreachable(e));
        }
    }

    Ok(BatchOutcome {
        outcomes,
        batches,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionStatus {
    Ok,
    Failed,
}

/// One line of the predictions CSV: `utt_id,mos,attributes_json,status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub utt_id: String,
    pub mos: Option<f64>,
    pub attributes_json: String,
    pub status: PredictionStatus,
}

impl From<&Outcome> for PredictionRow {
    fn from(o: &Outcome) -> Self {
        match o {
            Outcome::Scored(p) => PredictionRow {
                utt_id: p.utt_id.clone(),
                mos: Some(p.mos),
                attributes_json: serde_json::to_string(&p.attributes)
                    .expect("string map serializes"),
                status: PredictionStatus::Ok,
            },
            Outcome::Failed { utt_id, .. } => PredictionRow {
                utt_id: utt_id.clone(),
                mos: None,
                attributes_json: "{}".into(),
                status: PredictionStatus::Failed,
            },
        }
    }
}

impl PredictionRow {
    pub fn attributes(&self) -> BTreeMap<String, String> {
        serde_json::from_str(&self.attributes_json).unwrap_or_default()
    }
}

pub fn write_predictions<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRow>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
