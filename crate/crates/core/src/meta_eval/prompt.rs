//! Deterministic prompt rendering.
//!
//! Layout, top to bottom: instruction block, descriptor glossary, optional
//! reference examples, the utterances to rate, and the output contract. Every
//! utterance block starts with a `utt_id:` line carrying a JSON string and
//! then lists `key: value` lines in a fixed order. Reals use 4 decimals.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::FewShotExample;
use crate::descriptors::AcousticDescriptors;
use crate::labels::PseudoLabels;

pub const EXAMPLES_HEADER: &str = "### Reference examples";
pub const UTTERANCES_HEADER: &str = "### Utterances to rate";
pub const OUTPUT_HEADER: &str = "### Output format";

/// Instruction asking the model to behave deterministically.
pub const DETERMINISM_DIRECTIVE: &str =
    "Answer deterministically: always report your single most likely estimate, never a random sample.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("cannot build a prompt for an empty batch")]
    EmptyBatch,
    #[error("few-shot mode needs a non-empty support set")]
    MissingSupport,
    #[error("support examples are only accepted in few-shot mode")]
    UnexpectedSupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Basic temporal descriptors plus pseudo-labels.
    Zs,
    /// Adds MFCC means and log-mel statistics.
    ZsStar,
    /// Basic descriptors plus a labelled support set.
    Fs,
}

impl PromptMode {
    pub fn includes_spectral(self) -> bool {
        matches!(self, PromptMode::ZsStar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Zs => "zs",
            PromptMode::ZsStar => "zs-star",
            PromptMode::Fs => "fs",
        }
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zs" => Ok(PromptMode::Zs),
            "zs-star" | "zs*" | "zs_star" => Ok(PromptMode::ZsStar),
            "fs" => Ok(PromptMode::Fs),
            other => Err(format!(
                "unknown prompt mode {other:?} (expected zs, zs-star or fs)"
            )),
        }
    }
}

/// One utterance to be rated.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptItem {
    pub utt_id: String,
    pub descriptors: AcousticDescriptors,
    pub pseudo: PseudoLabels,
}

fn real(x: f64) -> String {
    format!("{x:.4}")
}

fn vector(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| real(x)).collect();
    format!("[{}]", parts.join(", "))
}

fn push_fields(out: &mut String, d: &AcousticDescriptors, p: &PseudoLabels, mode: PromptMode) {
    let _ = writeln!(out, "dnsmos: {}", real(p.dnsmos));
    let _ = writeln!(out, "vqscore: {}", real(p.vqscore));
    let _ = writeln!(out, "rms: {}", real(d.rms));
    let _ = writeln!(out, "zcr: {}", real(d.zcr));
    let _ = writeln!(out, "clipping_ratio: {}", real(d.clipping_ratio));
    let _ = writeln!(out, "duration_s: {}", real(d.duration_s));
    if mode.includes_spectral() {
        let _ = writeln!(out, "mfcc_mean: {}", vector(&d.mfcc_mean));
        let _ = writeln!(out, "mel_bin_mean: {}", vector(&d.mel_bin_mean));
        let _ = writeln!(out, "mel_bin_var: {}", vector(&d.mel_bin_var));
        let _ = writeln!(out, "mel_global_max: {}", real(d.mel_global_max));
        let _ = writeln!(out, "mel_global_min: {}", real(d.mel_global_min));
    }
}

fn push_instructions(out: &mut String, mode: PromptMode, n: usize) {
    out.push_str(
        "You are an expert judge of perceived speech quality acting as a meta-evaluator.\n\
         Each utterance below is described by acoustic measurements and by two automatic\n\
         quality predictors. Combine all of this evidence to estimate the mean opinion\n\
         score (MOS) that a panel of human listeners would give, on a scale from 1 (bad)\n\
         to 5 (excellent). Treat the predictors as noisy hints, not as ground truth.\n",
    );
    out.push_str(DETERMINISM_DIRECTIVE);
    out.push('\n');
    let _ = writeln!(out, "There are {n} utterances to rate.");
    out.push_str(
        "\nField meanings:\n\
         - dnsmos: DNSMOS prediction, 1 to 5\n\
         - vqscore: VQScore prediction, 0 to 1\n\
         - rms: root-mean-square amplitude, full scale is 1\n\
         - zcr: zero-crossing rate, fraction of adjacent samples that change sign\n\
         - clipping_ratio: fraction of samples at or near full scale\n\
         - duration_s: length in seconds\n",
    );
    if mode.includes_spectral() {
        out.push_str(
            "- mfcc_mean: 13 mel-frequency cepstral coefficients averaged over frames\n\
             - mel_bin_mean, mel_bin_var: per-band mean and variance of the natural-log mel spectrogram\n\
             - mel_global_max, mel_global_min: largest and smallest log-mel values\n",
        );
    }
}

fn push_output_contract(out: &mut String, n: usize) {
    let _ = writeln!(out, "{OUTPUT_HEADER}");
    let _ = writeln!(
        out,
        "Reply with one JSON array holding exactly {n} objects, one per utterance, in the order listed above:"
    );
    out.push_str(
        "[{\"utt_id\": \"<id>\", \"mos\": <number from 1 to 5>, \"attributes\": {\"<name>\": \"<value>\"}}]\n\
         Use attributes for short explanatory labels such as noise level, clipping or reverberation.\n\
         Do not add any other JSON to the reply.\n",
    );
}

/// Renders the prompt for one minibatch. Identical inputs give byte-identical text.
pub fn serialize_prompt(
    batch: &[PromptItem],
    mode: PromptMode,
    support: Option<&[FewShotExample]>,
) -> Result<String, PromptError> {
    if batch.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    let support = match (mode, support) {
        (PromptMode::Fs, Some(s)) if !s.is_empty() => Some(s),
        (PromptMode::Fs, _) => return Err(PromptError::MissingSupport),
        (_, Some(s)) if !s.is_empty() => return Err(PromptError::UnexpectedSupport),
        _ => None,
    };

    let mut out = String::new();
    push_instructions(&mut out, mode, batch.len());

    if let Some(examples) = support {
        let _ = writeln!(out, "\n{EXAMPLES_HEADER}");
        out.push_str("Utterances already rated by human listeners, for calibration:\n");
        for (i, ex) in examples.iter().enumerate() {
            let _ = writeln!(out, "\nexample: {}", i + 1);
            push_fields(&mut out, &ex.descriptors, &ex.pseudo, mode);
            let _ = writeln!(out, "listener_mos: {}", real(ex.mos));
        }
    }

    let _ = writeln!(out, "\n{UTTERANCES_HEADER}");
    for item in batch {
        let id = serde_json::to_string(&item.utt_id).expect("string serializes");
        let _ = writeln!(out, "\nutt_id: {id}");
        push_fields(&mut out, &item.descriptors, &item.pseudo, mode);
    }
    out.push('\n');
    push_output_contract(&mut out, batch.len());
    Ok(out)
}

/// Fields read back from one utterance block of a rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPromptItem {
    pub utt_id: String,
    pub dnsmos: f64,
    pub vqscore: f64,
    pub clipping_ratio: f64,
}

/// Reads utterance blocks back out of a prompt made by [`serialize_prompt`].
pub fn parse_prompt_items(prompt: &str) -> Result<Vec<ParsedPromptItem>, String> {
    let start = prompt
        .find(UTTERANCES_HEADER)
        .ok_or("utterance section not found")?
        + UTTERANCES_HEADER.len();
    let end = prompt[start..]
        .find(OUTPUT_HEADER)
        .map_or(prompt.len(), |e| start + e);

    struct Partial {
        utt_id: String,
        dnsmos: Option<f64>,
        vqscore: Option<f64>,
        clipping_ratio: Option<f64>,
    }
    fn finish(p: Partial) -> Result<ParsedPromptItem, String> {
        let missing = |f: &str| format!("utterance {:?} lacks {f}", p.utt_id);
        Ok(ParsedPromptItem {
            dnsmos: p.dnsmos.ok_or_else(|| missing("dnsmos"))?,
            vqscore: p.vqscore.ok_or_else(|| missing("vqscore"))?,
            clipping_ratio: p.clipping_ratio.ok_or_else(|| missing("clipping_ratio"))?,
            utt_id: p.utt_id,
        })
    }

    let mut items = Vec::new();
    let mut current: Option<Partial> = None;
    for line in prompt[start..end].lines() {
        let Some((key, value)) = line.split_once(": ") else {
            continue;
        };
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| format!("{key} value {value:?} is not a number"))
        };
        match key {
            "utt_id" => {
                if let Some(done) = current.take() {
                    items.push(finish(done)?);
                }
                let utt_id: String = serde_json::from_str(value)
                    .map_err(|e| format!("bad utt_id {value:?}: {e}"))?;
                current = Some(Partial {
                    utt_id,
                    dnsmos: None,
                    vqscore: None,
                    clipping_ratio: None,
                });
            }
            "dnsmos" | "vqscore" | "clipping_ratio" => {
                let p = current
                    .as_mut()
                    .ok_or_else(|| format!("{key} outside an utterance block"))?;
                let v = Some(num()?);
                match key {
                    "dnsmos" => p.dnsmos = v,
                    "vqscore" => p.vqscore = v,
                    _ => p.clipping_ratio = v,
                }
            }
            _ => {}
        }
    }
    if let Some(done) = current.take() {
        items.push(finish(done)?);
    }
    if items.is_empty() {
        return Err("no utterance blocks".into());
    }
    Ok(items)
}
