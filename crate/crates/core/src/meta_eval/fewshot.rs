//! Support-set selection for few-shot prompting.
//!
//! `k` target values are taken at evenly spaced quantiles of the pool's MOS
//! distribution (for `k = 3`: minimum, median, maximum). Slots are filled in
//! the order first, last, then the interior ones ascending; each slot takes
//! the unused example closest to its target, ties going to the
//! lexicographically smaller `utt_id`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::{AcousticDescriptors, FeatureRecord};
use crate::labels::{Manifest, PseudoLabels, MOS_RANGE};

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("support pool has {pool} examples, need at least {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("support example {utt_id:?}: mos {mos} outside [1, 5]")]
    InvalidMos { utt_id: String, mos: f64 },
    #[error("support pool {path}: {message}")]
    Pool { path: String, message: String },
}

/// A labelled utterance shown to the model as a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub utt_id: String,
    #[serde(flatten)]
    pub descriptors: AcousticDescriptors,
    #[serde(flatten)]
    pub pseudo: PseudoLabels,
    pub mos: f64,
}

/// Linear-interpolated quantile of ascending `sorted` at `q` in `[0, 1]`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Quantile targets, one per slot, in slot order.
pub fn quantile_targets(pool_mos: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = pool_mos.to_vec();
    sorted.sort_by(f64::total_cmp);
    if k == 1 {
        return vec![quantile(&sorted, 0.5)];
    }
    (0..k)
        .map(|i| quantile(&sorted, i as f64 / (k - 1) as f64))
        .collect()
}

/// Slot fill order: extremes first, then interior slots ascending.
pub fn slot_priority(k: usize) -> Vec<usize> {
    match k {
        0 => vec![],
        1 => vec![0],
        _ => [0, k - 1].into_iter().chain(1..k - 1).collect(),
    }
}

pub fn select_few_shot(
    pool: &[FewShotExample],
    k: usize,
) -> Result<Vec<FewShotExample>, FewShotError> {
    if k == 0 {
        return Err(FewShotError::ZeroK);
    }
    if pool.len() < k {
        return Err(FewShotError::PoolTooSmall {
            pool: pool.len(),
            k,
        });
    }
    let mos: Vec<f64> = pool.iter().map(|e| e.mos).collect();
    let targets = quantile_targets(&mos, k);

    let mut used = vec![false; pool.len()];
    let mut chosen = Vec::with_capacity(k);
    for slot in slot_priority(k) {
        let target = targets[slot];
        let best = (0..pool.len())
            .filter(|&i| !used[i])
            .min_by(|&a, &b| {
                (pool[a].mos - target)
                    .abs()
                    .total_cmp(&(pool[b].mos - target).abs())
                    .then_with(|| pool[a].utt_id.cmp(&pool[b].utt_id))
            })
            .expect("pool.len() >= k leaves a candidate");
        used[best] = true;
        chosen.push(pool[best].clone());
    }
    chosen.sort_by(|a, b| {
        a.mos
            .total_cmp(&b.mos)
            .then_with(|| a.utt_id.cmp(&b.utt_id))
    });
    Ok(chosen)
}

/// Builds a pool from extracted features and manifest rows that carry listener MOS.
/// Utterances without features or without a truth value are skipped.
pub fn pool_from_features(features: &[FeatureRecord], manifest: &Manifest) -> Vec<FewShotExample> {
    features
        .iter()
        .filter_map(|f| {
            let row = manifest.get(&f.utt_id)?;
            Some(FewShotExample {
                utt_id: f.utt_id.clone(),
                descriptors: f.descriptors.clone(),
                pseudo: row.pseudo_labels(),
                mos: row.mos_truth?,
            })
        })
        .collect()
}

pub fn read_support_pool(path: &Path) -> Result<Vec<FewShotExample>, FewShotError> {
    let pool_err = |message: String| FewShotError::Pool {
        path: path.display().to_string(),
        message,
    };
    let f = File::open(path).map_err(|e| pool_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| pool_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: FewShotExample =
            serde_json::from_str(&line).map_err(|e| pool_err(format!("line {}: {e}", i + 1)))?;
        if !(MOS_RANGE.0..=MOS_RANGE.1).contains(&ex.mos) {
            return Err(FewShotError::InvalidMos {
                utt_id: ex.utt_id,
                mos: ex.mos,
            });
        }
        PseudoLabels::new(ex.pseudo.dnsmos, ex.pseudo.vqscore)
            .map_err(|e| pool_err(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_support_pool(path: &Path, pool: &[FewShotExample]) -> Result<(), FewShotError> {
    let pool_err = |e: std::io::Error| FewShotError::Pool {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(pool_err)?);
    for ex in pool {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(out, "{line}").map_err(pool_err)?;
    }
    out.flush().map_err(pool_err)
}
