//! Oracles, fixtures and fake backends shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gathermos::audio_io::write_wav_pcm16;
use gathermos::descriptors::AcousticDescriptors;
use gathermos::labels::{naive_ensemble, Manifest, ManifestRow, PseudoLabels};
use gathermos::meta_eval::{
    parse_prompt_items, Backend, BackendError, FewShotExample, MockBackend, PromptItem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- DSP oracles

/// |X[k]|² by direct summation, k in 0..=n_fft/2.
pub fn naive_dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * n % n_fft) as f64 / n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Orthonormal DCT-II of one vector, coefficients 0..n_out.
pub fn brute_dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI / n * (i as f64 + 0.5) * k as f64).cos())
                .sum();
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            scale * s
        })
        .collect()
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (PI * i as f64 / n as f64).sin().powi(2))
        .collect()
}

// ------------------------------------------------------------ metric oracles

/// Textbook raw-sum Pearson formula.
pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Rank = 1 + #smaller + (#equal - 1) / 2, by counting.
pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let eq = v.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

/// Random vector pair with deliberate ties (values drawn from a small grid).
pub fn tied_pair(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = r.random_range(3..=50);
        let levels = r.random_range(2..=12);
        let x: Vec<f64> = (0..n)
            .map(|_| r.random_range(0..levels) as f64 * 0.5)
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                if r.random_bool(0.3) {
                    r.random_range(0..levels) as f64
                } else {
                    v + r.random_range(-2.0..2.0)
                }
            })
            .collect();
        let distinct = |v: &[f64]| v.iter().any(|a| *a != v[0]);
        if distinct(&x) && distinct(&y) {
            return (x, y);
        }
    }
}

// ------------------------------------------------------------ few-shot oracle

/// Exhaustive oracle: the target for slot `s` is the linearly interpolated
/// `s/(k-1)` quantile (median when k = 1). Every ordered assignment of
/// distinct pool members to slots is scored as the vector of
/// `(|mos - target|, utt_id)` keys in priority order (extremes, then interior
/// ascending); the lexicographic minimum is the expected selection.
pub fn brute_few_shot(pool: &[FewShotExample], k: usize) -> Vec<String> {
    let mut sorted: Vec<f64> = pool.iter().map(|e| e.mos).collect();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let targets: Vec<f64> = if k == 1 {
        vec![q(0.5)]
    } else {
        (0..k).map(|i| q(i as f64 / (k - 1) as f64)).collect()
    };
    let order: Vec<usize> = if k == 1 {
        vec![0]
    } else {
        let mut o = vec![0, k - 1];
        o.extend(1..k - 1);
        o
    };

    type Key = Vec<(f64, String)>;
    let mut best: Option<(Key, Vec<usize>)> = None;
    let mut current = Vec::new();
    enumerate(pool.len(), k, &mut current, &mut |assign: &[usize]| {
        let key: Vec<(f64, String)> = order
            .iter()
            .zip(assign)
            .map(|(&slot, &i)| ((pool[i].mos - targets[slot]).abs(), pool[i].utt_id.clone()))
            .collect();
        let better = match &best {
            None => true,
            Some((b, _)) => lex_less(&key, b),
        };
        if better {
            best = Some((key, assign.to_vec()));
        }
    });
    let mut chosen: Vec<&FewShotExample> = best.unwrap().1.iter().map(|&i| &pool[i]).collect();
    chosen.sort_by(|a, b| {
        a.mos
            .total_cmp(&b.mos)
            .then_with(|| a.utt_id.cmp(&b.utt_id))
    });
    chosen.iter().map(|e| e.utt_id.clone()).collect()
}

fn lex_less(a: &[(f64, String)], b: &[(f64, String)]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

fn enumerate(n: usize, k: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if cur.len() == k {
        visit(cur);
        return;
    }
    for i in 0..n {
        if !cur.contains(&i) {
            cur.push(i);
            enumerate(n, k, cur, visit);
            cur.pop();
        }
    }
}

// ------------------------------------------------------------------ fixtures

pub fn descriptors(clipping_ratio: f64) -> AcousticDescriptors {
    AcousticDescriptors {
        rms: 0.1,
        zcr: 0.05,
        clipping_ratio,
        duration_s: 1.0,
        mfcc_mean: vec![0.0; 13],
        mel_bin_mean: vec![-5.0; 40],
        mel_bin_var: vec![1.0; 40],
        mel_global_max: -1.0,
        mel_global_min: -9.0,
    }
}

/// Labels on a 4-decimal grid so they survive prompt serialization exactly.
pub fn grid_labels(r: &mut ChaCha8Rng) -> PseudoLabels {
    PseudoLabels::new(
        r.random_range(10_000..=50_000) as f64 / 10_000.0,
        r.random_range(0..=10_000) as f64 / 10_000.0,
    )
    .unwrap()
}

pub fn example(utt_id: &str, mos: f64) -> FewShotExample {
    FewShotExample {
        utt_id: utt_id.to_string(),
        descriptors: descriptors(0.0),
        pseudo: PseudoLabels::new(3.0, 0.5).unwrap(),
        mos,
    }
}

/// `n` prompt items with clipping 0 and a manifest whose truth is a noisy
/// function of the ensemble.
pub fn synthetic_corpus(n: usize, seed: u64) -> (Vec<PromptItem>, Manifest) {
    let mut r = rng(seed);
    let mut items = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let pseudo = grid_labels(&mut r);
        let utt_id = format!("utt_{i:03}");
        let truth = (naive_ensemble(&pseudo) + r.random_range(-0.8..0.8)).clamp(1.0, 5.0);
        rows.push(ManifestRow {
            utt_id: utt_id.clone(),
            wav_path: PathBuf::from(format!("{utt_id}.wav")),
            dnsmos: pseudo.dnsmos,
            vqscore: pseudo.vqscore,
            mos_truth: Some(truth),
            system: Some(format!("sys{}", i % 3)),
            condition: None,
        });
        items.push(PromptItem {
            utt_id,
            descriptors: descriptors(0.0),
            pseudo,
        });
    }
    (
        items,
        Manifest {
            base_dir: PathBuf::new(),
            rows,
        },
    )
}

/// Writes `n` short WAV files plus `manifest.csv` into `dir`.
/// Every fifth file is driven into clipping.
pub fn write_wav_corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut r = rng(seed);
    let sr = 16_000;
    let mut csv = String::from("utt_id,wav_path,dnsmos,vqscore,mos_truth,system,condition\n");
    for i in 0..n {
        let f0 = r.random_range(120.0..900.0);
        let noise = r.random_range(0.0..0.2);
        let gain = if i % 5 == 0 {
            1.6
        } else {
            r.random_range(0.2..0.7)
        };
        let len = r.random_range(6_000..14_000);
        let samples: Vec<f64> = (0..len)
            .map(|t| {
                let s = (2.0 * PI * f0 * t as f64 / sr as f64).sin()
                    + noise * r.random_range(-1.0..1.0);
                (gain * s).clamp(-1.0, 1.0)
            })
            .collect();
        let name = format!("u{i:02}.wav");
        write_wav_pcm16(dir.join(&name), &samples, sr).unwrap();
        let pseudo = grid_labels(&mut r);
        let truth = (naive_ensemble(&pseudo) - noise * 4.0).clamp(1.0, 5.0);
        csv.push_str(&format!(
            "u{i:02},{name},{},{},{truth:.3},sys{},{}\n",
            pseudo.dnsmos,
            pseudo.vqscore,
            i % 2,
            if noise > 0.1 { "noisy" } else { "clean" }
        ));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, csv).unwrap();
    path
}

// ------------------------------------------------------------------ backends

/// Mock backend that logs every prompt it receives.
#[derive(Default)]
pub struct RecordingBackend {
    pub prompts: Mutex<Vec<String>>,
}

impl RecordingBackend {
    pub fn batch_ids(&self) -> Vec<Vec<String>> {
        self.prompts
            .lock()
            .unwrap()
            .iter()
            .map(|p| {
                parse_prompt_items(p)
                    .unwrap()
                    .into_iter()
                    .map(|i| i.utt_id)
                    .collect()
            })
            .collect()
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        MockBackend.complete(prompt)
    }
}

/// Answers prose for any minibatch containing `poisoned`, mock otherwise.
pub struct FailingBatchBackend {
    pub poisoned: String,
}

impl Backend for FailingBatchBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let ids = parse_prompt_items(prompt).unwrap();
        if ids.iter().any(|i| i.utt_id == self.poisoned) {
            Ok("I am unable to rate these recordings.".into())
        } else {
            MockBackend.complete(prompt)
        }
    }
}

/// Always fails at the transport level.
pub struct DeadBackend;

impl Backend for DeadBackend {
    fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
        Err(BackendError::Unreachable("connection refused".into()))
    }
}
