//! `gathermos` command line.
//!
//! Stages talk only through files: `extract` writes a feature JSONL cache,
//! `ensemble` a CSV with the naive baseline, `predict` a predictions CSV and
//! `evaluate` a report JSON plus scatter CSV.
//!
//! Exit codes: 0 success, 1 data or usage error, 2 backend error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use crate::audio_io::load_wav;
use crate::descriptors::{extract_all, read_feature_cache, FeatureRecord, FrameConfig};
use crate::labels::{
    load_manifest, load_manifest_with, write_ensemble_csv, ExternalScorer, ScoreOverrides,
};
use crate::meta_eval::{
    read_predictions, read_support_pool, run_batched, select_few_shot, write_predictions, Backend,
    BackendConfig, BackendKind, BatchOutcome, FewShotExample, HttpBackend, MockBackend, PromptItem,
    PromptMode, RunError,
};
use crate::metrics::{build_report, emit_scatter, MetricError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gathermos",
    version,
    about = "Speech quality estimation with an LLM meta-evaluator"
)]
pub struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract acoustic descriptors for every manifest row into a JSONL cache
    Extract(ExtractArgs),
    /// Add the naive DNSMOS/VQScore ensemble column to a manifest
    Ensemble(EnsembleArgs),
    /// Ask the meta-evaluator for MOS predictions
    Predict(PredictArgs),
    /// Correlate predictions with listener MOS
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct FrameArgs {
    /// Analysis frame length in milliseconds [default: 25]
    #[arg(long)]
    pub frame_ms: Option<f64>,
    /// Hop between frames in milliseconds [default: 10]
    #[arg(long)]
    pub hop_ms: Option<f64>,
    /// FFT size [default: smallest power of two holding one frame]
    #[arg(long)]
    pub n_fft: Option<usize>,
    /// Number of mel filters [default: 40]
    #[arg(long)]
    pub n_mels: Option<usize>,
    /// Number of MFCC coefficients kept [default: 13]
    #[arg(long)]
    pub n_mfcc: Option<usize>,
    /// Lowest mel filter edge in Hz [default: 0]
    #[arg(long)]
    pub fmin_hz: Option<f64>,
    /// Highest mel filter edge in Hz [default: Nyquist]
    #[arg(long)]
    pub fmax_hz: Option<f64>,
    /// Floor applied before the log of mel energies [default: 1e-10]
    #[arg(long)]
    pub log_floor: Option<f64>,
    /// Absolute amplitude counted as clipped [default: 0.99]
    #[arg(long)]
    pub clip_threshold: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct ExtractArgs {
    /// Manifest CSV (utt_id,wav_path,dnsmos,vqscore[,mos_truth,system,condition])
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output feature cache (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Skip unreadable files with a warning instead of failing
    #[arg(long)]
    pub keep_going: bool,
    /// Worker threads [default: all cores]
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub frame: FrameArgs,
}

#[derive(Debug, Args, Clone)]
pub struct EnsembleArgs {
    /// Manifest CSV
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output CSV with an added naive_ensemble column
    #[arg(long)]
    pub out: PathBuf,
    /// Command producing DNSMOS for `{wav}`, replacing the manifest column
    #[arg(long, value_name = "TEMPLATE")]
    pub dnsmos_cmd: Option<String>,
    /// Command producing VQScore for `{wav}`, replacing the manifest column
    #[arg(long, value_name = "TEMPLATE")]
    pub vqscore_cmd: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct PredictArgs {
    /// Feature cache written by `extract`
    #[arg(long)]
    pub features: PathBuf,
    /// Manifest CSV holding the pseudo-labels
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output predictions CSV (utt_id,mos,attributes_json,status)
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt mode: zs, zs-star or fs [default: zs]
    #[arg(long)]
    pub mode: Option<PromptMode>,
    /// Backend: mock or http [default: mock]
    #[arg(long)]
    pub backend: Option<BackendKind>,
    /// Utterances per request [default: 10]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    /// Labelled support pool (JSON lines), required in fs mode
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Number of support examples drawn from the pool [default: 3]
    #[arg(long)]
    pub support_k: Option<usize>,
    /// Chat-completion endpoint URL (http backend)
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (http backend)
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key [default: GATHERMOS_API_KEY]
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Retries per minibatch [default: 2]
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Per-request timeout in seconds [default: 120]
    #[arg(long)]
    pub timeout_s: Option<f64>,
    /// Concurrent minibatches [default: 2]
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Also write every raw model response to this JSONL file
    #[arg(long)]
    pub raw_out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct EvaluateArgs {
    /// Predictions CSV written by `predict`
    #[arg(long)]
    pub pred: PathBuf,
    /// Manifest CSV with mos_truth
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output report JSON {n, n_failed, lcc, srcc}
    #[arg(long)]
    pub report: PathBuf,
    /// Output scatter CSV (truth,prediction,utt_id,system,condition)
    #[arg(long)]
    pub scatter: PathBuf,
}

/// Values loadable from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub frame: Option<FrameConfig>,
    pub backend: Option<BackendConfig>,
    pub predict: PredictFileConfig,
    pub ensemble: EnsembleFileConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictFileConfig {
    pub mode: Option<PromptMode>,
    pub support: Option<PathBuf>,
    pub support_k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleFileConfig {
    pub dnsmos_cmd: Option<String>,
    pub vqscore_cmd: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            error: error.into(),
        }
    }

    fn backend(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_BACKEND,
            error: error.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn resolve_frame(file: Option<&FrameConfig>, flags: &FrameArgs) -> FrameConfig {
    let base = file.cloned().unwrap_or_default();
    FrameConfig {
        frame_ms: flags.frame_ms.unwrap_or(base.frame_ms),
        hop_ms: flags.hop_ms.unwrap_or(base.hop_ms),
        n_fft: flags.n_fft.or(base.n_fft),
        n_mels: flags.n_mels.unwrap_or(base.n_mels),
        n_mfcc: flags.n_mfcc.unwrap_or(base.n_mfcc),
        fmin_hz: flags.fmin_hz.unwrap_or(base.fmin_hz),
        fmax_hz: flags.fmax_hz.or(base.fmax_hz),
        log_floor: flags.log_floor.unwrap_or(base.log_floor),
        clip_threshold: flags.clip_threshold.unwrap_or(base.clip_threshold),
    }
}

/// Fully resolved `predict` settings.
#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub mode: PromptMode,
    pub support: Option<PathBuf>,
    pub support_k: usize,
    pub backend: BackendConfig,
    pub raw_out: Option<PathBuf>,
}

pub fn resolve_predict(args: &PredictArgs, file: &FileConfig) -> anyhow::Result<PredictOptions> {
    let mut backend = file.backend.clone().unwrap_or_default();
    if let Some(k) = args.backend {
        backend.kind = k;
    }
    if let Some(b) = args.batch_size {
        backend.batch_size = b as usize;
    }
    if args.endpoint.is_some() {
        backend.endpoint_url = args.endpoint.clone();
    }
    if args.model.is_some() {
        backend.model_name = args.model.clone();
    }
    if let Some(v) = &args.api_key_env {
        backend.api_key_env = v.clone();
    }
    if let Some(v) = args.max_retries {
        backend.max_retries = v;
    }
    if let Some(v) = args.timeout_s {
        backend.timeout_s = v;
    }
    if let Some(v) = args.max_in_flight {
        backend.max_in_flight = v;
    }
    backend.validate().map_err(|e| anyhow!("{e}"))?;

    let mode = args.mode.or(file.predict.mode).unwrap_or(PromptMode::Zs);
    let support = args
        .support
        .clone()
        .or_else(|| file.predict.support.clone());
    match (mode, &support) {
        (PromptMode::Fs, None) => bail!("--mode fs requires --support"),
        (PromptMode::Zs | PromptMode::ZsStar, Some(_)) => {
            bail!("--support is only valid with --mode fs")
        }
        _ => {}
    }
    if backend.kind == BackendKind::Mock && (args.endpoint.is_some() || args.model.is_some()) {
        bail!("--endpoint/--model only apply to --backend http");
    }
    let support_k = args.support_k.or(file.predict.support_k).unwrap_or(3);
    if support_k == 0 {
        bail!("--support-k must be at least 1");
    }
    Ok(PredictOptions {
        features: args.features.clone(),
        manifest: args.manifest.clone(),
        out: args.out.clone(),
        mode,
        support,
        support_k,
        backend,
        raw_out: args.raw_out.clone(),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(CliError::data)
}

pub fn cmd_extract(args: &ExtractArgs, file: &FileConfig) -> CliResult<i32> {
    let cfg = resolve_frame(file.frame.as_ref(), &args.frame);
    let manifest = load_manifest(&args.manifest)
        .with_context(|| format!("loading {}", args.manifest.display()))
        .map_err(CliError::data)?;

    let work = || -> Vec<Result<FeatureRecord, String>> {
        manifest
            .rows
            .par_iter()
            .map(|row| {
                let path = manifest.wav_path(row);
                let wav = load_wav(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                if wav.clamped_samples() > 0 {
                    log::warn!(
                        "{}: clamped {} float samples into [-1, 1]",
                        path.display(),
                        wav.clamped_samples()
                    );
                }
                let descriptors =
                    extract_all(&wav, &cfg).map_err(|e| format!("{}: {e}", path.display()))?;
                Ok(FeatureRecord {
                    utt_id: row.utt_id.clone(),
                    descriptors,
                })
            })
            .collect()
    };
    let results = match args.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .context("building worker pool")
            .map_err(CliError::data)?
            .install(work),
        None => work(),
    };

    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (row, res) in manifest.rows.iter().zip(results) {
        match res {
            Ok(r) => records.push(r),
            Err(msg) => failures.push(format!("{}: {msg}", row.utt_id)),
        }
    }
    for f in &failures {
        eprintln!("warning: {f}");
    }
    if !failures.is_empty() && !args.keep_going {
        return Err(CliError::data(anyhow!(
            "{} of {} utterances failed; rerun with --keep-going to skip them",
            failures.len(),
            manifest.rows.len()
        )));
    }

    let mut out = create(&args.out)?;
    for r in &records {
        writeln!(out, "{}", r.to_json_line())
            .with_context(|| format!("writing {}", args.out.display()))
            .map_err(CliError::data)?;
    }
    out.flush()
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(CliError::data)?;
    println!(
        "extracted {} utterances ({} skipped)",
        records.len(),
        failures.len()
    );
    Ok(EXIT_OK)
}

pub fn cmd_ensemble(args: &EnsembleArgs, file: &FileConfig) -> CliResult<i32> {
    let scorer =
        |flag: &Option<String>, cfg: &Option<String>| -> CliResult<Option<ExternalScorer>> {
            flag.clone()
                .or_else(|| cfg.clone())
                .map(ExternalScorer::new)
                .transpose()
                .map_err(CliError::data)
        };
    let overrides = ScoreOverrides {
        dnsmos: scorer(&args.dnsmos_cmd, &file.ensemble.dnsmos_cmd)?,
        vqscore: scorer(&args.vqscore_cmd, &file.ensemble.vqscore_cmd)?,
    };
    let manifest = load_manifest_with(&args.manifest, &overrides)
        .with_context(|| format!("loading {}", args.manifest.display()))
        .map_err(CliError::data)?;
    if manifest.is_empty() {
        return Err(CliError::data(anyhow!(
            "manifest {} has no rows",
            args.manifest.display()
        )));
    }
    let out = create(&args.out)?;
    write_ensemble_csv(out, &manifest.rows)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(CliError::data)?;
    println!(
        "wrote naive ensemble for {} utterances",
        manifest.rows.len()
    );
    Ok(EXIT_OK)
}

fn load_prompt_items(opts: &PredictOptions) -> CliResult<Vec<PromptItem>> {
    let features = read_feature_cache(&opts.features).map_err(CliError::data)?;
    let manifest = load_manifest(&opts.manifest)
        .with_context(|| format!("loading {}", opts.manifest.display()))
        .map_err(CliError::data)?;
    features
        .into_iter()
        .map(|f| {
            let row = manifest.get(&f.utt_id).ok_or_else(|| {
                CliError::data(anyhow!(
                    "utterance {:?} has features but no manifest row",
                    f.utt_id
                ))
            })?;
            Ok(PromptItem {
                utt_id: f.utt_id,
                descriptors: f.descriptors,
                pseudo: row.pseudo_labels(),
            })
        })
        .collect()
}

fn load_support(opts: &PredictOptions) -> CliResult<Option<Vec<FewShotExample>>> {
    let Some(path) = &opts.support else {
        return Ok(None);
    };
    let pool = read_support_pool(path).map_err(CliError::data)?;
    let chosen = select_few_shot(&pool, opts.support_k).map_err(CliError::data)?;
    Ok(Some(chosen))
}

fn write_raw_responses(path: &Path, outcome: &BatchOutcome) -> CliResult<()> {
    let mut out = create(path)?;
    for b in &outcome.batches {
        for (attempt, text) in b.responses.iter().enumerate() {
            let line = serde_json::json!({
                "batch": b.index,
                "attempt": attempt + 1,
                "utt_ids": b.utt_ids,
                "response": text,
            });
            writeln!(out, "{line}")
                .with_context(|| format!("writing {}", path.display()))
                .map_err(CliError::data)?;
        }
    }
    out.flush()
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::data)
}

/// Runs `predict`. With `backend` unset, the backend named in `opts` is built.
pub fn cmd_predict(opts: &PredictOptions, backend: Option<&dyn Backend>) -> CliResult<i32> {
    let items = load_prompt_items(opts)?;
    if items.is_empty() {
        return Err(CliError::data(anyhow!(
            "no utterances in {}",
            opts.features.display()
        )));
    }
    let support = load_support(opts)?;

    let built: Box<dyn Backend>;
    let backend: &dyn Backend = match backend {
        Some(b) => b,
        None => {
            built = match opts.backend.kind {
                BackendKind::Mock => Box::new(MockBackend),
                BackendKind::Http => {
                    Box::new(HttpBackend::from_config(&opts.backend).map_err(CliError::backend)?)
                }
            };
            built.as_ref()
        }
    };

    let outcome = match run_batched(
        &items,
        opts.mode,
        support.as_deref(),
        backend,
        &opts.backend,
    ) {
        Ok(o) => o,
        Err(e @ (RunError::BackendUnreachable(_) | RunError::Fatal(_) | RunError::Config(_))) => {
            return Err(CliError::backend(e))
        }
        Err(e @ RunError::Prompt(_)) => return Err(CliError::data(e)),
    };

    let out = create(&opts.out)?;
    write_predictions(out, &outcome.prediction_rows())
        .with_context(|| format!("writing {}", opts.out.display()))
        .map_err(CliError::data)?;
    if let Some(raw) = &opts.raw_out {
        write_raw_responses(raw, &outcome)?;
    }

    println!(
        "scored={} failed={} clamped={}",
        outcome.n_scored(),
        outcome.n_failed(),
        outcome.clamped
    );
    if let Some(pf) = outcome.partial_failure() {
        eprintln!(
            "warning: {} minibatch(es) failed ({:?}); {} utterances excluded",
            pf.failed_batches.len(),
            pf.failed_batches,
            pf.failed_utterances
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<i32> {
    let file = File::open(&args.pred)
        .with_context(|| format!("opening {}", args.pred.display()))
        .map_err(CliError::data)?;
    let preds = read_predictions(file)
        .with_context(|| format!("reading {}", args.pred.display()))
        .map_err(CliError::data)?;
    let manifest = load_manifest(&args.manifest)
        .with_context(|| format!("loading {}", args.manifest.display()))
        .map_err(CliError::data)?;
    let report = build_report(&preds, &manifest).map_err(CliError::data)?;
    report.write_json(&args.report).map_err(CliError::data)?;
    emit_scatter(&report, &args.scatter).map_err(|e: MetricError| {
        CliError::data(anyhow!("writing {}: {e}", args.scatter.display()))
    })?;
    println!(
        "n={} n_failed={} lcc={:?} srcc={:?}",
        report.n, report.n_failed, report.lcc, report.srcc
    );
    Ok(EXIT_OK)
}

pub fn dispatch(cli: &Cli) -> CliResult<i32> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(CliError::data)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Extract(a) => cmd_extract(a, &file),
        Command::Ensemble(a) => cmd_ensemble(a, &file),
        Command::Predict(a) => {
            let opts = resolve_predict(a, &file).map_err(CliError::data)?;
            cmd_predict(&opts, None)
        }
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_DATA } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
