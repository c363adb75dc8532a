//! Speech quality estimation by LLM meta-evaluation.
//!
//! The pipeline runs in file-connected stages:
//!
//! 1. [`descriptors`] turns each waveform ([`audio_io`]) into a compact
//!    bundle of acoustic statistics, cached as JSON lines.
//! 2. [`labels`] reads the manifest with DNSMOS / VQScore pseudo-labels and
//!    provides the naive ensemble baseline.
//! 3. [`meta_eval`] serializes descriptors and pseudo-labels into prompts,
//!    sends them to an LLM backend in minibatches and parses MOS answers.
//! 4. [`metrics`] correlates predictions with listener MOS.
//!
//! [`cli`] wires the stages into the `gathermos` command.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_io;
pub mod cli;
pub mod descriptors;
pub mod labels;
pub mod meta_eval;
pub mod metrics;
