//! LLM meta-evaluation: prompt rendering, backends, minibatch dispatch and
//! response parsing.
//!
//! The model receives each utterance's descriptors together with its DNSMOS
//! and VQScore pseudo-labels (and, in few-shot mode, a small labelled support
//! set) and answers with a MOS estimate plus free-form attributes.

mod backend;
mod batch;
mod fewshot;
mod prompt;
mod response;

pub use backend::{
    extract_message, Backend, BackendConfig, BackendError, BackendKind, HttpBackend, MockBackend,
    ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL,
};
pub use batch::{
    minibatch_ranges, read_predictions, run_batched, write_predictions, AttemptError, BatchOutcome,
    BatchReport, Outcome, PartialFailure, PredictionRow, PredictionStatus, RunError,
};
pub use fewshot::{
    pool_from_features, quantile_targets, read_support_pool, select_few_shot, slot_priority,
    write_support_pool, FewShotError, FewShotExample,
};
pub use prompt::{
    parse_prompt_items, serialize_prompt, ParsedPromptItem, PromptError, PromptItem, PromptMode,
    DETERMINISM_DIRECTIVE, EXAMPLES_HEADER, OUTPUT_HEADER, UTTERANCES_HEADER,
};
pub use response::{parse_response, ParsedResponse, Prediction, ResponseError};
