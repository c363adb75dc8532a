mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::*;
use gathermos::labels::naive_ensemble;
use gathermos::meta_eval::{
    run_batched, select_few_shot, AttemptError, Backend, BackendConfig, BackendError, MockBackend,
    Outcome, PromptError, PromptMode, ResponseError, RunError,
};

#[test]
fn order_preserved_for_every_batch_size() {
    let (items, _) = synthetic_corpus(23, 21);
    for bs in [1, 2, 10, 17] {
        let cfg = BackendConfig {
            batch_size: bs,
            max_in_flight: 3,
            ..BackendConfig::default()
        };
        let rec = RecordingBackend::default();
        let out = run_batched(&items, PromptMode::ZsStar, None, &rec, &cfg).unwrap();
        assert_eq!(rec.prompts.lock().unwrap().len(), 23usize.div_ceil(bs));
        let ids: Vec<&str> = out.outcomes.iter().map(Outcome::utt_id).collect();
        let want: Vec<&str> = items.iter().map(|i| i.utt_id.as_str()).collect();
        assert_eq!(ids, want, "batch_size {bs}");
        for (o, i) in out.outcomes.iter().zip(&items) {
            assert_eq!(o.mos(), Some(naive_ensemble(&i.pseudo)));
        }
        assert_eq!(
            out.batches.iter().map(|b| b.index).collect::<Vec<_>>(),
            (0..out.batches.len()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn each_request_carries_only_its_minibatch() {
    let (items, _) = synthetic_corpus(7, 22);
    let cfg = BackendConfig {
        batch_size: 3,
        ..BackendConfig::default()
    };
    let rec = RecordingBackend::default();
    run_batched(&items, PromptMode::Zs, None, &rec, &cfg).unwrap();
    let mut batches = rec.batch_ids();
    batches.sort();
    let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
    assert_eq!(sizes, [3, 3, 1]);
    for prompt in rec.prompts.lock().unwrap().iter() {
        assert!(!prompt.contains("mfcc"));
        assert!(prompt.contains("exactly"));
    }
}

#[test]
fn few_shot_support_is_sent_with_every_batch() {
    let (items, _) = synthetic_corpus(12, 23);
    let pool: Vec<_> = [
        ("s1", 1.4),
        ("s2", 2.2),
        ("s3", 3.1),
        ("s4", 3.9),
        ("s5", 4.8),
    ]
    .iter()
    .map(|(id, m)| example(id, *m))
    .collect();
    let support = select_few_shot(&pool, 3).unwrap();
    let cfg = BackendConfig {
        batch_size: 5,
        ..BackendConfig::default()
    };
    let rec = RecordingBackend::default();
    let out = run_batched(&items, PromptMode::Fs, Some(&support), &rec, &cfg).unwrap();
    assert_eq!(out.n_scored(), 12);
    for prompt in rec.prompts.lock().unwrap().iter() {
        assert_eq!(prompt.matches("listener_mos:").count(), 3);
        assert!(prompt.contains("listener_mos: 1.4000"));
        assert!(prompt.contains("listener_mos: 4.8000"));
    }
    // support examples are context, never rated
    assert_eq!(rec.batch_ids().concat().len(), 12);
}

#[test]
fn mode_and_support_must_agree() {
    let (items, _) = synthetic_corpus(3, 24);
    let cfg = BackendConfig::default();
    let support = vec![example("s", 3.0)];
    assert!(matches!(
        run_batched(&items, PromptMode::Fs, None, &MockBackend, &cfg),
        Err(RunError::Prompt(PromptError::MissingSupport))
    ));
    assert!(matches!(
        run_batched(&items, PromptMode::Zs, Some(&support), &MockBackend, &cfg),
        Err(RunError::Prompt(PromptError::UnexpectedSupport))
    ));
}

/// Prose on the first call of each minibatch, mock afterwards.
#[derive(Default)]
struct FlakyOnce {
    calls: AtomicUsize,
}

impl Backend for FlakyOnce {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == 0 {
            Ok("thinking...".into())
        } else {
            MockBackend.complete(prompt)
        }
    }
}

#[test]
fn retry_recovers_a_bad_answer() {
    let (items, _) = synthetic_corpus(4, 25);
    let cfg = BackendConfig {
        max_in_flight: 1,
        ..BackendConfig::default()
    };
    let b = FlakyOnce::default();
    let out = run_batched(&items, PromptMode::Zs, None, &b, &cfg).unwrap();
    assert_eq!(out.n_failed(), 0);
    assert_eq!(out.batches[0].attempts, 2);
    assert_eq!(out.batches[0].responses[0], "thinking...");
    assert!(out.partial_failure().is_none());
}

#[test]
fn persistent_bad_answers_fail_the_minibatch_only() {
    let (items, _) = synthetic_corpus(23, 26);
    let cfg = BackendConfig::default();
    let b = FailingBatchBackend {
        poisoned: items[12].utt_id.clone(),
    };
    let out = run_batched(&items, PromptMode::Zs, None, &b, &cfg).unwrap();
    assert_eq!(out.n_failed(), 10);
    assert_eq!(out.batches[1].attempts, cfg.max_retries + 1);
    assert_eq!(
        out.batches[1].error,
        Some(AttemptError::Response(ResponseError::NoJsonFound))
    );
    let rows = out.prediction_rows();
    assert!(rows[10..20].iter().all(|r| r.mos.is_none()));
    assert!(rows[..10]
        .iter()
        .chain(&rows[20..])
        .all(|r| r.mos.is_some()));
}

#[test]
fn all_parse_failures_are_not_a_transport_outage() {
    let (items, _) = synthetic_corpus(5, 27);
    let b = FailingBatchBackend {
        poisoned: items[0].utt_id.clone(),
    };
    let out = run_batched(&items, PromptMode::Zs, None, &b, &BackendConfig::default()).unwrap();
    assert_eq!(out.n_scored(), 0);
    assert_eq!(out.partial_failure().unwrap().failed_utterances, 5);
}

#[test]
fn dead_backend_aborts() {
    let (items, _) = synthetic_corpus(15, 28);
    let err = run_batched(
        &items,
        PromptMode::Zs,
        None,
        &DeadBackend,
        &BackendConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, RunError::BackendUnreachable(_)));
}

#[test]
fn clamped_predictions_are_counted() {
    struct Loud;
    impl Backend for Loud {
        fn complete(&self, prompt: &str) -> Result<String, BackendError> {
            let ids = gathermos::meta_eval::parse_prompt_items(prompt).unwrap();
            let v: Vec<_> = ids
                .iter()
                .map(|i| serde_json::json!({"utt_id": i.utt_id, "mos": 9}))
                .collect();
            Ok(serde_json::to_string(&v).unwrap())
        }
    }
    let (items, _) = synthetic_corpus(13, 29);
    let out = run_batched(
        &items,
        PromptMode::Zs,
        None,
        &Loud,
        &BackendConfig::default(),
    )
    .unwrap();
    assert_eq!(out.clamped, 13);
    assert!(out.outcomes.iter().all(|o| o.mos() == Some(5.0)));
}
