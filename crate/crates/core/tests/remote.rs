mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use pathsel::backend::{generate, ChatClient, HttpTransport, RemoteJudge, RetryPolicy};
use pathsel::types::{Query, Source, TaskKind, Trajectory};
use pathsel::Error;

use common::{completion, StubServer};

fn client(url: &str) -> ChatClient {
    ChatClient {
        transport: Arc::new(HttpTransport::new(Duration::from_secs(5), None)),
        endpoint: url.to_string(),
        model: "m".into(),
        temperature: 0.7,
        retry: RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(5),
        },
    }
}

fn query() -> Query {
    Query {
        id: "q".into(),
        prompt: "What is 6 x 7?".into(),
        image_ref: None,
        task_kind: TaskKind::Numeric,
        reference_answer: "42".into(),
        options: None,
    }
}

fn attempt(think: &str) -> Trajectory {
    Trajectory {
        query_id: "q".into(),
        path_id: None,
        think_text: think.into(),
        answer_text: "42".into(),
        logprob_behavior: None,
        source: Source::FreshSample,
        raw_output: None,
    }
}

#[test]
fn server_errors_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = StubServer::start(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            (503, "{}".into())
        } else {
            (200, completion(&["<think>6 sevens</think><answer>42</answer>".into()]))
        }
    });
    let out = generate(&client(&server.url), &query(), &[], 1).unwrap();
    assert_eq!(out[0].answer_text, "42");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    let bodies = server.bodies();
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    assert!(server.requests.lock().unwrap().iter().all(|r| r.authorization.is_none()));
}

#[test]
fn retries_give_up_after_the_last_attempt() {
    let server = StubServer::start(|_| (500, "{}".into()));
    let err = generate(&client(&server.url), &query(), &[], 2).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(server.bodies().len(), 3);
}

#[test]
fn unparseable_verdict_is_asked_for_once_more() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = StubServer::start(move |_| {
        let text = if c.fetch_add(1, Ordering::SeqCst) == 0 {
            "I think it is fine.".to_string()
        } else {
            "LS: 1\nEI: 0.5\nCR: 0.5\nLC: 0.5\nRD: 0.5\nFINAL: 0.6".to_string()
        };
        (200, completion(&[text]))
    });
    let v = RemoteJudge { client: client(&server.url) }.judge(&query(), &attempt("six sevens")).unwrap();
    assert_eq!(v.sub_scores, [1.0, 0.5, 0.5, 0.5, 0.5]);
    assert!((v.aggregate - 0.6).abs() < 1e-12);
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn judge_fails_after_two_bad_verdicts() {
    let server = StubServer::start(|_| (200, completion(&["no scores here".into()])));
    let err = RemoteJudge { client: client(&server.url) }
        .judge(&query(), &attempt("x"))
        .unwrap_err();
    assert!(matches!(err, Error::Scoring(_)), "{err}");
    assert_eq!(server.bodies().len(), 2);
}

#[test]
fn judge_request_never_contains_the_answer() {
    let server = StubServer::start(|_| (200, completion(&["LS: 0\nEI: 0\nCR: 0\nLC: 0\nRD: 0".into()])));
    let mut t = attempt("multiply six by seven");
    t.answer_text = "UNIQUE-ANSWER-TOKEN".into();
    RemoteJudge { client: client(&server.url) }.judge(&query(), &t).unwrap();
    let body = &server.bodies()[0];
    assert!(body.contains("multiply six by seven"));
    assert!(!body.contains("UNIQUE-ANSWER-TOKEN"));
}
