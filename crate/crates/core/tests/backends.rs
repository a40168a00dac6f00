mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use serde_json::json;

use common::{count_stage, manifest_path, run_with};
use tabletop_core::agents::schema::{DecomposerPayload, PerceptorPayload};
use tabletop_core::agents::{AgentRequest, Models, Role};
use tabletop_core::backends::{
    canonical_request_hash, read_cassette, Backend, BackendConfig, BackendError, BackendKind,
    CassetteRecord, HttpBackend, OracleBackend, RecordBackend, ReplayBackend, ScriptedBackend,
};
use tabletop_core::runner::RunConfig;
use tabletop_core::simulator::Scenario;
use tabletop_core::state::{AtomicInstruction, TaskOutcome};
use tabletop_core::testing::MockCompletionsServer;

fn stack_blocks() -> Scenario {
    Scenario::shipped("stack_blocks").unwrap()
}

fn models() -> Models {
    Models::new(Arc::new(OracleBackend::new(stack_blocks())))
}

fn decomposer_request(prompt: &str) -> AgentRequest {
    models().request(
        Role::Decomposer,
        &DecomposerPayload {
            prompt: prompt.into(),
        },
        None,
    )
}

#[test]
fn replay_serves_records_in_order_byte_for_byte() {
    let a = decomposer_request("stack the blocks");
    let b = decomposer_request("stack the cups");
    // Odd whitespace and a trailing newline must survive untouched.
    let replies = [
        "{ \"subtasks\" : [] }\n",
        "first answer for b",
        "  second answer for b  ",
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("three.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{}", json!({"cassette": 1, "attach_images": false})).unwrap();
    for (req, reply) in [(&a, replies[0]), (&b, replies[1]), (&b, replies[2])] {
        let rec = CassetteRecord::new(req, reply);
        writeln!(f, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
    }
    drop(f);

    let replay = ReplayBackend::open(&path).unwrap();
    assert_eq!(replay.remaining(), 3);
    assert_eq!(replay.complete(&a).unwrap().raw_text, replies[0]);
    assert_eq!(replay.complete(&b).unwrap().raw_text, replies[1]);
    assert_eq!(replay.complete(&b).unwrap().raw_text, replies[2]);
    assert_eq!(replay.remaining(), 0);
    assert!(matches!(
        replay.complete(&b),
        Err(BackendError::Miss {
            role: Role::Decomposer,
            ..
        })
    ));
}

#[test]
fn scripted_backend_answers_by_hash() {
    let req = decomposer_request("stack the blocks");
    let text = r#"{"subtasks":[{"verb":"pick_place","object":"blue block","target":"red block"}]}"#;
    let backend = ScriptedBackend::from_records(false, vec![CassetteRecord::new(&req, text)]);
    for _ in 0..3 {
        assert_eq!(backend.complete(&req).unwrap().raw_text, text);
    }
    let other = decomposer_request("stack the cups");
    let err = backend.complete(&other).unwrap_err();
    assert_eq!(
        err,
        BackendError::Miss {
            role: Role::Decomposer,
            hash: canonical_request_hash(&other)
        }
    );
    assert!(err.is_fatal());
}

#[test]
fn scripted_miss_aborts_the_run_with_a_report() {
    let backend: Arc<dyn Backend> = Arc::new(ScriptedBackend::from_records(false, vec![]));
    let (report, events) = run_with(&stack_blocks(), &RunConfig::default(), backend);
    assert_eq!(report.task_outcome, TaskOutcome::Failure);
    assert!(report
        .aborted
        .as_deref()
        .is_some_and(|m| m.contains("decomposer")));
    assert!(report.failure_report.is_some());
    assert_eq!(count_stage(&events, "act"), 0);
    assert_eq!(count_stage(&events, "episode_end"), 1);
}

#[test]
fn shipped_fixture_drives_a_full_run() {
    let backend: Arc<dyn Backend> = Arc::new(
        ScriptedBackend::open(&manifest_path(
            "assets/fixtures/stack_blocks.scripted.jsonl",
        ))
        .unwrap(),
    );
    let (report, _) = run_with(&stack_blocks(), &RunConfig::default(), backend);
    assert!(report.is_success(), "{report:?}");
}

#[test]
fn record_writes_header_and_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.jsonl");
    let oracle = OracleBackend::new(stack_blocks());
    let scenario = stack_blocks();
    let req = decomposer_request(&scenario.prompt);
    let rec = RecordBackend::create(oracle, &path).unwrap();
    let first = rec.complete(&req).unwrap();
    let oracle = rec.into_inner();

    let other = decomposer_request("stack them again");
    let rec = RecordBackend::append(oracle, &path).unwrap();
    rec.complete(&other).unwrap();
    drop(rec);

    let (header, records) = read_cassette(&path).unwrap();
    assert!(!header.attach_images);
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].hash, canonical_request_hash(&req));
    assert_eq!(records[0].response, first.raw_text);
    assert_eq!(records[1].hash, canonical_request_hash(&other));
    assert_eq!(records[0].role, Role::Decomposer);
}

fn http_config(url: String) -> BackendConfig {
    let mut cfg = BackendConfig::new(BackendKind::Http);
    cfg.endpoint_url = Some(url);
    cfg.timeout = 5.0;
    cfg.transport_retries = 1;
    cfg
}

#[test]
fn http_backend_talks_to_a_completions_server() {
    let scenario = stack_blocks();
    let server = MockCompletionsServer::start(scenario.clone()).unwrap();
    let http = HttpBackend::from_config(&http_config(server.url())).unwrap();
    let req = decomposer_request(&scenario.prompt);
    let got = http.complete(&req).unwrap();
    let direct = OracleBackend::new(scenario).complete(&req).unwrap();
    assert_eq!(got.parsed, direct.parsed);
    assert_eq!(server.request_count(), 1);
}

#[test]
fn http_503_is_unavailable_after_retries() {
    let scenario = stack_blocks();
    let server = MockCompletionsServer::start(scenario.clone()).unwrap();
    server.set_failing(true);
    let http = HttpBackend::from_config(&http_config(server.url())).unwrap();
    let err = http
        .complete(&decomposer_request(&scenario.prompt))
        .unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)), "{err}");
    assert!(!err.is_fatal());
    assert_eq!(server.request_count(), 2);
}

#[test]
fn http_without_endpoint_is_a_config_error() {
    let cfg = BackendConfig::new(BackendKind::Http);
    if std::env::var("TABLETOP_ENDPOINT").is_err() {
        assert!(matches!(
            HttpBackend::from_config(&cfg),
            Err(BackendError::Config(_))
        ));
    }
}

#[test]
fn hash_is_stable_and_ignores_key_order() {
    let a = decomposer_request("stack the blocks");
    assert_eq!(
        canonical_request_hash(&a),
        canonical_request_hash(&a.clone())
    );

    let mut x = a.clone();
    x.user_payload = serde_json::from_str(r#"{"a": 1, "b": {"c": 2, "d": [1, 2]}}"#).unwrap();
    let mut y = a.clone();
    y.user_payload = serde_json::from_str(r#"{"b": {"d": [1, 2], "c": 2}, "a": 1}"#).unwrap();
    assert_eq!(canonical_request_hash(&x), canonical_request_hash(&y));
}

#[test]
fn hash_separates_different_interest() {
    let graph_objects = |interest: &str| {
        let instr =
            AtomicInstruction::new("s0", "pick_place", interest, "red block", vec![], "").unwrap();
        models().request(
            Role::Perceptor,
            &PerceptorPayload {
                subtask: instr,
                scene_objects: vec![],
                feedback: None,
            },
            None,
        )
    };
    assert_ne!(
        canonical_request_hash(&graph_objects("blue block")),
        canonical_request_hash(&graph_objects("green block"))
    );
}

#[test]
fn fixture_corpus_has_no_hash_collisions() {
    let (_, records) = read_cassette(&manifest_path(
        "assets/fixtures/stack_blocks.scripted.jsonl",
    ))
    .unwrap();
    assert!(records.len() > 5);
    let distinct_requests: BTreeSet<String> = records
        .iter()
        .map(|r| format!("{:?}{}", r.role, r.request.payload))
        .collect();
    let distinct_hashes: BTreeSet<&str> = records.iter().map(|r| r.hash.as_str()).collect();
    assert_eq!(distinct_hashes.len(), distinct_requests.len());
}
