//! The shipped JSON schemas describe what the code actually reads and writes.

mod common;

use std::sync::Arc;

use serde_json::{json, Value};

use common::{assert_valid, manifest_path, run_with, schema_validator};
use tabletop_core::backends::{
    read_cassette, Backend, OracleBackend, RecordBackend, ScriptedBackend,
};
use tabletop_core::orchestrator::RecoveryConfig;
use tabletop_core::runner::{Batch, RunConfig};
use tabletop_core::simulator::Scenario;
use tabletop_core::testing::MockCompletionsServer;
use tabletop_core::trace::{read_trace, JsonlSink, TraceEvent};

const SCENARIOS: [&str; 5] = [
    "stack_blocks",
    "stack_cups",
    "place_food",
    "shopping_list",
    "rearrange_objects",
];

fn noisy(recovery: RecoveryConfig) -> RunConfig {
    RunConfig {
        episodes: 6,
        seed: 11,
        p_drop: Some(0.4),
        displacement_sigma: Some(0.008),
        recovery,
        ..RunConfig::default()
    }
}

fn single_agent() -> RecoveryConfig {
    RecoveryConfig {
        single_agent_mode: true,
        ..RecoveryConfig::default()
    }
}

/// Runs every shipped scenario closed-loop and single-agent through a
/// recording oracle. Returns the cassette records and the trace events.
fn recorded_runs(dir: &std::path::Path) -> (Vec<Value>, Vec<TraceEvent>) {
    let mut records = Vec::new();
    let mut events = Vec::new();
    for name in SCENARIOS {
        let scenario = Scenario::shipped(name).unwrap();
        for cfg in [noisy(RecoveryConfig::default()), noisy(single_agent())] {
            let path = dir.join(format!("{name}.jsonl"));
            let backend: Arc<dyn Backend> = Arc::new(
                RecordBackend::create(OracleBackend::new(scenario.clone()), &path).unwrap(),
            );
            let batch = Batch::new(&scenario, &cfg, backend).unwrap();
            let mut sink = JsonlSink::new(Vec::new());
            batch.run(&mut sink).unwrap();
            drop(batch);
            events.extend(read_trace(sink.into_inner().as_slice()).0);
            let (_, recs) = read_cassette(&path).unwrap();
            records.extend(recs.iter().map(|r| serde_json::to_value(r).unwrap()));
        }
    }
    (records, events)
}

#[test]
fn shipped_scenarios_match_the_scenario_schema() {
    let v = schema_validator("scenario.schema.json", None);
    let dir = manifest_path("assets/scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert_valid(&v, &doc, &path.display().to_string());
        Scenario::from_json(&text).unwrap();
        n += 1;
    }
    assert_eq!(n, SCENARIOS.len());
}

#[test]
fn scenario_schema_and_loader_reject_the_same_shapes() {
    let v = schema_validator("scenario.schema.json", None);
    let base: Value =
        serde_json::from_str(include_str!("../assets/scenarios/stack_blocks.json")).unwrap();
    type Mutation = (&'static str, Box<dyn Fn(&mut Value)>);
    let mutations: Vec<Mutation> = vec![
        (
            "unknown top-level field",
            Box::new(|d| d["lighting"] = json!("dim")),
        ),
        (
            "unknown shape",
            Box::new(|d| d["objects"][0]["shape"] = json!("pyramid")),
        ),
        (
            "short pose",
            Box::new(|d| d["objects"][0]["pose"] = json!([0.4, 0.1])),
        ),
        (
            "unknown goal atom",
            Box::new(|d| d["goal"][0] = json!({"near": ["a", "b"]})),
        ),
        (
            "missing prompt",
            Box::new(|d| {
                d.as_object_mut().unwrap().remove("prompt");
            }),
        ),
        (
            "unknown noise field",
            Box::new(|d| d["failure_injection"]["gravity"] = json!(9.8)),
        ),
    ];
    for (what, mutate) in mutations {
        let mut doc = base.clone();
        mutate(&mut doc);
        assert!(!v.is_valid(&doc), "schema accepted {what}");
        assert!(
            Scenario::from_json(&doc.to_string()).is_err(),
            "loader accepted {what}"
        );
    }
}

#[test]
fn recorded_requests_and_replies_match_the_role_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = recorded_runs(dir.path());
    let mut fixture: Vec<Value> = read_cassette(&manifest_path(
        "assets/fixtures/stack_blocks.scripted.jsonl",
    ))
    .unwrap()
    .1
    .iter()
    .map(|r| serde_json::to_value(r).unwrap())
    .collect();
    fixture.extend(records);

    let mut roles_seen = std::collections::BTreeSet::new();
    for rec in &fixture {
        let role = rec["role"].as_str().unwrap();
        roles_seen.insert(role.to_string());
        let payload = schema_validator("roles.schema.json", Some(&format!("{role}_payload")));
        let reply = schema_validator("roles.schema.json", Some(&format!("{role}_reply")));
        assert_valid(
            &payload,
            &rec["request"]["payload"],
            &format!("{role} payload"),
        );
        let text: Value = serde_json::from_str(rec["response"].as_str().unwrap()).unwrap();
        assert_valid(&reply, &text, &format!("{role} reply"));
    }
    assert_eq!(roles_seen.len(), 6, "{roles_seen:?}");
}

#[test]
fn role_schemas_reject_what_the_parsers_reject() {
    let check = |def: &str, doc: Value| {
        let v = schema_validator("roles.schema.json", Some(def));
        assert!(!v.is_valid(&doc), "{def} accepted {doc}");
    };
    check(
        "decomposer_reply",
        json!({"subtasks": [{"verb": "teleport", "object": "x"}]}),
    );
    check("decomposer_reply", json!({"subtasks": []}));
    check(
        "reflector_reply",
        json!({"verdict": "maybe", "failing_stage": "actor"}),
    );
    check(
        "reflector_reply",
        json!({"verdict": "success", "failing_stage": "none", "mood": "ok"}),
    );
    check(
        "thinker_reply",
        json!({"place": {"object": "a", "position": [0, 0, 0]}}),
    );
    check("perceptor_reply", json!({"object_of_interest": ""}));
    check(
        "single_agent_reply",
        json!({"actions": [{"verb": "pick_place", "pick": [0, 0, 0], "place": [0, 0, 0, 0]}]}),
    );
}

#[test]
fn trace_events_match_the_trace_schema() {
    let v = schema_validator("trace_event.schema.json", None);
    let dir = tempfile::tempdir().unwrap();
    let (_, mut events) = recorded_runs(dir.path());

    // Runs that stop early: a scripted miss aborts, a failing endpoint is
    // unavailable, and a single-agent miss fails the plan.
    let scenario = Scenario::shipped("stack_blocks").unwrap();
    let empty: Arc<dyn Backend> = Arc::new(ScriptedBackend::from_records(false, vec![]));
    events.extend(run_with(&scenario, &RunConfig::default(), empty.clone()).1);
    events.extend(run_with(&scenario, &noisy(single_agent()), empty).1);
    let server = MockCompletionsServer::start(scenario.clone()).unwrap();
    server.set_failing(true);
    let mut cfg = RunConfig::default();
    cfg.backend.kind = tabletop_core::backends::BackendKind::Http;
    cfg.backend.endpoint_url = Some(server.url());
    cfg.backend.transport_retries = 0;
    let batch = Batch::from_config(&scenario, &cfg).unwrap();
    let mut sink = JsonlSink::new(Vec::new());
    batch.run(&mut sink).unwrap();
    events.extend(read_trace(sink.into_inner().as_slice()).0);

    let mut stages = std::collections::BTreeSet::new();
    let mut errors = 0;
    for e in &events {
        let doc = serde_json::to_value(e).unwrap();
        assert_valid(&v, &doc, &e.stage);
        stages.insert(e.stage.clone());
        errors += usize::from(e.payload.get("error").is_some());
    }
    assert_eq!(stages.len(), 11, "{stages:?}");
    assert!(errors >= 3);
}
