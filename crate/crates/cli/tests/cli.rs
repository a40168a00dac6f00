//! Drives the `tabletop` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tabletop_core::simulator::Scenario;
use tabletop_core::testing::MockCompletionsServer;
use tabletop_core::trace::{read_trace, TraceEvent};

fn tabletop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabletop"))
        .args(args)
        .env_remove("TABLETOP_ENDPOINT")
        .env_remove("TABLETOP_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/assets/fixtures/stack_blocks.scripted.jsonl")
}

fn events(path: &Path) -> Vec<TraceEvent> {
    let f = std::fs::File::open(path).unwrap();
    let (events, bad) = read_trace(std::io::BufReader::new(f));
    assert_eq!(bad, 0);
    events
}

fn stages(events: &[TraceEvent]) -> Vec<&str> {
    events.iter().map(|e| e.stage.as_str()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn replay_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--backend",
        "replay",
        "--cassette",
        s(&fixture()),
        "--episodes",
        "1",
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ev = events(&trace);
    let st = stages(&ev);
    assert_eq!(&st[..2], ["decompose", "describe"]);
    let per_subtask = ["perceive", "ground", "project", "think", "act", "reflect"];
    assert_eq!(&st[2..8], per_subtask);
    assert_eq!(&st[8..14], per_subtask);
    assert_eq!(st.last(), Some(&"episode_end"));
    assert_eq!(ev[2].subtask_id.as_deref(), Some("s0"));
    assert_eq!(ev[8].subtask_id.as_deref(), Some("s1"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1/1 episodes succeeded"));
}

#[test]
fn scripted_fixture_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--backend",
        "scripted",
        "--fixture",
        s(&fixture()),
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let end = events(&trace).pop().unwrap();
    assert_eq!(end.payload["report"]["task_outcome"], "success");
    assert_eq!(end.payload["report"]["goal_satisfied"], true);
}

#[test]
fn no_reflector_has_no_reflect_or_recovery_events() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--no-reflector",
        "--episodes",
        "20",
        "--p-drop",
        "0.3",
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 0);
    let ev = events(&trace);
    assert!(ev.iter().any(|e| e.stage == "act"));
    assert!(!ev
        .iter()
        .any(|e| e.stage == "reflect" || e.stage == "recovery"));
    assert_eq!(ev.iter().filter(|e| e.stage == "episode_end").count(), 20);
}

#[test]
fn single_agent_makes_one_model_call_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--single-agent",
        "--episodes",
        "5",
        "--p-drop",
        "0.3",
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 0);
    let ev = events(&trace);
    for k in 0..5 {
        let calls = ev.iter().filter(|e| e.episode == k && e.model_call).count();
        assert_eq!(calls, 1, "episode {k}");
    }
}

#[test]
fn cassette_miss_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("empty.jsonl");
    std::fs::write(&cassette, "{\"cassette\":1,\"attach_images\":false}\n").unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--backend",
        "replay",
        "--cassette",
        s(&cassette),
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted"));
    // The trace still closes the episode with a failure report.
    let end = events(&trace).pop().unwrap();
    assert_eq!(end.stage, "episode_end");
    assert!(end.payload["report"]["failure_report"].is_object());
}

#[test]
fn invalid_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let t = s(&trace);
    for args in [
        vec!["run", "--scenario", "no_such_scenario", "--trace-out", t],
        vec![
            "run",
            "--scenario",
            "stack_blocks",
            "--p-drop",
            "1.5",
            "--trace-out",
            t,
        ],
        vec![
            "run",
            "--scenario",
            "stack_blocks",
            "--config",
            "/nonexistent.toml",
            "--trace-out",
            t,
        ],
        vec![
            "run",
            "--scenario",
            "stack_blocks",
            "--backend",
            "carrier_pigeon",
            "--trace-out",
            t,
        ],
        vec![
            "run",
            "--scenario",
            "stack_blocks",
            "--backend",
            "replay",
            "--trace-out",
            t,
        ],
        vec!["frobnicate"],
    ] {
        let out = tabletop(&args);
        assert_eq!(
            code(&out),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "episodes = \"many\"\n").unwrap();
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--config",
        s(&cfg),
        "--trace-out",
        s(&dir.path().join("t.jsonl")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unavailable_backend_exits_3() {
    let server = MockCompletionsServer::start(Scenario::shipped("stack_blocks").unwrap()).unwrap();
    server.set_failing(true);
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let url = server.url();
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--backend",
        "http",
        "--endpoint",
        &url,
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let end = events(&trace).pop().unwrap();
    assert_eq!(end.payload["report"]["backend_unavailable"], true);
}

#[test]
fn config_file_sets_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "episodes = 3\nseed = 4\np_drop = 0.2\n\n[recovery]\nmax_retries_same = 1\nmax_reactivations = 0\nmax_rescans = 0\nreflector_enabled = true\nsingle_agent_mode = false\n",
    )
    .unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--config",
        s(&cfg),
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ev = events(&trace);
    let ends: Vec<&TraceEvent> = ev.iter().filter(|e| e.stage == "episode_end").collect();
    assert_eq!(ends.len(), 3);
    for e in &ev {
        if e.stage == "recovery" {
            let a = e.payload["action"].as_str().unwrap();
            assert!(a == "retry_subtask" || a == "terminate_failure", "{a}");
        }
    }
}

#[test]
fn summarize_prints_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    assert_eq!(
        code(&tabletop(&[
            "run",
            "--scenario",
            "stack_blocks",
            "--trace-out",
            s(&trace)
        ])),
        0
    );
    let json_out = dir.path().join("summary.json");
    let out = tabletop(&["summarize", s(&trace), "--json-out", s(&json_out)]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("scenario"));
    assert!(lines[2].starts_with("stack_blocks  closed_loop"));
    assert!(lines[2].contains("100.0"));
    assert_eq!(lines[3], "warnings: 0");
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    assert_eq!(summary["rows"][0]["success_rate"], 1.0);
    assert_eq!(summary["rows"][0]["mean_attempts"], 1.0);
    assert_eq!(summary["warnings"], 0);
}

#[test]
fn summarize_warns_on_corrupt_and_empty_traces() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    tabletop(&[
        "run",
        "--scenario",
        "stack_blocks",
        "--trace-out",
        s(&trace),
    ]);
    let mut text = std::fs::read_to_string(&trace).unwrap();
    text.push_str("{broken\n");
    std::fs::write(&trace, text).unwrap();
    let out = tabletop(&["summarize", s(&trace)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("warnings: 1"));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = tabletop(&["summarize", s(&empty)]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("warnings: 1"));
}

#[test]
fn render_writes_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let out = tabletop(&[
        "render",
        "--scenario",
        "stack_blocks",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    for f in [
        "rgb.png",
        "depth.png",
        "mask_red_block.png",
        "mask_wooden_block.png",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn recorded_fixture_drives_a_scripted_run() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx.jsonl");
    let out = tabletop(&[
        "fixture",
        "--scenario",
        "stack_cups",
        "--out",
        s(&fx),
        "--episodes",
        "2",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = dir.path().join("t.jsonl");
    let out = tabletop(&[
        "run",
        "--scenario",
        "stack_cups",
        "--backend",
        "scripted",
        "--fixture",
        s(&fx),
        "--episodes",
        "2",
        "--seed",
        "7",
        "--trace-out",
        s(&trace),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
