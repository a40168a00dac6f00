//! Run traces: one line-delimited JSON event per stage invocation and per
//! recovery action, plus the summarizer that turns traces into success-rate
//! tables. Traces are self-contained; summarizing needs nothing else.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::orchestrator::RunReport;
use crate::state::TaskOutcome;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Stage name of the final event of every episode.
pub const EPISODE_END: &str = "episode_end";
/// Stage name of recovery-ladder events.
pub const RECOVERY: &str = "recovery";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub schema: u32,
    pub run_id: String,
    pub episode: u64,
    /// Event sequence number within the episode.
    pub step_index: u64,
    pub stage: String,
    #[serde(default)]
    pub subtask_id: Option<String>,
    /// Whether a model backend was queried for this event.
    #[serde(default)]
    pub model_call: bool,
    pub payload: Value,
    /// Seconds since the Unix epoch.
    pub wall_time: f64,
}

impl TraceEvent {
    /// Copy with the wall-clock field cleared, for comparing runs.
    pub fn without_time(&self) -> TraceEvent {
        TraceEvent {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

pub trait TraceSink: Send {
    fn record(&mut self, event: TraceEvent);
}

impl TraceSink for Vec<TraceEvent> {
    fn record(&mut self, event: TraceEvent) {
        self.push(event);
    }
}

/// Discards events.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _event: TraceEvent) {}
}

/// Writes each event as one JSON line.
pub struct JsonlSink<W: Write + Send> {
    out: W,
}

impl<W: Write + Send> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> TraceSink for JsonlSink<W> {
    fn record(&mut self, event: TraceEvent) {
        let line = serde_json::to_string(&event).expect("trace event serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            log::error!("writing trace event: {e}");
        }
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Numbers and stamps the events of one episode.
pub struct Tracer<'a> {
    run_id: String,
    episode: u64,
    next: u64,
    sink: &'a mut dyn TraceSink,
}

impl<'a> Tracer<'a> {
    pub fn new(run_id: impl Into<String>, episode: u64, sink: &'a mut dyn TraceSink) -> Self {
        Self {
            run_id: run_id.into(),
            episode,
            next: 0,
            sink,
        }
    }

    pub fn emit(
        &mut self,
        stage: &str,
        subtask_id: Option<&str>,
        model_call: bool,
        payload: Value,
    ) {
        let ev = TraceEvent {
            schema: TRACE_SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            episode: self.episode,
            step_index: self.next,
            stage: stage.to_string(),
            subtask_id: subtask_id.map(str::to_string),
            model_call,
            payload,
            wall_time: now(),
        };
        self.next += 1;
        self.sink.record(ev);
    }

    pub fn events_emitted(&self) -> u64 {
        self.next
    }
}

/// Payload of the closing event of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEnd {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub report: RunReport,
}

/// Reads a trace, skipping (and counting) lines that do not parse.
pub fn read_trace(reader: impl BufRead) -> (Vec<TraceEvent>, usize) {
    let mut events = Vec::new();
    let mut bad = 0;
    for (n, line) in reader.lines().enumerate() {
        let Ok(line) = line else {
            bad += 1;
            continue;
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceEvent>(&line) {
            Ok(ev) => events.push(ev),
            Err(e) => {
                log::warn!("skipping trace line {}: {e}", n + 1);
                bad += 1;
            }
        }
    }
    (events, bad)
}

/// Orders events from several shards by (run, episode, step).
pub fn merge_shards(shards: Vec<Vec<TraceEvent>>) -> Vec<TraceEvent> {
    let mut all: Vec<TraceEvent> = shards.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        (&a.run_id, a.episode, a.step_index).cmp(&(&b.run_id, b.episode, b.step_index))
    });
    all
}

pub const RECOVERY_KINDS: [&str; 4] = [
    "retry_subtask",
    "reactivate",
    "rescan_scene",
    "terminate_failure",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub mode: String,
    pub episodes: u64,
    pub successes: u64,
    pub success_rate: f64,
    pub mean_attempts: f64,
    pub recovery: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub warnings: usize,
}

#[derive(Default)]
struct Acc {
    episodes: u64,
    successes: u64,
    attempts: u64,
    subtasks: u64,
    recovery: BTreeMap<String, u64>,
}

/// Per (scenario, mode): success rate, mean attempts per subtask and a
/// histogram of recovery actions. `warnings` counts skipped lines and
/// unreadable events, plus one when there is nothing to summarize.
pub fn summarize(events: &[TraceEvent], skipped_lines: usize) -> Summary {
    let mut warnings = skipped_lines;
    // Recovery events are attributed to their episode's row once its end
    // event names the scenario and mode.
    let mut pending: BTreeMap<(String, u64), BTreeMap<String, u64>> = BTreeMap::new();
    let mut acc: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for ev in events {
        let key = (ev.run_id.clone(), ev.episode);
        if ev.stage == RECOVERY {
            match ev.payload.get("action").and_then(Value::as_str) {
                Some(a) => {
                    *pending
                        .entry(key)
                        .or_default()
                        .entry(a.to_string())
                        .or_default() += 1
                }
                None => warnings += 1,
            }
        } else if ev.stage == EPISODE_END {
            let Ok(end) = serde_json::from_value::<EpisodeEnd>(ev.payload.clone()) else {
                warnings += 1;
                continue;
            };
            let a = acc.entry((end.scenario, end.mode)).or_default();
            a.episodes += 1;
            if end.report.task_outcome == TaskOutcome::Success {
                a.successes += 1;
            }
            for s in &end.report.subtasks {
                if s.attempts > 0 {
                    a.attempts += u64::from(s.attempts);
                    a.subtasks += 1;
                }
            }
            for (k, n) in pending.remove(&key).unwrap_or_default() {
                *a.recovery.entry(k).or_default() += n;
            }
        }
    }
    let rows: Vec<SummaryRow> = acc
        .into_iter()
        .map(|((scenario, mode), a)| {
            let mut recovery: BTreeMap<String, u64> =
                RECOVERY_KINDS.iter().map(|k| (k.to_string(), 0)).collect();
            recovery.extend(a.recovery);
            SummaryRow {
                scenario,
                mode,
                episodes: a.episodes,
                successes: a.successes,
                success_rate: a.successes as f64 / a.episodes as f64,
                mean_attempts: if a.subtasks == 0 {
                    0.0
                } else {
                    a.attempts as f64 / a.subtasks as f64
                },
                recovery,
            }
        })
        .collect();
    if rows.is_empty() {
        warnings += 1;
    }
    Summary { rows, warnings }
}

impl Summary {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header: Vec<String> = [
            "scenario",
            "mode",
            "episodes",
            "success_%",
            "attempts/subtask",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain(RECOVERY_KINDS.iter().map(|s| s.to_string()))
        .collect();
        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut cells = vec![
                r.scenario.clone(),
                r.mode.clone(),
                r.episodes.to_string(),
                format!("{:.1}", 100.0 * r.success_rate),
                format!("{:.2}", r.mean_attempts),
            ];
            cells.extend(
                RECOVERY_KINDS
                    .iter()
                    .map(|k| r.recovery.get(*k).copied().unwrap_or(0).to_string()),
            );
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let row: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(row.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out.push_str(&format!("warnings: {}\n", self.warnings));
        out
    }
}
