//! Helpers shared by the integration suites.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde_json::json;

use tabletop_core::agents::{AgentRequest, AgentResponse, Role};
use tabletop_core::backends::{Backend, BackendError, BackendKind, OracleBackend};
use tabletop_core::geometry::CameraModel;
use tabletop_core::orchestrator::{run_pipeline, RunReport};
use tabletop_core::runner::{Batch, RunConfig};
use tabletop_core::simulator::{
    ActionCommand, Environment, Observation, Scenario, SimError, Simulator,
};
use tabletop_core::state::{ActuationResult, AtomicInstruction, Stage, TaskState};
use tabletop_core::trace::{TraceEvent, Tracer};

/// Oracle backend whose reflector follows a script: each entry answers one
/// reflection, `Some(stage)` as a failure charged to `stage` and `None` as a
/// success. Once the script runs out the oracle reflector takes over.
pub struct ScriptedReflector {
    inner: OracleBackend,
    script: Mutex<VecDeque<Option<Stage>>>,
}

impl ScriptedReflector {
    pub fn new(scenario: Scenario, script: Vec<Option<Stage>>) -> Self {
        Self {
            inner: OracleBackend::new(scenario),
            script: Mutex::new(script.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl Backend for ScriptedReflector {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        if req.role == Role::Reflector {
            if let Some(entry) = self.script.lock().unwrap().pop_front() {
                let reply = match entry {
                    Some(stage) => {
                        json!({ "verdict": "failure", "failing_stage": stage, "explanation": format!("scripted {stage} failure") })
                    }
                    None => {
                        json!({ "verdict": "success", "failing_stage": "none", "explanation": "" })
                    }
                };
                return Ok(AgentResponse::from_raw(reply.to_string()));
            }
        }
        self.inner.complete(req)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }
}

/// Runs one episode of `scenario` with `backend` and returns its report and
/// trace.
pub fn run_with(
    scenario: &Scenario,
    cfg: &RunConfig,
    backend: Arc<dyn Backend>,
) -> (RunReport, Vec<TraceEvent>) {
    let batch = Batch::new(scenario, cfg, backend).unwrap();
    let mut events: Vec<TraceEvent> = Vec::new();
    let report = batch.run_episode(0, &mut events).unwrap();
    (report, events)
}

/// `action` fields of the recovery events of one subtask, in order.
pub fn recovery_actions(events: &[TraceEvent], subtask: &str) -> Vec<serde_json::Value> {
    events
        .iter()
        .filter(|e| e.stage == "recovery" && e.subtask_id.as_deref() == Some(subtask))
        .map(|e| e.payload["recovery"].clone())
        .collect()
}

pub fn manifest_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

/// Simulator wrapper whose actor silently does nothing for the listed
/// subtask ids: the command reports `executed = false` and the world is
/// left as it was.
pub struct StallingEnv {
    pub inner: Simulator,
    pub stall: Vec<String>,
    pub executed: usize,
}

impl StallingEnv {
    pub fn new(inner: Simulator, stall: &[&str]) -> Self {
        Self {
            inner,
            stall: stall.iter().map(|s| s.to_string()).collect(),
            executed: 0,
        }
    }
}

impl Environment for StallingEnv {
    fn reset(&mut self) -> Observation {
        self.inner.reset()
    }

    fn observe(&self) -> Observation {
        self.inner.observe()
    }

    fn execute(&mut self, cmd: &ActionCommand) -> Result<(Observation, ActuationResult), SimError> {
        self.executed += 1;
        if self.stall.contains(&cmd.subtask_id) {
            let result = ActuationResult {
                subtask_id: cmd.subtask_id.clone(),
                executed: false,
                dropped: false,
                final_object_pose: None,
                moved_object: None,
            };
            return Ok((self.inner.observe(), result));
        }
        self.inner.execute(cmd)
    }

    fn camera(&self) -> &CameraModel {
        self.inner.camera()
    }

    fn subtask_satisfied(&self, instr: &AtomicInstruction) -> Result<bool, SimError> {
        self.inner.subtask_satisfied(instr)
    }

    fn check_goal(&self) -> Result<bool, SimError> {
        self.inner.check_goal()
    }

    fn tolerance(&self) -> f64 {
        self.inner.tolerance()
    }
}

/// Runs the batch's pipeline once against a caller-supplied environment.
pub fn run_in_env(
    batch: &Batch,
    env: &mut dyn Environment,
) -> (RunReport, TaskState, Vec<TraceEvent>) {
    let mut state = TaskState::new(
        batch.scenario.name.clone(),
        batch.scenario.prompt.clone(),
        env.camera().clone(),
    )
    .unwrap();
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut tracer = Tracer::new(batch.run_id.clone(), 0, &mut events);
    let report = run_pipeline(
        &mut state,
        batch.agents(),
        env,
        &batch.cfg.recovery,
        &mut tracer,
    );
    (report, state, events)
}

pub fn count_stage(events: &[TraceEvent], stage: &str) -> usize {
    events.iter().filter(|e| e.stage == stage).count()
}

/// Backend answering each role with a fixed reply.
pub struct Canned(pub std::collections::HashMap<Role, String>);

impl Canned {
    pub fn one(role: Role, reply: serde_json::Value) -> Self {
        Self([(role, reply.to_string())].into_iter().collect())
    }
}

impl Backend for Canned {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        self.0
            .get(&req.role)
            .map(|r| AgentResponse::from_raw(r.clone()))
            .ok_or(BackendError::Miss {
                role: req.role,
                hash: "canned".into(),
            })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

/// Compiles one definition of a shipped schema file, or the whole file when
/// `def` is `None`.
pub fn schema_validator(file: &str, def: Option<&str>) -> jsonschema::Validator {
    let path = manifest_path(&format!("assets/schemas/{file}"));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut schema: serde_json::Value = serde_json::from_str(&text).unwrap();
    if let Some(d) = def {
        assert!(schema["$defs"].get(d).is_some(), "{file} has no {d}");
        schema["$ref"] = json!(format!("#/$defs/{d}"));
    }
    jsonschema::validator_for(&schema).unwrap()
}

/// Panics with every validation error of `instance`.
pub fn assert_valid(v: &jsonschema::Validator, instance: &serde_json::Value, what: &str) {
    let errors: Vec<String> = v
        .iter_errors(instance)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{what}: {errors:#?}\n{instance}");
}
