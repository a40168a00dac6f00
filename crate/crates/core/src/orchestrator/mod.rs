//! The sequential subtask loop and its reflection-driven recovery ladder.
//!
//! Every attempt observes the world afresh and runs perceive → ground →
//! project → think → act → reflect. Semantic model replies (perceptor
//! targets, thinker choice) and the target's grasp point are cached per
//! subtask and reused by retries; a reactivation drops the cache from the
//! failing stage onward and re-queries those stages with feedback, and a
//! rescan re-describes the scene and drops everything.

mod ladder;
mod report;

pub use ladder::{next_recovery, ConfigError, RecoveryConfig, MAX_BUDGET};
pub use report::{FailureReport, RunReport};

use serde_json::{json, Value};

use crate::agents::schema::{Feedback, ObjectMeta, ThinkerReply};
use crate::agents::{self, AgentError, ModelCall, Models, PerceptionTargets, ProjectRole};
use crate::detection::DetectionProvider;
use crate::simulator::{mix_seed, ActionCommand, Environment, SimError};
use crate::state::{
    AtomicInstruction, GraspPoint2D, GraspPoint3D, RecoveryAction, ReflectionResult, Stage,
    SubtaskOutcome, SubtaskRecord, TaskState,
};
use crate::trace::{Tracer, RECOVERY};

/// Everything the pipeline needs besides the environment: the model-backed
/// roles, the detection providers behind the grounder, and object metadata
/// for the stacking height rule.
pub struct AgentSet {
    pub models: Models,
    pub providers: Vec<Box<dyn DetectionProvider>>,
    pub catalog: Vec<ObjectMeta>,
}

/// Trace name of the event a stage emits.
pub fn stage_event(stage: Stage) -> &'static str {
    match stage {
        Stage::Decomposer => "decompose",
        Stage::Descriptor => "describe",
        Stage::Perceptor => "perceive",
        Stage::Grounder => "ground",
        Stage::Projector => "project",
        Stage::Thinker => "think",
        Stage::Actor => "act",
        Stage::Reflector => "reflect",
        Stage::None => "none",
    }
}

/// Reasons a run stops before its queue is drained.
enum Halt {
    /// Fixture/cassette miss or backend misconfiguration.
    Abort(String),
    /// The environment rejected a command.
    Environment(String),
}

enum StepError {
    Agent(AgentError),
    Env(SimError),
}

impl From<AgentError> for StepError {
    fn from(e: AgentError) -> Self {
        StepError::Agent(e)
    }
}

#[derive(Default)]
struct SubtaskCache {
    targets: Option<PerceptionTargets>,
    target_grasp: Option<(GraspPoint2D, GraspPoint3D)>,
    thinker: Option<ThinkerReply>,
    feedback: Option<Feedback>,
}

impl SubtaskCache {
    /// Forgets every cached result produced at or after `stage`.
    fn invalidate_from(&mut self, stage: Stage) {
        match stage {
            Stage::Decomposer | Stage::Descriptor | Stage::Perceptor => {
                self.targets = None;
                self.target_grasp = None;
                self.thinker = None;
            }
            Stage::Grounder | Stage::Projector => {
                self.target_grasp = None;
                self.thinker = None;
            }
            Stage::Thinker => self.thinker = None,
            Stage::Actor | Stage::Reflector | Stage::None => {}
        }
    }
}

fn with_hash(mut payload: Value, call: &ModelCall) -> Value {
    if let Value::Object(m) = &mut payload {
        m.insert(
            "request_hash".into(),
            Value::String(call.request_hash.clone()),
        );
    }
    payload
}

struct Run<'r, 't> {
    state: &'r mut TaskState,
    agents: &'r AgentSet,
    env: &'r mut dyn Environment,
    cfg: RecoveryConfig,
    trace: &'r mut Tracer<'t>,
    backend_unavailable: bool,
}

impl Run<'_, '_> {
    /// Sorts an agent error into a fatal halt or an attempt failure.
    fn charge(&mut self, e: AgentError, subtask: Option<&str>) -> Result<(Stage, String), Halt> {
        if let Some(b) = e.backend_error() {
            if b.is_fatal() {
                self.trace.emit(
                    stage_event(e.stage()),
                    subtask,
                    true,
                    json!({ "error": e.to_string(), "fatal": true }),
                );
                return Err(Halt::Abort(e.to_string()));
            }
            self.backend_unavailable = true;
        }
        self.trace.emit(
            stage_event(e.stage()),
            subtask,
            e.backend_error().is_some(),
            json!({ "error": e.to_string() }),
        );
        Ok((e.stage(), e.to_string()))
    }

    fn describe(
        &mut self,
        feedback: Option<Feedback>,
        subtask: Option<&str>,
    ) -> Result<(), AgentError> {
        let obs = self
            .state
            .observation
            .as_ref()
            .expect("observed before describing");
        let (graph, call) = agents::describe(&self.agents.models, obs, feedback)?;
        self.trace.emit(
            "describe",
            subtask,
            true,
            with_hash(json!({ "graph": graph }), &call),
        );
        self.state.scene_graph = Some(graph);
        Ok(())
    }

    fn attempt(
        &mut self,
        subtask: &AtomicInstruction,
        index: usize,
        attempt: u32,
        cache: &mut SubtaskCache,
    ) -> Result<ReflectionResult, StepError> {
        let id = subtask.id.as_str();
        let fb = cache.feedback.clone();
        let models = &self.agents.models;
        let before = self.env.observe();
        self.state.observation = Some(before.clone());
        if self.state.scene_graph.is_none() {
            self.describe(fb.clone(), Some(id))?;
        }
        let graph = self.state.scene_graph.clone().expect("described");

        let targets = match &cache.targets {
            Some(t) => {
                self.trace.emit(
                    "perceive",
                    Some(id),
                    false,
                    json!({ "targets": t, "cached": true }),
                );
                t.clone()
            }
            None => {
                let (t, call) = agents::perceive(models, subtask, &graph, fb.clone())?;
                self.trace.emit(
                    "perceive",
                    Some(id),
                    true,
                    with_hash(json!({ "targets": t, "cached": false }), &call),
                );
                cache.targets = Some(t.clone());
                t
            }
        };
        self.state.object_of_interest = targets.object_of_interest.clone();
        self.state.not_object_of_interest = targets.not_object_of_interest.clone();
        self.state.all_objects = targets.all_objects.clone();

        let nonce = mix_seed(&[index as u64, u64::from(attempt)]);
        let grounding = agents::ground(&self.agents.providers, &before, &targets, &graph, nonce)?;
        self.trace.emit(
            "ground",
            Some(id),
            false,
            json!({ "fused": grounding.fused, "faults": grounding.faults,
                    "per_source": grounding.per_source.iter().map(Vec::len).collect::<Vec<_>>() }),
        );
        self.state.grounder_output = grounding.fused.clone();

        let camera = self.env.camera().clone();
        let seed = mix_seed(&[before.episode_seed, before.step_index, u64::from(attempt)]);
        let fused = &grounding.fused;
        let interest = agents::project_label(
            &before,
            &camera,
            fused,
            &targets.object_of_interest,
            ProjectRole::Interest,
            targets.grasp_strategy,
            &graph,
            seed,
        )?;
        let target = match (&targets.target, &cache.target_grasp) {
            (Some(_), Some(cached)) => Some(cached.clone()),
            (Some(t), None) => {
                let g = agents::project_label(
                    &before,
                    &camera,
                    fused,
                    t,
                    ProjectRole::Target,
                    None,
                    &graph,
                    seed.wrapping_add(1),
                )?;
                cache.target_grasp = Some(g.clone());
                Some(g)
            }
            (None, _) => None,
        };
        let (g2, g3): (Vec<_>, Vec<_>) = std::iter::once(interest).chain(target).unzip();
        self.trace.emit(
            "project",
            Some(id),
            false,
            json!({ "grasp_points_2d": g2, "grasp_points_3d": g3 }),
        );
        self.state.grasp_points_2d = g2;
        self.state.grasp_points_3d = g3.clone();

        let (reply, queried) = match &cache.thinker {
            Some(r) => (r.clone(), None),
            None => {
                let (r, call) = agents::think(
                    models,
                    subtask,
                    &targets,
                    &g3,
                    &graph,
                    &self.agents.catalog,
                    fb.clone(),
                )?;
                cache.thinker = Some(r.clone());
                (r, Some(call))
            }
        };
        let plan = agents::plan_action(subtask, &reply, &g3, &self.agents.catalog, &graph)?;
        let payload = json!({ "reply": reply, "plan": plan, "cached": queried.is_none() });
        match &queried {
            Some(call) => self
                .trace
                .emit("think", Some(id), true, with_hash(payload, call)),
            None => self.trace.emit("think", Some(id), false, payload),
        }
        self.state
            .thinker_output
            .insert(subtask.id.clone(), plan.clone());

        let cmd = ActionCommand::from(&plan);
        let (after, actuation) = self.env.execute(&cmd).map_err(StepError::Env)?;
        self.trace.emit(
            "act",
            Some(id),
            false,
            json!({ "command": cmd, "actuation": actuation }),
        );
        self.state
            .actor_output
            .insert(subtask.id.clone(), actuation.clone());
        self.state.observation = Some(after.clone());

        if !self.cfg.reflector_enabled {
            let ok = self.env.subtask_satisfied(subtask).unwrap_or(false);
            return Ok(if ok {
                ReflectionResult::success(id)
            } else {
                ReflectionResult::failure(id, Stage::Actor, "subtask not satisfied")
            });
        }
        let tol = self.env.tolerance();
        let (result, call) = agents::reflect(
            models,
            &before,
            &after,
            subtask,
            Some(&targets),
            &actuation,
            tol,
        )?;
        self.trace.emit(
            "reflect",
            Some(id),
            true,
            with_hash(json!({ "result": result }), &call),
        );
        Ok(result)
    }

    /// Runs one subtask through attempts and recovery until it succeeds or
    /// the ladder gives up. Returns its record and ladder history.
    fn run_subtask(
        &mut self,
        subtask: &AtomicInstruction,
        index: usize,
    ) -> Result<(SubtaskRecord, Option<FailureReport>), Halt> {
        let id = subtask.id.clone();
        let mut cache = SubtaskCache::default();
        let mut history: Vec<RecoveryAction> = Vec::new();
        loop {
            let attempt = {
                let n = self.state.attempt_counts.entry(id.clone()).or_insert(0);
                *n += 1;
                *n
            };
            let result = match self.attempt(subtask, index, attempt, &mut cache) {
                Ok(r) => r,
                Err(StepError::Env(e)) => {
                    self.trace
                        .emit("act", Some(&id), false, json!({ "error": e.to_string() }));
                    return Err(Halt::Environment(e.to_string()));
                }
                Err(StepError::Agent(e)) => {
                    let (stage, msg) = self.charge(e, Some(&id))?;
                    ReflectionResult::failure(id.as_str(), stage, msg)
                }
            };
            cache.feedback = None;
            if self.cfg.reflector_enabled {
                self.state
                    .reflection_output
                    .insert(id.clone(), result.clone());
            }
            let record = |outcome, stage| SubtaskRecord {
                id: id.clone(),
                attempts: attempt,
                outcome,
                failing_stage: stage,
            };
            if result.is_success() {
                return Ok((record(SubtaskOutcome::Success, None), None));
            }
            if !self.cfg.reflector_enabled {
                return Ok((
                    record(SubtaskOutcome::Failed, Some(result.failing_stage)),
                    None,
                ));
            }
            let action = next_recovery(self.state, &result, &self.cfg);
            history.push(action);
            let counters = self.state.counters(&id);
            self.trace.emit(
                RECOVERY,
                Some(&id),
                false,
                json!({ "action": action.name(), "recovery": action, "attempt": attempt,
                        "failing_stage": result.failing_stage, "explanation": result.explanation,
                        "reactivations": counters.reactivations, "rescans": counters.rescans }),
            );
            let feedback = Feedback {
                failing_stage: result.failing_stage,
                explanation: result.explanation.clone(),
                attempt,
            };
            match action {
                RecoveryAction::RetrySubtask => {}
                RecoveryAction::Reactivate(stage) => {
                    self.state
                        .ladder
                        .entry(id.clone())
                        .or_default()
                        .reactivations += 1;
                    cache.invalidate_from(stage);
                    cache.feedback = Some(feedback);
                    if matches!(stage, Stage::Decomposer | Stage::Descriptor) {
                        self.state.scene_graph = None;
                    }
                }
                RecoveryAction::RescanScene => {
                    self.state.ladder.entry(id.clone()).or_default().rescans += 1;
                    self.state.rescan_count += 1;
                    cache = SubtaskCache {
                        feedback: Some(feedback),
                        ..SubtaskCache::default()
                    };
                    self.state.scene_graph = None;
                    self.state.grounder_output.clear();
                    self.state.grasp_points_2d.clear();
                    self.state.grasp_points_3d.clear();
                }
                RecoveryAction::TerminateFailure => {
                    let report = FailureReport {
                        failed_subtask_id: Some(id.clone()),
                        failing_stage: Some(result.failing_stage),
                        ladder_history: history,
                        last_explanation: result.explanation.clone(),
                    };
                    return Ok((
                        record(SubtaskOutcome::Failed, Some(result.failing_stage)),
                        Some(report),
                    ));
                }
            }
        }
    }
}

fn finish(
    state: &TaskState,
    env: &dyn Environment,
    failure: Option<FailureReport>,
    backend_unavailable: bool,
    aborted: Option<String>,
) -> RunReport {
    RunReport::from_state(
        state,
        failure,
        env.check_goal().ok(),
        backend_unavailable,
        aborted,
    )
}

/// Runs a full task: reset, decompose ∥ describe, then every queued subtask
/// with verification and recovery (or open loop when the reflector is off).
/// Single-agent mode delegates to [`run_single_agent`].
pub fn run_pipeline(
    state: &mut TaskState,
    agents: &AgentSet,
    env: &mut dyn Environment,
    cfg: &RecoveryConfig,
    trace: &mut Tracer<'_>,
) -> RunReport {
    let obs = env.reset();
    state.observation = Some(obs.clone());
    if cfg.single_agent_mode {
        return run_single_agent(state, &agents.models, env, trace);
    }
    let prompt = state.original_prompt.clone();
    let models = &agents.models;
    let (dec, desc) = std::thread::scope(|s| {
        let d = s.spawn(|| agents::decompose(models, &prompt));
        let g = agents::describe(models, &obs, None);
        (d.join().expect("decomposer thread"), g)
    });

    let mut run = Run {
        state,
        agents,
        env,
        cfg: *cfg,
        trace,
        backend_unavailable: false,
    };
    match dec {
        Ok((d, call)) => {
            run.trace.emit(
                "decompose",
                None,
                true,
                with_hash(
                    json!({ "subtasks": d.subtasks, "multi_object": d.multi_object }),
                    &call,
                ),
            );
            run.state.decomposed_prompts = d.subtasks.clone();
            run.state.queue = d.subtasks;
            run.state.multi_object = d.multi_object;
            run.state.initial_decomposition_done = true;
        }
        Err(e) => {
            let aborted = match run.charge(e.clone(), None) {
                Err(Halt::Abort(m)) => Some(m),
                _ => None,
            };
            let failure = FailureReport {
                failed_subtask_id: None,
                failing_stage: Some(Stage::Decomposer),
                ladder_history: Vec::new(),
                last_explanation: e.to_string(),
            };
            return finish(
                run.state,
                run.env,
                Some(failure),
                run.backend_unavailable,
                aborted,
            );
        }
    }
    match desc {
        Ok((graph, call)) => {
            run.trace.emit(
                "describe",
                None,
                true,
                with_hash(json!({ "graph": graph }), &call),
            );
            run.state.scene_graph = Some(graph);
        }
        Err(e) => {
            // The first attempt re-describes and charges the descriptor.
            if let Err(Halt::Abort(m)) = run.charge(e, None) {
                return finish(run.state, run.env, None, run.backend_unavailable, Some(m));
            }
        }
    }

    let mut failure = None;
    let mut index = 0;
    while !run.state.should_terminate && !run.state.queue.is_empty() {
        let subtask = run.state.queue.remove(0);
        run.state.current = Some(subtask.clone());
        let outcome = run.run_subtask(&subtask, index);
        index += 1;
        run.state.current = None;
        match outcome {
            Ok((record, report)) => {
                if report.is_some() {
                    run.state.should_terminate = true;
                    failure = report;
                }
                run.state.results.insert(record.id.clone(), record);
            }
            Err(halt) => {
                let attempts = run.state.attempts(&subtask.id);
                run.state.results.insert(
                    subtask.id.clone(),
                    SubtaskRecord {
                        id: subtask.id.clone(),
                        attempts,
                        outcome: SubtaskOutcome::Failed,
                        failing_stage: Some(Stage::Actor),
                    },
                );
                run.state.should_terminate = true;
                let (msg, aborted) = match halt {
                    Halt::Abort(m) => (m.clone(), Some(m)),
                    Halt::Environment(m) => (format!("environment fault: {m}"), None),
                };
                let report = FailureReport {
                    failed_subtask_id: Some(subtask.id.clone()),
                    failing_stage: Some(if aborted.is_some() {
                        Stage::None
                    } else {
                        Stage::Actor
                    }),
                    ladder_history: Vec::new(),
                    last_explanation: msg,
                };
                return finish(
                    run.state,
                    run.env,
                    Some(report),
                    run.backend_unavailable,
                    aborted,
                );
            }
        }
    }
    finish(run.state, run.env, failure, run.backend_unavailable, None)
}

/// Monolithic baseline: one model call plans every action from the initial
/// observation; the actions then run open loop. Each record's outcome is
/// the final goal check.
pub fn run_single_agent(
    state: &mut TaskState,
    models: &Models,
    env: &mut dyn Environment,
    trace: &mut Tracer<'_>,
) -> RunReport {
    let obs = match &state.observation {
        Some(o) => o.clone(),
        None => {
            let o = env.reset();
            state.observation = Some(o.clone());
            o
        }
    };
    let (cmds, call) = match agents::plan_single_agent(models, &state.original_prompt, &obs) {
        Ok(r) => r,
        Err(e) => {
            let fatal = e.backend_error().is_some_and(|b| b.is_fatal());
            trace.emit(
                "single_agent",
                None,
                true,
                json!({ "error": e.to_string() }),
            );
            let failure = FailureReport {
                failed_subtask_id: None,
                failing_stage: Some(Stage::Thinker),
                ladder_history: Vec::new(),
                last_explanation: e.to_string(),
            };
            let unavailable = e.backend_error().is_some_and(|b| !b.is_fatal());
            return finish(
                state,
                env,
                Some(failure),
                unavailable,
                fatal.then(|| e.to_string()),
            );
        }
    };
    trace.emit(
        "single_agent",
        None,
        true,
        with_hash(json!({ "actions": cmds }), &call),
    );
    let plan: Vec<AtomicInstruction> = cmds
        .iter()
        .map(|c| {
            AtomicInstruction::new(
                c.subtask_id.clone(),
                c.primitive.as_str(),
                "planned action",
                "",
                vec![],
                "",
            )
            .expect("valid verb and object")
        })
        .collect();
    state.decomposed_prompts = plan.clone();
    state.initial_decomposition_done = true;
    let mut env_fault = None;
    let mut executed = 0;
    for c in &cmds {
        state.attempt_counts.insert(c.subtask_id.clone(), 1);
        match env.execute(c) {
            Ok((after, actuation)) => {
                trace.emit(
                    "act",
                    Some(&c.subtask_id),
                    false,
                    json!({ "command": c, "actuation": actuation }),
                );
                state.actor_output.insert(c.subtask_id.clone(), actuation);
                state.observation = Some(after);
                executed += 1;
            }
            Err(e) => {
                trace.emit(
                    "act",
                    Some(&c.subtask_id),
                    false,
                    json!({ "error": e.to_string() }),
                );
                env_fault = Some(e.to_string());
                break;
            }
        }
    }
    let goal = env.check_goal().unwrap_or(false) && env_fault.is_none();
    for (i, c) in cmds.iter().enumerate() {
        let (outcome, attempts) =
            match (i < executed || (env_fault.is_some() && i == executed), goal) {
                (false, _) => (SubtaskOutcome::Skipped, 0),
                (true, true) => (SubtaskOutcome::Success, 1),
                (true, false) => (SubtaskOutcome::Failed, 1),
            };
        if attempts == 0 {
            state.attempt_counts.remove(&c.subtask_id);
        }
        let stage = (outcome != SubtaskOutcome::Success).then_some(Stage::Actor);
        state.results.insert(
            c.subtask_id.clone(),
            SubtaskRecord {
                id: c.subtask_id.clone(),
                attempts,
                outcome,
                failing_stage: stage,
            },
        );
    }
    let failure = env_fault.map(|m| FailureReport {
        failed_subtask_id: cmds.get(executed).map(|c| c.subtask_id.clone()),
        failing_stage: Some(Stage::Actor),
        ladder_history: Vec::new(),
        last_explanation: format!("environment fault: {m}"),
    });
    finish(state, env, failure, false, None)
}
