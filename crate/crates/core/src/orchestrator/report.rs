//! Run outcome records.

use serde::{Deserialize, Serialize};

use crate::state::{
    RecoveryAction, Stage, SubtaskId, SubtaskOutcome, SubtaskRecord, TaskOutcome, TaskState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureReport {
    pub failed_subtask_id: Option<SubtaskId>,
    #[serde(default)]
    pub failing_stage: Option<Stage>,
    pub ladder_history: Vec<RecoveryAction>,
    pub last_explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub task_name: String,
    pub subtasks: Vec<SubtaskRecord>,
    pub task_outcome: TaskOutcome,
    #[serde(default)]
    pub failure_report: Option<FailureReport>,
    /// Ground-truth goal check at the end of the run, when the environment
    /// could evaluate it.
    #[serde(default)]
    pub goal_satisfied: Option<bool>,
    /// A backend stayed unreachable after its retries during the run.
    #[serde(default)]
    pub backend_unavailable: bool,
    /// Set when the run stopped on a fixture/cassette miss or a backend
    /// configuration fault.
    #[serde(default)]
    pub aborted: Option<String>,
}

impl RunReport {
    /// Builds the report from final state: every planned subtask gets a
    /// record, those never finished are skipped. The task succeeds only if
    /// every subtask did.
    pub fn from_state(
        state: &TaskState,
        failure_report: Option<FailureReport>,
        goal_satisfied: Option<bool>,
        backend_unavailable: bool,
        aborted: Option<String>,
    ) -> RunReport {
        let subtasks: Vec<SubtaskRecord> = state
            .decomposed_prompts
            .iter()
            .map(|s| {
                state.results.get(&s.id).cloned().unwrap_or(SubtaskRecord {
                    id: s.id.clone(),
                    attempts: state.attempts(&s.id),
                    outcome: SubtaskOutcome::Skipped,
                    failing_stage: None,
                })
            })
            .collect();
        let all_ok = !subtasks.is_empty()
            && subtasks
                .iter()
                .all(|s| s.outcome == SubtaskOutcome::Success);
        let task_outcome = if all_ok && aborted.is_none() {
            TaskOutcome::Success
        } else {
            TaskOutcome::Failure
        };
        let failure_report = if task_outcome == TaskOutcome::Failure {
            Some(failure_report.unwrap_or_else(|| {
                let failed = subtasks
                    .iter()
                    .find(|s| s.outcome != SubtaskOutcome::Success);
                FailureReport {
                    failed_subtask_id: failed.map(|s| s.id.clone()),
                    failing_stage: failed.and_then(|s| s.failing_stage),
                    ladder_history: Vec::new(),
                    last_explanation: aborted.clone().unwrap_or_else(|| "subtask failed".into()),
                }
            }))
        } else {
            None
        };
        RunReport {
            task_name: state.task_name.clone(),
            subtasks,
            task_outcome,
            failure_report,
            goal_satisfied,
            backend_unavailable,
            aborted,
        }
    }

    pub fn is_success(&self) -> bool {
        self.task_outcome == TaskOutcome::Success
    }

    pub fn total_attempts(&self) -> u32 {
        self.subtasks.iter().map(|s| s.attempts).sum()
    }
}
