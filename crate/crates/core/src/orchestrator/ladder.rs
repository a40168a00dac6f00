//! Recovery budgets and the escalation ladder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{RecoveryAction, ReflectionResult, TaskState};

/// Upper bound on any single budget.
pub const MAX_BUDGET: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub max_retries_same: u32,
    pub max_reactivations: u32,
    pub max_rescans: u32,
    pub reflector_enabled: bool,
    pub single_agent_mode: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            max_retries_same: 2,
            max_reactivations: 1,
            max_rescans: 1,
            reflector_enabled: true,
            single_agent_mode: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("recovery config: {0}")]
pub struct ConfigError(pub String);

impl RecoveryConfig {
    /// Budgets with the open-loop override applied.
    pub fn effective(&self) -> RecoveryConfig {
        if self.reflector_enabled {
            *self
        } else {
            RecoveryConfig {
                max_retries_same: 0,
                max_reactivations: 0,
                max_rescans: 0,
                ..*self
            }
        }
    }

    /// Worst-case attempts for one subtask.
    pub fn attempt_budget(&self) -> u32 {
        let e = self.effective();
        e.max_retries_same + e.max_reactivations + e.max_rescans + 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("max_retries_same", self.max_retries_same),
            ("max_reactivations", self.max_reactivations),
            ("max_rescans", self.max_rescans),
        ] {
            if v > MAX_BUDGET {
                return Err(ConfigError(format!("{name} = {v} exceeds {MAX_BUDGET}")));
            }
        }
        Ok(())
    }

    /// Trace label of the execution mode.
    pub fn mode(&self) -> &'static str {
        if self.single_agent_mode {
            "single_agent"
        } else if self.reflector_enabled {
            "closed_loop"
        } else {
            "open_loop"
        }
    }
}

/// Next rung after a failed attempt: retry while attempts ≤ max_retries_same,
/// then reactivate the failing stage, then rescan the scene, then give up.
/// Counters are per subtask and never reset, so the sequence only descends.
pub fn next_recovery(
    state: &TaskState,
    last: &ReflectionResult,
    cfg: &RecoveryConfig,
) -> RecoveryAction {
    debug_assert!(!last.is_success());
    let cfg = cfg.effective();
    let attempts = state.attempts(&last.subtask_id);
    let counters = state.counters(&last.subtask_id);
    if attempts <= cfg.max_retries_same && counters.reactivations == 0 && counters.rescans == 0 {
        RecoveryAction::RetrySubtask
    } else if counters.reactivations < cfg.max_reactivations && counters.rescans == 0 {
        RecoveryAction::Reactivate(last.failing_stage)
    } else if counters.rescans < cfg.max_rescans {
        RecoveryAction::RescanScene
    } else {
        RecoveryAction::TerminateFailure
    }
}
