//! Episode batches: run configuration, per-episode setup and trace output.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{object_catalog, Models, PromptLibrary, DEFAULT_VERSION};
use crate::backends::{build_backend, Backend, BackendConfig, BackendError, BackendKind};
use crate::detection::ProviderConfig;
use crate::orchestrator::{run_pipeline, AgentSet, RecoveryConfig, RunReport};
use crate::simulator::{mix_seed, RayTable, Scenario, SimError, Simulator};
use crate::state::TaskState;
use crate::trace::{merge_shards, EpisodeEnd, TraceEvent, TraceSink, Tracer, EPISODE_END};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scenario(#[from] SimError),
}

fn default_episodes() -> u64 {
    1
}

fn default_workers() -> usize {
    1
}

fn default_prompt_version() -> String {
    DEFAULT_VERSION.into()
}

fn default_backend() -> BackendConfig {
    BackendConfig::new(BackendKind::Oracle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_backend")]
    pub backend: BackendConfig,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    /// Base seed; episode `k` runs with `mix_seed([seed, k])`.
    #[serde(default)]
    pub seed: u64,
    /// Overrides the scenario's drop probability.
    #[serde(default)]
    pub p_drop: Option<f64>,
    /// Overrides the scenario's placement noise (meters).
    #[serde(default)]
    pub displacement_sigma: Option<f64>,
    /// Detection providers; the scenario's synthetic detectors when absent.
    #[serde(default)]
    pub providers: Option<Vec<ProviderConfig>>,
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default = "default_prompt_version")]
    pub prompt_version: String,
    /// Parallel episode slots.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            recovery: RecoveryConfig::default(),
            episodes: 1,
            seed: 0,
            p_drop: None,
            displacement_sigma: None,
            providers: None,
            prompt_dir: None,
            prompt_version: default_prompt_version(),
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.recovery
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.workers == 0 {
            return Err(RunError::Config("workers must be ≥ 1".into()));
        }
        if let Some(p) = self.p_drop {
            if !(0.0..=1.0).contains(&p) {
                return Err(RunError::Config(format!("p_drop {p} outside [0, 1]")));
            }
        }
        if let Some(s) = self.displacement_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(RunError::Config(format!(
                    "displacement_sigma {s} must be ≥ 0"
                )));
            }
        }
        if self.prompt_version.trim().is_empty() {
            return Err(RunError::Config("prompt_version is empty".into()));
        }
        Ok(())
    }

    /// The scenario with this configuration's overrides applied.
    pub fn apply(&self, scenario: &Scenario) -> Result<Scenario, RunError> {
        let mut s = scenario.clone();
        if let Some(p) = self.p_drop {
            s.failure_injection.p_drop = p;
        }
        if let Some(sigma) = self.displacement_sigma {
            s.failure_injection.displacement_sigma = sigma;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn prompts(&self) -> Result<PromptLibrary, RunError> {
        match &self.prompt_dir {
            Some(dir) => PromptLibrary::load_dir(dir, &self.prompt_version)
                .map_err(|e| RunError::Config(format!("prompts in {}: {e}", dir.display()))),
            None => Ok(PromptLibrary::bundled()),
        }
    }
}

/// Deterministic run identifier over everything that shapes the run except
/// the backend, so a recorded run and its replay share it.
pub fn run_id(scenario: &Scenario, cfg: &RunConfig) -> String {
    let doc = json!({
        "scenario": scenario,
        "recovery": cfg.recovery,
        "episodes": cfg.episodes,
        "seed": cfg.seed,
        "p_drop": cfg.p_drop,
        "displacement_sigma": cfg.displacement_sigma,
        "providers": cfg.providers,
        "prompt_version": cfg.prompt_version,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(&digest[..8])
}

pub fn episode_seed(base: u64, episode: u64) -> u64 {
    mix_seed(&[base, episode])
}

/// A scenario prepared for many episodes: overrides applied, camera rays
/// precomputed, agents built once.
pub struct Batch {
    pub scenario: Scenario,
    pub cfg: RunConfig,
    pub run_id: String,
    agents: AgentSet,
    rays: Arc<RayTable>,
}

impl Batch {
    pub fn new(
        scenario: &Scenario,
        cfg: &RunConfig,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, RunError> {
        cfg.validate()?;
        let scenario = cfg.apply(scenario)?;
        let camera = scenario.camera()?;
        let rays = Arc::new(RayTable::new(
            &camera,
            scenario.image.width,
            scenario.image.height,
        ));
        let providers = match &cfg.providers {
            Some(p) => p.iter().map(ProviderConfig::build).collect(),
            None => scenario
                .detectors
                .iter()
                .map(|d| ProviderConfig::from(d).build())
                .collect(),
        };
        let models = Models {
            backend,
            prompts: cfg.prompts()?,
        };
        let agents = AgentSet {
            models,
            providers,
            catalog: object_catalog(&scenario.initial_objects()),
        };
        Ok(Self {
            run_id: run_id(&scenario, cfg),
            scenario,
            cfg: cfg.clone(),
            agents,
            rays,
        })
    }

    /// Builds the configured backend for `scenario` and prepares the batch.
    pub fn from_config(scenario: &Scenario, cfg: &RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let applied = cfg.apply(scenario)?;
        let backend = build_backend(&cfg.backend, &applied)?;
        Self::new(scenario, cfg, backend)
    }

    pub fn agents(&self) -> &AgentSet {
        &self.agents
    }

    /// Runs one episode and closes its trace with an `episode_end` event.
    pub fn run_episode(
        &self,
        episode: u64,
        sink: &mut dyn TraceSink,
    ) -> Result<RunReport, RunError> {
        let seed = episode_seed(self.cfg.seed, episode);
        let camera = self.scenario.camera()?;
        let mut env = Simulator::with_rays(
            self.scenario.clone(),
            camera.clone(),
            self.rays.clone(),
            seed,
        );
        let mut state = TaskState::new(
            self.scenario.name.clone(),
            self.scenario.prompt.clone(),
            camera,
        )
        .map_err(|e| RunError::Config(e.to_string()))?;
        let mut tracer = Tracer::new(self.run_id.clone(), episode, sink);
        let report = run_pipeline(
            &mut state,
            &self.agents,
            &mut env,
            &self.cfg.recovery,
            &mut tracer,
        );
        if let Err(e) = state.check_invariants(self.cfg.recovery.attempt_budget()) {
            if state.initial_decomposition_done {
                log::error!("episode {episode}: task state invariant violated: {e}");
            }
        }
        let end = EpisodeEnd {
            scenario: self.scenario.name.clone(),
            mode: self.cfg.recovery.mode().into(),
            seed,
            report: report.clone(),
        };
        tracer.emit(
            EPISODE_END,
            None,
            false,
            serde_json::to_value(&end).expect("episode end serializes"),
        );
        Ok(report)
    }

    /// Runs every configured episode. With several workers, each episode
    /// traces into its own shard and shards are merged by (episode, step).
    pub fn run(&self, sink: &mut dyn TraceSink) -> Result<Vec<RunReport>, RunError> {
        let n = self.cfg.episodes;
        let workers = self.cfg.workers.min(n.max(1) as usize);
        if workers <= 1 {
            return (0..n).map(|e| self.run_episode(e, sink)).collect();
        }
        type Shard = (u64, Result<RunReport, RunError>, Vec<TraceEvent>);
        let mut results: Vec<Shard> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers as u64)
                .map(|w| {
                    s.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|e| {
                                let mut shard: Vec<TraceEvent> = Vec::new();
                                let r = self.run_episode(e, &mut shard);
                                (e, r, shard)
                            })
                            .collect::<Vec<Shard>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("episode worker"))
                .collect()
        });
        results.sort_by_key(|(e, _, _)| *e);
        let mut reports = Vec::with_capacity(results.len());
        let mut shards = Vec::with_capacity(results.len());
        for (_, r, shard) in results {
            reports.push(r?);
            shards.push(shard);
        }
        for ev in merge_shards(shards) {
            sink.record(ev);
        }
        Ok(reports)
    }
}
