//! End-to-end runs of the pipeline against the simulator.

use tabletop_core::runner::{Batch, RunConfig};
use tabletop_core::simulator::Scenario;
use tabletop_core::trace::TraceEvent;

fn run(
    name: &str,
    cfg: &RunConfig,
) -> (Vec<tabletop_core::orchestrator::RunReport>, Vec<TraceEvent>) {
    let scenario = Scenario::shipped(name).unwrap();
    let batch = Batch::from_config(&scenario, cfg).unwrap();
    let mut events: Vec<TraceEvent> = Vec::new();
    let reports = batch.run(&mut events).unwrap();
    (reports, events)
}

#[test]
fn every_shipped_scenario_succeeds_without_noise() {
    for name in Scenario::shipped_names() {
        let (reports, _) = run(name, &RunConfig::default());
        let r = &reports[0];
        assert!(r.is_success(), "{name}: {r:?}");
        assert_eq!(r.goal_satisfied, Some(true), "{name}");
        assert!(r.subtasks.iter().all(|s| s.attempts == 1), "{name}: {r:?}");
    }
}
