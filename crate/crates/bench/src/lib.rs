//! Fixtures shared by the benchmarks.

use mcgs_core::engine::TaskSpec;
use mcgs_core::kb::KnowledgeBase;
use mcgs_core::orchestrator::{build_backends, run_search, SearchOutcome};
use mcgs_core::RunConfig;

/// A finished search of `steps` steps with the synthetic engine.
pub fn searched(seed: u64, steps: u64, workers: usize) -> SearchOutcome {
    let task = TaskSpec::default_synthetic();
    let cfg = RunConfig {
        seed,
        max_steps: steps,
        max_parallel_workers: workers,
        ..RunConfig::default()
    };
    let backends = build_backends(&cfg, &task).expect("synthetic backends");
    run_search(&cfg, &task, &KnowledgeBase::sample(), &backends, None).expect("search")
}
