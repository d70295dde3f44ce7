use std::collections::BTreeMap;

use mcgs_core::engine::{Direction, TaskSpec};
use mcgs_core::graph::validate_structure;
use mcgs_core::kb::{KnowledgeBase, KnowledgeLevel};
use mcgs_core::orchestrator::{build_backends, replay, run_search, Event, RunConfig, SearchMode};
use mcgs_core::{ExecState, OperatorKind};
use proptest::prelude::*;

fn small_run(
    seed: u64,
    workers: usize,
    steps: u64,
    mode: SearchMode,
    dir: Direction,
) -> mcgs_core::orchestrator::SearchOutcome {
    let mut task = TaskSpec::default_synthetic();
    task.direction = dir;
    let cfg = RunConfig {
        seed,
        max_parallel_workers: workers,
        max_steps: steps,
        mode,
        bug_prob: 0.25,
        ..RunConfig::default()
    };
    let backends = build_backends(&cfg, &task).unwrap();
    run_search(&cfg, &task, &KnowledgeBase::sample(), &backends, None).unwrap()
}

fn arb_mode() -> impl Strategy<Value = SearchMode> {
    prop_oneof![Just(SearchMode::Graph), Just(SearchMode::Tree)]
}

fn arb_dir() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::Maximize), Just(Direction::Minimize)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_stay_well_formed(seed in any::<u64>(), workers in 1usize..4, steps in 1u64..120, mode in arb_mode(), dir in arb_dir()) {
        let out = small_run(seed, workers, steps, mode, dir);
        let report = validate_structure(&out.graph);
        prop_assert!(report.is_valid(), "{:?}", report.violations);
        prop_assert!(out.steps_used <= steps);

        let replayed = replay(&out.events).unwrap();
        prop_assert_eq!(replayed.snapshot().to_json(), out.graph.snapshot().to_json());

        for rec in &out.events {
            if let Event::Simulated { reward, status, metric, .. } = &rec.event {
                prop_assert!((-1.0..=1.0).contains(&reward.value));
                prop_assert_eq!(metric.is_some(), *status == ExecState::Evaluated);
            }
        }
        let seqs: Vec<u64> = out.events.iter().map(|r| r.seq).collect();
        prop_assert_eq!(seqs, (0..out.events.len() as u64).collect::<Vec<_>>());
    }

    #[test]
    fn children_respect_operator_preconditions(seed in any::<u64>(), steps in 20u64..150) {
        let out = small_run(seed, 1, steps, SearchMode::Graph, Direction::Maximize);
        let g = &out.graph;
        let mut per_parent: BTreeMap<_, usize> = BTreeMap::new();
        for n in g.nodes().iter().filter(|n| !n.is_root()) {
            let parent = &g.nodes()[n.parent_id.unwrap().index()];
            match n.operator_used {
                OperatorKind::Debug => prop_assert!(matches!(parent.state, ExecState::Buggy | ExecState::Failed)),
                OperatorKind::ImproveNormal | OperatorKind::ImproveFE | OperatorKind::ImproveCS => {
                    prop_assert_eq!(parent.state, ExecState::Evaluated)
                }
                OperatorKind::Draft => prop_assert!(parent.is_root()),
                _ => {}
            }
            if parent.state == ExecState::Evaluated {
                *per_parent.entry(parent.node_id).or_default() += 1;
            }
        }
        prop_assert!(per_parent.values().all(|&c| c <= 3));
    }
}

#[test]
fn model_level_knowledge_only_reaches_drafts() {
    let kb = KnowledgeBase::sample();
    let level = |id: &str| kb.entries.iter().find(|e| e.entry_id == id).unwrap().level;
    let mut draft_model = 0;
    for seed in 0..10 {
        let out = small_run(seed, 1, 300, SearchMode::Graph, Direction::Maximize);
        for rec in &out.events {
            if let Event::OperatorChosen {
                operator, kb_entries, ..
            } = &rec.event
            {
                for id in kb_entries {
                    if *operator == OperatorKind::Draft {
                        draft_model += usize::from(level(id) == KnowledgeLevel::Model);
                    } else {
                        assert_ne!(level(id), KnowledgeLevel::Model, "{operator:?} saw {id}");
                    }
                }
            }
        }
    }
    assert!(draft_model > 0);
}

#[test]
fn disabling_knowledge_empties_every_injection() {
    let task = TaskSpec::default_synthetic();
    let cfg = RunConfig {
        use_kb: false,
        max_steps: 200,
        ..RunConfig::default()
    };
    let backends = build_backends(&cfg, &task).unwrap();
    let out = run_search(&cfg, &task, &KnowledgeBase::sample(), &backends, None).unwrap();
    assert!(out.events.iter().all(|r| match &r.event {
        Event::OperatorChosen { kb_entries, .. } => kb_entries.is_empty(),
        _ => true,
    }));
}

#[test]
fn buggy_only_run_has_no_best() {
    let task = TaskSpec::default_synthetic();
    let cfg = RunConfig {
        max_steps: 1,
        ensemble_num: 0,
        bug_prob: 1.0,
        ..RunConfig::default()
    };
    let backends = build_backends(&cfg, &task).unwrap();
    let out = run_search(&cfg, &task, &KnowledgeBase::sample(), &backends, None).unwrap();
    assert_eq!(out.best, None);
    assert!(matches!(
        out.events.last().unwrap().event,
        Event::Finalized { best: None, .. }
    ));
}
