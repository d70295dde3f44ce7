//! The search loop. One coordinator owns the graph, memory and event log;
//! workers only run propose/review/evaluate on immutable job snapshots.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::RunConfig;
use super::events::{Event, EventLog, EventRecord};
use crate::engine::{EngineError, EnsembleMember, Environment, EvalOutcome, ProposalEngine, ProposalRequest, TaskSpec};
use crate::graph::{ExecState, GraphError, NodeId, RefKind, SolutionGraph};
use crate::kb::{injection_context, KnowledgeEntry, Phase};
use crate::operators::{
    branches_of, build_reference_set, choose_operator, generate, is_expandable, prepare_request, Candidate,
    ExpansionMode, OperatorError, OperatorKind, ReferenceSet, ReviewVerdict, SchedulerConfig, SchedulerState,
};
use crate::search::{
    backpropagate, compute_reward, select, MemoryTiers, SearchError, SearchPolicyConfig, VirtualVisits,
};
use crate::seed::{derive_seed, Stream};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// An expansion handed to a worker.
#[derive(Clone, Debug)]
pub struct Job {
    pub step: u64,
    pub target: NodeId,
    pub parent: NodeId,
    pub operator: OperatorKind,
    pub mode: ExpansionMode,
    pub refs: Option<ReferenceSet>,
    pub kb_ids: Vec<String>,
    pub request: ProposalRequest,
    /// Nodes carrying this job's virtual visit.
    pub path: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct JobOutput {
    pub candidate: Result<Candidate, EngineError>,
    /// `None` when the candidate was rejected in review or never produced.
    pub outcome: Option<EvalOutcome>,
}

/// Worker side of a job: propose, review, and evaluate unless rejected.
/// Panics inside the engine or environment become `WorkerPanic`.
pub fn execute_job(engine: &dyn ProposalEngine, env: &dyn Environment, req: &ProposalRequest) -> JobOutput {
    let run = || {
        let candidate = generate(engine, req)?;
        let outcome = (!candidate.verdict.is_reject()).then(|| env.evaluate(&candidate.payload, &req.task));
        Ok::<_, EngineError>((candidate, outcome))
    };
    match catch_unwind(AssertUnwindSafe(run)) {
        Ok(Ok((candidate, outcome))) => JobOutput {
            candidate: Ok(candidate),
            outcome,
        },
        Ok(Err(e)) => JobOutput {
            candidate: Err(e),
            outcome: None,
        },
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            JobOutput {
                candidate: Err(EngineError::WorkerPanic(msg)),
                outcome: None,
            }
        }
    }
}

/// State visible to an observer after each applied job.
pub struct Observation<'a> {
    pub graph: &'a SolutionGraph,
    pub memory: &'a MemoryTiers,
    pub events: &'a [EventRecord],
    /// Node created by the job just applied, if any.
    pub created: Option<NodeId>,
    pub in_flight: usize,
}

pub type Observer<'o> = dyn FnMut(&Observation<'_>) + 'o;

pub struct Coordinator<'a> {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub kb_entries: Vec<KnowledgeEntry>,
    engine: &'a dyn ProposalEngine,
    env: &'a dyn Environment,
    pub graph: SolutionGraph,
    pub memory: MemoryTiers,
    pub log: EventLog,
    sched: SchedulerConfig,
    policy: SearchPolicyConfig,
    state: SchedulerState,
    virtual_visits: VirtualVisits,
    /// Steps dispatched so far.
    pub steps_used: u64,
}

/// Everything a finished search leaves behind.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub graph: SolutionGraph,
    pub memory: MemoryTiers,
    pub events: Vec<EventRecord>,
    pub best: Option<NodeId>,
    pub ensemble: Option<NodeId>,
    pub steps_used: u64,
}

impl<'a> Coordinator<'a> {
    /// `kb_entries` are the entries retrieved for the task (once per run).
    pub fn new(
        config: RunConfig,
        task: TaskSpec,
        kb_entries: Vec<KnowledgeEntry>,
        engine: &'a dyn ProposalEngine,
        env: &'a dyn Environment,
    ) -> Self {
        let direction = task.direction;
        Coordinator {
            sched: config.scheduler(direction),
            policy: config.policy(),
            memory: MemoryTiers::new(config.branch_top_k, config.global_top_k, direction),
            config,
            task,
            kb_entries,
            engine,
            env,
            graph: SolutionGraph::new(),
            log: EventLog::new(),
            state: SchedulerState::default(),
            virtual_visits: VirtualVisits::default(),
            steps_used: 0,
        }
    }

    /// Selects a target and prepares its job for `step`. `None` when no node
    /// is currently expandable.
    pub fn plan_job(&mut self, step: u64) -> Result<Option<Job>, CoordinatorError> {
        self.state.current_step = step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, step, Stream::Operator));
        let (target, operator, mode) = loop {
            let graph = &self.graph;
            let (sched, state) = (&self.sched, &self.state);
            let target = match select(
                graph,
                &self.policy,
                |n| is_expandable(graph, n, sched, state),
                &self.virtual_visits,
            ) {
                Ok(t) => t,
                Err(SearchError::NoExpandableNode) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            match choose_operator(&mut self.graph, target, &self.sched, &self.state, &mut rng) {
                Ok((op, mode)) => break (target, op, mode),
                Err(OperatorError::BudgetExhausted { node, debug_count }) => {
                    self.log.push(step, Event::BudgetExhausted { node, debug_count });
                }
                Err(e) => return Err(e.into()),
            }
        };

        let mut mode = mode;
        let refs = if mode == ExpansionMode::PrimaryOnly {
            None
        } else {
            match build_reference_set(
                &self.graph,
                target,
                mode,
                &self.memory,
                &self.sched.caps,
                self.sched.budgets.agg_min_trajectories,
            ) {
                Ok(r) => Some(r),
                Err(OperatorError::EmptyReferencePool(_)) => {
                    mode = ExpansionMode::PrimaryOnly;
                    None
                }
                Err(e) => return Err(e.into()),
            }
        };
        let parent = if mode == ExpansionMode::MultiBranchAgg {
            NodeId::ROOT
        } else {
            target
        };

        let kb = if self.config.use_kb {
            let mut kb_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, step, Stream::Knowledge));
            injection_context(
                &self.kb_entries,
                Phase::for_operator(operator),
                operator,
                self.config.kb_init_ref_prob,
                &mut kb_rng,
            )
        } else {
            Vec::new()
        };
        let kb_ids: Vec<String> = kb.iter().map(|e| e.entry_id.clone()).collect();
        let seed = derive_seed(self.config.seed, step, Stream::Engine);
        let request = prepare_request(&self.graph, parent, operator, refs.as_ref(), &self.task, kb, seed)?;

        let references = refs.as_ref().map(|r| r.members.clone()).unwrap_or_default();
        self.log.push(
            step,
            Event::OperatorChosen {
                target,
                parent,
                operator,
                mode: Some(mode),
                references: references.clone(),
                kb_entries: kb_ids.clone(),
                seed,
            },
        );
        if mode == ExpansionMode::MultiBranchAgg {
            let branches = branches_of(&self.graph, &references).into_iter().collect();
            self.log.push(step, Event::AggregationSpawned { branches, references });
            self.state.last_agg_step = step;
        }

        if parent == NodeId::ROOT && operator == OperatorKind::Draft {
            self.state.pending_drafts += 1;
        } else {
            *self.state.pending_children.entry(parent).or_default() += 1;
        }
        let path = self.graph.path_to_root(parent).expect("parent exists");
        self.virtual_visits.add_path(&path);
        self.steps_used = self.steps_used.max(step);

        Ok(Some(Job {
            step,
            target,
            parent,
            operator,
            mode,
            refs,
            kb_ids,
            request,
            path,
        }))
    }

    /// Applies a finished job: node creation, simulation result, reward,
    /// backpropagation and memory. Returns the created node.
    pub fn apply(&mut self, job: Job, out: JobOutput) -> Result<Option<NodeId>, CoordinatorError> {
        self.virtual_visits.remove_path(&job.path);
        if job.parent == NodeId::ROOT && job.operator == OperatorKind::Draft {
            self.state.pending_drafts -= 1;
        } else if let Some(n) = self.state.pending_children.get_mut(&job.parent) {
            *n -= 1;
            if *n == 0 {
                self.state.pending_children.remove(&job.parent);
            }
        }
        let step = job.step;
        let candidate = match out.candidate {
            Ok(c) => c,
            Err(e) => {
                self.log.push(
                    step,
                    Event::EngineFailure {
                        target: job.target,
                        operator: job.operator,
                        error: e.to_string(),
                    },
                );
                return Ok(None);
            }
        };

        self.graph.set_clock(step);
        let id = self
            .graph
            .add_child(job.parent, candidate.payload.clone(), job.operator)?;
        let node = &self.graph.nodes()[id.index()];
        self.log.push(
            step,
            Event::NodeCreated {
                node_id: id,
                parent_id: job.parent,
                branch_id: node.branch_id,
                depth: node.depth,
                operator: job.operator,
                mode: Some(job.mode),
                created_step: node.created_step,
                debug_count: node.debug_count,
                payload: candidate.payload,
                kb_entries: job.kb_ids,
            },
        );
        if let Some(refs) = &job.refs {
            let ref_kind = job.mode.ref_kind().unwrap_or(RefKind::Agg);
            self.graph.add_reference_edges(&refs.members, id, ref_kind)?;
            self.log.push(
                step,
                Event::ReferenceEdges {
                    target: id,
                    sources: refs.members.clone(),
                    ref_kind,
                },
            );
        }
        self.log.push(
            step,
            Event::ReviewVerdict {
                node_id: id,
                verdict: candidate.verdict.clone(),
            },
        );
        let outcome = match (&candidate.verdict, out.outcome) {
            (ReviewVerdict::Reject(reason), _) => {
                EvalOutcome::failed(ExecState::Failed, format!("rejected in review: {reason}"))
            }
            (_, Some(o)) => o,
            (_, None) => EvalOutcome::failed(ExecState::Failed, "no evaluation result"),
        };
        self.simulate(step, id, outcome, candidate.verdict.is_warn())?;
        Ok(Some(id))
    }

    /// Records a simulation outcome for `id` and propagates its reward.
    fn simulate(&mut self, step: u64, id: NodeId, outcome: EvalOutcome, warned: bool) -> Result<(), CoordinatorError> {
        self.graph.set_outcome(id, outcome.status, outcome.metric)?;
        let child = &self.graph.nodes()[id.index()];
        let parent = &self.graph.nodes()[child.parent_id.expect("non-root").index()];
        let reward = compute_reward(parent, child, &self.task, warned)?;
        self.log.push(
            step,
            Event::Simulated {
                node_id: id,
                status: child.state,
                metric: child.metric,
                reward,
                log: outcome.log,
            },
        );
        let path = backpropagate(&mut self.graph, id, &reward)?;
        self.log.push(
            step,
            Event::Backprop {
                path,
                value: reward.value,
            },
        );
        let child = &self.graph.nodes()[id.index()];
        if child.state == ExecState::Evaluated {
            self.memory.update(child);
            self.log.push(
                step,
                Event::MemoryUpdate {
                    node_id: id,
                    branch_id: child.branch_id,
                    branch_tier: self.memory.branch(child.branch_id).iter().map(|e| e.node_id).collect(),
                    global_tier: self.memory.global().iter().map(|e| e.node_id).collect(),
                },
            );
        }
        Ok(())
    }

    /// Number of search steps; the final ensemble reserves one step.
    pub fn search_budget(&self) -> u64 {
        if self.config.ensemble_enabled() {
            self.config.max_steps.saturating_sub(1)
        } else {
            self.config.max_steps
        }
    }

    fn time_limit(&self) -> Duration {
        let secs = self.config.time_budget.unwrap_or(self.task.time_budget);
        Duration::try_from_secs_f64(secs).unwrap_or(Duration::MAX)
    }

    /// Runs the search phase with up to `max_parallel_workers` jobs in
    /// flight, then finalizes.
    pub fn run(mut self, mut observer: Option<&mut Observer<'_>>) -> Result<SearchOutcome, CoordinatorError> {
        let budget = self.search_budget();
        let workers = self.config.max_parallel_workers.max(1);
        let deadline = Instant::now().checked_add(self.time_limit());
        let (engine, env) = (self.engine, self.env);

        std::thread::scope(|scope| -> Result<(), CoordinatorError> {
            let (job_tx, job_rx) = unbounded::<(u64, ProposalRequest)>();
            let (done_tx, done_rx) = unbounded::<(u64, JobOutput)>();
            for _ in 0..workers {
                let (job_rx, done_tx) = (job_rx.clone(), done_tx.clone());
                scope.spawn(move || {
                    for (step, req) in job_rx {
                        let out = execute_job(engine, env, &req);
                        if done_tx.send((step, out)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(done_tx);

            let mut in_flight: BTreeMap<u64, Job> = BTreeMap::new();
            let mut next_step = 1;
            let result = loop {
                let mut plan_error = None;
                while in_flight.len() < workers && next_step <= budget && deadline.is_none_or(|d| Instant::now() < d) {
                    match self.plan_job(next_step) {
                        Ok(Some(job)) => {
                            job_tx.send((job.step, job.request.clone())).expect("workers alive");
                            in_flight.insert(job.step, job);
                            next_step += 1;
                        }
                        Ok(None) => break,
                        Err(e) => {
                            plan_error = Some(e);
                            break;
                        }
                    }
                }
                if let Some(e) = plan_error {
                    break Err(e);
                }
                if in_flight.is_empty() {
                    break Ok(());
                }
                let (step, out) = done_rx.recv().expect("a job is in flight");
                let job = in_flight.remove(&step).expect("known job");
                let created = match self.apply(job, out) {
                    Ok(c) => c,
                    Err(e) => break Err(e),
                };
                if let Some(obs) = observer.as_deref_mut() {
                    obs(&Observation {
                        graph: &self.graph,
                        memory: &self.memory,
                        events: self.log.records(),
                        created,
                        in_flight: in_flight.len(),
                    });
                }
            };
            drop(job_tx);
            // drain stragglers so workers can exit on error paths
            for _ in done_rx.iter() {}
            result
        })?;

        let (best, ensemble) = self.finalize()?;
        if let Some(obs) = observer {
            obs(&Observation {
                graph: &self.graph,
                memory: &self.memory,
                events: self.log.records(),
                created: ensemble,
                in_flight: 0,
            });
        }
        Ok(SearchOutcome {
            graph: self.graph,
            memory: self.memory,
            events: self.log.into_records(),
            best,
            ensemble,
            steps_used: self.steps_used,
        })
    }

    /// Ensembles the global tier's top members (graph mode only) and picks
    /// the final answer. Returns `(best, ensemble node)`.
    pub fn finalize(&mut self) -> Result<(Option<NodeId>, Option<NodeId>), CoordinatorError> {
        let step = self.steps_used + 1;
        let mut ensemble = None;
        let members: Vec<NodeId> = self
            .memory
            .global()
            .iter()
            .take(self.config.ensemble_num)
            .map(|e| e.node_id)
            .collect();
        if self.config.ensemble_enabled() && members.len() >= 2 && step <= self.config.max_steps {
            self.steps_used = step;
            let inputs: Vec<EnsembleMember> = members
                .iter()
                .map(|id| {
                    let n = &self.graph.nodes()[id.index()];
                    EnsembleMember {
                        payload: n.payload.clone(),
                        metric: n.metric.expect("tier members are evaluated"),
                    }
                })
                .collect();
            self.log.push(
                step,
                Event::OperatorChosen {
                    target: NodeId::ROOT,
                    parent: NodeId::ROOT,
                    operator: OperatorKind::Ensemble,
                    mode: None,
                    references: members.clone(),
                    kb_entries: Vec::new(),
                    seed: derive_seed(self.config.seed, step, Stream::Engine),
                },
            );
            let (env, task) = (self.env, &self.task);
            let combined = catch_unwind(AssertUnwindSafe(|| env.ensemble_combine(&inputs, task)))
                .unwrap_or_else(|_| Err(EngineError::WorkerPanic("ensemble panicked".into())));
            match combined {
                Err(e) => self.log.push(
                    step,
                    Event::EngineFailure {
                        target: NodeId::ROOT,
                        operator: OperatorKind::Ensemble,
                        error: e.to_string(),
                    },
                ),
                Ok(payload) => {
                    let outcome = catch_unwind(AssertUnwindSafe(|| env.evaluate(&payload, task)))
                        .unwrap_or_else(|_| EvalOutcome::failed(ExecState::Failed, "evaluation panicked"));
                    self.graph.set_clock(step);
                    let id = self
                        .graph
                        .add_child(NodeId::ROOT, payload.clone(), OperatorKind::Ensemble)?;
                    let node = &self.graph.nodes()[id.index()];
                    self.log.push(
                        step,
                        Event::NodeCreated {
                            node_id: id,
                            parent_id: NodeId::ROOT,
                            branch_id: node.branch_id,
                            depth: node.depth,
                            operator: OperatorKind::Ensemble,
                            mode: None,
                            created_step: step,
                            debug_count: 0,
                            payload,
                            kb_entries: Vec::new(),
                        },
                    );
                    self.graph.add_reference_edges(&members, id, RefKind::Agg)?;
                    self.log.push(
                        step,
                        Event::ReferenceEdges {
                            target: id,
                            sources: members.clone(),
                            ref_kind: RefKind::Agg,
                        },
                    );
                    self.simulate(step, id, outcome, false)?;
                    ensemble = Some(id);
                }
            }
        }
        let best = self.memory.best().copied();
        self.log.push(
            self.steps_used,
            Event::Finalized {
                best: best.map(|b| b.node_id),
                metric: best.map(|b| b.metric),
                ensemble,
            },
        );
        self.graph.finalize();
        Ok((best.map(|b| b.node_id), ensemble))
    }
}
