use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mcgs_core::graph::validate_structure;
use mcgs_core::orchestrator::{emit_report, EngineKind, SearchMode, Summary};
use mcgs_core::{GraphSnapshot, RunConfig, SolutionGraph};

#[derive(Parser)]
#[command(name = "mcgs", version, about = "Monte Carlo Graph Search runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Synthetic,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Graph,
    Tree,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write its outputs.
    Run {
        /// TOML config (JSON if the extension is .json); defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum)]
        engine: Option<EngineArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate report.csv and summary.json for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Check a graph snapshot's structural invariants.
    Validate {
        #[arg(long)]
        snapshot: PathBuf,
    },
}

fn print_summary(s: &Summary) {
    match (s.best_node, s.best_metric) {
        (Some(node), Some(metric)) => println!("best {node}: {} = {metric}", s.metric_name),
        _ => println!("{}", s.status),
    }
    println!(
        "steps {}, simulated {}, reference edges {}",
        s.steps_used, s.simulated, s.reference_edges
    );
    let states: Vec<String> = s.nodes_by_state.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("states: {}", states.join(" "));
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            steps,
            workers,
            engine,
            mode,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.max_steps = n;
            }
            if let Some(w) = workers {
                cfg.max_parallel_workers = w;
            }
            if let Some(e) = engine {
                cfg.engine = match e {
                    EngineArg::Synthetic => EngineKind::Synthetic,
                    EngineArg::Llm => EngineKind::Llm,
                };
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Graph => SearchMode::Graph,
                    ModeArg::Tree => SearchMode::Tree,
                };
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let summary = mcgs_core::run(&cfg)?;
            print_summary(&summary);
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Report { run } => {
            let summary = emit_report(&run)?;
            print_summary(&summary);
        }
        Command::Validate { snapshot } => {
            let text = std::fs::read_to_string(&snapshot).with_context(|| format!("reading {}", snapshot.display()))?;
            let snap = GraphSnapshot::from_json(&text).context("parsing snapshot")?;
            let report = validate_structure(&SolutionGraph::from_snapshot(snap));
            if report.is_valid() {
                println!("ok");
            } else {
                for v in &report.violations {
                    println!("{v}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
