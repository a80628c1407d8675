//! The `fairloop` command line.
//!
//! Every subcommand prints one JSON summary line on success. Failures print
//! one JSON error line to stderr and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairloop_core::bundle::{load_bundle, save_bundle};
use fairloop_core::distillation::{fidelity, induce_tree, label_with_model, CanonicalTree, DecisionTree, TreeParams};
use fairloop_core::event_log::{parse_xes, serialize_xes, EventLog};
use fairloop_core::fairness_loop::{bootstrap, run_iteration, LoopState};
use fairloop_core::simulator::{builtin_cancer_screening, simulate, ProcessModel, SimConfig};
use fairloop_core::surgery::{apply_edits, EditAction};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::api::router;
use crate::config::ServiceConfig;
use crate::error::{Classify, ErrorBody};
use crate::sessions::Service;
use crate::views::ExportDocument;

#[derive(Debug, Parser)]
#[command(
    name = "fairloop",
    version,
    about = "Distill, edit and fine-tune next-activity predictors"
)]
pub struct Cli {
    /// TOML file with service settings and engine defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an XES log from a process model.
    Simulate {
        /// Process model JSON; the built-in screening process when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        refuse_female: f64,
        #[arg(long, default_value_t = 0.0)]
        refuse_male: f64,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Encode a log, train the model and distill the first tree into a bundle.
    Train {
        #[arg(long)]
        log: PathBuf,
        /// Bundle directory to write.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a tree from a bundle's model.
    Distill {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, conflicts_with = "unlimited_depth")]
        max_depth: Option<usize>,
        #[arg(long)]
        unlimited_depth: bool,
        #[arg(long)]
        min_samples_leaf: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Apply an edit list to a tree.
    Edit {
        #[arg(long)]
        bundle: PathBuf,
        /// JSON array of edit actions.
        #[arg(long)]
        edits: PathBuf,
        /// Tree to edit; the bundle's current tree when absent.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Edit, relabel, fine-tune and re-distill one iteration.
    Iterate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        edits: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Bundle directory to write; the input bundle when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print or write a bundle's metrics history.
    Metrics {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write the model checkpoint, tree and edit log as one document.
    Export {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        /// Bind address; overrides the config file and FAIRLOOP_ADDR.
        #[arg(long)]
        addr: Option<String>,
    },
}

type CliResult<T> = Result<T, ErrorBody>;

fn io_error(path: &Path, e: std::io::Error) -> ErrorBody {
    ErrorBody::new("io", format!("{}: {e}", path.display())).with_details(json!({ "path": path }))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_error(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| {
        ErrorBody::new("invalid_json", format!("{}: {e}", path.display())).with_details(json!({ "path": path }))
    })
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("documents serialize");
    out.push(b'\n');
    out
}

fn read_log(path: &Path) -> CliResult<EventLog> {
    parse_xes(&read(path)?).map(|(log, _)| log).map_err(|e| e.body())
}

fn read_bundle(dir: &Path) -> CliResult<(LoopState, Option<EventLog>)> {
    load_bundle(dir).map_err(|e| e.body())
}

fn read_tree(path: &Path) -> CliResult<DecisionTree> {
    let doc: CanonicalTree = read_json(path)?;
    DecisionTree::from_canonical(&doc).map_err(|e| e.body())
}

fn summary(state: &LoopState) -> Value {
    let m = state.metrics_history.last();
    json!({
        "iteration": state.iteration,
        "tree_nodes": state.tree.node_count(),
        "tree_depth": state.tree.depth(),
        "accuracy": m.map(|m| m.accuracy),
        "macro_f1": m.map(|m| m.macro_f1),
        "fidelity": m.map(|m| m.fidelity),
    })
}

fn run(cli: Cli) -> CliResult<Value> {
    let config =
        ServiceConfig::resolve(cli.config.as_deref()).map_err(|e| ErrorBody::new("invalid_config", e.to_string()))?;
    match cli.command {
        Command::Simulate {
            model,
            refuse_female,
            refuse_male,
            cases,
            seed,
            output,
        } => {
            let model = match model {
                Some(path) => {
                    let text = String::from_utf8_lossy(&read(&path)?).into_owned();
                    ProcessModel::from_json(&text).map_err(|e| e.body())?
                }
                None => builtin_cancer_screening(refuse_female, refuse_male).map_err(|e| e.body())?,
            };
            let log = simulate(&model, &SimConfig { num_cases: cases, seed }).map_err(|e| e.body())?;
            write(&output, &serialize_xes(&log))?;
            Ok(json!({
                "output": output,
                "traces": log.traces().len(),
                "events": log.num_events(),
                "activities": log.activity_alphabet(),
            }))
        }
        Command::Train {
            log,
            output,
            epochs,
            seed,
        } => {
            let event_log = read_log(&log)?;
            let mut cfg = config.defaults;
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            if let Some(seed) = seed {
                cfg.model.seed = seed;
                cfg.train.seed = seed;
            }
            let state = bootstrap(&event_log, &cfg).map_err(|e| e.body())?;
            save_bundle(&output, &state, Some(&event_log)).map_err(|e| e.body())?;
            let mut out = summary(&state);
            out["bundle"] = json!(output);
            out["train_loss"] = json!(state.train_loss.last());
            Ok(out)
        }
        Command::Distill {
            bundle,
            max_depth,
            unlimited_depth,
            min_samples_leaf,
            output,
        } => {
            let (state, _) = read_bundle(&bundle)?;
            let mut params: TreeParams = state.config.tree;
            if unlimited_depth {
                params.max_depth = None;
            } else if max_depth.is_some() {
                params.max_depth = max_depth;
            }
            if let Some(m) = min_samples_leaf {
                params.min_samples_leaf = m;
            }
            let d = label_with_model(&state.dataset, &state.model).map_err(|e| e.body())?;
            let tree = induce_tree(&d, &params).map_err(|e| e.body())?;
            let fid = fidelity(&tree, &state.model, &state.dataset).map_err(|e| e.body())?;
            write(&output, &to_json_bytes(&tree.to_canonical()))?;
            Ok(json!({
                "output": output,
                "nodes": tree.node_count(),
                "depth": tree.depth(),
                "fidelity": fid,
            }))
        }
        Command::Edit {
            bundle,
            edits,
            tree,
            output,
        } => {
            let (state, _) = read_bundle(&bundle)?;
            let edits: Vec<EditAction> = read_json(&edits)?;
            let tree = match tree {
                Some(path) => read_tree(&path)?,
                None => state.tree.clone(),
            };
            let (edited, entries) =
                apply_edits(&tree, &edits, &state.distill_data, &state.config.tree, state.iteration)
                    .map_err(|e| e.body())?;
            write(&output, &to_json_bytes(&edited.to_canonical()))?;
            Ok(json!({
                "output": output,
                "applied": entries.len(),
                "nodes": edited.node_count(),
                "summaries": entries.iter().map(|e| &e.summary).collect::<Vec<_>>(),
            }))
        }
        Command::Iterate {
            bundle,
            edits,
            epochs,
            output,
        } => {
            let (state, log) = read_bundle(&bundle)?;
            let edits: Vec<EditAction> = match edits {
                Some(path) => read_json(&path)?,
                None => Vec::new(),
            };
            let mut finetune = state.config.finetune.clone();
            if let Some(epochs) = epochs {
                finetune.epochs = epochs;
            }
            let next = run_iteration(&state, &edits, &finetune, &state.config.tree).map_err(|e| e.body())?;
            let target = output.unwrap_or(bundle);
            save_bundle(&target, &next, log.as_ref()).map_err(|e| e.body())?;
            let mut out = summary(&next);
            out["bundle"] = json!(target);
            if let Some(record) = next.iterations.last() {
                out["relabeled"] = json!(record.diff.changed);
                out["changed_vs_ground_truth"] = json!(record.changed_vs_ground_truth);
            }
            Ok(out)
        }
        Command::Metrics { bundle, output } => {
            let (state, _) = read_bundle(&bundle)?;
            match output {
                Some(path) => {
                    write(&path, &to_json_bytes(&state.metrics_history))?;
                    Ok(json!({ "output": path, "iterations": state.metrics_history.len() }))
                }
                None => {
                    serde_json::to_value(&state.metrics_history).map_err(|e| ErrorBody::new("internal", e.to_string()))
                }
            }
        }
        Command::Export { bundle, output } => {
            let (state, _) = read_bundle(&bundle)?;
            write(&output, &to_json_bytes(&ExportDocument::of(&state)))?;
            Ok(json!({ "output": output, "iteration": state.iteration }))
        }
        Command::Serve { addr } => {
            let mut config = config;
            if let Some(addr) = addr {
                config.addr = addr;
            }
            serve(config).map(|_| Value::Null)
        }
    }
}

fn serve(config: ServiceConfig) -> CliResult<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| ErrorBody::new("io", e.to_string()))?;
    runtime.block_on(async move {
        let addr = config.addr.clone();
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| ErrorBody::new("bind_failed", format!("{addr}: {e}")))?;
        tracing::info!(%addr, "listening");
        let app = router(Service::new(config));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ErrorBody::new("io", e.to_string()))
    })
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).expect("error serializes"));
            ExitCode::FAILURE
        }
    }
}
