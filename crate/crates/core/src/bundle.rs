//! Session bundles: a directory holding everything needed to restore a
//! [`LoopState`].
//!
//! | file           | contents                                  |
//! |----------------|-------------------------------------------|
//! | `log.xes`      | the event log, when one is known          |
//! | `dataset.json` | columnar prefix dataset (original labels) |
//! | `model.json`   | model checkpoint                          |
//! | `tree.json`    | canonical tree of the current iteration   |
//! | `edits.json`   | edit log                                  |
//! | `metrics.json` | metrics history                           |
//! | `state.json`   | iteration counter, configuration, records |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distillation::{CanonicalTree, DecisionTree, DistillationDataset};
use crate::encoding::{ColumnarDataset, PrefixDataset};
use crate::event_log::{parse_xes, serialize_xes, EventLog};
use crate::fairness_loop::{IterationRecord, LoopConfig, LoopState, RelabelDiff};
use crate::metrics::MetricsReport;
use crate::neural::{Checkpoint, MlpModel};
use crate::surgery::{EditLog, EditLogEntry};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle component {component:?} is corrupt: {reason}")]
    CorruptBundle { component: &'static str, reason: String },
    #[error("cannot write bundle: {0}")]
    Io(#[from] std::io::Error),
}

impl BundleError {
    pub fn component(&self) -> Option<&'static str> {
        match self {
            BundleError::CorruptBundle { component, .. } => Some(component),
            BundleError::Io(_) => None,
        }
    }
}

fn corrupt(component: &'static str, reason: impl ToString) -> BundleError {
    BundleError::CorruptBundle {
        component,
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordFile {
    iteration: usize,
    edits: Vec<EditLogEntry>,
    edited_tree: CanonicalTree,
    diff: RelabelDiff,
    changed_vs_ground_truth: usize,
    finetune_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    format_version: u32,
    iteration: usize,
    config: LoopConfig,
    train_loss: Vec<f64>,
    distill_labels: Vec<usize>,
    iterations: Vec<RecordFile>,
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("bundle components serialize");
    out.push(b'\n');
    out
}

/// Writes `state` (and the log it came from, if known) into `dir`,
/// creating the directory when needed.
pub fn save_bundle(dir: &Path, state: &LoopState, log: Option<&EventLog>) -> Result<(), BundleError> {
    fs::create_dir_all(dir)?;
    let log_path = dir.join("log.xes");
    match log {
        Some(log) => fs::write(&log_path, serialize_xes(log))?,
        None if log_path.exists() => fs::remove_file(&log_path)?,
        None => {}
    }
    fs::write(dir.join("dataset.json"), json(&state.dataset.to_columnar()))?;
    let checkpoint = state
        .model
        .to_checkpoint(Some(state.config.train.clone()), Some(state.dataset.spec.clone()));
    fs::write(dir.join("model.json"), json(&checkpoint))?;
    fs::write(dir.join("tree.json"), json(&state.tree.to_canonical()))?;
    fs::write(dir.join("edits.json"), json(&state.edit_log))?;
    fs::write(dir.join("metrics.json"), json(&state.metrics_history))?;
    let state_file = StateFile {
        format_version: BUNDLE_VERSION,
        iteration: state.iteration,
        config: state.config.clone(),
        train_loss: state.train_loss.clone(),
        distill_labels: state.distill_data.labels.clone(),
        iterations: state
            .iterations
            .iter()
            .map(|r| RecordFile {
                iteration: r.iteration,
                edits: r.edits.clone(),
                edited_tree: r.edited_tree.to_canonical(),
                diff: r.diff.clone(),
                changed_vs_ground_truth: r.changed_vs_ground_truth,
                finetune_loss: r.finetune_loss.clone(),
            })
            .collect(),
    };
    fs::write(dir.join("state.json"), json(&state_file))?;
    Ok(())
}

fn read(dir: &Path, file: &str, component: &'static str) -> Result<Vec<u8>, BundleError> {
    fs::read(dir.join(file)).map_err(|e| corrupt(component, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, file: &str, component: &'static str) -> Result<T, BundleError> {
    let bytes = read(dir, file, component)?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(component, e))
}

/// Restores a state written by [`save_bundle`], naming the first component
/// that is missing or inconsistent.
pub fn load_bundle(dir: &Path) -> Result<(LoopState, Option<EventLog>), BundleError> {
    let log = if dir.join("log.xes").exists() {
        let bytes = read(dir, "log.xes", "log")?;
        Some(parse_xes(&bytes).map_err(|e| corrupt("log", e))?.0)
    } else {
        None
    };
    let columnar: ColumnarDataset = read_json(dir, "dataset.json", "dataset")?;
    let dataset = PrefixDataset::from_columnar(columnar).map_err(|e| corrupt("dataset", e))?;

    let checkpoint: Checkpoint = read_json(dir, "model.json", "model")?;
    let model = MlpModel::from_checkpoint(&checkpoint).map_err(|e| corrupt("model", e))?;
    if model.input_dim() != dataset.spec.dimension() || model.num_classes() != dataset.class_names.len() {
        return Err(corrupt("model", "layer sizes do not match the dataset"));
    }

    let tree_doc: CanonicalTree = read_json(dir, "tree.json", "tree")?;
    let tree = DecisionTree::from_canonical(&tree_doc).map_err(|e| corrupt("tree", e))?;
    if tree.feature_names != dataset.spec.feature_names() || tree.class_names != dataset.class_names {
        return Err(corrupt("tree", "features or classes do not match the dataset"));
    }

    let edit_log: EditLog = read_json(dir, "edits.json", "edits")?;
    let metrics_history: Vec<MetricsReport> = read_json(dir, "metrics.json", "metrics")?;

    let state: StateFile = read_json(dir, "state.json", "state")?;
    if state.format_version != BUNDLE_VERSION {
        return Err(corrupt("state", "unsupported format version"));
    }
    if metrics_history.len() != state.iteration + 1 {
        return Err(corrupt("metrics", "history length does not match the iteration"));
    }
    if state.distill_labels.len() != dataset.len()
        || state.distill_labels.iter().any(|&l| l >= dataset.class_names.len())
    {
        return Err(corrupt("state", "distillation labels do not match the dataset"));
    }
    let iterations = state
        .iterations
        .into_iter()
        .map(|r| {
            Ok(IterationRecord {
                iteration: r.iteration,
                edits: r.edits,
                edited_tree: DecisionTree::from_canonical(&r.edited_tree).map_err(|e| corrupt("state", e))?,
                diff: r.diff,
                changed_vs_ground_truth: r.changed_vs_ground_truth,
                finetune_loss: r.finetune_loss,
            })
        })
        .collect::<Result<Vec<_>, BundleError>>()?;

    let distill_data = DistillationDataset {
        base: dataset.clone(),
        labels: state.distill_labels,
    };
    Ok((
        LoopState {
            iteration: state.iteration,
            config: state.config,
            model,
            tree,
            dataset,
            distill_data,
            edit_log,
            metrics_history,
            train_loss: state.train_loss,
            iterations,
        },
        log,
    ))
}
