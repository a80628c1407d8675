//! The distill, edit, relabel and fine-tune cycle.
//!
//! [`LoopState`] values are immutable snapshots: [`run_iteration`] returns a
//! new state and leaves its input untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distillation::{induce_tree, label_with_model, DecisionTree, DistillError, DistillationDataset, TreeParams};
use crate::encoding::{
    build_dataset, build_encoding_spec, case_level_attributes, EncodingError, EncodingSpec, PrefixDataset,
};
use crate::event_log::EventLog;
use crate::metrics::{compute_metrics, resolve_probe, MetricsError, MetricsReport, ParityProbe};
use crate::neural::{init_model, train_rows, MlpModel, ModelError, TrainConfig};
use crate::surgery::{apply_edits, EditAction, EditError, EditLog, EditLogEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub window: usize,
    /// Case attributes to encode; `None` selects every case-level attribute.
    pub attributes: Option<Vec<String>>,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            window: 3,
            attributes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_layers: vec![64, 64],
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    #[default]
    Full,
    /// Only the samples whose label the edited tree changed.
    ChangedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub encoding: EncodingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_scope: FineTuneScope,
    pub tree: TreeParams,
    pub probes: Vec<ParityProbe>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            encoding: EncodingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::fine_tune(),
            finetune_scope: FineTuneScope::Full,
            tree: TreeParams::default(),
            probes: Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Progress events for long-running steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Progress {
    Epoch { epoch: usize, epochs: usize, loss: f64 },
    Stage(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangedSample {
    pub case_id: String,
    pub prefix_length: usize,
    pub from: String,
    pub to: String,
}

/// Label changes introduced by relabelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelDiff {
    pub changed: usize,
    pub total: usize,
    pub examples: Vec<ChangedSample>,
}

pub const DIFF_EXAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Relabeled {
    pub dataset: PrefixDataset,
    pub changed_indices: Vec<usize>,
    pub diff: RelabelDiff,
}

/// Replaces every label with the tree's prediction and reports which labels
/// of `dataset` changed.
pub fn relabel_dataset(tree: &DecisionTree, dataset: &PrefixDataset) -> Result<Relabeled, LoopError> {
    if tree.feature_names.len() != dataset.spec.dimension() {
        return Err(LoopError::DimensionMismatch {
            expected: tree.feature_names.len(),
            got: dataset.spec.dimension(),
        });
    }
    let labels = tree.predict_all(dataset.features());
    let changed_indices: Vec<usize> = dataset
        .samples
        .iter()
        .zip(&labels)
        .enumerate()
        .filter(|(_, (s, &l))| s.label != l)
        .map(|(i, _)| i)
        .collect();
    let examples = changed_indices
        .iter()
        .take(DIFF_EXAMPLES)
        .map(|&i| {
            let s = &dataset.samples[i];
            ChangedSample {
                case_id: s.case_id.clone(),
                prefix_length: s.prefix_length,
                from: dataset.class_names[s.label].clone(),
                to: dataset.class_names[labels[i]].clone(),
            }
        })
        .collect();
    let diff = RelabelDiff {
        changed: changed_indices.len(),
        total: dataset.len(),
        examples,
    };
    Ok(Relabeled {
        dataset: dataset.with_labels(&labels),
        changed_indices,
        diff,
    })
}

/// What one call to [`run_iteration`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Iteration the edits were applied to.
    pub iteration: usize,
    pub edits: Vec<EditLogEntry>,
    pub edited_tree: DecisionTree,
    /// Changes relative to the unedited tree's predictions.
    pub diff: RelabelDiff,
    /// Number of relabelled samples that differ from the ground truth.
    pub changed_vs_ground_truth: usize,
    pub finetune_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub iteration: usize,
    pub config: LoopConfig,
    pub model: MlpModel,
    pub tree: DecisionTree,
    /// Carries the original ground-truth labels.
    pub dataset: PrefixDataset,
    pub distill_data: DistillationDataset,
    pub edit_log: EditLog,
    pub metrics_history: Vec<MetricsReport>,
    pub train_loss: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
}

fn layer_sizes(spec: &EncodingSpec, config: &ModelConfig) -> Vec<usize> {
    let mut sizes = vec![spec.dimension()];
    sizes.extend(&config.hidden_layers);
    sizes.push(spec.num_classes());
    sizes
}

fn encoding_spec(log: &EventLog, config: &EncodingConfig) -> Result<EncodingSpec, EncodingError> {
    let attributes = config.attributes.clone().unwrap_or_else(|| case_level_attributes(log));
    build_encoding_spec(log, config.window, &attributes)
}

/// Checks everything [`bootstrap`] can reject before any training starts.
pub fn validate_config(log: &EventLog, config: &LoopConfig) -> Result<(), LoopError> {
    let spec = encoding_spec(log, &config.encoding)?;
    if log.is_empty() {
        return Err(EncodingError::EmptyLog.into());
    }
    let sizes = layer_sizes(&spec, &config.model);
    if sizes.len() < 3 || sizes.contains(&0) {
        return Err(ModelError::InvalidShape(sizes).into());
    }
    config.train.validate()?;
    config.finetune.validate()?;
    for probe in &config.probes {
        resolve_probe(&spec, &spec.class_names(), probe)?;
    }
    Ok(())
}

/// Checks the edits and fine-tuning settings of a future [`run_iteration`]
/// call without training anything.
pub fn validate_iteration(
    state: &LoopState,
    edits: &[EditAction],
    finetune: &TrainConfig,
    params: &TreeParams,
) -> Result<(), LoopError> {
    finetune.validate()?;
    apply_edits(&state.tree, edits, &state.distill_data, params, state.iteration)?;
    Ok(())
}

fn train_with_progress(
    model: &MlpModel,
    dataset: &PrefixDataset,
    indices: Option<&[usize]>,
    config: &TrainConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<(MlpModel, Vec<f64>), ModelError> {
    let all = dataset.features();
    let labels_all = dataset.labels();
    let (rows, labels): (Vec<&[f64]>, Vec<usize>) = match indices {
        Some(idx) => idx.iter().map(|&i| (all[i], labels_all[i])).unzip(),
        None => (all, labels_all),
    };
    let epochs = config.epochs;
    train_rows(model, &rows, &labels, config, |epoch, loss| {
        progress(Progress::Epoch { epoch, epochs, loss })
    })
}

fn distill(
    model: &MlpModel,
    dataset: &PrefixDataset,
    params: &TreeParams,
) -> Result<(DistillationDataset, DecisionTree), LoopError> {
    let d = label_with_model(dataset, model)?;
    let tree = induce_tree(&d, params)?;
    Ok((d, tree))
}

pub fn bootstrap(log: &EventLog, config: &LoopConfig) -> Result<LoopState, LoopError> {
    bootstrap_with_progress(log, config, &mut |_| {})
}

/// Builds the dataset, trains the model on the ground truth, distills the
/// first tree and records iteration-0 metrics.
pub fn bootstrap_with_progress(
    log: &EventLog,
    config: &LoopConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<LoopState, LoopError> {
    progress(Progress::Stage("encoding"));
    let spec = encoding_spec(log, &config.encoding)?;
    let dataset = build_dataset(log, &spec)?;
    bootstrap_from_dataset(dataset, config, progress)
}

pub fn bootstrap_from_dataset(
    dataset: PrefixDataset,
    config: &LoopConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<LoopState, LoopError> {
    let init = init_model(&layer_sizes(&dataset.spec, &config.model), config.model.seed)?;
    progress(Progress::Stage("training"));
    let (model, train_loss) = train_with_progress(&init, &dataset, None, &config.train, progress)?;
    progress(Progress::Stage("distilling"));
    let (distill_data, tree) = distill(&model, &dataset, &config.tree)?;
    let metrics = compute_metrics(&model, &dataset, &tree, &config.probes, 0)?;
    Ok(LoopState {
        iteration: 0,
        config: config.clone(),
        model,
        tree,
        dataset,
        distill_data,
        edit_log: EditLog::new(),
        metrics_history: vec![metrics],
        train_loss,
        iterations: Vec::new(),
    })
}

/// Result of one iteration with the intermediate relabelled data.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub state: LoopState,
    pub relabeled: PrefixDataset,
}

pub fn run_iteration(
    state: &LoopState,
    edits: &[EditAction],
    finetune: &TrainConfig,
    params: &TreeParams,
) -> Result<LoopState, LoopError> {
    run_iteration_with_progress(state, edits, finetune, params, &mut |_| {}).map(|o| o.state)
}

/// Edits the tree, relabels every sample with it, fine-tunes the model,
/// distills a fresh tree and appends its metrics.
pub fn run_iteration_with_progress(
    state: &LoopState,
    edits: &[EditAction],
    finetune: &TrainConfig,
    params: &TreeParams,
    progress: &mut dyn FnMut(Progress),
) -> Result<IterationOutcome, LoopError> {
    progress(Progress::Stage("editing"));
    let (edited, entries) = apply_edits(&state.tree, edits, &state.distill_data, params, state.iteration)?;

    progress(Progress::Stage("relabeling"));
    let unedited_labels = state
        .dataset
        .with_labels(&state.tree.predict_all(state.dataset.features()));
    let relabeled = relabel_dataset(&edited, &unedited_labels)?;
    let changed_vs_ground_truth = relabel_dataset(&edited, &state.dataset)?.diff.changed;

    progress(Progress::Stage("fine_tuning"));
    let (model, finetune_loss) = match state.config.finetune_scope {
        FineTuneScope::Full => train_with_progress(&state.model, &relabeled.dataset, None, finetune, progress)?,
        FineTuneScope::ChangedOnly if relabeled.changed_indices.is_empty() => (state.model.clone(), Vec::new()),
        FineTuneScope::ChangedOnly => train_with_progress(
            &state.model,
            &relabeled.dataset,
            Some(&relabeled.changed_indices),
            finetune,
            progress,
        )?,
    };

    progress(Progress::Stage("distilling"));
    let (distill_data, tree) = distill(&model, &state.dataset, params)?;
    let iteration = state.iteration + 1;
    let metrics = compute_metrics(&model, &state.dataset, &tree, &state.config.probes, iteration)?;

    let mut edit_log = state.edit_log.clone();
    edit_log.extend(entries.iter().cloned());
    let mut metrics_history = state.metrics_history.clone();
    metrics_history.push(metrics);
    let mut iterations = state.iterations.clone();
    iterations.push(IterationRecord {
        iteration: state.iteration,
        edits: entries,
        edited_tree: edited,
        diff: relabeled.diff,
        changed_vs_ground_truth,
        finetune_loss,
    });
    let mut config = state.config.clone();
    config.finetune = finetune.clone();
    config.tree = *params;
    Ok(IterationOutcome {
        state: LoopState {
            iteration,
            config,
            model,
            tree,
            dataset: state.dataset.clone(),
            distill_data,
            edit_log,
            metrics_history,
            train_loss: state.train_loss.clone(),
            iterations,
        },
        relabeled: relabeled.dataset,
    })
}
