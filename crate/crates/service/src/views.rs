//! Documents returned by the API and written by the CLI.

use fairloop_core::distillation::{split_display, CanonicalTree, NodeId, NodeKind, TreeNode};
use fairloop_core::event_log::{EventLog, ParseReport};
use fairloop_core::fairness_loop::{IterationRecord, LoopState, RelabelDiff};
use fairloop_core::metrics::MetricsReport;
use fairloop_core::neural::Checkpoint;
use fairloop_core::surgery::{routed_samples, EditLog, EditLogEntry, SurgeryError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const EXPORT_VERSION: u32 = 1;

/// Recursively overlays the members of `patch` onto `base`; non-object
/// values replace.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with whatever fields `patch` sets.
pub fn with_overrides<T: Serialize + DeserializeOwned>(base: &T, patch: Option<Value>) -> Result<T, serde_json::Error> {
    let mut value = serde_json::to_value(base)?;
    if let Some(patch) = patch {
        merge_json(&mut value, patch);
    }
    serde_json::from_value(value)
}

/// The report an XES upload of `log` would produce.
pub fn log_report(log: &EventLog) -> ParseReport {
    ParseReport {
        traces: log.traces().len(),
        events: log.num_events(),
        activities: log.activity_alphabet().to_vec(),
        warnings: Vec::new(),
    }
}

/// Canonical tree with the iteration it belongs to and its fidelity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    pub iteration: usize,
    pub fidelity: f64,
    #[serde(flatten)]
    pub tree: CanonicalTree,
}

impl TreeView {
    pub fn of(state: &LoopState) -> Self {
        TreeView {
            iteration: state.iteration,
            fidelity: state.metrics_history.last().map_or(f64::NAN, |m| m.fidelity),
            tree: state.tree.to_canonical(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCondition {
    pub test: String,
    pub holds: bool,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub index: usize,
    pub case_id: String,
    pub prefix_length: usize,
    pub window: Vec<String>,
    pub attributes: std::collections::BTreeMap<String, String>,
    /// Ground-truth next activity.
    pub label: String,
    /// Next activity the tree was grown on.
    pub tree_label: String,
}

/// Evidence about one node: where it sits, what reaches it and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDigest {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub display: Option<String>,
    pub predicted: String,
    pub sample_count: usize,
    pub histogram: Vec<ClassCount>,
    pub ground_truth_histogram: Vec<ClassCount>,
    pub path: Vec<PathCondition>,
    pub samples: Vec<SampleView>,
}

fn counts(class_names: &[String], hist: &[usize]) -> Vec<ClassCount> {
    class_names
        .iter()
        .zip(hist)
        .map(|(c, &n)| ClassCount {
            class: c.clone(),
            count: n,
        })
        .collect()
}

pub fn node_digest(state: &LoopState, node_id: NodeId, limit: usize) -> Result<NodeDigest, SurgeryError> {
    let tree = &state.tree;
    let node = tree.node(node_id).ok_or(SurgeryError::UnknownNode(node_id))?;
    let d = &state.distill_data;
    let spec = d.spec();
    let classes = &tree.class_names;
    let routed = routed_samples(tree, node_id, d)?;

    let mut truth = vec![0; classes.len()];
    let mut labelled = vec![0; classes.len()];
    for &i in &routed {
        truth[d.base.samples[i].label] += 1;
        labelled[d.labels[i]] += 1;
    }
    let path = tree
        .path_to(node_id)
        .unwrap_or_default()
        .into_iter()
        .map(|step| {
            let test = split_display(spec, step.feature, step.threshold);
            let indicator = spec.features[step.feature].is_indicator();
            let holds = step.went_left != indicator;
            let text = match (holds, indicator) {
                (true, _) => test.clone(),
                (false, true) => format!("not {test}"),
                (false, false) => test.replacen("<=", ">", 1),
            };
            PathCondition { test, holds, text }
        })
        .collect();
    let samples = routed
        .iter()
        .take(limit)
        .map(|&i| {
            let s = &d.base.samples[i];
            let decoded = spec.decode(&s.features);
            SampleView {
                index: i,
                case_id: s.case_id.clone(),
                prefix_length: s.prefix_length,
                window: decoded.window,
                attributes: decoded.attributes,
                label: classes[s.label].clone(),
                tree_label: classes[d.labels[i]].clone(),
            }
        })
        .collect();
    let display = match node {
        TreeNode::Internal { display, .. } => Some(display.clone()),
        TreeNode::Leaf { .. } => None,
    };
    Ok(NodeDigest {
        node_id,
        kind: if node.is_leaf() {
            NodeKind::Leaf
        } else {
            NodeKind::Internal
        },
        display,
        predicted: classes[node.majority()].clone(),
        sample_count: routed.len(),
        histogram: counts(classes, &labelled),
        ground_truth_histogram: counts(classes, &truth),
        path,
        samples,
    })
}

/// Everything a client needs to reuse the current iteration elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportDocument {
    pub format_version: u32,
    pub iteration: usize,
    pub model: Checkpoint,
    pub tree: CanonicalTree,
    pub edits: EditLog,
    pub metrics: Vec<MetricsReport>,
}

impl ExportDocument {
    pub fn of(state: &LoopState) -> Self {
        ExportDocument {
            format_version: EXPORT_VERSION,
            iteration: state.iteration,
            model: state
                .model
                .to_checkpoint(Some(state.config.train.clone()), Some(state.dataset.spec.clone())),
            tree: state.tree.to_canonical(),
            edits: state.edit_log.clone(),
            metrics: state.metrics_history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationView {
    pub iteration: usize,
    pub edits: Vec<EditLogEntry>,
    pub diff: RelabelDiff,
    pub changed_vs_ground_truth: usize,
    pub finetune_loss: Vec<f64>,
}

impl From<&IterationRecord> for IterationView {
    fn from(r: &IterationRecord) -> Self {
        IterationView {
            iteration: r.iteration,
            edits: r.edits.clone(),
            diff: r.diff.clone(),
            changed_vs_ground_truth: r.changed_vs_ground_truth,
            finetune_loss: r.finetune_loss.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fairloop_core::neural::TrainConfig;
    use serde_json::json;

    #[test]
    fn overrides_merge_nested_fields() {
        let base = TrainConfig::default();
        let got = with_overrides(&base, Some(json!({ "epochs": 2 }))).unwrap();
        assert_eq!(got.epochs, 2);
        assert_eq!(got.batch_size, base.batch_size);
        assert_eq!(with_overrides(&base, None).unwrap(), base);
        assert!(with_overrides(&base, Some(json!({ "epochs": "many" }))).is_err());
    }

    #[test]
    fn merge_replaces_scalars_and_arrays() {
        let mut v = json!({ "a": { "b": 1, "c": [1, 2] }, "d": 1 });
        merge_json(&mut v, json!({ "a": { "c": [3] }, "e": null }));
        assert_eq!(v, json!({ "a": { "b": 1, "c": [3] }, "d": 1, "e": null }));
    }
}
