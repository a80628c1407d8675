//! Human edits on a distilled tree: direct removal of a split and
//! retraining a subtree without some attributes.
//!
//! Edits are pure: they return a new tree and leave the input untouched.
//! Surviving nodes keep their ids; new nodes draw fresh ids from
//! `next_node_id`. After every edit all histograms are recomputed by routing
//! the distillation dataset through the edited tree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distillation::{majority_class, DecisionTree, DistillationDataset, Grower, NodeId, TreeNode, TreeParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EditAction {
    Remove {
        node_id: NodeId,
    },
    RetrainExcluding {
        node_id: NodeId,
        excluded_attributes: Vec<String>,
    },
}

impl EditAction {
    pub fn node_id(&self) -> NodeId {
        match self {
            EditAction::Remove { node_id } | EditAction::RetrainExcluding { node_id, .. } => *node_id,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SurgeryError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is a leaf and cannot be removed")]
    NotInternal(NodeId),
    #[error("attribute {0:?} has no encoded feature columns")]
    UnknownAttribute(String),
    #[error("retraining requires at least one excluded attribute")]
    NoExcludedAttributes,
    #[error("distillation data has {got} features, tree expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("edit {index} failed: {source}")]
pub struct EditError {
    /// Position of the failing edit; the edits before it were valid but
    /// nothing is applied.
    pub index: usize,
    pub source: SurgeryError,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditSummary {
    pub node_id: NodeId,
    /// Split description of the edited node, absent for leaves.
    pub display: Option<String>,
    pub routed_samples: usize,
    pub promoted_child: Option<NodeId>,
    pub removed_node_ids: Vec<NodeId>,
    pub added_node_ids: Vec<NodeId>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLogEntry {
    pub iteration: usize,
    pub action: EditAction,
    pub summary: EditSummary,
}

/// Append-only audit trail of applied edits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditLog(Vec<EditLogEntry>);

impl EditLog {
    pub fn new() -> Self {
        EditLog(Vec::new())
    }

    pub fn push(&mut self, entry: EditLogEntry) {
        self.0.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = EditLogEntry>) {
        self.0.extend(entries);
    }

    pub fn entries(&self) -> &[EditLogEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_dims(tree: &DecisionTree, d: &DistillationDataset) -> Result<(), SurgeryError> {
    let got = d.spec().dimension();
    if got != tree.feature_names.len() {
        return Err(SurgeryError::DimensionMismatch {
            expected: tree.feature_names.len(),
            got,
        });
    }
    Ok(())
}

/// Indices of the samples whose root-to-node tests all hold.
pub fn routed_samples(
    tree: &DecisionTree,
    node_id: NodeId,
    d: &DistillationDataset,
) -> Result<Vec<usize>, SurgeryError> {
    check_dims(tree, d)?;
    let path = tree.path_to(node_id).ok_or(SurgeryError::UnknownNode(node_id))?;
    Ok(d.base
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| path.iter().all(|step| step.holds(&s.features)))
        .map(|(i, _)| i)
        .collect())
}

fn replace(node: &TreeNode, id: NodeId, with: &TreeNode) -> TreeNode {
    if node.id() == id {
        return with.clone();
    }
    match node {
        TreeNode::Internal {
            id: nid,
            feature,
            threshold,
            display,
            histogram,
            left,
            right,
        } => TreeNode::Internal {
            id: *nid,
            feature: *feature,
            threshold: *threshold,
            display: display.clone(),
            histogram: histogram.clone(),
            left: Box::new(replace(left, id, with)),
            right: Box::new(replace(right, id, with)),
        },
        leaf => leaf.clone(),
    }
}

/// Recomputes every histogram from the samples routed to it. Leaves that
/// receive samples predict their majority; empty leaves keep their class.
fn reroute(node: &mut TreeNode, rows: &[&[f64]], labels: &[usize], indices: &[usize], classes: usize) {
    let mut counts = vec![0; classes];
    for &i in indices {
        counts[labels[i]] += 1;
    }
    match node {
        TreeNode::Internal {
            feature,
            threshold,
            histogram,
            left,
            right,
            ..
        } => {
            let (l, r): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| rows[i][*feature] <= *threshold);
            reroute(left, rows, labels, &l, classes);
            reroute(right, rows, labels, &r, classes);
            *histogram = counts;
        }
        TreeNode::Leaf {
            predicted, histogram, ..
        } => {
            if !indices.is_empty() {
                *predicted = majority_class(&counts);
            }
            *histogram = counts;
        }
    }
}

fn rerouted(tree: DecisionTree, d: &DistillationDataset) -> DecisionTree {
    let mut tree = tree;
    let rows = d.rows();
    let all: Vec<usize> = (0..d.len()).collect();
    let classes = tree.class_names.len();
    reroute(&mut tree.root, &rows, &d.labels, &all, classes);
    tree
}

fn subtree_ids(node: &TreeNode) -> Vec<NodeId> {
    node.preorder().iter().map(|n| n.id()).collect()
}

/// Applies one edit, returning the edited tree and a summary.
pub fn apply_edit(
    tree: &DecisionTree,
    edit: &EditAction,
    d: &DistillationDataset,
    params: &TreeParams,
) -> Result<(DecisionTree, EditSummary), SurgeryError> {
    check_dims(tree, d)?;
    let node_id = edit.node_id();
    let node = tree.node(node_id).ok_or(SurgeryError::UnknownNode(node_id))?;
    let routed = routed_samples(tree, node_id, d)?;
    let display = match node {
        TreeNode::Internal { display, .. } => Some(display.clone()),
        TreeNode::Leaf { .. } => None,
    };
    let mut summary = EditSummary {
        node_id,
        display,
        routed_samples: routed.len(),
        ..EditSummary::default()
    };
    match edit {
        EditAction::Remove { .. } => {
            let (left, right) = node.children().ok_or(SurgeryError::NotInternal(node_id))?;
            let promoted = if left.sample_count() >= right.sample_count() {
                left
            } else {
                right
            };
            let dropped = if std::ptr::eq(promoted, left) { right } else { left };
            summary.promoted_child = Some(promoted.id());
            summary.removed_node_ids = std::iter::once(node_id).chain(subtree_ids(dropped)).collect();
            let edited = DecisionTree {
                root: replace(&tree.root, node_id, promoted),
                ..tree.clone()
            };
            Ok((rerouted(edited, d), summary))
        }
        EditAction::RetrainExcluding {
            excluded_attributes, ..
        } => {
            if excluded_attributes.is_empty() {
                return Err(SurgeryError::NoExcludedAttributes);
            }
            let spec = d.spec();
            let mut allowed = vec![true; spec.dimension()];
            for attribute in excluded_attributes {
                let columns = spec.attribute_columns(attribute);
                if columns.is_empty() {
                    return Err(SurgeryError::UnknownAttribute(attribute.clone()));
                }
                for c in columns {
                    allowed[c] = false;
                }
            }
            let path = tree.path_to(node_id).expect("node exists");
            let max_depth = match (params.max_depth, tree.params.max_depth) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            let budget = max_depth.map(|m| m.saturating_sub(path.len()));
            let rows = d.rows();
            let classes = tree.class_names.len();
            let replacement = if routed.is_empty() {
                let parent_majority = match path.len() {
                    0 => node.majority(),
                    _ => {
                        let parent = tree
                            .nodes()
                            .into_iter()
                            .find(|n| {
                                n.children()
                                    .is_some_and(|(l, r)| l.id() == node_id || r.id() == node_id)
                            })
                            .expect("non-root node has a parent");
                        parent.majority()
                    }
                };
                summary
                    .warnings
                    .push(format!("node {node_id} routes no samples; replaced by a leaf"));
                let leaf = TreeNode::Leaf {
                    id: tree.next_node_id,
                    predicted: parent_majority,
                    histogram: vec![0; classes],
                };
                (leaf, tree.next_node_id + 1)
            } else {
                let mut grower = Grower {
                    rows: &rows,
                    labels: &d.labels,
                    spec,
                    num_classes: classes,
                    allowed,
                    params: TreeParams { max_depth, ..*params },
                    next_id: tree.next_node_id,
                };
                let sub = grower.grow(&routed, budget);
                (sub, grower.next_id)
            };
            let (sub, next_node_id) = replacement;
            summary.removed_node_ids = subtree_ids(node);
            summary.added_node_ids = subtree_ids(&sub);
            let edited = DecisionTree {
                root: replace(&tree.root, node_id, &sub),
                next_node_id,
                ..tree.clone()
            };
            Ok((rerouted(edited, d), summary))
        }
    }
}

pub fn remove_node(
    tree: &DecisionTree,
    node_id: NodeId,
    d: &DistillationDataset,
) -> Result<DecisionTree, SurgeryError> {
    apply_edit(tree, &EditAction::Remove { node_id }, d, &tree.params).map(|(t, _)| t)
}

pub fn retrain_subtree_excluding(
    tree: &DecisionTree,
    node_id: NodeId,
    excluded_attributes: &[String],
    d: &DistillationDataset,
    params: &TreeParams,
) -> Result<DecisionTree, SurgeryError> {
    let edit = EditAction::RetrainExcluding {
        node_id,
        excluded_attributes: excluded_attributes.to_vec(),
    };
    apply_edit(tree, &edit, d, params).map(|(t, _)| t)
}

/// Applies `edits` in order. Either every edit succeeds or the error names
/// the first failing edit and no tree is produced.
pub fn apply_edits(
    tree: &DecisionTree,
    edits: &[EditAction],
    d: &DistillationDataset,
    params: &TreeParams,
    iteration: usize,
) -> Result<(DecisionTree, Vec<EditLogEntry>), EditError> {
    let mut current = tree.clone();
    let mut entries = Vec::with_capacity(edits.len());
    for (index, edit) in edits.iter().enumerate() {
        let (next, summary) = apply_edit(&current, edit, d, params).map_err(|source| EditError { index, source })?;
        current = next;
        entries.push(EditLogEntry {
            iteration,
            action: edit.clone(),
            summary,
        });
    }
    Ok((current, entries))
}
