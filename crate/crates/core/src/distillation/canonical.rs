//! Canonical JSON form of a [`DecisionTree`]: a preorder node array whose
//! `left`/`right` fields reference node ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{majority_class, DecisionTree, NodeId, TreeNode, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Internal,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalNode {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<NodeId>,
    pub histogram: Vec<usize>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTree {
    pub params: TreeParams,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub next_node_id: NodeId,
    pub nodes: Vec<CanonicalNode>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeFormatError {
    #[error("tree document has no nodes")]
    NoNodes,
    #[error("node {0} is missing field `{1}`")]
    MissingField(NodeId, &'static str),
    #[error("node {0} is referenced but not defined")]
    DanglingReference(NodeId),
    #[error("node {0} is defined more than once or not in preorder")]
    NotPreorder(NodeId),
    #[error("node {0} has a sample count that disagrees with its histogram")]
    CountMismatch(NodeId),
    #[error("tree violates invariant: {0}")]
    Invariant(String),
    #[error("invalid tree JSON: {0}")]
    Json(String),
}

impl DecisionTree {
    pub fn to_canonical(&self) -> CanonicalTree {
        let nodes = self
            .nodes()
            .into_iter()
            .map(|node| match node {
                TreeNode::Internal {
                    id,
                    feature,
                    threshold,
                    display,
                    histogram,
                    left,
                    right,
                } => CanonicalNode {
                    id: *id,
                    kind: NodeKind::Internal,
                    feature: Some(*feature),
                    display: Some(display.clone()),
                    threshold: Some(*threshold),
                    left: Some(left.id()),
                    right: Some(right.id()),
                    histogram: histogram.clone(),
                    n: histogram.iter().sum(),
                    predicted: None,
                },
                TreeNode::Leaf {
                    id,
                    predicted,
                    histogram,
                } => CanonicalNode {
                    id: *id,
                    kind: NodeKind::Leaf,
                    feature: None,
                    display: None,
                    threshold: None,
                    left: None,
                    right: None,
                    histogram: histogram.clone(),
                    n: histogram.iter().sum(),
                    predicted: Some(*predicted),
                },
            })
            .collect();
        CanonicalTree {
            params: self.params,
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            next_node_id: self.next_node_id,
            nodes,
        }
    }

    pub fn from_canonical(doc: &CanonicalTree) -> Result<DecisionTree, TreeFormatError> {
        let first = doc.nodes.first().ok_or(TreeFormatError::NoNodes)?;
        let by_id: HashMap<NodeId, &CanonicalNode> = doc.nodes.iter().map(|n| (n.id, n)).collect();
        if by_id.len() != doc.nodes.len() {
            let mut seen = std::collections::HashSet::new();
            let dup = doc.nodes.iter().find(|n| !seen.insert(n.id)).unwrap();
            return Err(TreeFormatError::NotPreorder(dup.id));
        }
        let mut cursor = 0usize;
        let root = build(doc, &by_id, first.id, &mut cursor)?;
        if cursor != doc.nodes.len() {
            return Err(TreeFormatError::NotPreorder(doc.nodes[cursor].id));
        }
        let tree = DecisionTree {
            root,
            feature_names: doc.feature_names.clone(),
            class_names: doc.class_names.clone(),
            params: doc.params,
            next_node_id: doc.next_node_id,
        };
        tree.check_invariants().map_err(TreeFormatError::Invariant)?;
        Ok(tree)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_canonical()).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<DecisionTree, TreeFormatError> {
        let doc: CanonicalTree = serde_json::from_str(text).map_err(|e| TreeFormatError::Json(e.to_string()))?;
        DecisionTree::from_canonical(&doc)
    }
}

fn build(
    doc: &CanonicalTree,
    by_id: &HashMap<NodeId, &CanonicalNode>,
    id: NodeId,
    cursor: &mut usize,
) -> Result<TreeNode, TreeFormatError> {
    let node = *by_id.get(&id).ok_or(TreeFormatError::DanglingReference(id))?;
    if doc.nodes.get(*cursor).map(|n| n.id) != Some(id) {
        return Err(TreeFormatError::NotPreorder(id));
    }
    *cursor += 1;
    if node.histogram.iter().sum::<usize>() != node.n {
        return Err(TreeFormatError::CountMismatch(id));
    }
    match node.kind {
        NodeKind::Leaf => Ok(TreeNode::Leaf {
            id,
            predicted: node.predicted.unwrap_or_else(|| majority_class(&node.histogram)),
            histogram: node.histogram.clone(),
        }),
        NodeKind::Internal => {
            let feature = node.feature.ok_or(TreeFormatError::MissingField(id, "feature"))?;
            let threshold = node.threshold.ok_or(TreeFormatError::MissingField(id, "threshold"))?;
            let left_id = node.left.ok_or(TreeFormatError::MissingField(id, "left"))?;
            let right_id = node.right.ok_or(TreeFormatError::MissingField(id, "right"))?;
            let left = build(doc, by_id, left_id, cursor)?;
            let right = build(doc, by_id, right_id, cursor)?;
            Ok(TreeNode::Internal {
                id,
                feature,
                threshold,
                display: node
                    .display
                    .clone()
                    .or_else(|| doc.feature_names.get(feature).cloned())
                    .unwrap_or_default(),
                histogram: node.histogram.clone(),
                left: Box::new(left),
                right: Box::new(right),
            })
        }
    }
}
