//! Surrogate decision trees distilled from the MLP.
//!
//! The tree is induced CART-style on every prefix sample labelled with the
//! model's prediction. Node ids are assigned in preorder and stay attached
//! to their nodes through later edits; see [`crate::surgery`].

mod canonical;
mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{CaseFeatureEncoding, EncodingSpec, FeatureSource, PrefixDataset};
use crate::neural::{MlpModel, ModelError};

pub use canonical::{CanonicalNode, CanonicalTree, NodeKind, TreeFormatError};
pub use split::{best_split, entropy, gini_impurity, Criterion, SplitCandidate};

pub type NodeId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub criterion: Criterion,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: Some(8),
            min_samples_leaf: 5,
            criterion: Criterion::Gini,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Internal {
        id: NodeId,
        feature: usize,
        threshold: f64,
        display: String,
        histogram: Vec<usize>,
        /// Samples with `x[feature] <= threshold`.
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        id: NodeId,
        predicted: usize,
        histogram: Vec<usize>,
    },
}

/// Index of the largest count, lowest index on ties.
pub fn majority_class(histogram: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in histogram.iter().enumerate().skip(1) {
        if c > histogram[best] {
            best = i;
        }
    }
    best
}

impl TreeNode {
    pub fn id(&self) -> NodeId {
        match self {
            TreeNode::Internal { id, .. } | TreeNode::Leaf { id, .. } => *id,
        }
    }

    pub fn histogram(&self) -> &[usize] {
        match self {
            TreeNode::Internal { histogram, .. } | TreeNode::Leaf { histogram, .. } => histogram,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.histogram().iter().sum()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    /// Majority class of the samples reaching this node.
    pub fn majority(&self) -> usize {
        match self {
            TreeNode::Leaf { predicted, .. } => *predicted,
            TreeNode::Internal { histogram, .. } => majority_class(histogram),
        }
    }

    pub fn split(&self) -> Option<(usize, f64)> {
        match self {
            TreeNode::Internal { feature, threshold, .. } => Some((*feature, *threshold)),
            TreeNode::Leaf { .. } => None,
        }
    }

    pub fn children(&self) -> Option<(&TreeNode, &TreeNode)> {
        match self {
            TreeNode::Internal { left, right, .. } => Some((left, right)),
            TreeNode::Leaf { .. } => None,
        }
    }

    /// Preorder traversal.
    pub fn preorder(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            if let Some((l, r)) = node.children() {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        match self.children() {
            Some((l, r)) => 1 + l.depth().max(r.depth()),
            None => 0,
        }
    }

    fn predict(&self, row: &[f64]) -> usize {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { predicted, .. } => return *predicted,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if row[*feature] <= *threshold { left } else { right },
            }
        }
    }
}

/// One step of a root-to-node path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathStep {
    pub feature: usize,
    pub threshold: f64,
    pub went_left: bool,
}

impl PathStep {
    pub fn holds(&self, row: &[f64]) -> bool {
        (row[self.feature] <= self.threshold) == self.went_left
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub params: TreeParams,
    pub next_node_id: NodeId,
}

impl DecisionTree {
    pub fn predict(&self, row: &[f64]) -> usize {
        self.root.predict(row)
    }

    pub fn predict_all<'a, I>(&self, rows: I) -> Vec<usize>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        rows.into_iter().map(|r| self.predict(r)).collect()
    }

    pub fn nodes(&self) -> Vec<&TreeNode> {
        self.root.preorder()
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.root.preorder().into_iter().find(|n| n.id() == id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes().len()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes().iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// The tests taken from the root to `id`, or `None` if the node is absent.
    pub fn path_to(&self, id: NodeId) -> Option<Vec<PathStep>> {
        fn walk(node: &TreeNode, id: NodeId, path: &mut Vec<PathStep>) -> bool {
            if node.id() == id {
                return true;
            }
            if let TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
                ..
            } = node
            {
                for (child, went_left) in [(left, true), (right, false)] {
                    path.push(PathStep {
                        feature: *feature,
                        threshold: *threshold,
                        went_left,
                    });
                    if walk(child, id, path) {
                        return true;
                    }
                    path.pop();
                }
            }
            false
        }
        let mut path = Vec::new();
        walk(&self.root, id, &mut path).then_some(path)
    }

    /// Checks the structural invariants, describing the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut ids = std::collections::HashSet::new();
        for node in self.nodes() {
            if !ids.insert(node.id()) {
                return Err(format!("duplicate node id {}", node.id()));
            }
            if node.id() >= self.next_node_id {
                return Err(format!("node id {} not below next_node_id", node.id()));
            }
            if node.histogram().len() != self.class_names.len() {
                return Err(format!("node {} histogram has wrong width", node.id()));
            }
            match node {
                TreeNode::Internal {
                    feature,
                    histogram,
                    left,
                    right,
                    ..
                } => {
                    if *feature >= self.feature_names.len() {
                        return Err(format!("node {} tests unknown feature", node.id()));
                    }
                    let summed: Vec<usize> = left
                        .histogram()
                        .iter()
                        .zip(right.histogram())
                        .map(|(a, b)| a + b)
                        .collect();
                    if &summed != histogram {
                        return Err(format!("children of node {} do not sum to it", node.id()));
                    }
                }
                TreeNode::Leaf {
                    predicted, histogram, ..
                } => {
                    if *predicted >= self.class_names.len() {
                        return Err(format!("leaf {} predicts unknown class", node.id()));
                    }
                    if histogram.iter().sum::<usize>() > 0 && *predicted != majority_class(histogram) {
                        return Err(format!("leaf {} does not predict its majority", node.id()));
                    }
                }
            }
        }
        if let Some(max) = self.params.max_depth {
            if self.depth() > max {
                return Err(format!("depth {} exceeds max_depth {max}", self.depth()));
            }
        }
        Ok(())
    }
}

/// Prefix samples labelled with the model's predictions; the ground-truth
/// labels stay available through `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationDataset {
    pub base: PrefixDataset,
    pub labels: Vec<usize>,
}

impl DistillationDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.base.features()
    }

    pub fn original_labels(&self) -> Vec<usize> {
        self.base.labels()
    }

    pub fn spec(&self) -> &EncodingSpec {
        &self.base.spec
    }
}

fn check_model_input(model: &MlpModel, spec: &EncodingSpec) -> Result<(), DistillError> {
    if model.input_dim() != spec.dimension() {
        return Err(DistillError::DimensionMismatch {
            expected: model.input_dim(),
            got: spec.dimension(),
        });
    }
    Ok(())
}

pub fn label_with_model(dataset: &PrefixDataset, model: &MlpModel) -> Result<DistillationDataset, DistillError> {
    check_model_input(model, &dataset.spec)?;
    let labels = model.predict_all(dataset.features())?;
    Ok(DistillationDataset {
        base: dataset.clone(),
        labels,
    })
}

/// Display text for a split: indicator columns read as `name`, numeric ones
/// as `name <= value` in the attribute's original units.
pub fn split_display(spec: &EncodingSpec, feature: usize, threshold: f64) -> String {
    let source = &spec.features[feature];
    match source {
        FeatureSource::Numeric { attribute } => {
            let unscaled = spec
                .case_features
                .iter()
                .find(|c| &c.attribute == attribute)
                .and_then(|c| match c.encoding {
                    CaseFeatureEncoding::MinMax { min, max } => Some(min + threshold * (max - min)),
                    _ => None,
                })
                .unwrap_or(threshold);
            format!("{attribute} <= {unscaled:.4}")
        }
        _ => source.display_name(),
    }
}

pub(crate) struct Grower<'a> {
    pub rows: &'a [&'a [f64]],
    pub labels: &'a [usize],
    pub spec: &'a EncodingSpec,
    pub num_classes: usize,
    pub allowed: Vec<bool>,
    pub params: TreeParams,
    pub next_id: NodeId,
}

impl Grower<'_> {
    /// Grows a subtree over `indices`; `depth_budget` is the number of split
    /// levels still permitted below this node.
    pub fn grow(&mut self, indices: &[usize], depth_budget: Option<usize>) -> TreeNode {
        let id = self.next_id;
        self.next_id += 1;
        let mut histogram = vec![0; self.num_classes];
        for &i in indices {
            histogram[self.labels[i]] += 1;
        }
        let pure = histogram.iter().filter(|&&c| c > 0).count() <= 1;
        let leaf = |histogram: Vec<usize>| TreeNode::Leaf {
            id,
            predicted: majority_class(&histogram),
            histogram,
        };
        if pure || depth_budget == Some(0) {
            return leaf(histogram);
        }
        let Some(split) = best_split(
            self.rows,
            self.labels,
            indices,
            &self.allowed,
            self.num_classes,
            self.params.min_samples_leaf,
            self.params.criterion,
        ) else {
            return leaf(histogram);
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.rows[i][split.feature] <= split.threshold);
        let budget = depth_budget.map(|d| d - 1);
        let left = self.grow(&left_idx, budget);
        let right = self.grow(&right_idx, budget);
        TreeNode::Internal {
            id,
            feature: split.feature,
            threshold: split.threshold,
            display: split_display(self.spec, split.feature, split.threshold),
            histogram,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

pub fn induce_tree(d: &DistillationDataset, params: &TreeParams) -> Result<DecisionTree, DistillError> {
    if d.is_empty() {
        return Err(DistillError::EmptyDataset);
    }
    let rows = d.rows();
    let indices: Vec<usize> = (0..d.len()).collect();
    let mut grower = Grower {
        rows: &rows,
        labels: &d.labels,
        spec: d.spec(),
        num_classes: d.base.class_names.len(),
        allowed: vec![true; d.spec().dimension()],
        params: *params,
        next_id: 0,
    };
    let root = grower.grow(&indices, params.max_depth);
    Ok(DecisionTree {
        root,
        feature_names: d.spec().feature_names(),
        class_names: d.base.class_names.clone(),
        params: *params,
        next_node_id: grower.next_id,
    })
}

/// Fraction of samples on which tree and model agree.
pub fn fidelity(tree: &DecisionTree, model: &MlpModel, dataset: &PrefixDataset) -> Result<f64, DistillError> {
    check_model_input(model, &dataset.spec)?;
    if tree.feature_names.len() != dataset.spec.dimension() {
        return Err(DistillError::DimensionMismatch {
            expected: tree.feature_names.len(),
            got: dataset.spec.dimension(),
        });
    }
    if dataset.is_empty() {
        return Err(DistillError::EmptyDataset);
    }
    let mut agree = 0usize;
    for s in &dataset.samples {
        if tree.predict(&s.features) == model.predict(&s.features)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{EncodingSpec, FeatureSource, PrefixSample};

    pub(crate) fn toy_dataset(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> DistillationDataset {
        let dim = rows[0].len();
        let alphabet: Vec<String> = (0..classes - 1).map(|i| format!("c{i}")).collect();
        let spec = EncodingSpec {
            window: 0,
            activity_alphabet: alphabet,
            case_features: vec![],
            features: (0..dim)
                .map(|i| FeatureSource::Categorical {
                    attribute: format!("f{i}"),
                    value: "1".into(),
                })
                .collect(),
        };
        let class_names = spec.class_names();
        let samples = rows
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (r, &l))| PrefixSample {
                features: r.clone(),
                label: l,
                case_id: format!("{i}"),
                prefix_length: 1,
            })
            .collect();
        DistillationDataset {
            base: PrefixDataset {
                spec,
                samples,
                class_names,
            },
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn pure_dataset_gives_single_leaf() {
        let d = toy_dataset(&[vec![0.0], vec![1.0], vec![1.0]], &[1, 1, 1], 2);
        let t = induce_tree(&d, &TreeParams::default()).unwrap();
        assert_eq!(
            t.root,
            TreeNode::Leaf {
                id: 0,
                predicted: 1,
                histogram: vec![0, 3]
            }
        );
        assert_eq!(t.next_node_id, 1);
    }

    #[test]
    fn two_points_split_at_midpoint() {
        let d = toy_dataset(&[vec![0.0], vec![1.0]], &[0, 1], 2);
        let params = TreeParams {
            min_samples_leaf: 1,
            ..TreeParams::default()
        };
        let t = induce_tree(&d, &params).unwrap();
        assert_eq!(t.root.split(), Some((0, 0.5)));
        let (l, r) = t.root.children().unwrap();
        assert_eq!((l.id(), l.majority()), (1, 0));
        assert_eq!((r.id(), r.majority()), (2, 1));
        t.check_invariants().unwrap();
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut d = toy_dataset(&[vec![0.0]], &[0], 2);
        d.labels.clear();
        d.base.samples.clear();
        assert_eq!(
            induce_tree(&d, &TreeParams::default()).unwrap_err(),
            DistillError::EmptyDataset
        );
    }

    #[test]
    fn depth_limit_holds() {
        let rows: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let d = toy_dataset(&rows, &labels, 2);
        let params = TreeParams {
            max_depth: Some(3),
            min_samples_leaf: 1,
            ..TreeParams::default()
        };
        let t = induce_tree(&d, &params).unwrap();
        assert_eq!(t.depth(), 3);
        t.check_invariants().unwrap();
    }

    #[test]
    fn path_to_and_preorder_ids() {
        let d = toy_dataset(
            &[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]],
            &[0, 1, 2, 2],
            3,
        );
        let params = TreeParams {
            min_samples_leaf: 1,
            ..TreeParams::default()
        };
        let t = induce_tree(&d, &params).unwrap();
        let ids: Vec<NodeId> = t.nodes().iter().map(|n| n.id()).collect();
        assert_eq!(ids, (0..t.node_count() as u64).collect::<Vec<_>>());
        assert_eq!(t.path_to(0), Some(vec![]));
        assert!(t.path_to(99).is_none());
        for n in t.nodes() {
            assert!(t.path_to(n.id()).unwrap().len() <= t.depth());
        }
    }
}
