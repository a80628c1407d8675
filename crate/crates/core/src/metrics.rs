//! Classification metrics against the original labels and the
//! demographic-parity probe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distillation::{fidelity, DecisionTree, DistillError};
use crate::encoding::{EncodingSpec, FeatureSource, PrefixDataset};
use crate::neural::{MlpModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("attribute {0:?} is not an encoded feature")]
    UnknownAttribute(String),
    #[error("attribute {0:?} is not categorical")]
    NotCategorical(String),
    #[error("{attribute:?} has no value {value:?}")]
    UnknownGroup { attribute: String, value: String },
    #[error("group {attribute} = {value} has no samples in scope")]
    EmptyGroup { attribute: String, value: String },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<DistillError> for MetricsError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::EmptyDataset => MetricsError::EmptyDataset,
            DistillError::DimensionMismatch { expected, got } => MetricsError::DimensionMismatch { expected, got },
            DistillError::Model(m) => MetricsError::Model(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro averages over the classes that occur in `truth`.
/// Precision of a class that is never predicted counts as 0.
pub fn classification_metrics(truth: &[usize], predicted: &[usize], class_names: &[String]) -> ClassificationMetrics {
    assert_eq!(truth.len(), predicted.len(), "truth and predictions differ in length");
    let k = class_names.len();
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted_count = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        support[t] += 1;
        predicted_count[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let per_class: Vec<ClassReport> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], predicted_count[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassReport {
                class: class_names[c].clone(),
                support: support[c],
                predicted: predicted_count[c],
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let present: Vec<&ClassReport> = per_class.iter().filter(|c| c.support > 0).collect();
    let mean = |f: fn(&ClassReport) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    ClassificationMetrics {
        accuracy: ratio(tp.iter().sum(), truth.len()),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
    }
}

/// Which samples a parity probe compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeScope {
    /// Samples whose activity window also occurs with the target class as
    /// the true next activity: the prefixes at which the decision is taken.
    #[default]
    DecisionContext,
    AllPrefixes,
}

/// How a group's rate is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// Mean predicted probability of the target class.
    #[default]
    Probability,
    /// Share of samples whose predicted class is the target.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityProbe {
    pub attribute: String,
    pub groups: [String; 2],
    pub target: String,
    #[serde(default)]
    pub scope: ProbeScope,
    #[serde(default)]
    pub rate: RateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityResult {
    pub attribute: String,
    pub groups: [String; 2],
    pub target: String,
    pub scope: ProbeScope,
    pub rate: RateKind,
    pub group_rates: [f64; 2],
    pub group_sizes: [usize; 2],
    pub gap: f64,
}

/// Per-sample mask of the probe's scope.
fn scope_mask(dataset: &PrefixDataset, target: usize, scope: ProbeScope) -> Vec<bool> {
    match scope {
        ProbeScope::AllPrefixes => vec![true; dataset.len()],
        ProbeScope::DecisionContext => {
            let width = dataset.spec.positional_width();
            let contexts: std::collections::HashSet<Vec<u64>> = dataset
                .samples
                .iter()
                .filter(|s| s.label == target)
                .map(|s| s.features[..width].iter().map(|v| v.to_bits()).collect())
                .collect();
            dataset
                .samples
                .iter()
                .map(|s| {
                    let key: Vec<u64> = s.features[..width].iter().map(|v| v.to_bits()).collect();
                    contexts.contains(&key)
                })
                .collect()
        }
    }
}

/// Class index of the probe's target and the one-hot columns of its groups.
pub fn resolve_probe(
    spec: &EncodingSpec,
    class_names: &[String],
    probe: &ParityProbe,
) -> Result<(usize, [usize; 2]), MetricsError> {
    let target = class_names
        .iter()
        .position(|c| c == &probe.target)
        .ok_or_else(|| MetricsError::UnknownClass(probe.target.clone()))?;
    let columns = spec.attribute_columns(&probe.attribute);
    if columns.is_empty() {
        return Err(MetricsError::UnknownAttribute(probe.attribute.clone()));
    }
    let mut group_columns = [0usize; 2];
    for (g, value) in probe.groups.iter().enumerate() {
        group_columns[g] = columns
            .iter()
            .copied()
            .find(|&c| match &spec.features[c] {
                FeatureSource::Categorical { value: v, .. } => v == value,
                _ => false,
            })
            .ok_or_else(|| {
                if matches!(spec.features[columns[0]], FeatureSource::Numeric { .. }) {
                    MetricsError::NotCategorical(probe.attribute.clone())
                } else {
                    MetricsError::UnknownGroup {
                        attribute: probe.attribute.clone(),
                        value: value.clone(),
                    }
                }
            })?;
    }
    Ok((target, group_columns))
}

/// Absolute difference of the target rate between the probe's two groups.
/// `dataset` must carry the original labels, which define the decision
/// context.
pub fn demographic_parity(
    model: &MlpModel,
    dataset: &PrefixDataset,
    probe: &ParityProbe,
) -> Result<ParityResult, MetricsError> {
    let spec = &dataset.spec;
    if model.input_dim() != spec.dimension() {
        return Err(MetricsError::DimensionMismatch {
            expected: model.input_dim(),
            got: spec.dimension(),
        });
    }
    let (target, group_columns) = resolve_probe(spec, &dataset.class_names, probe)?;
    let mask = scope_mask(dataset, target, probe.scope);
    let mut sums = [0.0f64; 2];
    let mut sizes = [0usize; 2];
    for (s, _) in dataset.samples.iter().zip(&mask).filter(|(_, &m)| m) {
        for g in 0..2 {
            if s.features[group_columns[g]] == 1.0 {
                let rate = match probe.rate {
                    RateKind::Probability => model.forward(&s.features)?[target],
                    RateKind::Prediction => (model.predict(&s.features)? == target) as u8 as f64,
                };
                sums[g] += rate;
                sizes[g] += 1;
            }
        }
    }
    for (size, group) in sizes.iter().zip(&probe.groups) {
        if *size == 0 {
            return Err(MetricsError::EmptyGroup {
                attribute: probe.attribute.clone(),
                value: group.clone(),
            });
        }
    }
    let rates = [sums[0] / sizes[0] as f64, sums[1] / sizes[1] as f64];
    Ok(ParityResult {
        attribute: probe.attribute.clone(),
        groups: probe.groups.clone(),
        target: probe.target.clone(),
        scope: probe.scope,
        rate: probe.rate,
        group_rates: rates,
        group_sizes: sizes,
        gap: (rates[0] - rates[1]).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iteration: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    /// The surrogate tree's own scores against the original labels.
    pub tree: ClassificationMetrics,
    pub fidelity: f64,
    pub probes: Vec<ParityResult>,
}

/// Scores `model` and `tree` against the labels carried by `dataset`, which
/// must be the original ground truth.
pub fn compute_metrics(
    model: &MlpModel,
    dataset: &PrefixDataset,
    tree: &DecisionTree,
    probes: &[ParityProbe],
    iteration: usize,
) -> Result<MetricsReport, MetricsError> {
    let rows = dataset.features();
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let truth = dataset.labels();
    let model_pred = model.predict_all(rows.iter().copied())?;
    let fid = fidelity(tree, model, dataset)?;
    let tree_pred = tree.predict_all(rows.iter().copied());
    let m = classification_metrics(&truth, &model_pred, &dataset.class_names);
    let probes = probes
        .iter()
        .map(|p| demographic_parity(model, dataset, p))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport {
        iteration,
        accuracy: m.accuracy,
        macro_precision: m.macro_precision,
        macro_recall: m.macro_recall,
        macro_f1: m.macro_f1,
        per_class: m.per_class,
        tree: classification_metrics(&truth, &tree_pred, &dataset.class_names),
        fidelity: fid,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let truth = [0, 1, 2, 1, 0];
        let m = classification_metrics(&truth, &truth, &names(4));
        assert_eq!(
            (m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(m.per_class[3].support, 0);
    }

    #[test]
    fn four_sample_confusion_case() {
        let m = classification_metrics(&[0, 1, 0, 1], &[0, 0, 1, 1], &names(2));
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.macro_precision, 0.5);
        assert_eq!(m.macro_recall, 0.5);
        assert_eq!(m.macro_f1, 0.5);
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let m = classification_metrics(&[0, 1], &[0, 0], &names(2));
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[0].precision, 0.5);
        assert_eq!(m.macro_recall, 0.5);
    }

    #[test]
    fn order_invariance() {
        let truth = [0, 1, 2, 2, 1, 0, 0];
        let pred = [0, 2, 2, 1, 1, 0, 1];
        let a = classification_metrics(&truth, &pred, &names(3));
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let t2: Vec<usize> = perm.iter().map(|&i| truth[i]).collect();
        let p2: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        let b = classification_metrics(&t2, &p2, &names(3));
        assert_eq!(a, b);
    }
}
