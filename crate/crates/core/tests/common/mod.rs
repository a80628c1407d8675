#![allow(dead_code)]

use fairloop_core::distillation::DistillationDataset;
use fairloop_core::encoding::{EncodingSpec, FeatureSource, PrefixDataset, PrefixSample};
use fairloop_core::event_log::EventLog;
use fairloop_core::simulator::{builtin_cancer_screening, simulate, SimConfig};

/// A spec whose columns are grouped into attributes: `groups[i] = (name, width)`.
pub fn grouped_spec(groups: &[(&str, usize)], classes: usize) -> EncodingSpec {
    let features = groups
        .iter()
        .flat_map(|(name, width)| {
            (0..*width).map(move |j| FeatureSource::Categorical {
                attribute: name.to_string(),
                value: format!("v{j}"),
            })
        })
        .collect();
    EncodingSpec {
        window: 0,
        activity_alphabet: (0..classes - 1).map(|i| format!("c{i}")).collect(),
        case_features: vec![],
        features,
    }
}

pub fn distill_data(spec: EncodingSpec, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> DistillationDataset {
    let class_names = spec.class_names();
    let samples = rows
        .into_iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (features, &label))| PrefixSample {
            features,
            label,
            case_id: format!("c{i}"),
            prefix_length: 1,
        })
        .collect();
    DistillationDataset {
        base: PrefixDataset {
            spec,
            samples,
            class_names,
        },
        labels,
    }
}

/// Columns named `f0, f1, ...`, one attribute each.
pub fn flat_data(rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> DistillationDataset {
    let dim = rows[0].len();
    let names: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    let groups: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 1)).collect();
    distill_data(grouped_spec(&groups, classes), rows, labels)
}

pub fn cancer_log(cases: usize, seed: u64) -> EventLog {
    let model = builtin_cancer_screening(0.5, 0.0).unwrap();
    simulate(&model, &SimConfig { num_cases: cases, seed }).unwrap()
}
