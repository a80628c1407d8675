//! Synthetic event logs from attribute-conditioned Markov process models.
//!
//! A model lists activities, a start activity, case-attribute generators
//! and guarded transitions. For a given activity and attribute assignment
//! the branches of every transition whose guard holds are pooled; their
//! probabilities must sum to one. `END` terminates a case.

use std::collections::{BTreeMap, HashSet, VecDeque};

use chrono::{DateTime, Duration, Utc};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::END;
use crate::event_log::{AttributeMap, AttributeValue, Event, EventLog, LogError, Trace};

pub const PROBABILITY_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_EVENTS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid process model: {0}")]
    InvalidModel(String),
    #[error("outgoing probabilities of {activity:?} sum to {sum} under {assignment}")]
    UnnormalizedTransitions {
        activity: String,
        assignment: String,
        sum: f64,
    },
    #[error("END is not reached with probability 1 from {activity:?} under {assignment}")]
    NonTerminatingModel { activity: String, assignment: String },
    #[error("num_cases must be at least 1")]
    NoCases,
    #[error("case {0} exceeded the event limit")]
    TraceTooLong(usize),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttributeGenerator {
    Categorical {
        values: Vec<(String, f64)>,
    },
    /// Uniform over `[min, max]`; integer generators draw whole numbers.
    Uniform {
        min: f64,
        max: f64,
        #[serde(default)]
        integer: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Guard {
    Equals { attribute: String, value: String },
    NotEquals { attribute: String, value: String },
    LessThan { attribute: String, value: f64 },
    AtLeast { attribute: String, value: f64 },
    All { guards: Vec<Guard> },
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Cat(String),
    Num(f64),
}

impl Guard {
    fn holds(&self, assignment: &BTreeMap<String, Value>) -> bool {
        let get = |a: &str| assignment.get(a);
        match self {
            Guard::Equals { attribute, value } => matches!(get(attribute), Some(Value::Cat(v)) if v == value),
            Guard::NotEquals { attribute, value } => matches!(get(attribute), Some(Value::Cat(v)) if v != value),
            Guard::LessThan { attribute, value } => matches!(get(attribute), Some(Value::Num(v)) if v < value),
            Guard::AtLeast { attribute, value } => matches!(get(attribute), Some(Value::Num(v)) if v >= value),
            Guard::All { guards } => guards.iter().all(|g| g.holds(assignment)),
        }
    }

    fn thresholds(&self, out: &mut BTreeMap<String, Vec<f64>>) {
        match self {
            Guard::LessThan { attribute, value } | Guard::AtLeast { attribute, value } => {
                out.entry(attribute.clone()).or_default().push(*value)
            }
            Guard::All { guards } => guards.iter().for_each(|g| g.thresholds(out)),
            _ => {}
        }
    }

    fn attributes<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Guard::Equals { attribute, .. }
            | Guard::NotEquals { attribute, .. }
            | Guard::LessThan { attribute, .. }
            | Guard::AtLeast { attribute, .. } => out.push(attribute),
            Guard::All { guards } => guards.iter().for_each(|g| g.attributes(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// An activity or `END`.
    pub to: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<Guard>,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub activities: Vec<String>,
    pub start: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeGenerator>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_cases: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_cases: 1000,
            seed: 42,
        }
    }
}

pub const REGISTER: &str = "register patient";
pub const REFUSE: &str = "refuse screening";
pub const SCHEDULE: &str = "schedule appointment";
pub const REFERRAL: &str = "request referral";
pub const PROSTATE: &str = "prostate screening";
pub const MAMMARY: &str = "mammary screening";
pub const DELIVER: &str = "deliver results";

fn branch(to: &str, probability: f64) -> Branch {
    Branch {
        to: to.into(),
        probability,
    }
}

fn gender_is(value: &str) -> Option<Guard> {
    Some(Guard::Equals {
        attribute: "gender".into(),
        value: value.into(),
    })
}

/// The cancer-screening process: after registration a patient refuses with
/// a gender-dependent probability or proceeds via an appointment or a
/// referral to the gender-specific screening, then receives results.
pub fn builtin_cancer_screening(refuse_female: f64, refuse_male: f64) -> Result<ProcessModel, SimError> {
    for p in [refuse_female, refuse_male] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::InvalidProbability(p));
        }
    }
    let decide = |gender: &str, p: f64| Transition {
        from: REGISTER.into(),
        guard: gender_is(gender),
        branches: vec![
            branch(REFUSE, p),
            branch(SCHEDULE, (1.0 - p) / 2.0),
            branch(REFERRAL, (1.0 - p) / 2.0),
        ],
    };
    let route = |from: &str, gender: &str, to: &str| Transition {
        from: from.into(),
        guard: gender_is(gender),
        branches: vec![branch(to, 1.0)],
    };
    let always = |from: &str, to: &str| Transition {
        from: from.into(),
        guard: None,
        branches: vec![branch(to, 1.0)],
    };
    Ok(ProcessModel {
        activities: [REGISTER, REFUSE, SCHEDULE, REFERRAL, PROSTATE, MAMMARY, DELIVER]
            .map(String::from)
            .to_vec(),
        start: REGISTER.into(),
        attributes: BTreeMap::from([(
            "gender".to_string(),
            AttributeGenerator::Categorical {
                values: vec![("female".into(), 0.5), ("male".into(), 0.5)],
            },
        )]),
        transitions: vec![
            decide("female", refuse_female),
            decide("male", refuse_male),
            route(SCHEDULE, "female", MAMMARY),
            route(SCHEDULE, "male", PROSTATE),
            route(REFERRAL, "female", MAMMARY),
            route(REFERRAL, "male", PROSTATE),
            always(PROSTATE, DELIVER),
            always(MAMMARY, DELIVER),
            always(DELIVER, END),
            always(REFUSE, END),
        ],
    })
}

/// One cell of the attribute space used for exact analysis: categorical
/// values, numeric representative points, and the cell's probability.
#[derive(Debug, Clone)]
struct Cell {
    values: BTreeMap<String, Value>,
    weight: f64,
}

fn describe(values: &BTreeMap<String, Value>) -> String {
    if values.is_empty() {
        return "no attributes".into();
    }
    values
        .iter()
        .map(|(k, v)| match v {
            Value::Cat(s) => format!("{k} = {s}"),
            Value::Num(x) => format!("{k} = {x}"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl ProcessModel {
    pub fn from_json(text: &str) -> Result<ProcessModel, SimError> {
        let model: ProcessModel = serde_json::from_str(text).map_err(|e| SimError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    fn index_of(&self, activity: &str) -> Option<usize> {
        self.activities.iter().position(|a| a == activity)
    }

    fn check_structure(&self) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::InvalidModel(m));
        let mut seen = HashSet::new();
        for a in &self.activities {
            if a.is_empty() || a == END {
                return invalid(format!("activity name {a:?} is not allowed"));
            }
            if !seen.insert(a) {
                return invalid(format!("activity {a:?} is listed twice"));
            }
        }
        if self.index_of(&self.start).is_none() {
            return invalid(format!("start activity {:?} is not listed", self.start));
        }
        for (name, generator) in &self.attributes {
            match generator {
                AttributeGenerator::Categorical { values } => {
                    if values.is_empty() {
                        return invalid(format!("attribute {name:?} has no values"));
                    }
                    let mut total = 0.0;
                    for (_, w) in values {
                        if !(w.is_finite() && *w >= 0.0) {
                            return invalid(format!("attribute {name:?} has a negative weight"));
                        }
                        total += w;
                    }
                    if total <= 0.0 {
                        return invalid(format!("attribute {name:?} has zero total weight"));
                    }
                }
                AttributeGenerator::Uniform { min, max, integer } => {
                    if !(min.is_finite() && max.is_finite() && min <= max) {
                        return invalid(format!("attribute {name:?} has an invalid range"));
                    }
                    if *integer && min.ceil() > max.floor() {
                        return invalid(format!("attribute {name:?} contains no integers"));
                    }
                }
            }
        }
        for t in &self.transitions {
            if self.index_of(&t.from).is_none() {
                return invalid(format!("transition from unknown activity {:?}", t.from));
            }
            for b in &t.branches {
                if b.to != END && self.index_of(&b.to).is_none() {
                    return invalid(format!("transition to unknown activity {:?}", b.to));
                }
                if !(0.0..=1.0).contains(&b.probability) {
                    return Err(SimError::InvalidProbability(b.probability));
                }
            }
            if let Some(g) = &t.guard {
                let mut names = Vec::new();
                g.attributes(&mut names);
                for n in names {
                    if !self.attributes.contains_key(n) {
                        return invalid(format!("guard references unknown attribute {n:?}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Partition of the attribute space into cells on which every guard is
    /// constant.
    fn cells(&self) -> Vec<Cell> {
        let mut thresholds = BTreeMap::new();
        for t in &self.transitions {
            if let Some(g) = &t.guard {
                g.thresholds(&mut thresholds);
            }
        }
        let mut cells = vec![Cell {
            values: BTreeMap::new(),
            weight: 1.0,
        }];
        for (name, generator) in &self.attributes {
            let options: Vec<(Value, f64)> = match generator {
                AttributeGenerator::Categorical { values } => {
                    let total: f64 = values.iter().map(|(_, w)| w).sum();
                    values.iter().map(|(v, w)| (Value::Cat(v.clone()), w / total)).collect()
                }
                AttributeGenerator::Uniform { min, max, integer } => {
                    let mut cuts: Vec<f64> = thresholds
                        .get(name)
                        .map(|t| t.iter().copied().filter(|t| t > min && t <= max).collect())
                        .unwrap_or_default();
                    cuts.sort_by(f64::total_cmp);
                    cuts.dedup();
                    let mut bounds = vec![*min];
                    bounds.extend(cuts);
                    let measure = |lo: f64, hi: f64, last: bool| -> f64 {
                        if *integer {
                            let first = lo.ceil();
                            let end = if last { hi.floor() + 1.0 } else { hi.ceil() };
                            (end - first).max(0.0)
                        } else {
                            hi - lo
                        }
                    };
                    let total = measure(*min, *max, true);
                    bounds
                        .iter()
                        .enumerate()
                        .map(|(i, &lo)| {
                            let last = i + 1 == bounds.len();
                            let hi = if last { *max } else { bounds[i + 1] };
                            let w = if total > 0.0 {
                                measure(lo, hi, last) / total
                            } else {
                                1.0
                            };
                            let point = if *integer { lo.ceil() } else { lo };
                            (Value::Num(point), w)
                        })
                        .collect()
                }
            };
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    options.iter().map(move |(v, w)| {
                        let mut values = c.values.clone();
                        values.insert(name.clone(), v.clone());
                        Cell {
                            values,
                            weight: c.weight * w,
                        }
                    })
                })
                .collect();
        }
        cells
    }

    /// Pooled outgoing branches of `activity` under `values`.
    fn outgoing(&self, activity: &str, values: &BTreeMap<String, Value>) -> Vec<(&str, f64)> {
        let mut out: Vec<(&str, f64)> = Vec::new();
        for t in self.transitions.iter().filter(|t| t.from == activity) {
            if t.guard.as_ref().is_none_or(|g| g.holds(values)) {
                for b in &t.branches {
                    match out.iter_mut().find(|(to, _)| *to == b.to) {
                        Some(entry) => entry.1 += b.probability,
                        None => out.push((&b.to, b.probability)),
                    }
                }
            }
        }
        out
    }

    /// Transition matrix over activities plus END (last index).
    fn chain(&self, values: &BTreeMap<String, Value>) -> DMatrix<f64> {
        let n = self.activities.len();
        let mut p = DMatrix::zeros(n + 1, n + 1);
        for (i, a) in self.activities.iter().enumerate() {
            for (to, prob) in self.outgoing(a, values) {
                let j = if to == END { n } else { self.index_of(to).unwrap() };
                p[(i, j)] += prob;
            }
        }
        p[(n, n)] = 1.0;
        p
    }

    fn reachable(&self, p: &DMatrix<f64>) -> Vec<bool> {
        let n = p.nrows();
        let mut seen = vec![false; n];
        let start = self.index_of(&self.start).unwrap();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if p[(i, j)] > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    /// Checks normalisation and termination for every attribute cell.
    pub fn validate(&self) -> Result<(), SimError> {
        self.check_structure()?;
        let n = self.activities.len();
        for cell in self.cells() {
            let p = self.chain(&cell.values);
            let reach = self.reachable(&p);
            for i in (0..n).filter(|&i| reach[i]) {
                let sum: f64 = (0..=n).map(|j| p[(i, j)]).sum();
                if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(SimError::UnnormalizedTransitions {
                        activity: self.activities[i].clone(),
                        assignment: describe(&cell.values),
                        sum,
                    });
                }
            }
            // END must be reachable from every reachable activity
            let mut reaches_end = vec![false; n + 1];
            reaches_end[n] = true;
            let mut changed = true;
            while changed {
                changed = false;
                for i in 0..n {
                    if !reaches_end[i] && (0..=n).any(|j| p[(i, j)] > 0.0 && reaches_end[j]) {
                        reaches_end[i] = true;
                        changed = true;
                    }
                }
            }
            if let Some(i) = (0..n).find(|&i| reach[i] && !reaches_end[i]) {
                return Err(SimError::NonTerminatingModel {
                    activity: self.activities[i].clone(),
                    assignment: describe(&cell.values),
                });
            }
        }
        Ok(())
    }

    /// Probability of moving directly from `from` to `to` (an activity or
    /// END) when the case has the given categorical values.
    pub fn branch_probability(&self, from: &str, to: &str, assignment: &[(&str, &str)]) -> f64 {
        let values = assignment
            .iter()
            .map(|(k, v)| (k.to_string(), Value::Cat(v.to_string())))
            .collect();
        self.outgoing(from, &values)
            .into_iter()
            .filter(|(t, _)| *t == to)
            .map(|(_, p)| p)
            .sum()
    }
}

/// P(case visits `activity` | `attribute` = `value`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRate {
    pub attribute: String,
    pub value: String,
    pub activity: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// P(case visits activity), in activity order.
    pub visit: Vec<(String, f64)>,
    pub conditional: Vec<ConditionalRate>,
}

impl GroundTruth {
    pub fn visit_probability(&self, activity: &str) -> Option<f64> {
        self.visit.iter().find(|(a, _)| a == activity).map(|(_, p)| *p)
    }

    pub fn conditional(&self, attribute: &str, value: &str, activity: &str) -> Option<f64> {
        self.conditional
            .iter()
            .find(|r| r.attribute == attribute && r.value == value && r.activity == activity)
            .map(|r| r.probability)
    }
}

/// Probability of ever visiting each activity from the start, solved as a
/// linear system per target.
fn visit_probabilities(model: &ProcessModel, p: &DMatrix<f64>) -> Vec<f64> {
    let n = model.activities.len();
    let start = model.index_of(&model.start).unwrap();
    (0..n)
        .map(|target| {
            if target == start {
                return 1.0;
            }
            // h(i) = sum_j p(i, j) h(j), h(target) = 1, h(END) = 0
            let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
            let m = others.len();
            let mut a = DMatrix::<f64>::identity(m, m);
            let mut b = DVector::<f64>::zeros(m);
            for (r, &i) in others.iter().enumerate() {
                for (c, &j) in others.iter().enumerate() {
                    a[(r, c)] -= p[(i, j)];
                }
                b[r] = p[(i, target)];
            }
            let h = a.lu().solve(&b).expect("terminating chains give a regular system");
            let row = others.iter().position(|&i| i == start).unwrap();
            h[row].clamp(0.0, 1.0)
        })
        .collect()
}

/// Exact visit probabilities, overall and conditioned on each categorical
/// attribute value, marginalising over the other attributes.
pub fn ground_truth_rates(model: &ProcessModel) -> Result<GroundTruth, SimError> {
    model.validate()?;
    let cells: Vec<(Cell, Vec<f64>)> = model
        .cells()
        .into_iter()
        .map(|c| {
            let v = visit_probabilities(model, &model.chain(&c.values));
            (c, v)
        })
        .collect();
    let n = model.activities.len();
    let mut visit = vec![0.0; n];
    for (c, v) in &cells {
        for i in 0..n {
            visit[i] += c.weight * v[i];
        }
    }
    let mut conditional = Vec::new();
    for (name, generator) in &model.attributes {
        let AttributeGenerator::Categorical { values } = generator else {
            continue;
        };
        for (value, _) in values {
            let matching: Vec<&(Cell, Vec<f64>)> = cells
                .iter()
                .filter(|(c, _)| c.values.get(name) == Some(&Value::Cat(value.clone())))
                .collect();
            let mass: f64 = matching.iter().map(|(c, _)| c.weight).sum();
            if mass <= 0.0 {
                continue;
            }
            for (i, activity) in model.activities.iter().enumerate() {
                let p = matching.iter().map(|(c, v)| c.weight * v[i]).sum::<f64>() / mass;
                conditional.push(ConditionalRate {
                    attribute: name.clone(),
                    value: value.clone(),
                    activity: activity.clone(),
                    probability: p,
                });
            }
        }
    }
    Ok(GroundTruth {
        visit: model.activities.iter().cloned().zip(visit).collect(),
        conditional,
    })
}

fn sample_attributes(model: &ProcessModel, rng: &mut ChaCha8Rng) -> (AttributeMap, BTreeMap<String, Value>) {
    let mut attrs = AttributeMap::new();
    let mut values = BTreeMap::new();
    for (name, generator) in &model.attributes {
        match generator {
            AttributeGenerator::Categorical { values: options } => {
                let total: f64 = options.iter().map(|(_, w)| w).sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = &options.last().unwrap().0;
                for (v, w) in options {
                    acc += w;
                    if u < acc {
                        chosen = v;
                        break;
                    }
                }
                attrs.insert(name.clone(), AttributeValue::String(chosen.clone()));
                values.insert(name.clone(), Value::Cat(chosen.clone()));
            }
            AttributeGenerator::Uniform { min, max, integer } => {
                if *integer {
                    let x = rng.random_range(min.ceil() as i64..=max.floor() as i64);
                    attrs.insert(name.clone(), AttributeValue::Int(x));
                    values.insert(name.clone(), Value::Num(x as f64));
                } else {
                    let x = min + rng.random::<f64>() * (max - min);
                    attrs.insert(name.clone(), AttributeValue::Float(x));
                    values.insert(name.clone(), Value::Num(x));
                }
            }
        }
    }
    (attrs, values)
}

fn pick<'a>(branches: &[(&'a str, f64)], u: f64) -> &'a str {
    let mut acc = 0.0;
    for (to, p) in branches {
        acc += p;
        if u < acc && *p > 0.0 {
            return to;
        }
    }
    branches
        .iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(t, _)| *t)
        .unwrap_or(END)
}

pub fn simulate(model: &ProcessModel, config: &SimConfig) -> Result<EventLog, SimError> {
    simulate_with_limit(model, config, DEFAULT_MAX_EVENTS)
}

/// Generates `config.num_cases` traces. Case `i` uses its own random stream
/// derived from `(seed, i)`, starts `i` minutes after the base time, and
/// spaces its events one minute apart.
pub fn simulate_with_limit(model: &ProcessModel, config: &SimConfig, max_events: usize) -> Result<EventLog, SimError> {
    if config.num_cases == 0 {
        return Err(SimError::NoCases);
    }
    model.validate()?;
    let base = DateTime::<Utc>::from_timestamp(1_704_067_200, 0).expect("valid base time");
    let mut traces = Vec::with_capacity(config.num_cases);
    for case in 0..config.num_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(case as u64);
        let (case_attributes, values) = sample_attributes(model, &mut rng);
        let start = base + Duration::minutes(case as i64);
        let mut events = Vec::new();
        let mut current = model.start.as_str();
        loop {
            if events.len() == max_events {
                return Err(SimError::TraceTooLong(case));
            }
            events.push(Event {
                activity: current.to_string(),
                timestamp: start + Duration::minutes(events.len() as i64),
                attributes: AttributeMap::new(),
            });
            let branches = model.outgoing(current, &values);
            let next = pick(&branches, rng.random::<f64>());
            if next == END {
                break;
            }
            current = model.activities[model.index_of(next).unwrap()].as_str();
        }
        traces.push(Trace {
            case_id: format!("case-{case}"),
            case_attributes,
            events,
        });
    }
    Ok(EventLog::new(traces)?)
}
