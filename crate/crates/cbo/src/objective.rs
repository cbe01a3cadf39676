//! Figure-of-merit computation: a weighted sum of (possibly log-scaled)
//! metrics, with range constraints entering as a subtracted penalty.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("metric `{0}` must be positive under a log10 transform")]
    NonPositiveLog(String),
    #[error("metric `{0}` is missing from the evaluation result")]
    MissingMetric(String),
    #[error("metric `{0}` is not finite")]
    NonFiniteMetric(String),
    #[error("constraint on `{0}` has lo >= hi")]
    BadConstraint(String),
    #[error("a FOM needs at least one term")]
    NoTerms,
}

/// Named metric values from one evaluation. Finite values only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricSet {
    values: BTreeMap<String, f64>,
}

impl MetricSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<(), ObjectiveError> {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFiniteMetric(name.into()));
        }
        self.values.insert(name.into(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &f64)> {
        self.values.iter()
    }
}

impl FromIterator<(String, f64)> for MetricSet {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        Self {
            values: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Log10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FomTerm {
    pub metric: String,
    pub coef: f64,
    #[serde(default = "identity")]
    pub transform: Transform,
}

fn identity() -> Transform {
    Transform::Identity
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FomConstraint {
    pub metric: String,
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FomSpec {
    pub terms: Vec<FomTerm>,
    #[serde(default)]
    pub constraints: Vec<FomConstraint>,
}

impl FomSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.terms.is_empty() {
            return Err(ObjectiveError::NoTerms);
        }
        for c in &self.constraints {
            if !(c.lo < c.hi) {
                return Err(ObjectiveError::BadConstraint(c.metric.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintBreakdown {
    pub metric: String,
    /// Out-of-range distance; zero inside [lo, hi].
    pub violation: f64,
    /// The unnormalized range span max(hi, m) - min(lo, m).
    pub raw_span: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FomResult {
    pub raw_fom: f64,
    pub violation: f64,
    pub effective: f64,
    pub per_term: Vec<f64>,
    pub per_constraint: Vec<ConstraintBreakdown>,
}

pub fn term_value(metric: f64, transform: Transform, coefficient: f64) -> Result<f64, ObjectiveError> {
    let t = match transform {
        Transform::Identity => metric,
        Transform::Log10 => {
            if metric <= 0.0 {
                return Err(ObjectiveError::NonPositiveLog(format!("{metric}")));
            }
            metric.log10()
        }
    };
    Ok(coefficient * t)
}

/// Out-of-range distance, normalized so any in-range value scores 0.
pub fn constraint_violation(metric: f64, thres_low: f64, thres_high: f64) -> f64 {
    (thres_high.max(metric) - thres_low.min(metric)) - (thres_high - thres_low)
}

pub fn effective_fom(metrics: &MetricSet, spec: &FomSpec) -> Result<FomResult, ObjectiveError> {
    spec.validate()?;
    let mut per_term = Vec::with_capacity(spec.terms.len());
    let mut raw_fom = 0.0;
    for t in &spec.terms {
        let m = metrics
            .get(&t.metric)
            .ok_or_else(|| ObjectiveError::MissingMetric(t.metric.clone()))?;
        let v = term_value(m, t.transform, t.coef)
            .map_err(|_| ObjectiveError::NonPositiveLog(t.metric.clone()))?;
        per_term.push(v);
        raw_fom += v;
    }
    let mut per_constraint = Vec::with_capacity(spec.constraints.len());
    let mut penalty = 0.0;
    let mut violation = 0.0;
    for c in &spec.constraints {
        let m = metrics
            .get(&c.metric)
            .ok_or_else(|| ObjectiveError::MissingMetric(c.metric.clone()))?;
        let v = constraint_violation(m, c.lo, c.hi);
        violation += v;
        penalty += c.weight * v;
        per_constraint.push(ConstraintBreakdown {
            metric: c.metric.clone(),
            violation: v,
            raw_span: c.hi.max(m) - c.lo.min(m),
        });
    }
    Ok(FomResult {
        raw_fom,
        violation,
        effective: raw_fom - penalty,
        per_term,
        per_constraint,
    })
}
