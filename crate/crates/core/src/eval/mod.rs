//! Evaluation harness: zero-shot classification with prompt templates,
//! cumulative true-positive curves from human judgments, and method
//! comparisons over those curves.

mod journal;
mod queries;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use journal::{Journal, Judgment, JudgmentSet, Verdict};
pub use queries::{QueryLog, QueryRecord};

use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::scoring::ImageId;

pub const LABEL_PLACEHOLDER: &str = "{label}";

/// A prompt pattern with exactly one `{label}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let count = pattern.matches(LABEL_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::InvalidInput(format!(
                "template `{pattern}` must contain exactly one {LABEL_PLACEHOLDER}, found {count}"
            )));
        }
        Ok(Self(pattern))
    }

    pub fn apply(&self, label: &str) -> String {
        self.0.replace(LABEL_PLACEHOLDER, label)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    /// Assigned label index per item.
    pub assignments: Vec<usize>,
    /// Fraction of items matching the ground truth, when one was given.
    pub accuracy: Option<f64>,
}

/// Assigns each item the label whose prompt embedding is most similar.
/// Ties go to the lowest label index.
pub fn zero_shot_classify(
    encoder: &dyn Encoder,
    items: &[EmbeddingVector],
    labels: &[String],
    template: &PromptTemplate,
    truth: Option<&[usize]>,
) -> Result<Classification> {
    if labels.len() < 2 {
        return Err(Error::InvalidInput("zero-shot classification needs at least two labels".into()));
    }
    let prompts = labels
        .iter()
        .map(|l| encoder.encode_text(&template.apply(l)))
        .collect::<Result<Vec<_>>>()?;
    let assignments = classify_with_label_embeddings(items, &prompts)?;
    let accuracy = truth.map(|t| accuracy(&assignments, t)).transpose()?;
    Ok(Classification {
        assignments,
        accuracy,
    })
}

/// Argmax over label embeddings; ties go to the lowest label index.
pub fn classify_with_label_embeddings(
    items: &[EmbeddingVector],
    label_embeddings: &[EmbeddingVector],
) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|item| {
            let mut best = (0usize, f32::NEG_INFINITY);
            for (i, l) in label_embeddings.iter().enumerate() {
                let s = cosine_similarity(item, l)?;
                if s > best.1 {
                    best = (i, s);
                }
            }
            Ok(best.0)
        })
        .collect()
}

pub fn accuracy(assignments: &[usize], truth: &[usize]) -> Result<f64> {
    if assignments.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} assignments but {} ground-truth labels",
            assignments.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let correct = assignments.iter().zip(truth).filter(|(a, t)| a == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Element `t - 1` counts true positives among the first `t` ranked images.
/// Unjudged images count as not relevant; ranks past the end of the list
/// add nothing.
pub fn cumulative_tp_curve(ranked: &[ImageId], judgments: &JudgmentSet, query_id: &str, n: usize) -> Vec<u32> {
    let verdicts: Vec<Verdict> = ranked
        .iter()
        .take(n)
        .map(|id| judgments.verdict(query_id, id))
        .collect();
    cumulative_tp_from_verdicts(&verdicts, n)
}

pub fn cumulative_tp_from_verdicts(verdicts: &[Verdict], n: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n);
    let mut acc = 0u32;
    for t in 0..n {
        if verdicts.get(t) == Some(&Verdict::TruePositive) {
            acc += 1;
        }
        out.push(acc);
    }
    out
}

/// `rank,cumulative_tp` CSV, ranks starting at 1.
pub fn curve_csv(curve: &[u32]) -> String {
    let mut s = String::from("rank,cumulative_tp\n");
    for (i, v) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, v));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub query_id: String,
    pub curve: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryDelta {
    pub query_id: String,
    /// Reference minus method, per rank.
    pub per_rank: Vec<i64>,
    pub final_delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodDelta {
    pub method: String,
    pub per_query: Vec<QueryDelta>,
    /// Mean over queries of the final-rank difference.
    pub mean_final_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub reference: String,
    pub methods: Vec<MethodDelta>,
}

/// Compares every method against `reference`, query by query. Every method
/// must have a curve for each query the reference has.
pub fn compare_methods(reference: &str, curves: &[MethodCurve]) -> Result<ComparisonReport> {
    let mut by_method: BTreeMap<&str, BTreeMap<&str, &[u32]>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for c in curves {
        if !by_method.contains_key(c.method.as_str()) {
            order.push(&c.method);
        }
        by_method
            .entry(&c.method)
            .or_default()
            .insert(&c.query_id, &c.curve);
    }
    let reference_curves = by_method
        .get(reference)
        .ok_or_else(|| Error::InvalidInput(format!("no curves for reference method `{reference}`")))?;
    let mut methods = Vec::new();
    for method in order.into_iter().filter(|m| *m != reference) {
        let theirs = &by_method[method];
        let mut per_query = Vec::new();
        for (query, ours) in reference_curves {
            let other = theirs.get(query).ok_or_else(|| {
                Error::InvalidInput(format!("method `{method}` has no curve for query `{query}`"))
            })?;
            let per_rank: Vec<i64> = ours.iter().zip(other.iter()).map(|(a, b)| *a as i64 - *b as i64).collect();
            let final_delta = *ours.last().unwrap_or(&0) as i64 - *other.last().unwrap_or(&0) as i64;
            per_query.push(QueryDelta {
                query_id: (*query).to_owned(),
                per_rank,
                final_delta,
            });
        }
        let mean_final_delta = if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(|q| q.final_delta as f64).sum::<f64>() / per_query.len() as f64
        };
        methods.push(MethodDelta {
            method: method.to_owned(),
            per_query,
            mean_final_delta,
        });
    }
    Ok(ComparisonReport {
        reference: reference.to_owned(),
        methods,
    })
}
