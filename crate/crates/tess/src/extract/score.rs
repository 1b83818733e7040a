//! Candidate scoring math: temperature softmax, argmax prediction, top-1/2
//! margin, and the strict structured-response parser.

use std::collections::BTreeMap;

use crate::error::{Result, TessError};
use crate::primitives::{PrimitiveKind, PrimitiveLabel, ALL_KINDS};

/// Log-likelihood score per candidate, aligned with the kind's canonical
/// candidate order.
#[derive(Debug, Clone)]
pub struct LabelScores {
    pub kind: PrimitiveKind,
    pub scores: Vec<f64>,
}

impl LabelScores {
    pub fn new(kind: PrimitiveKind, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != kind.cardinality() {
            return Err(TessError::InvalidArgument(format!(
                "{kind:?} expects {} scores, got {}",
                kind.cardinality(),
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(TessError::NonFinite(format!("candidate score {bad}")));
        }
        Ok(Self { kind, scores })
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        PrimitiveLabel::from_name(self.kind, label).map(|l| self.scores[l.index()])
    }
}

/// Categorical distribution over a kind's candidates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LabelDistribution {
    pub kind: PrimitiveKind,
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl LabelDistribution {
    /// Direct construction from probabilities (parse-mode synthesis).
    pub fn from_probs(kind: PrimitiveKind, probs: Vec<f64>, temperature: f64) -> Result<Self> {
        if probs.len() != kind.cardinality() {
            return Err(TessError::InvalidArgument(format!(
                "{kind:?} expects {} probabilities, got {}",
                kind.cardinality(),
                probs.len()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p <= 0.0 || *p >= 1.0) {
            return Err(TessError::InvalidArgument(format!(
                "probabilities must lie in (0,1) and sum to 1, got sum {sum}"
            )));
        }
        Ok(Self {
            kind,
            probs,
            temperature,
        })
    }

    pub fn prob(&self, label: PrimitiveLabel) -> f64 {
        self.probs[label.index()]
    }
}

/// Temperature-scaled softmax with max-subtraction.
pub fn temper_softmax(scores: &LabelScores, temperature: f64) -> Result<LabelDistribution> {
    if temperature <= 0.0 {
        return Err(TessError::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let max = scores
        .scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(LabelDistribution {
        kind: scores.kind,
        probs: exps.into_iter().map(|e| e / sum).collect(),
        temperature,
    })
}

/// Argmax label; exact ties go to the earlier candidate in template order.
pub fn predict_label(dist: &LabelDistribution) -> PrimitiveLabel {
    let mut best = 0;
    for (i, p) in dist.probs.iter().enumerate() {
        if *p > dist.probs[best] {
            best = i;
        }
    }
    PrimitiveLabel::new(dist.kind, best).expect("distribution support matches candidates")
}

/// Log-probability margin between the two most likely candidates.
pub fn margin(dist: &LabelDistribution) -> f64 {
    let mut top1 = f64::NEG_INFINITY;
    let mut top2 = f64::NEG_INFINITY;
    for &p in &dist.probs {
        if p > top1 {
            top2 = top1;
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    if top1 == top2 {
        0.0
    } else {
        top1.ln() - top2.ln()
    }
}

/// Parse the strict four-line structured response. Keys must each appear
/// exactly once; values are matched case-insensitively against the
/// candidate tables.
pub fn parse_structured_response(text: &str) -> Result<BTreeMap<PrimitiveKind, PrimitiveLabel>> {
    let mut found: BTreeMap<PrimitiveKind, (usize, PrimitiveLabel)> = BTreeMap::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let Some((key, value)) = raw.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let Some(kind) = ALL_KINDS.iter().find(|k| k.line_key() == key).copied() else {
            continue;
        };
        if let Some((first_line, _)) = found.get(&kind) {
            return Err(TessError::ResponseParse {
                line: line_no,
                reason: format!(
                    "duplicate key '{}' (first seen on line {first_line})",
                    kind.line_key()
                ),
                content: raw.to_string(),
            });
        }
        let value = value.trim();
        let Some(label) = PrimitiveLabel::from_name(kind, value) else {
            return Err(TessError::ResponseParse {
                line: line_no,
                reason: format!("out-of-domain value '{value}' for key '{}'", kind.line_key()),
                content: raw.to_string(),
            });
        };
        found.insert(kind, (line_no, label));
    }
    for kind in ALL_KINDS {
        if !found.contains_key(&kind) {
            return Err(TessError::ResponseParse {
                line: text.lines().count(),
                reason: format!("missing key '{}'", kind.line_key()),
                content: text.lines().last().unwrap_or("").to_string(),
            });
        }
    }
    Ok(found.into_iter().map(|(k, (_, l))| (k, l)).collect())
}

/// Render a well-formed structured response from four labels (test and mock
/// support; inverse of [`parse_structured_response`]).
pub fn render_structured_response(labels: &BTreeMap<PrimitiveKind, PrimitiveLabel>) -> String {
    let mut out = String::new();
    for kind in ALL_KINDS {
        if let Some(label) = labels.get(&kind) {
            out.push_str(&format!("{}: {}\n", kind.line_key(), label.name()));
        }
    }
    out
}
