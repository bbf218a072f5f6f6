//! Answer normalization and per-member correctness scores.
//!
//! Open questions are scored by token-level multiset recall against the gold
//! answer; closed questions by matching the first normalized token to
//! `yes`/`no`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnswerType, PerturbationLevel, Prediction, QuestionCluster};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("gold answer is empty after normalization")]
    EmptyGold,
    #[error("closed gold answer must be `yes` or `no`, found `{0}`")]
    NotYesNo(String),
    #[error("predictions reference unknown cluster members: {}", .0.join(", "))]
    UnknownReferences(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedAnswer {
    pub tokens: Vec<String>,
}

impl NormalizedAnswer {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Lowercases, strips punctuation, splits on whitespace and drops English articles.
pub fn normalize(text: &str) -> NormalizedAnswer {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    let tokens = cleaned
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_owned)
        .collect();
    NormalizedAnswer { tokens }
}

/// `|gold ∩ pred| / |gold|` with multiset counting.
pub fn token_recall(gold: &NormalizedAnswer, pred: &NormalizedAnswer) -> Result<f64, ScoringError> {
    if gold.is_empty() {
        return Err(ScoringError::EmptyGold);
    }
    let mut available: HashMap<&str, usize> = HashMap::new();
    for t in &pred.tokens {
        *available.entry(t.as_str()).or_default() += 1;
    }
    let mut hits = 0usize;
    for t in &gold.tokens {
        if let Some(n) = available.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / gold.tokens.len() as f64)
}

pub fn closed_accuracy(gold: &str, pred: &str) -> Result<f64, ScoringError> {
    let gold_norm = normalize(gold);
    let gold_token = match gold_norm.tokens.as_slice() {
        [t] if t == "yes" || t == "no" => t,
        _ => return Err(ScoringError::NotYesNo(gold.to_owned())),
    };
    let pred_norm = normalize(pred);
    Ok(match pred_norm.tokens.first() {
        Some(t) if t == gold_token => 1.0,
        _ => 0.0,
    })
}

/// Score one answer under the rule for its answer type.
pub fn score_answer(answer_type: AnswerType, gold: &str, pred: &str) -> Result<f64, ScoringError> {
    match answer_type {
        AnswerType::Open => token_recall(&normalize(gold), &normalize(pred)),
        AnswerType::Closed => closed_accuracy(gold, pred),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub cluster_id: String,
    pub level: PerturbationLevel,
    pub score: f64,
}

/// Cluster member with no prediction for the scored model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MissingMember {
    pub cluster_id: String,
    pub level: PerturbationLevel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoringOutcome {
    /// Ordered by cluster file order, then member order.
    pub scores: Vec<MemberScore>,
    pub missing: Vec<MissingMember>,
}

/// Scores every prediction of `model_id` against its cluster member.
///
/// Predictions for other models are ignored. Members without a prediction
/// are listed in `missing`; they are never imputed.
pub fn score_predictions(
    clusters: &[QuestionCluster],
    predictions: &[Prediction],
    model_id: &str,
) -> Result<ScoringOutcome, ScoringError> {
    let known: BTreeSet<(&str, PerturbationLevel)> = clusters
        .iter()
        .flat_map(|c| c.members.iter().map(move |m| (c.cluster_id.as_str(), m.level)))
        .collect();

    let mut by_key: HashMap<(&str, PerturbationLevel), &Prediction> = HashMap::new();
    let mut offenders = Vec::new();
    for p in predictions.iter().filter(|p| p.model_id == model_id) {
        let key = (p.cluster_id.as_str(), p.level);
        if known.contains(&key) {
            by_key.insert(key, p);
        } else {
            offenders.push(format!("{}/{}", p.cluster_id, p.level));
        }
    }
    if !offenders.is_empty() {
        return Err(ScoringError::UnknownReferences(offenders));
    }

    let mut outcome = ScoringOutcome::default();
    for c in clusters {
        for m in &c.members {
            match by_key.get(&(c.cluster_id.as_str(), m.level)) {
                Some(p) => outcome.scores.push(MemberScore {
                    cluster_id: c.cluster_id.clone(),
                    level: m.level,
                    score: score_answer(c.answer_type, &m.gold_answer, &p.answer_text)?,
                }),
                None => outcome.missing.push(MissingMember {
                    cluster_id: c.cluster_id.clone(),
                    level: m.level,
                }),
            }
        }
    }
    Ok(outcome)
}
