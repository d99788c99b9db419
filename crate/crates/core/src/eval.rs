//! Accuracy and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedExample;
use crate::error::{Error, Result};
use crate::model::TimModel;
use crate::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Rank,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "rank" => Ok(Task::Rank),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected classify or rank)"
            ))),
        }
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no examples to evaluate"));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Candidates for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedGroup {
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankedGroup {
    /// Relevance flags in ranked order: descending score, ties kept in
    /// input order.
    pub fn ranked_relevance(&self) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        order.into_iter().map(|i| self.relevant[i]).collect()
    }

    pub fn has_relevant(&self) -> bool {
        self.relevant.iter().any(|&r| r)
    }

    /// `None` when no candidate is relevant.
    pub fn average_precision(&self) -> Option<f64> {
        let ranked = self.ranked_relevance();
        let total = ranked.iter().filter(|&&r| r).count();
        if total == 0 {
            return None;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (k, &r) in ranked.iter().enumerate() {
            if r {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        Some(sum / total as f64)
    }

    pub fn reciprocal_rank(&self) -> Option<f64> {
        let ranked = self.ranked_relevance();
        ranked.iter().position(|&r| r).map(|k| 1.0 / (k + 1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub map: f64,
    pub mrr: f64,
    pub n_groups: usize,
    /// Groups without any relevant candidate, left out of both means.
    pub n_groups_skipped: usize,
}

pub fn ranking_metrics(groups: &[RankedGroup]) -> Result<RankingMetrics> {
    for g in groups {
        if g.scores.len() != g.relevant.len() {
            return Err(Error::Shape("scores and relevance differ in length".into()));
        }
        if let Some(&bad) = g.scores.iter().find(|s| s.is_nan()) {
            return Err(Error::NonFinite {
                term: "ranking score",
                step: 0,
                value: bad,
            });
        }
    }
    let scored: Vec<&RankedGroup> = groups.iter().filter(|g| g.has_relevant()).collect();
    if scored.is_empty() {
        return Err(Error::Data("no group has a relevant candidate".into()));
    }
    let n = scored.len() as f64;
    let map = scored.iter().filter_map(|g| g.average_precision()).sum::<f64>() / n;
    let mrr = scored.iter().filter_map(|g| g.reciprocal_rank()).sum::<f64>() / n;
    Ok(RankingMetrics {
        map,
        mrr,
        n_groups: scored.len(),
        n_groups_skipped: groups.len() - scored.len(),
    })
}

/// Groups examples by `group_id` in order of first appearance. Returns the
/// member indices of each group.
pub fn group_indices(examples: &[TokenizedExample]) -> Result<Vec<Vec<usize>>> {
    let mut ids: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut lookup = std::collections::HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let id = ex
            .group_id
            .as_deref()
            .ok_or_else(|| Error::Data(format!("example {} has no group_id, needed for ranking", i + 1)))?;
        let slot = *lookup.entry(id).or_insert_with(|| {
            ids.push(id);
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(i);
    }
    Ok(groups)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    pub n_examples: usize,
    pub n_groups_skipped: usize,
}

/// Class probabilities for every example.
pub fn predict_all(model: &TimModel, store: &ParameterStore, examples: &[TokenizedExample]) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|ex| model.probabilities(store, &ex.tokens_a, &ex.tokens_b))
        .collect()
}

/// Accuracy for classification; MAP and MRR for ranking, where candidates
/// are ordered by the probability of class 1 and relevance means a
/// non-zero label.
pub fn evaluate(
    model: &TimModel,
    store: &ParameterStore,
    examples: &[TokenizedExample],
    task: Task,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to evaluate"));
    }
    let probs = predict_all(model, store, examples)?;
    let mut report = EvalReport {
        n_examples: examples.len(),
        ..EvalReport::default()
    };
    match task {
        Task::Classify => {
            let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
            report.accuracy = Some(accuracy(&predicted, &gold)?);
        }
        Task::Rank => {
            let groups: Vec<RankedGroup> = group_indices(examples)?
                .into_iter()
                .map(|members| RankedGroup {
                    scores: members
                        .iter()
                        .map(|&i| probs[i].get(1).copied().unwrap_or(0.0))
                        .collect(),
                    relevant: members.iter().map(|&i| examples[i].label != 0).collect(),
                })
                .collect();
            let m = ranking_metrics(&groups)?;
            report.map = Some(m.map);
            report.mrr = Some(m.mrr);
            report.n_groups_skipped = m.n_groups_skipped;
        }
    }
    Ok(report)
}
