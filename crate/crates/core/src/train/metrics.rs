use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::batch_logloss;

/// Area under the ROC curve by the rank-sum statistic with average ranks
/// for tied scores.
pub fn auc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += mean_rank * pos_in_group as f64;
        start = end;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub logloss: f64,
    pub instances: usize,
    pub positive_rate: f64,
}

impl MetricsReport {
    pub fn compute(probs: &[f32], labels: &[u8]) -> Result<Self> {
        let logloss = batch_logloss(probs, labels)?;
        let auc = match auc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let positives = labels.iter().filter(|&&y| y == 1).count();
        Ok(Self {
            auc,
            logloss,
            instances: labels.len(),
            positive_rate: positives as f64 / labels.len() as f64,
        })
    }
}
