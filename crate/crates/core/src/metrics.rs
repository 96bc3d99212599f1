//! AUC and log loss.

use std::fmt;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::parallel::{self, Parallelism};
use crate::params::ParameterSet;
use crate::scoring::{score, score_batch};

const LOGLOSS_CLAMP: f64 = 1e-12;

/// Binary cross-entropy with `p` clamped to `[1e-12, 1 − 1e-12]`.
pub fn logloss(p: f64, label: u8) -> f64 {
    let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Area under the ROC curve from the rank sum of the positives, with tied
/// scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!("AUC is undefined with {n_pos} positives and {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: the group spans ranks i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Anything that maps an instance to a logit.
pub trait Scorer: Sync {
    fn logit(&self, instance: &Instance) -> Result<f64>;

    fn logits(&self, instances: &[Instance], mode: Parallelism) -> Result<Vec<f64>> {
        parallel::map(instances, mode, |i| self.logit(i)).into_iter().collect()
    }
}

impl Scorer for ParameterSet {
    fn logit(&self, instance: &Instance) -> Result<f64> {
        score(instance, self).map(|s| s.logit)
    }

    fn logits(&self, instances: &[Instance], mode: Parallelism) -> Result<Vec<f64>> {
        Ok(score_batch(instances, self, mode)?.into_iter().map(|s| s.logit).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "auc={:.6}\tlogloss={:.6}\tpositives={}\tnegatives={}",
            self.auc, self.logloss, self.positives, self.negatives
        )
    }
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, instances: &[Instance], mode: Parallelism) -> Result<EvalResult> {
    let logits = scorer.logits(instances, mode)?;
    let labels: Vec<u8> = instances.iter().map(|i| i.label).collect();
    let auc = auc(&logits, &labels)?;
    let total: f64 = logits.iter().zip(&labels).map(|(&z, &y)| logloss(sigmoid(z), y)).sum();
    let positives = labels.iter().filter(|&&y| y == 1).count();
    Ok(EvalResult { auc, logloss: total / instances.len() as f64, positives, negatives: labels.len() - positives })
}
