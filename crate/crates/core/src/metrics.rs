//! Detection metrics: AUROC, FPR at a fixed TPR, and classification accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::nearest_rank;

fn non_empty(name: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput(name));
    }
    if v.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("{name} contains NaN")));
    }
    Ok(())
}

/// Probability that a random ID score beats a random OOD score, ties counted
/// as one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    non_empty("id_scores", id_scores)?;
    non_empty("ood_scores", ood_scores)?;
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u128 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// The `ceil(level * n)`-th largest ID score.
pub fn choose_tau(id_scores: &[f64], level: f64) -> Result<f64> {
    non_empty("id_scores", id_scores)?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::out_of_range("level", format!("{level} not in (0, 1]")));
    }
    let r = nearest_rank(level, id_scores.len());
    let mut v = id_scores.to_vec();
    let (_, tau, _) = v.select_nth_unstable_by(r - 1, |a, b| b.total_cmp(a));
    Ok(*tau)
}

/// Fraction of OOD scores at or above the threshold that keeps `level` of
/// the ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], level: f64) -> Result<f64> {
    non_empty("ood_scores", ood_scores)?;
    let tau = choose_tau(id_scores, level)?;
    let hits = ood_scores.iter().filter(|&&s| s >= tau).count();
    Ok(hits as f64 / ood_scores.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_dim("accuracy (predictions vs labels)", truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodGroup {
    Near,
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub name: String,
    pub auroc: f64,
    pub fpr95: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group: Option<OodGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub auroc: f64,
    pub fpr95: f64,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Groups {
    pub near: Option<GroupMean>,
    pub far: Option<GroupMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_acc: f64,
    pub score_fn: String,
    pub pathway: String,
    pub lambda: Option<f64>,
    pub ood: Vec<OodResult>,
    pub groups: Groups,
    /// Effective configuration of the run that produced the report.
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Recomputes group means from the per-set results.
    pub fn fill_groups(&mut self) {
        let mean_of = |g: OodGroup| {
            let members: Vec<&OodResult> = self.ood.iter().filter(|r| r.group == Some(g)).collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len() as f64;
            Some(GroupMean {
                auroc: members.iter().map(|r| r.auroc).sum::<f64>() / n,
                fpr95: members.iter().map(|r| r.fpr95).sum::<f64>() / n,
                members: members.iter().map(|r| r.name.clone()).collect(),
            })
        };
        self.groups = Groups {
            near: mean_of(OodGroup::Near),
            far: mean_of(OodGroup::Far),
        };
    }
}
