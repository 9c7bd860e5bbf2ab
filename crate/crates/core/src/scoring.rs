//! Post-hoc OOD scores on vanilla or truncated logits. Higher means more
//! in-distribution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward_features, logits, Model};
use crate::numerics::{argmax, logsumexp, Matrix};
use crate::spcp::{truncated_logits, Threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Msp,
    #[default]
    Energy,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Energy => "energy",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScoreKind::Msp),
            "energy" => Ok(ScoreKind::Energy),
            _ => Err(Error::InvalidSpec(format!("unknown score function {s:?} (msp|energy)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Vanilla,
    Spcp,
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathway::Vanilla => "vanilla",
            Pathway::Spcp => "spcp",
        })
    }
}

impl FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Pathway::Vanilla),
            "spcp" => Ok(Pathway::Spcp),
            _ => Err(Error::InvalidSpec(format!("unknown pathway {s:?} (vanilla|spcp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreFn {
    pub kind: ScoreKind,
    pub pathway: Pathway,
}

/// Largest softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::out_of_range("logits", "msp needs at least 2 classes"));
    }
    let lse = logsumexp(logits)?;
    let max = logits[argmax(logits)];
    Ok((max - lse).exp())
}

/// `logsumexp(logits)`, the negative free energy.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    logsumexp(logits)
}

pub fn score(kind: ScoreKind, logits: &[f64]) -> Result<f64> {
    match kind {
        ScoreKind::Msp => msp_score(logits),
        ScoreKind::Energy => energy_score(logits),
    }
}

/// Logits of one feature vector under `threshold`. A disabled threshold gives
/// the vanilla head. If the model was trained to truncate LogitNorm-scaled
/// contributions, the same scaling is applied before truncating.
pub fn pathway_logits(model: &Model, h: &[f64], threshold: Threshold) -> Result<Vec<f64>> {
    let Some(lambda) = threshold.value() else {
        return logits(&model.head, h);
    };
    let scaled = model.config.as_ref().filter(|c| c.logitnorm.scaled_truncation());
    let Some(cfg) = scaled else {
        return truncated_logits(h, &model.head.weights, &model.head.bias, threshold);
    };
    let vanilla = logits(&model.head, h)?;
    let norm = vanilla.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::NonFinite("logitnorm of a zero-norm logit vector".into()));
    }
    let s = 1.0 / (cfg.logitnorm.temperature * norm);
    let scaled_h: Vec<f64> = h.iter().map(|v| v * s).collect();
    let bias: Vec<f64> = model.head.bias.iter().map(|b| b * s).collect();
    truncated_logits(&scaled_h, &model.head.weights, &bias, Threshold::Value(lambda))
}

fn resolve_threshold(model: &Model, pathway: Pathway) -> Result<Threshold> {
    match pathway {
        Pathway::Vanilla => Ok(Threshold::Disabled),
        Pathway::Spcp if model.lambda_final.is_enabled() => Ok(model.lambda_final),
        Pathway::Spcp => Err(Error::Pathway(
            "truncated pathway requested but the model has no frozen threshold".into(),
        )),
    }
}

/// Logits of every row of `x_batch` through the chosen pathway.
pub fn logits_batch(model: &Model, pathway: Pathway, x_batch: &Matrix) -> Result<Matrix> {
    let threshold = resolve_threshold(model, pathway)?;
    let (h, _) = forward_features(model, x_batch)?;
    let mut out = Matrix::zeros(h.rows(), model.num_classes());
    for s in 0..h.rows() {
        let l = pathway_logits(model, h.row(s), threshold)?;
        out.row_mut(s).copy_from_slice(&l);
    }
    Ok(out)
}

pub fn score_batch(model: &Model, score_fn: ScoreFn, x_batch: &Matrix) -> Result<Vec<f64>> {
    let l = logits_batch(model, score_fn.pathway, x_batch)?;
    (0..l.rows()).map(|s| score(score_fn.kind, l.row(s))).collect()
}

pub fn predict_batch(model: &Model, pathway: Pathway, x_batch: &Matrix) -> Result<Vec<usize>> {
    let l = logits_batch(model, pathway, x_batch)?;
    Ok((0..l.rows()).map(|s| argmax(l.row(s))).collect())
}

/// In-distribution iff the score is strictly above `tau`.
pub fn detect(score: f64, tau: f64) -> bool {
    score > tau
}
