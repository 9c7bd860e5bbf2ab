//! Contribution-pattern statistics and plot-ready exports.
//!
//! Concentration is measured on positive parts `max(c, 0)` of the per-class
//! mean contribution vectors: large positive contributions drive
//! overconfident logits, and negative entries would make the Gini
//! coefficient meaningless.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSet;
use crate::error::{check_dim, Error, Result};
use crate::io::{atomic_write, fmt_f64};
use crate::network::{forward_features, Model};
use crate::numerics::{argmax, Matrix};
use crate::scoring::{pathway_logits, Pathway};
use crate::spcp::{contribution_matrix, truncate, Threshold};

/// Which samples feed each class column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    TrueLabel,
    PredictedLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanContribution {
    /// D x K; column k is the mean of column k of `C(x)` over the samples
    /// assigned to class k. Zero for absent classes.
    pub matrix: Matrix,
    /// `present[k]` is false when no sample was assigned to class k.
    pub present: Vec<bool>,
}

fn pathway_threshold(model: &Model, pathway: Pathway) -> Result<Threshold> {
    match pathway {
        Pathway::Vanilla => Ok(Threshold::Disabled),
        Pathway::Spcp if model.lambda_final.is_enabled() => Ok(model.lambda_final),
        Pathway::Spcp => Err(Error::Pathway(
            "truncated pathway requested but the model has no frozen threshold".into(),
        )),
    }
}

pub fn mean_contribution(
    model: &Model,
    set: &LabeledSet,
    pathway: Pathway,
    averaging: Averaging,
) -> Result<MeanContribution> {
    let k = model.num_classes();
    let d = model.feature_dim();
    if set.num_classes() > k {
        return Err(Error::out_of_range(
            "num_classes",
            format!("set has {} classes, model has {k}", set.num_classes()),
        ));
    }
    let threshold = pathway_threshold(model, pathway)?;
    let scaled = model
        .config
        .as_ref()
        .filter(|c| c.logitnorm.scaled_truncation())
        .map(|c| c.logitnorm.temperature);
    let (h, _) = forward_features(model, set.features())?;

    let mut sums = Matrix::zeros(d, k);
    let mut counts = vec![0usize; k];
    for s in 0..set.len() {
        let row = h.row(s);
        let class = match averaging {
            Averaging::TrueLabel => set.labels()[s],
            Averaging::PredictedLabel => argmax(&pathway_logits(model, row, threshold)?),
        };
        let feat: Vec<f64> = match (scaled, threshold.is_enabled()) {
            (Some(t), true) => {
                let f = crate::network::logits(&model.head, row)?;
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / (t * norm)).collect()
            }
            _ => row.to_vec(),
        };
        let c = truncate(&contribution_matrix(&feat, &model.head.weights)?, threshold);
        for i in 0..d {
            let cur = sums.get(i, class);
            sums.set(i, class, cur + c.values().get(i, class));
        }
        counts[class] += 1;
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            for i in 0..d {
                sums.set(i, j, sums.get(i, j) / n as f64);
            }
        }
    }
    Ok(MeanContribution {
        matrix: sums,
        present: counts.iter().map(|&n| n > 0).collect(),
    })
}

/// Gini coefficient `sum |x_i - x_j| / (2 n sum x)` of a non-negative vector.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::out_of_range("values", "gini needs finite non-negative entries"));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::out_of_range("values", "gini of an all-zero vector"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    // ascending order: sum_{i<j} (x_j - x_i) = sum_i (2i - n + 1) x_i
    let mut acc = 0.0;
    for (i, x) in v.iter().enumerate() {
        acc += (2.0 * i as f64 - n + 1.0) * x;
    }
    Ok((acc / (n * total)).clamp(0.0, 1.0))
}

/// Smallest prefix of a nonincreasing vector holding `mass` of its total.
pub fn effective_count(sorted_desc: &[f64], mass: f64) -> Result<usize> {
    if sorted_desc.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::out_of_range("values", "effective_count needs nonincreasing input"));
    }
    if sorted_desc.iter().any(|v| *v < 0.0) {
        return Err(Error::out_of_range("values", "effective_count needs non-negative input"));
    }
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::out_of_range("mass", format!("{mass} not in (0, 1]")));
    }
    let total: f64 = sorted_desc.iter().sum();
    if total <= 0.0 {
        return Err(Error::out_of_range("values", "effective_count of an all-zero vector"));
    }
    let target = mass * total;
    let mut acc = 0.0;
    for (i, v) in sorted_desc.iter().enumerate() {
        acc += v;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(sorted_desc.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPattern {
    pub class: usize,
    /// Mean contributions, descending.
    pub sorted: Vec<f64>,
    /// `None` when the column has no positive entry.
    pub gini: Option<f64>,
    pub effective_count_90: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub classes: Vec<ClassPattern>,
    pub mean_gini: Option<f64>,
    pub mean_effective_count_90: Option<f64>,
}

/// Per-class sorted vectors and concentration statistics; absent classes
/// are left out.
pub fn pattern_report(mean: &MeanContribution) -> Result<PatternReport> {
    let m = &mean.matrix;
    check_dim("pattern_report (present flags)", m.cols(), mean.present.len())?;
    let mut classes = Vec::new();
    for k in 0..m.cols() {
        if !mean.present[k] {
            continue;
        }
        let mut sorted: Vec<f64> = (0..m.rows()).map(|i| m.get(i, k)).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let positive: Vec<f64> = sorted.iter().map(|v| v.max(0.0)).collect();
        let has_mass = positive.iter().any(|v| *v > 0.0);
        classes.push(ClassPattern {
            class: k,
            gini: if has_mass { Some(gini(&positive)?) } else { None },
            effective_count_90: if has_mass { Some(effective_count(&positive, 0.9)?) } else { None },
            sorted,
        });
    }
    let ginis: Vec<f64> = classes.iter().filter_map(|c| c.gini).collect();
    let effs: Vec<f64> = classes.iter().filter_map(|c| c.effective_count_90).map(|e| e as f64).collect();
    let mean_of = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(PatternReport {
        mean_gini: mean_of(&ginis),
        mean_effective_count_90: mean_of(&effs),
        classes,
    })
}

pub fn pattern_csv(report: &PatternReport) -> String {
    let mut out = String::from("class,rank,mean_contribution\n");
    for c in &report.classes {
        for (r, v) in c.sorted.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", c.class, r + 1, fmt_f64(*v));
        }
    }
    for c in &report.classes {
        if let Some(g) = c.gini {
            let _ = writeln!(out, "#gini,{},{}", c.class, fmt_f64(g));
        }
    }
    for c in &report.classes {
        if let Some(e) = c.effective_count_90 {
            let _ = writeln!(out, "#eff90,{},{}", c.class, e);
        }
    }
    out
}

pub fn export_pattern_csv(report: &PatternReport, path: &Path) -> Result<()> {
    atomic_write(path, pattern_csv(report).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
}

/// Equal-width histogram of both score sets after min-max normalization over
/// their union. The maximum lands in the last bin.
pub fn score_histogram(id_scores: &[f64], ood_scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::out_of_range("bins", format!("{bins} must be >= 2")));
    }
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let all = id_scores.iter().chain(ood_scores);
    if all.clone().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("histogram scores".into()));
    }
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bin_of = |s: f64| {
        if span == 0.0 {
            return 0;
        }
        let u = (s - lo) / span;
        ((u * bins as f64) as usize).min(bins - 1)
    };
    let mut id_counts = vec![0; bins];
    let mut ood_counts = vec![0; bins];
    for &s in id_scores {
        id_counts[bin_of(s)] += 1;
    }
    for &s in ood_scores {
        ood_counts[bin_of(s)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        id_counts,
        ood_counts,
    })
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,id_count,ood_count\n");
    for b in 0..h.id_counts.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(h.edges[b]),
            fmt_f64(h.edges[b + 1]),
            h.id_counts[b],
            h.ood_counts[b]
        );
    }
    out
}

pub fn export_score_histogram(id_scores: &[f64], ood_scores: &[f64], bins: usize, path: &Path) -> Result<()> {
    let h = score_histogram(id_scores, ood_scores, bins)?;
    atomic_write(path, histogram_csv(&h).as_bytes())
}
