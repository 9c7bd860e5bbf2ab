//! Classifier parameter contributions and their truncation.
//!
//! For penultimate features `h` and head weights `W` (`D x K`), weight
//! `W[i][j]` changes logit `j` by exactly `W[i][j] * h[i]` and no other
//! logit. The `D x K` matrix of those products is the contribution matrix;
//! each logit is its column sum plus the bias. Training caps every entry
//! from above at a threshold `lambda`, tracked as an exponential moving
//! average of a per-batch percentile statistic and frozen when training
//! ends.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::{forward_features, logits, Model};
use crate::numerics::{hadamard_broadcast, top_percentile, Matrix};
use crate::rng::Rng;

/// Upper bound applied to contributions. `Disabled` means no truncation at
/// all, which is distinct from any finite value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    #[default]
    Disabled,
    Value(f64),
}

impl Threshold {
    pub fn value(self) -> Option<f64> {
        match self {
            Threshold::Disabled => None,
            Threshold::Value(v) => Some(v),
        }
    }

    pub fn is_enabled(self) -> bool {
        matches!(self, Threshold::Value(_))
    }

    /// `true` when the entry passes through unchanged (`c <= lambda`).
    #[inline]
    pub fn passes(self, c: f64) -> bool {
        match self {
            Threshold::Disabled => true,
            Threshold::Value(l) => c <= l,
        }
    }
}

impl From<Option<f64>> for Threshold {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Threshold::Disabled, Threshold::Value)
    }
}

/// Contributions of every head weight for one sample, `D x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMatrix(Matrix);

impl ContributionMatrix {
    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// `C[i][j] = W[i][j] * h[i]`.
pub fn contribution_matrix(h: &[f64], w: &Matrix) -> Result<ContributionMatrix> {
    Ok(ContributionMatrix(hadamard_broadcast(w, h)?))
}

/// Change in logit `k` when head weight `(i, j)` is zeroed, measured with two
/// full forward passes of `x`. Independent of [`contribution_matrix`].
pub fn contribution_ablation_oracle(
    model: &Model,
    x: &[f64],
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64> {
    let (d, classes) = (model.feature_dim(), model.num_classes());
    if i >= d || j >= classes || k >= classes {
        return Err(Error::out_of_range(
            "ablation index",
            format!("(i={i}, j={j}, k={k}) with D={d}, K={classes}"),
        ));
    }
    let xm = Matrix::new(1, x.len(), x.to_vec())?;
    let full = {
        let (h, _) = forward_features(model, &xm)?;
        logits(&model.head, h.row(0))?[k]
    };
    let mut ablated = model.clone();
    ablated.head.weights.set(i, j, 0.0);
    let (h, _) = forward_features(&ablated, &xm)?;
    let without = logits(&ablated.head, h.row(0))?[k];
    Ok(full - without)
}

/// `min(c, lambda)` entry-wise; identity when disabled.
pub fn truncate(c: &ContributionMatrix, threshold: Threshold) -> ContributionMatrix {
    match threshold {
        Threshold::Disabled => c.clone(),
        Threshold::Value(l) => {
            let mut out = c.0.clone();
            for v in out.as_mut_slice() {
                if *v > l {
                    *v = l;
                }
            }
            ContributionMatrix(out)
        }
    }
}

/// `f_k = sum_d c[d][k] + b[k]`; the bias is never truncated.
pub fn spcp_logits(c_trunc: &ContributionMatrix, bias: &[f64]) -> Result<Vec<f64>> {
    let m = &c_trunc.0;
    check_dim("spcp_logits (bias)", m.cols(), bias.len())?;
    Ok((0..m.cols())
        .map(|k| {
            let mut acc = 0.0;
            for d in 0..m.rows() {
                acc += m.get(d, k);
            }
            acc + bias[k]
        })
        .collect())
}

/// Logits through the truncated pathway, computed without materializing
/// the truncated matrix. Bit-identical to `spcp_logits(truncate(C))`.
pub fn truncated_logits(h: &[f64], w: &Matrix, bias: &[f64], threshold: Threshold) -> Result<Vec<f64>> {
    check_dim("truncated_logits (features)", w.rows(), h.len())?;
    check_dim("truncated_logits (bias)", w.cols(), bias.len())?;
    Ok((0..w.cols())
        .map(|k| {
            let mut acc = 0.0;
            for (d, &hd) in h.iter().enumerate() {
                let c = w.get(d, k) * hd;
                acc += if threshold.passes(c) { c } else { threshold.value().unwrap() };
            }
            acc + bias[k]
        })
        .collect())
}

/// `rho = rho_norm * 100 / K`, clamped to `[0, 100]`. Zero disables
/// truncation.
pub fn rho_from_norm(rho_norm: f64, num_classes: usize) -> Result<f64> {
    if !rho_norm.is_finite() || rho_norm < 0.0 {
        return Err(Error::out_of_range("rho_norm", format!("{rho_norm} must be >= 0")));
    }
    if num_classes == 0 {
        return Err(Error::out_of_range("K", "must be >= 1"));
    }
    Ok((rho_norm * 100.0 / num_classes as f64).clamp(0.0, 100.0))
}

/// How many batch samples feed the threshold statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SamplePerBatch {
    #[default]
    All,
    Count(usize),
}

impl fmt::Display for SamplePerBatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplePerBatch::All => f.write_str("all"),
            SamplePerBatch::Count(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for SamplePerBatch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "all" => Ok(SamplePerBatch::All),
            other => match other.parse::<usize>() {
                Ok(n) if n > 0 => Ok(SamplePerBatch::Count(n)),
                _ => Err(format!("sample_per_batch must be \"all\" or a positive count, got {s:?}")),
            },
        }
    }
}

impl From<SamplePerBatch> for String {
    fn from(v: SamplePerBatch) -> Self {
        v.to_string()
    }
}

impl TryFrom<String> for SamplePerBatch {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcpConfig {
    /// Class-count-normalized percentile; `rho = rho_norm * 100 / K`.
    pub rho_norm: f64,
    pub beta: f64,
    pub lambda0: f64,
    pub sample_per_batch: SamplePerBatch,
    pub truncate_train: bool,
    pub truncate_infer: bool,
}

impl Default for SpcpConfig {
    fn default() -> Self {
        Self {
            rho_norm: 0.0,
            beta: 0.999,
            lambda0: 1000.0,
            sample_per_batch: SamplePerBatch::All,
            truncate_train: true,
            truncate_infer: true,
        }
    }
}

impl SpcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::out_of_range("beta", format!("{} not in [0, 1]", self.beta)));
        }
        if !self.lambda0.is_finite() {
            return Err(Error::out_of_range("lambda0", "must be finite"));
        }
        rho_from_norm(self.rho_norm, 1).map(|_| ())
    }

    pub fn is_enabled(&self) -> bool {
        self.rho_norm > 0.0
    }
}

/// EMA state of the truncation threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub lambda: f64,
    pub beta: f64,
    /// Percent in `[0, 100]`; zero disables truncation.
    pub rho: f64,
    pub sample_per_batch: SamplePerBatch,
    pub step: u64,
}

impl ThresholdState {
    pub fn new(config: &SpcpConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lambda: config.lambda0,
            beta: config.beta,
            rho: rho_from_norm(config.rho_norm, num_classes)?,
            sample_per_batch: config.sample_per_batch,
            step: 0,
        })
    }

    pub fn is_enabled(&self) -> bool {
        self.rho > 0.0
    }

    pub fn threshold(&self) -> Threshold {
        if self.is_enabled() {
            Threshold::Value(self.lambda)
        } else {
            Threshold::Disabled
        }
    }
}

/// `lambda' = beta * lambda + (1 - beta) * stat`.
pub fn ema_update(state: &ThresholdState, stat: f64) -> Result<ThresholdState> {
    if !stat.is_finite() {
        return Err(Error::NonFinite(format!("threshold statistic at step {}", state.step)));
    }
    Ok(ThresholdState {
        lambda: state.beta * state.lambda + (1.0 - state.beta) * stat,
        step: state.step + 1,
        ..state.clone()
    })
}

/// Mean over (a subsample of) the batch of each sample's top-`rho`
/// percentile of its raw contribution matrix.
///
/// With `SamplePerBatch::Count(m)`, `min(m, n)` rows are drawn uniformly
/// without replacement; `All` uses every row and leaves `rng` untouched.
pub fn batch_threshold_stat(
    h_batch: &Matrix,
    w: &Matrix,
    rho: f64,
    sample_per_batch: SamplePerBatch,
    rng: &mut Rng,
) -> Result<f64> {
    let n = h_batch.rows();
    if n == 0 {
        return Err(Error::EmptyInput("batch_threshold_stat"));
    }
    let rows: Vec<usize> = match sample_per_batch {
        SamplePerBatch::All => (0..n).collect(),
        SamplePerBatch::Count(m) if m >= n => (0..n).collect(),
        SamplePerBatch::Count(m) => rng.sample_indices(n, m),
    };
    let mut acc = 0.0;
    for &i in &rows {
        let c = contribution_matrix(h_batch.row(i), w)?;
        acc += top_percentile(c.values().as_slice(), rho)?;
    }
    Ok(acc / rows.len() as f64)
}
