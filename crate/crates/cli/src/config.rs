//! Run configuration: flat `key = value` files with `#` comments and dotted
//! keys. Every key has a default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use oodlab::analysis::Averaging;
use oodlab::scoring::{Pathway, ScoreKind};
use oodlab::spcp::{SamplePerBatch, SpcpConfig};
use oodlab::trainer::{CompositionOrder, LogitNormConfig, TrainConfig};

/// Known keys, their defaults and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for data, initialization, shuffling and threshold sampling"),
    ("out", "out", "output directory"),
    ("model", "", "model file for eval/analyze (default: <out>/model.json)"),
    ("train.lr0", "0.1", "initial learning rate"),
    ("train.epochs", "100", "training epochs"),
    ("train.batch_size", "128", "mini-batch size"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0005", "coupled L2 weight decay"),
    ("train.hidden", "", "comma-separated hidden widths; empty means h(x) = x"),
    ("train.final_relu", "true", "ReLU after the last extractor layer"),
    ("train.score_fn", "energy", "msp | energy"),
    ("logitnorm.enabled", "false", "apply LogitNorm to training logits"),
    ("logitnorm.temperature", "0.04", "LogitNorm temperature"),
    ("logitnorm.order", "truncate_then_normalize", "truncate_then_normalize | normalize_then_truncate"),
    ("spcp.rho_norm", "0", "normalized truncation percentile; 0 disables truncation"),
    ("spcp.beta", "0.999", "threshold EMA factor"),
    ("spcp.lambda0", "1000", "initial threshold"),
    ("spcp.sample_per_batch", "all", "samples per batch for the threshold statistic: all | <n>"),
    ("spcp.truncate_train", "true", "truncate during training"),
    ("spcp.truncate_infer", "true", "truncate at inference"),
    ("data.dir", "data", "directory written by gen and read by default paths"),
    ("data.num_classes", "4", "blob classes"),
    ("data.dim", "8", "input dimension"),
    ("data.n_per_class", "500", "training samples per class"),
    ("data.n_test_per_class", "250", "test samples per class"),
    ("data.mean_scale", "2", "standard deviation of the random class means"),
    ("data.sigma", "1", "per-axis standard deviation of each blob"),
    ("data.n_ood", "1000", "samples per generated OOD set"),
    ("data.far_halfwidth", "3", "far-OOD box half-width as a multiple of the ID radius"),
    ("data.train", "", "ID training CSV (default: <data.dir>/id_train.csv)"),
    ("data.test", "", "ID test CSV (default: <data.dir>/id_test.csv)"),
    ("data.val", "", "optional ID validation CSV"),
    ("data.val_ood", "", "optional OOD validation CSV"),
    ("ood.sets", "near,far,noise", "OOD sets: names under data.dir or CSV paths"),
    ("ood.near", "near", "names averaged into the near group"),
    ("ood.far", "far,noise", "names averaged into the far group"),
    ("eval.pathway", "auto", "auto | vanilla | spcp"),
    ("analyze.pathway", "auto", "auto | vanilla | spcp"),
    ("analyze.averaging", "true_label", "true_label | predicted_label"),
    ("analyze.bins", "50", "score histogram bins"),
    ("sweep.rho_norms", "0,0.1,0.5,1,2,3,5", "rho_norm grid"),
    ("sweep.val_fraction", "0.2", "held-out fraction of the training set when data.val is unset"),
    ("sweep.val_noise", "1000", "Gaussian-noise validation OOD samples when data.val_ood is unset"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// values may be wrapped in double quotes.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
        let k = k.trim();
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        if k.is_empty() {
            bail!("{origin}:{}: empty key", n + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            bail!("unknown config key `{key}`");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (k, v) in parse_text(&text, &path.display().to_string())? {
            self.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
        }
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{assignment}`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key `{key}` is not registered"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.list(key)
            .iter()
            .map(|s| s.parse::<T>().map_err(|e| anyhow!("config key `{key}`: cannot parse `{s}`: {e}")))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    fn path_or(&self, key: &str, fallback: PathBuf) -> PathBuf {
        match self.get(key) {
            "" => fallback,
            p => PathBuf::from(p),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data.dir"))
    }

    pub fn train_path(&self) -> PathBuf {
        self.path_or("data.train", self.data_dir().join("id_train.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.path_or("data.test", self.data_dir().join("id_test.csv"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.path_or("model", self.out_dir().join("model.json"))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        match self.get(key) {
            "" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    /// OOD set files: bare names resolve to `<data.dir>/<name>.csv`.
    pub fn ood_paths(&self) -> Vec<PathBuf> {
        self.list("ood.sets")
            .into_iter()
            .map(|s| {
                if s.ends_with(".csv") || s.contains('/') {
                    PathBuf::from(s)
                } else {
                    self.data_dir().join(format!("{s}.csv"))
                }
            })
            .collect()
    }

    pub fn pathway(&self, key: &str) -> Result<Option<Pathway>> {
        match self.get(key) {
            "auto" => Ok(None),
            other => Ok(Some(other.parse::<Pathway>()?)),
        }
    }

    pub fn averaging(&self) -> Result<Averaging> {
        match self.get("analyze.averaging") {
            "true_label" => Ok(Averaging::TrueLabel),
            "predicted_label" => Ok(Averaging::PredictedLabel),
            other => bail!("config key `analyze.averaging`: unknown value `{other}` (true_label|predicted_label)"),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let order = match self.get("logitnorm.order") {
            "truncate_then_normalize" => CompositionOrder::TruncateThenNormalize,
            "normalize_then_truncate" => CompositionOrder::NormalizeThenTruncate,
            other => bail!("config key `logitnorm.order`: unknown value `{other}`"),
        };
        let cfg = TrainConfig {
            lr0: self.parse("train.lr0")?,
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            seed: self.seed()?,
            hidden: self.parse_list("train.hidden")?,
            final_relu: self.parse("train.final_relu")?,
            logitnorm: LogitNormConfig {
                enabled: self.parse("logitnorm.enabled")?,
                temperature: self.parse("logitnorm.temperature")?,
                order,
            },
            spcp: SpcpConfig {
                rho_norm: self.parse("spcp.rho_norm")?,
                beta: self.parse("spcp.beta")?,
                lambda0: self.parse("spcp.lambda0")?,
                sample_per_batch: self.parse::<SamplePerBatch>("spcp.sample_per_batch")?,
                truncate_train: self.parse("spcp.truncate_train")?,
                truncate_infer: self.parse("spcp.truncate_infer")?,
            },
            score_fn: self.parse::<ScoreKind>("train.score_fn")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration in the same `key = value` format it is
    /// read from.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}
