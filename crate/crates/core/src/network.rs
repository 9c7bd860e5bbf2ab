//! The classifier `f(x) = W^T h(x) + b`: a stack of affine+ReLU layers that
//! produces the penultimate features `h`, followed by a linear head.
//!
//! Layer weights are stored `fan_in x fan_out` so a batch forward is
//! `X · W + b`, the same orientation as the head's `D x K` matrix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::atomic_write;
use crate::numerics::Matrix;
use crate::rng::{stream, Rng};
use crate::spcp::Threshold;
use crate::trainer::TrainConfig;

/// Weight scale for initialization: entries ~ `N(0, HE_GAIN / fan_in)`.
pub const HE_GAIN: f64 = 2.0;

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    /// Pre-activation for one sample: `sum_k x[k] W[k][j]` then `+ b[j]`.
    fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate() {
                acc += xk * self.weights.get(k, j);
            }
            *o = acc + self.bias[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Layer>,
    /// Whether the last layer is followed by ReLU. Hidden layers always are.
    pub final_relu: bool,
}

impl FeatureExtractor {
    pub fn identity() -> Self {
        Self {
            layers: Vec::new(),
            final_relu: true,
        }
    }

    fn applies_relu(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_relu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `D x K`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn feature_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub head: ClassifierHead,
    /// Truncation threshold frozen at the end of training.
    pub lambda_final: Threshold,
    pub config: Option<TrainConfig>,
    pub seed: u64,
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.extractor
            .layers
            .first()
            .map_or(self.head.feature_dim(), Layer::fan_in)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn num_parameters(&self) -> usize {
        let ext: usize = self
            .extractor
            .layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum();
        ext + self.head.weights.as_slice().len() + self.head.bias.len()
    }

    fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        for (i, layer) in self.extractor.layers.iter().enumerate() {
            if layer.fan_in() != dim || layer.bias.len() != layer.fan_out() || layer.fan_out() == 0 {
                return Err(Error::Schema(format!("extractor layer {i} does not chain")));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("non-finite value in extractor layer {i}")));
            }
            dim = layer.fan_out();
        }
        if self.head.feature_dim() != dim || self.head.feature_dim() == 0 {
            return Err(Error::Schema(format!(
                "head expects D={} but extractor yields {dim}",
                self.head.feature_dim()
            )));
        }
        if self.head.num_classes() == 0 || self.head.bias.len() != self.head.num_classes() {
            return Err(Error::Schema("head bias length must equal K >= 1".into()));
        }
        if !self.head.weights.is_finite() || self.head.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite value in head".into()));
        }
        if let Threshold::Value(l) = self.lambda_final {
            if !l.is_finite() {
                return Err(Error::Schema("non-finite lambda_final".into()));
            }
        }
        Ok(())
    }
}

/// Per-layer inputs and pre-activations of one batch forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` feeds layer `l`; the extractor output is `features`.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub features: Matrix,
}

/// Runs the extractor over a batch, `x_batch` is `n x d`.
pub fn forward_features(model: &Model, x_batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    check_dim("forward_features (input dim)", model.input_dim(), x_batch.cols())?;
    let mut inputs = Vec::with_capacity(model.extractor.layers.len());
    let mut pre_activations = Vec::with_capacity(model.extractor.layers.len());
    let mut current = x_batch.clone();
    for (l, layer) in model.extractor.layers.iter().enumerate() {
        let n = current.rows();
        let mut pre = Matrix::zeros(n, layer.fan_out());
        for i in 0..n {
            layer.affine_into(current.row(i), pre.row_mut(i));
        }
        if !pre.is_finite() {
            return Err(Error::NonFinite(format!("extractor layer {l} pre-activation")));
        }
        let mut act = pre.clone();
        if model.extractor.applies_relu(l) {
            for v in act.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        inputs.push(current);
        pre_activations.push(pre);
        current = act;
    }
    let cache = ForwardCache {
        inputs,
        pre_activations,
        features: current.clone(),
    };
    Ok((current, cache))
}

/// `f_k = sum_d W[d][k] h[d] + b[k]`.
pub fn logits(head: &ClassifierHead, h: &[f64]) -> Result<Vec<f64>> {
    check_dim("logits (feature dim)", head.feature_dim(), h.len())?;
    Ok((0..head.num_classes())
        .map(|k| {
            let mut acc = 0.0;
            for (d, &hd) in h.iter().enumerate() {
                acc += head.weights.get(d, k) * hd;
            }
            acc + head.bias[k]
        })
        .collect())
}

/// Layer widths of a model: input, hidden widths, classes. The head's `D` is
/// the last hidden width, or the input dimension when there are none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub final_relu: bool,
}

/// He-style init: weights `N(0, HE_GAIN / fan_in)`, biases zero.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<Model> {
    if arch.input_dim == 0 || arch.num_classes == 0 || arch.hidden.contains(&0) {
        return Err(Error::InvalidSpec(format!(
            "all layer widths must be >= 1: {arch:?}"
        )));
    }
    let mut rng = Rng::substream(seed, stream::INIT);
    let mut draw = |fan_in: usize, fan_out: usize| {
        let std = (HE_GAIN / fan_in as f64).sqrt();
        Matrix::from_fn(fan_in, fan_out, |_, _| std * rng.normal())
    };
    let mut layers = Vec::with_capacity(arch.hidden.len());
    let mut dim = arch.input_dim;
    for &width in &arch.hidden {
        layers.push(Layer {
            weights: draw(dim, width),
            bias: vec![0.0; width],
        });
        dim = width;
    }
    let head = ClassifierHead {
        weights: draw(dim, arch.num_classes),
        bias: vec![0.0; arch.num_classes],
    };
    Ok(Model {
        extractor: FeatureExtractor {
            layers,
            final_relu: arch.final_relu,
        },
        head,
        lambda_final: Threshold::Disabled,
        config: None,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ExtractorFile {
    final_relu: bool,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: Option<TrainConfig>,
    extractor: ExtractorFile,
    head: HeadFile,
    lambda_final: Option<f64>,
    seed: u64,
}

/// Renders the model file. Floats use the shortest representation that
/// parses back to the same bits.
pub fn to_json(model: &Model) -> Result<String> {
    model.validate()?;
    let file = ModelFile {
        version: MODEL_FILE_VERSION,
        config: model.config.clone(),
        extractor: ExtractorFile {
            final_relu: model.extractor.final_relu,
            layers: model
                .extractor
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.rows(),
                    cols: l.weights.cols(),
                    w: l.weights.as_slice().to_vec(),
                    b: l.bias.clone(),
                })
                .collect(),
        },
        head: HeadFile {
            d: model.head.feature_dim(),
            k: model.head.num_classes(),
            w: model.head.weights.as_slice().to_vec(),
            b: model.head.bias.clone(),
        },
        lambda_final: model.lambda_final.value(),
        seed: model.seed,
    };
    let mut s = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Schema(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<Model> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Schema("missing field `version`".into()))?;
    if version != u64::from(MODEL_FILE_VERSION) {
        return Err(Error::Version {
            found: version as u32,
            expected: MODEL_FILE_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;

    let mut layers = Vec::with_capacity(file.extractor.layers.len());
    for (i, l) in file.extractor.layers.into_iter().enumerate() {
        let weights = Matrix::new(l.rows, l.cols, l.w)
            .map_err(|_| Error::Schema(format!("extractor layer {i}: w is not rows*cols")))?;
        layers.push(Layer { weights, bias: l.b });
    }
    let head_w = Matrix::new(file.head.d, file.head.k, file.head.w)
        .map_err(|_| Error::Schema("head: w is not D*K".into()))?;
    let model = Model {
        extractor: FeatureExtractor {
            layers,
            final_relu: file.extractor.final_relu,
        },
        head: ClassifierHead {
            weights: head_w,
            bias: file.head.b,
        },
        lambda_final: Threshold::from(file.lambda_final),
        config: file.config,
        seed: file.seed,
    };
    model.validate()?;
    Ok(model)
}

pub fn serialize(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, to_json(model)?.as_bytes())
}

pub fn deserialize(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
