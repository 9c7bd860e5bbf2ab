//! Synthetic in-distribution / OOD generators, stratified splits and the CSV
//! exchange format.
//!
//! Labeled CSV: header `label,f0,...,f{d-1}`, one integer label then `d`
//! floats per row. Unlabeled CSV: header `f0,...,f{d-1}`. Floats are written
//! with 17 significant digits and LF line endings.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, fmt_f64};
use crate::numerics::Matrix;
use crate::rng::Rng;

/// Samples with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyInput("LabeledSet"));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                context: "LabeledSet labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::out_of_range(
                "label",
                format!("{bad} not in [0, {num_classes})"),
            ));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.select_rows(indices), labels, self.num_classes)
    }

    /// Largest Euclidean norm over the samples.
    pub fn radius(&self) -> f64 {
        (0..self.len())
            .map(|i| self.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Samples without labels, tagged with a set name such as `far`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub features: Matrix,
    pub name: String,
}

impl UnlabeledSet {
    pub fn new(features: Matrix, name: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyInput("UnlabeledSet"));
        }
        Ok(Self {
            features,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// `num_classes x dim`
    pub means: Matrix,
    pub sigma: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Class means drawn i.i.d. from `N(0, mean_scale^2)` on the data
    /// substream of `seed`.
    pub fn with_random_means(
        num_classes: usize,
        dim: usize,
        mean_scale: f64,
        sigma: f64,
        n_per_class: usize,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::substream(seed, crate::rng::stream::DATA);
        let means = Matrix::from_fn(num_classes, dim, |_, _| mean_scale * rng.normal());
        Self {
            num_classes,
            dim,
            means,
            sigma,
            n_per_class,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::InvalidSpec("num_classes and dim must be >= 1".into()));
        }
        if self.means.rows() != self.num_classes || self.means.cols() != self.dim {
            return Err(Error::InvalidSpec(format!(
                "means must be {}x{}, got {}x{}",
                self.num_classes,
                self.dim,
                self.means.rows(),
                self.means.cols()
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.n_per_class == 0 {
            return Err(Error::InvalidSpec("n_per_class must be > 0".into()));
        }
        if !self.means.is_finite() {
            return Err(Error::InvalidSpec("non-finite class mean".into()));
        }
        Ok(())
    }
}

/// `n_per_class` samples around each mean, class by class.
pub fn gen_blobs(blobs: &BlobSpec) -> Result<LabeledSet> {
    blobs.validate()?;
    let mut rng = Rng::new(blobs.seed);
    let n = blobs.num_classes * blobs.n_per_class;
    let mut data = Vec::with_capacity(n * blobs.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..blobs.num_classes {
        let mean = blobs.means.row(k);
        for _ in 0..blobs.n_per_class {
            data.extend(mean.iter().map(|m| m + blobs.sigma * rng.normal()));
            labels.push(k);
        }
    }
    LabeledSet::new(Matrix::new(n, blobs.dim, data)?, labels, blobs.num_classes)
}

/// Gaussian samples centered on the pairwise midpoints of the class means,
/// cycling through the pairs `(a, b)`, `a < b`, in lexicographic order.
pub fn gen_near_ood(blobs: &BlobSpec, n: usize, seed: u64) -> Result<UnlabeledSet> {
    blobs.validate()?;
    if blobs.num_classes < 2 {
        return Err(Error::InvalidSpec("near-OOD needs at least 2 classes".into()));
    }
    if n == 0 {
        return Err(Error::InvalidSpec("requested 0 near-OOD samples".into()));
    }
    let mut centers = Vec::new();
    for a in 0..blobs.num_classes {
        for b in a + 1..blobs.num_classes {
            let mid: Vec<f64> = blobs
                .means
                .row(a)
                .iter()
                .zip(blobs.means.row(b))
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            centers.push(mid);
        }
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * blobs.dim);
    for i in 0..n {
        let c = &centers[i % centers.len()];
        data.extend(c.iter().map(|m| m + blobs.sigma * rng.normal()));
    }
    UnlabeledSet::new(Matrix::new(n, blobs.dim, data)?, "near")
}

/// Uniform samples on `[-halfwidth, halfwidth]^d` with the closed ball of
/// radius `id_radius` removed, by rejection.
pub fn gen_far_ood(
    d: usize,
    n: usize,
    halfwidth: f64,
    id_radius: f64,
    seed: u64,
) -> Result<UnlabeledSet> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidSpec(format!(
            "far-OOD needs d, n > 0 (got d={d}, n={n})"
        )));
    }
    if !(halfwidth > 0.0 && id_radius >= 0.0 && id_radius < halfwidth * (d as f64).sqrt()) {
        return Err(Error::InvalidSpec(format!(
            "the ID ball of radius {id_radius} contains the whole box [-{halfwidth}, {halfwidth}]^{d}"
        )));
    }
    const MIN_TRIALS: usize = 10_000;
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut point = vec![0.0; d];
    let (mut trials, mut accepted) = (0usize, 0usize);
    while accepted < n {
        trials += 1;
        for p in point.iter_mut() {
            *p = rng.uniform(-halfwidth, halfwidth);
        }
        let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > id_radius {
            data.extend_from_slice(&point);
            accepted += 1;
        }
        if trials >= MIN_TRIALS && (accepted as f64) < 0.01 * trials as f64 {
            return Err(Error::InvalidSpec(format!(
                "far-OOD acceptance rate {accepted}/{trials} below 1%: the ID ball of radius \
                 {id_radius} covers almost all of the box [-{halfwidth}, {halfwidth}]^{d}"
            )));
        }
    }
    UnlabeledSet::new(Matrix::new(n, d, data)?, "far")
}

/// i.i.d. standard normal entries.
pub fn gen_gaussian_noise(d: usize, n: usize, seed: u64) -> Result<UnlabeledSet> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidSpec(format!(
            "noise needs d, n > 0 (got d={d}, n={n})"
        )));
    }
    let mut rng = Rng::new(seed);
    let m = Matrix::from_fn(n, d, |_, _| rng.normal());
    UnlabeledSet::new(m, "noise")
}

/// Per-class split: `floor(test_fraction * n_k)` samples of class `k` go to
/// the test side, the rest (including the remainder) to train. Both sides
/// keep the original row order.
pub fn stratified_split(
    set: &LabeledSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledSet, LabeledSet)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::out_of_range(
            "test_fraction",
            format!("{test_fraction} not in (0, 1)"),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut is_test = vec![false; set.len()];
    for k in 0..set.num_classes() {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == k).collect();
        rng.shuffle(&mut idx);
        let n_test = (test_fraction * idx.len() as f64).floor() as usize;
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..set.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..set.len()).filter(|&i| is_test[i]).collect();
    if test.is_empty() || train.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "split with fraction {test_fraction} leaves an empty side"
        )));
    }
    Ok((set.select(&train)?, set.select(&test)?))
}

fn header(d: usize, labeled: bool) -> String {
    let mut cells: Vec<String> = Vec::with_capacity(d + 1);
    if labeled {
        cells.push("label".into());
    }
    cells.extend((0..d).map(|j| format!("f{j}")));
    cells.join(",")
}

fn render_rows(m: &Matrix, labels: Option<&[usize]>) -> String {
    let mut out = header(m.cols(), labels.is_some());
    out.push('\n');
    for i in 0..m.rows() {
        let mut cells: Vec<String> = Vec::with_capacity(m.cols() + 1);
        if let Some(l) = labels {
            cells.push(l[i].to_string());
        }
        cells.extend(m.row(i).iter().map(|&v| fmt_f64(v)));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn save_labeled_csv(set: &LabeledSet, path: &Path) -> Result<()> {
    atomic_write(path, render_rows(&set.features, Some(&set.labels)).as_bytes())
}

pub fn save_unlabeled_csv(set: &UnlabeledSet, path: &Path) -> Result<()> {
    atomic_write(path, render_rows(&set.features, None).as_bytes())
}

struct ParsedCsv {
    labels: Vec<i64>,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn parse_csv(path: &Path, labeled: bool) -> Result<ParsedCsv> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let head_cells: Vec<&str> = head.split(',').map(str::trim).collect();
    let d = head_cells.len() - usize::from(labeled);
    if d == 0 || head != header(d, labeled) {
        let want = if labeled { "label,f0,f1,..." } else { "f0,f1,..." };
        return Err(perr(1, format!("malformed header {head:?}, expected {want}")));
    }

    let mut parsed = ParsedCsv {
        labels: Vec::new(),
        rows: 0,
        cols: d,
        data: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != head_cells.len() {
            return Err(perr(
                lineno,
                format!("expected {} cells, found {}", head_cells.len(), cells.len()),
            ));
        }
        let mut values = cells.iter();
        if labeled {
            let cell = values.next().unwrap().trim();
            let label: i64 = cell
                .parse()
                .map_err(|_| perr(lineno, format!("non-integer label {cell:?}")))?;
            if label < 0 {
                return Err(perr(lineno, format!("label {label} out of range")));
            }
            parsed.labels.push(label);
        }
        for (j, cell) in values.enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("non-numeric value {cell:?} in column f{j}")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite value in column f{j}")));
            }
            parsed.data.push(v);
        }
        parsed.rows += 1;
    }
    if parsed.rows == 0 {
        return Err(perr(2, "no data rows".into()));
    }
    Ok(parsed)
}

/// Reads a labeled CSV. With `num_classes = None` the class count is
/// `max(label) + 1`.
pub fn load_labeled_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledSet> {
    let parsed = parse_csv(path, true)?;
    let max = *parsed.labels.iter().max().unwrap() as usize;
    let k = num_classes.unwrap_or(max + 1);
    if let Some(pos) = parsed.labels.iter().position(|&l| l as usize >= k) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: pos + 2,
            message: format!("label {} out of range [0, {k})", parsed.labels[pos]),
        });
    }
    let labels = parsed.labels.iter().map(|&l| l as usize).collect();
    LabeledSet::new(Matrix::new(parsed.rows, parsed.cols, parsed.data)?, labels, k)
}

/// Reads an unlabeled CSV; the set is named after the file stem.
pub fn load_unlabeled_csv(path: &Path) -> Result<UnlabeledSet> {
    let parsed = parse_csv(path, false)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ood".into());
    UnlabeledSet::new(Matrix::new(parsed.rows, parsed.cols, parsed.data)?, name)
}
