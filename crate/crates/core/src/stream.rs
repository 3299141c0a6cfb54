//! Deterministic synthetic task streams and a CSV loader.
//!
//! Every generator is a pure function of the task spec, the shared stream
//! geometry, and a seed. Train and test sets come from separate random
//! streams so they never share a draw.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::parallel::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
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

    pub fn split(&self) -> Split {
        self.split
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

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::from_vec(indices.len(), d, values).expect("row length is dim"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Splits into `n` contiguous chunks whose sizes differ by at most one.
    pub fn chunks(&self, n: usize) -> Vec<Dataset> {
        let n = n.min(self.len()).max(1);
        let (base, extra) = (self.len() / n, self.len() % n);
        let mut start = 0;
        (0..n)
            .map(|k| {
                let size = base + usize::from(k < extra);
                let idx: Vec<usize> = (start..start + size).collect();
                start += size;
                self.select(&idx)
            })
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        for v in self.features.values() {
            hasher.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
    }
}

/// Shape shared by every task of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub input_dim: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate variance of the isotropic class noise.
    pub variance: f64,
    /// Norm of every base class mean.
    pub mean_radius: f64,
    /// Seed for the base class means shared by the whole stream.
    pub mean_seed: u64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_classes: 4,
            train_per_class: 200,
            test_per_class: 100,
            variance: 0.5,
            mean_radius: 3.0,
            mean_seed: 7,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "geometry needs input_dim >= 1 and num_classes >= 2".into(),
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument(
                "geometry needs at least one train and test sample per class".into(),
            ));
        }
        if !(self.variance >= 0.0) || !self.mean_radius.is_finite() {
            return Err(Error::InvalidArgument(
                "variance must be >= 0 and mean_radius finite".into(),
            ));
        }
        Ok(())
    }

    /// Base class means: Gaussian directions scaled to `mean_radius`.
    pub fn base_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mean_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.input_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * self.mean_radius / norm).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskKind {
    /// Class means rotated by `angle` radians in every coordinate plane
    /// `(2i, 2i+1)`; an odd trailing coordinate is left in place.
    RotatedGaussians {
        angle: f64,
        /// Explicit base means; defaults to [`Geometry::base_means`].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        means: Option<Vec<Vec<f64>>>,
    },
    /// The unrotated base task with a seeded feature permutation.
    PermutedFeatures { permutation_seed: u64 },
    /// The unrotated base task with a seeded class relabelling.
    LabelRemap { remap_seed: u64 },
    /// External data: header row, numeric features, final integer label.
    Csv {
        path: String,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Unknown keys inside a task are rejected by the flattened [`TaskKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub seed: u64,
}

/// An ordered task sequence with its shared geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamOrder {
    pub name: String,
    #[serde(default)]
    pub geometry: Geometry,
    pub tasks: Vec<TaskSpec>,
}

impl StreamOrder {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stream {:?} has no tasks",
                self.name
            )));
        }
        self.geometry.validate()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// The default two-task stream: the base task and its quarter-turn rotation.
pub fn interference_stream() -> StreamOrder {
    let rotated = |name: &str, angle: f64, seed: u64| TaskSpec {
        name: name.into(),
        kind: TaskKind::RotatedGaussians { angle, means: None },
        seed,
    };
    StreamOrder {
        name: "interference".into(),
        geometry: Geometry::default(),
        tasks: vec![
            rotated("rot-0", 0.0, 1),
            rotated("rot-90", std::f64::consts::FRAC_PI_2, 2),
        ],
    }
}

/// Rotates `v` by `angle` in each plane `(2i, 2i+1)`.
pub fn rotate_pairs(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    out
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Class means after applying the task's transformation to the inputs.
pub fn task_means(kind: &TaskKind, geometry: &Geometry) -> Result<Vec<Vec<f64>>> {
    match kind {
        TaskKind::RotatedGaussians { angle, means } => {
            let base = match means {
                Some(m) => {
                    if m.len() != geometry.num_classes
                        || m.iter().any(|v| v.len() != geometry.input_dim)
                    {
                        return Err(Error::InvalidArgument(format!(
                            "explicit means must be {} vectors of length {}",
                            geometry.num_classes, geometry.input_dim
                        )));
                    }
                    m.clone()
                }
                None => geometry.base_means(),
            };
            Ok(base.iter().map(|mu| rotate_pairs(mu, *angle)).collect())
        }
        TaskKind::PermutedFeatures { permutation_seed } => {
            let perm = seeded_permutation(geometry.input_dim, *permutation_seed);
            Ok(geometry
                .base_means()
                .iter()
                .map(|mu| perm.iter().map(|&p| mu[p]).collect())
                .collect())
        }
        TaskKind::LabelRemap { remap_seed } => {
            // Class c takes the inputs of base class remap[c].
            let remap = seeded_permutation(geometry.num_classes, *remap_seed);
            let base = geometry.base_means();
            Ok(remap.iter().map(|&src| base[src].clone()).collect())
        }
        TaskKind::Csv { .. } => Err(Error::InvalidArgument(
            "csv tasks have no generative means".into(),
        )),
    }
}

fn sample_split(
    means: &[Vec<f64>],
    geometry: &Geometry,
    per_class: usize,
    seed: u64,
    split: Split,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, geometry.variance.sqrt()).expect("finite std");
    let d = geometry.input_dim;
    let mut order: Vec<(usize, Vec<f64>)> = Vec::with_capacity(means.len() * per_class);
    for (class, mu) in means.iter().enumerate() {
        for _ in 0..per_class {
            order.push((
                class,
                mu.iter().map(|m| m + noise.sample(&mut rng)).collect(),
            ));
        }
    }
    order.shuffle(&mut rng);
    let mut values = Vec::with_capacity(order.len() * d);
    let mut labels = Vec::with_capacity(order.len());
    for (class, x) in order {
        labels.push(class);
        values.extend(x);
    }
    Dataset {
        features: Matrix::from_vec(labels.len(), d, values).expect("rows are input_dim"),
        labels,
        num_classes: geometry.num_classes,
        split,
    }
}

/// Generates the task's `(train, test)` pair.
pub fn generate_task(spec: &TaskSpec, geometry: &Geometry) -> Result<(Dataset, Dataset)> {
    geometry.validate()?;
    if let TaskKind::Csv {
        path,
        test_fraction,
    } = &spec.kind
    {
        return load_csv_task(Path::new(path), *test_fraction, geometry, spec.seed);
    }
    let means = task_means(&spec.kind, geometry)?;
    let train = sample_split(
        &means,
        geometry,
        geometry.train_per_class,
        derive_seed(spec.seed, 0),
        Split::Train,
    );
    let test = sample_split(
        &means,
        geometry,
        geometry.test_per_class,
        derive_seed(spec.seed, 1),
        Split::Test,
    );
    Ok((train, test))
}

/// Lazily generates every task of `order` in sequence.
pub fn make_stream(order: &StreamOrder) -> impl Iterator<Item = Result<(Dataset, Dataset)>> + '_ {
    order
        .tasks
        .iter()
        .map(move |spec| generate_task(spec, &order.geometry))
}

/// Returns the task with its seed mixed with a run seed, so paired runs
/// with different run seeds see independent samples of the same tasks.
pub fn reseeded(spec: &TaskSpec, run_seed: u64) -> TaskSpec {
    TaskSpec {
        seed: derive_seed(run_seed, spec.seed),
        ..spec.clone()
    }
}

/// Reads a CSV dataset: a header row, numeric feature columns, and a final
/// integer label column.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let path_str = path.display().to_string();
    let csv_err = |row: usize, column: usize, message: String| Error::Csv {
        path: path_str.clone(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(0, 0, e.to_string()))?;
    let header_len = reader
        .headers()
        .map_err(|e| csv_err(1, 0, e.to_string()))?
        .len();
    if header_len < 2 {
        return Err(csv_err(
            1,
            0,
            "need at least one feature and a label column".into(),
        ));
    }
    let dim = header_len - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            csv_err(row, 0, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header_len {
            return Err(csv_err(
                row,
                record.len(),
                format!("expected {header_len} columns"),
            ));
        }
        for (col, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(row, col + 1, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(row, col + 1, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        let label_field = record[dim].trim();
        let label: usize = label_field.parse().map_err(|_| {
            csv_err(
                row,
                dim + 1,
                format!("label is not a class index: {label_field:?}"),
            )
        })?;
        if label >= num_classes {
            return Err(csv_err(
                row,
                dim + 1,
                format!("label {label} >= num_classes {num_classes}"),
            ));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(csv_err(1, 0, "no data rows".into()));
    }
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, values)?,
        labels,
        num_classes,
        Split::Train,
    )
}

fn load_csv_task(
    path: &Path,
    test_fraction: f64,
    geometry: &Geometry,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let all = load_csv(path, geometry.num_classes)?;
    if all.dim() != geometry.input_dim {
        return Err(Error::InvalidArgument(format!(
            "{} has {} features, stream expects {}",
            path.display(),
            all.dim(),
            geometry.input_dim
        )));
    }
    let perm = seeded_permutation(all.len(), seed);
    let n_test = ((all.len() as f64) * test_fraction).round().max(1.0) as usize;
    if n_test >= all.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has too few rows to split",
            path.display()
        )));
    }
    let mut train = all.select(&perm[n_test..]);
    let mut test = all.select(&perm[..n_test]);
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}

/// SHA-256 over every dataset of the stream, hex encoded.
pub fn content_hash<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> String {
    let mut hasher = Sha256::new();
    for d in datasets {
        d.hash_into(&mut hasher);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
