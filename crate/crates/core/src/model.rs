//! Frozen dense networks with trainable low-rank adapters.
//!
//! A layer computes `act(W·h + A·(B·h) + b)`. The frozen weights `W` and
//! biases never change; only the adapter factors are trained. Batches are
//! processed row-wise: inputs are `n × d_in` matrices.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{LowRankFactors, Matrix};
use crate::regularizer::{penalty, penalty_grad_factors, LayerId, PastAccumulator};
use crate::stream::Dataset;

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenModel {
    layers: Vec<Layer>,
    num_classes: usize,
}

impl FrozenModel {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidArgument(
                "model needs at least one layer".into(),
            ));
        };
        if last.weight.rows() != num_classes {
            return Err(Error::InvalidArgument(format!(
                "final layer emits {} values but num_classes is {num_classes}",
                last.weight.rows()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: bias length {} != {} outputs",
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            if i > 0 && layers[i - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::Shape {
                    op: "layer_chain",
                    lhs: layers[i - 1].weight.shape(),
                    rhs: layer.weight.shape(),
                });
            }
        }
        Ok(Self {
            layers,
            num_classes,
        })
    }

    /// Random frozen network `dims[0] → … → dims[last]` with
    /// `N(0, 1/fan_in)` weights and zero biases. Hidden layers use
    /// `hidden`; the output layer is linear.
    pub fn random(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output dimensions".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)),
                    bias: vec![0.0; fan_out],
                    activation: if i + 2 == dims.len() {
                        Activation::Identity
                    } else {
                        hidden
                    },
                }
            })
            .collect();
        Self::new(layers, dims[dims.len() - 1])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    /// Returns a copy whose weights include `W_past` for every accumulated
    /// layer. `self` is left untouched.
    pub fn merged(&self, past: &PastAccumulator) -> Result<FrozenModel> {
        let mut layers = self.layers.clone();
        for (id, w_past) in past.layers() {
            let layer = layers.get_mut(id).ok_or_else(|| {
                Error::InvalidArgument(format!("accumulator has unknown layer {id}"))
            })?;
            layer.weight = layer.weight.add(w_past)?;
        }
        Ok(FrozenModel {
            layers,
            num_classes: self.num_classes,
        })
    }

    /// Folds an adapter set into the weights.
    pub fn with_adapters(&self, adapters: &AdapterSet) -> Result<FrozenModel> {
        let mut layers = self.layers.clone();
        for (&id, f) in &adapters.entries {
            layers[id].weight = layers[id].weight.add(&f.delta())?;
        }
        Ok(FrozenModel {
            layers,
            num_classes: self.num_classes,
        })
    }
}

/// One factor pair per adapted layer, all sharing a rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    entries: BTreeMap<LayerId, LowRankFactors>,
    rank: usize,
}

impl AdapterSet {
    /// Fresh adapters: `A ~ N(0, 0.02²)`, `B = 0`, so `ΔW = 0` at start.
    pub fn init(model: &FrozenModel, layers: &[LayerId], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("finite std");
        let mut entries = BTreeMap::new();
        for &id in layers {
            let layer = model.layers.get(id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "adapted layer {id} does not exist ({} layers)",
                    model.layers.len()
                ))
            })?;
            let (d, k) = layer.weight.shape();
            let a = Matrix::from_fn(d, rank, |_, _| normal.sample(&mut rng));
            entries.insert(id, LowRankFactors::new(a, Matrix::zeros(rank, k))?);
        }
        Ok(Self { entries, rank })
    }

    /// Builds a set from explicit factors, checking them against the model.
    pub fn from_entries(
        model: &FrozenModel,
        entries: BTreeMap<LayerId, LowRankFactors>,
    ) -> Result<Self> {
        let rank = entries.values().next().map_or(0, LowRankFactors::rank);
        for (&id, f) in &entries {
            let layer = model
                .layers
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown layer {id}")))?;
            if f.update_shape() != layer.weight.shape() {
                return Err(Error::Shape {
                    op: "adapter_entry",
                    lhs: f.update_shape(),
                    rhs: layer.weight.shape(),
                });
            }
            if f.rank() != rank {
                return Err(Error::InvalidArgument(
                    "adapter ranks differ across layers".into(),
                ));
            }
        }
        Ok(Self { entries, rank })
    }

    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
            rank: 0,
        }
    }

    pub fn get(&self, layer: LayerId) -> Option<&LowRankFactors> {
        self.entries.get(&layer)
    }

    pub fn entries(&self) -> &BTreeMap<LayerId, LowRankFactors> {
        &self.entries
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Per-layer `ΔW = A·B`.
    pub fn deltas(&self) -> BTreeMap<LayerId, Matrix> {
        self.entries
            .iter()
            .map(|(&id, f)| (id, f.delta()))
            .collect()
    }
}

struct LayerCache {
    input: Matrix,
    pre: Matrix,
    out: Matrix,
}

fn layer_forward(
    layer: &Layer,
    adapter: Option<&LowRankFactors>,
    h: &Matrix,
) -> Result<LayerCache> {
    let mut z = h.matmul_t(&layer.weight)?;
    if let Some(f) = adapter {
        // (A·(B·h))ᵀ for each row h: (h·Bᵀ)·Aᵀ
        let low = h.matmul_t(f.b())?.matmul_t(f.a())?;
        z = z.add(&low)?;
    }
    let (n, out) = z.shape();
    let pre = Matrix::from_fn(n, out, |i, j| z.get(i, j) + layer.bias[j]);
    let act = layer.activation;
    let post = pre.map(|v| act.apply(v));
    Ok(LayerCache {
        input: h.clone(),
        pre,
        out: post,
    })
}

fn forward_cached(
    model: &FrozenModel,
    adapters: &AdapterSet,
    x: &Matrix,
) -> Result<Vec<LayerCache>> {
    if x.cols() != model.input_dim() {
        return Err(Error::Shape {
            op: "adapted_forward",
            lhs: model.layers[0].weight.shape(),
            rhs: x.shape(),
        });
    }
    let mut caches: Vec<LayerCache> = Vec::with_capacity(model.layers.len());
    for (id, layer) in model.layers.iter().enumerate() {
        let input = caches.last().map_or(x, |c| &c.out);
        let cache = layer_forward(layer, adapters.get(id), input)?;
        caches.push(cache);
    }
    Ok(caches)
}

/// Batched logits, one row per input row.
pub fn forward_batch(model: &FrozenModel, adapters: &AdapterSet, x: &Matrix) -> Result<Matrix> {
    let mut caches = forward_cached(model, adapters, x)?;
    Ok(caches.pop().expect("at least one layer").out)
}

/// Logits for a single input vector.
pub fn adapted_forward(model: &FrozenModel, adapters: &AdapterSet, x: &[f64]) -> Result<Vec<f64>> {
    let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(forward_batch(model, adapters, &row)?.into_values())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_batch(model: &FrozenModel, batch: &Dataset) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.num_classes() != model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "batch has {} classes, model has {}",
            batch.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood under softmax.
pub fn task_loss(model: &FrozenModel, adapters: &AdapterSet, batch: &Dataset) -> Result<f64> {
    check_batch(model, batch)?;
    let logits = forward_batch(model, adapters, batch.features())?;
    Ok(nll_from_logits(&logits, batch.labels()))
}

pub(crate) fn nll_from_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_softmax(logits.row(i))[y])
        .sum();
    total / labels.len() as f64
}

/// Σ over adapted layers of `‖A·B ⊙ W_past‖_F²`; layers absent from the
/// accumulator contribute zero.
pub fn total_penalty(adapters: &AdapterSet, past: &PastAccumulator) -> Result<f64> {
    let mut sum = 0.0;
    for (&id, f) in adapters.entries() {
        if let Some(w_past) = past.get(id) {
            sum += penalty(&f.delta(), w_past)?;
        }
    }
    Ok(sum)
}

/// `task_loss + λ Σ_layers ‖A·B ⊙ W_past‖_F²`
pub fn total_loss(
    model: &FrozenModel,
    adapters: &AdapterSet,
    batch: &Dataset,
    lambda: f64,
    past: &PastAccumulator,
) -> Result<f64> {
    check_lambda(lambda)?;
    let task = task_loss(model, adapters, batch)?;
    if lambda == 0.0 {
        return Ok(task);
    }
    Ok(task + lambda * total_penalty(adapters, past)?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )))
    }
}

/// Gradient with respect to one adapter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads {
    pub a: Matrix,
    pub b: Matrix,
}

pub type Gradients = BTreeMap<LayerId, FactorGrads>;

/// Exact gradient of [`total_loss`] with respect to every adapter factor.
pub fn backward(
    model: &FrozenModel,
    adapters: &AdapterSet,
    batch: &Dataset,
    lambda: f64,
    past: &PastAccumulator,
) -> Result<Gradients> {
    check_lambda(lambda)?;
    check_batch(model, batch)?;
    let caches = forward_cached(model, adapters, batch.features())?;
    let n = batch.len() as f64;
    let logits = &caches.last().expect("at least one layer").out;

    // dL/dlogits = (softmax − onehot) / n
    let mut values = Vec::with_capacity(logits.rows() * logits.cols());
    for (i, &label) in batch.labels().iter().enumerate() {
        values.extend(
            log_softmax(logits.row(i))
                .iter()
                .enumerate()
                .map(|(j, lp)| {
                    let target = if label == j { 1.0 } else { 0.0 };
                    (lp.exp() - target) / n
                }),
        );
    }
    let mut upstream = Matrix::from_vec(logits.rows(), logits.cols(), values)?;

    let mut grads = Gradients::new();
    for (id, (layer, cache)) in model.layers.iter().zip(&caches).enumerate().rev() {
        let act = layer.activation;
        let dz = Matrix::from_fn(upstream.rows(), upstream.cols(), |i, j| {
            upstream.get(i, j) * act.derivative(cache.pre.get(i, j), cache.out.get(i, j))
        });
        let adapter = adapters.get(id);
        if let Some(f) = adapter {
            // dL/dΔW = dZᵀ · H  (out × in)
            let m = dz.t_matmul(&cache.input)?;
            let mut ga = m.matmul_t(f.b())?;
            let mut gb = f.a().t_matmul(&m)?;
            if lambda > 0.0 {
                if let Some(w_past) = past.get(id) {
                    let (pa, pb) = penalty_grad_factors(f, w_past)?;
                    ga = ga.add(&pa.scale(lambda))?;
                    gb = gb.add(&pb.scale(lambda))?;
                }
            }
            grads.insert(id, FactorGrads { a: ga, b: gb });
        }
        if id > 0 {
            // dL/dH = dZ · (W + A·B)
            let mut dh = dz.matmul(&layer.weight)?;
            if let Some(f) = adapter {
                dh = dh.add(&dz.matmul(f.a())?.matmul(f.b())?)?;
            }
            upstream = dh;
        }
    }
    Ok(grads)
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predict(model: &FrozenModel, adapters: &AdapterSet, x: &Matrix) -> Result<Vec<usize>> {
    let logits = forward_batch(model, adapters, x)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(model: &FrozenModel, adapters: &AdapterSet, data: &Dataset) -> Result<f64> {
    check_batch(model, data)?;
    let preds = predict(model, adapters, data.features())?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball coefficient for sgd.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_epsilon: default_adam_eps(),
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: FactorGrads,
    second: FactorGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    settings: OptimizerSettings,
    step_count: u64,
    buffers: BTreeMap<LayerId, Moments>,
}

impl OptimizerState {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            step_count: 0,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }
}

fn zeros_like(g: &FactorGrads) -> FactorGrads {
    FactorGrads {
        a: Matrix::zeros(g.a.rows(), g.a.cols()),
        b: Matrix::zeros(g.b.rows(), g.b.cols()),
    }
}

/// Scalar update applied elementwise to one parameter tensor.
fn update(
    param: &Matrix,
    grad: &Matrix,
    first: &Matrix,
    second: &Matrix,
    s: &OptimizerSettings,
    t: u64,
) -> Result<(Matrix, Matrix, Matrix)> {
    match s.kind {
        OptimizerKind::Sgd => {
            let velocity = first.zip_with(grad, "sgd", |v, g| s.momentum * v + g)?;
            let next = param.zip_with(&velocity, "sgd", |p, v| p - s.learning_rate * v)?;
            Ok((next, velocity, second.clone()))
        }
        OptimizerKind::Adam => {
            let m = first.zip_with(grad, "adam", |m, g| s.beta1 * m + (1.0 - s.beta1) * g)?;
            let v = second.zip_with(grad, "adam", |v, g| s.beta2 * v + (1.0 - s.beta2) * g * g)?;
            let c1 = 1.0 - s.beta1.powi(t as i32);
            let c2 = 1.0 - s.beta2.powi(t as i32);
            let step = m.zip_with(&v, "adam", |m, v| {
                (m / c1) / ((v / c2).sqrt() + s.adam_epsilon)
            })?;
            let next = param.zip_with(&step, "adam", |p, d| p - s.learning_rate * d)?;
            Ok((next, m, v))
        }
    }
}

/// One optimizer update of every adapter factor that has a gradient.
pub fn optimizer_step(
    state: OptimizerState,
    adapters: &AdapterSet,
    grads: &Gradients,
) -> Result<(OptimizerState, AdapterSet)> {
    for (id, g) in grads {
        if !g.a.is_finite() || !g.b.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of layer {id} at step {}",
                state.step_count + 1
            )));
        }
    }
    let OptimizerState {
        settings,
        step_count,
        mut buffers,
    } = state;
    let t = step_count + 1;
    let mut entries = adapters.entries.clone();
    for (&id, g) in grads {
        let f = entries
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unadapted layer {id}")))?;
        let moments = buffers.entry(id).or_insert_with(|| Moments {
            first: zeros_like(g),
            second: zeros_like(g),
        });
        let (a, ma, va) = update(
            f.a(),
            &g.a,
            &moments.first.a,
            &moments.second.a,
            &settings,
            t,
        )?;
        let (b, mb, vb) = update(
            f.b(),
            &g.b,
            &moments.first.b,
            &moments.second.b,
            &settings,
            t,
        )?;
        *moments = Moments {
            first: FactorGrads { a: ma, b: mb },
            second: FactorGrads { a: va, b: vb },
        };
        entries.insert(id, LowRankFactors::new(a, b)?);
    }
    Ok((
        OptimizerState {
            settings,
            step_count: t,
            buffers,
        },
        AdapterSet {
            entries,
            rank: adapters.rank,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Split;
    use rand::Rng;

    fn dataset(rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Dataset {
        Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            labels,
            classes,
            Split::Train,
        )
        .unwrap()
    }

    fn identity_model(n: usize) -> FrozenModel {
        FrozenModel::new(
            vec![Layer {
                weight: Matrix::identity(n),
                bias: vec![0.0; n],
                activation: Activation::Identity,
            }],
            n,
        )
        .unwrap()
    }

    fn random_adapters(model: &FrozenModel, rank: usize, seed: u64) -> AdapterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = model
            .layers()
            .iter()
            .enumerate()
            .map(|(id, l)| {
                let (d, k) = l.weight.shape();
                let a = Matrix::from_fn(d, rank, |_, _| rng.random_range(-0.5..0.5));
                let b = Matrix::from_fn(rank, k, |_, _| rng.random_range(-0.5..0.5));
                (id, LowRankFactors::new(a, b).unwrap())
            })
            .collect();
        AdapterSet::from_entries(model, entries).unwrap()
    }

    #[test]
    fn model_shape_validation() {
        let l = |r, c| Layer {
            weight: Matrix::zeros(r, c),
            bias: vec![0.0; r],
            activation: Activation::Tanh,
        };
        assert!(FrozenModel::new(vec![l(3, 2), l(4, 3)], 4).is_ok());
        assert!(FrozenModel::new(vec![l(3, 2), l(4, 5)], 4).is_err());
        assert!(FrozenModel::new(vec![l(3, 2)], 4).is_err());
        assert!(FrozenModel::new(vec![], 4).is_err());
    }

    #[test]
    fn zero_b_matches_frozen_forward() {
        let model = FrozenModel::random(&[5, 7, 3], Activation::Tanh, 1).unwrap();
        let adapters = AdapterSet::init(&model, &[0, 1], 2, 3).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, 0.0];
        assert_eq!(
            adapted_forward(&model, &adapters, &x).unwrap(),
            adapted_forward(&model, &AdapterSet::empty(), &x).unwrap()
        );
    }

    #[test]
    fn identity_adapter_doubles() {
        let model = identity_model(2);
        let f = LowRankFactors::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let adapters = AdapterSet::from_entries(&model, BTreeMap::from([(0, f)])).unwrap();
        assert_eq!(
            adapted_forward(&model, &adapters, &[1.5, -2.0]).unwrap(),
            vec![3.0, -4.0]
        );
    }

    #[test]
    fn merge_equivalence() {
        let model = FrozenModel::random(&[4, 6, 5, 3], Activation::Tanh, 2).unwrap();
        let adapters = random_adapters(&model, 2, 4);
        let dense = model.with_adapters(&adapters).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = adapted_forward(&model, &adapters, &x).unwrap();
            let b = adapted_forward(&dense, &AdapterSet::empty(), &x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let model = identity_model(3);
        assert!(adapted_forward(&model, &AdapterSet::empty(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_cases() {
        let model = FrozenModel::new(
            vec![Layer {
                weight: Matrix::zeros(4, 2),
                bias: vec![0.0; 4],
                activation: Activation::Identity,
            }],
            4,
        )
        .unwrap();
        let batch = dataset(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], vec![0, 3], 4);
        let loss = task_loss(&model, &AdapterSet::empty(), &batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        // Margin → ∞ sends the loss to 0.
        let confident = identity_model(2);
        let far = dataset(vec![vec![60.0, 0.0]], vec![0], 2);
        assert!(task_loss(&confident, &AdapterSet::empty(), &far).unwrap() < 1e-20);

        // Hand softmax: logits (1, 0) label 0 → ln(1+e^-1); logits (0, 2) label 0 → ln(1+e^2).
        let batch = dataset(vec![vec![1.0, 0.0], vec![0.0, 2.0]], vec![0, 0], 2);
        let expected = 0.5 * ((1.0 + (-1f64).exp()).ln() + (1.0 + 2f64.exp()).ln());
        let got = task_loss(&identity_model(2), &AdapterSet::empty(), &batch).unwrap();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let model = identity_model(2);
        let empty = Dataset::new(Matrix::zeros(0, 2), vec![], 2, Split::Train).unwrap();
        assert!(task_loss(&model, &AdapterSet::empty(), &empty).is_err());
        assert!(Dataset::new(Matrix::zeros(1, 2), vec![2], 2, Split::Train).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let model = identity_model(2);
        let batch = dataset(vec![vec![1.0, 0.5]], vec![1], 2);
        let f = LowRankFactors::new(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let adapters = AdapterSet::from_entries(&model, BTreeMap::from([(0, f)])).unwrap();
        let task = task_loss(&model, &adapters, &batch).unwrap();
        let empty = PastAccumulator::new();
        assert_eq!(
            total_loss(&model, &adapters, &batch, 0.0, &empty).unwrap(),
            task
        );
        assert_eq!(
            total_loss(&model, &adapters, &batch, 5.0, &empty).unwrap(),
            task
        );
        // ΔW = [[1,2],[0,0]], W_past = [[3,0],[0,0]] → penalty 9.
        let past = PastAccumulator::new()
            .accumulate(
                0,
                &Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            )
            .unwrap();
        let total = total_loss(&model, &adapters, &batch, 2.0, &past).unwrap();
        assert!((total - (task + 18.0)).abs() < 1e-12);
        assert!(total_loss(&model, &adapters, &batch, -1.0, &past).is_err());
    }

    fn fd_check(
        model: &FrozenModel,
        adapters: &AdapterSet,
        batch: &Dataset,
        lambda: f64,
        past: &PastAccumulator,
    ) {
        let grads = backward(model, adapters, batch, lambda, past).unwrap();
        let h = 1e-6;
        for (&id, f) in adapters.entries() {
            for which in 0..2 {
                let target = if which == 0 { f.a() } else { f.b() };
                let analytic = if which == 0 {
                    &grads[&id].a
                } else {
                    &grads[&id].b
                };
                for idx in 0..target.values().len() {
                    let eval = |d: f64| {
                        let mut v = target.values().to_vec();
                        v[idx] += d;
                        let m = Matrix::from_vec(target.rows(), target.cols(), v).unwrap();
                        let nf = if which == 0 {
                            LowRankFactors::new(m, f.b().clone()).unwrap()
                        } else {
                            LowRankFactors::new(f.a().clone(), m).unwrap()
                        };
                        let mut e = adapters.entries().clone();
                        e.insert(id, nf);
                        let ad = AdapterSet::from_entries(model, e).unwrap();
                        total_loss(model, &ad, batch, lambda, past).unwrap()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic.values()[idx];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                    assert!(
                        rel < 1e-5,
                        "layer {id} factor {which} idx {idx}: {a} vs {numeric}"
                    );
                }
            }
        }
    }

    fn random_batch(dim: usize, classes: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let labels = (0..n).map(|i| i % classes).collect();
        dataset(rows, labels, classes)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (act, seed) in [
            (Activation::Tanh, 1),
            (Activation::Identity, 2),
            (Activation::Relu, 3),
        ] {
            let model = FrozenModel::random(&[4, 5, 3], act, seed).unwrap();
            let adapters = random_adapters(&model, 2, seed + 10);
            let batch = random_batch(4, 3, 6, seed + 20);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
            let mut past = PastAccumulator::new();
            for (id, l) in model.layers().iter().enumerate() {
                let (r, c) = l.weight.shape();
                past = past
                    .accumulate(
                        id,
                        &Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)),
                    )
                    .unwrap();
            }
            fd_check(&model, &adapters, &batch, 0.0, &past);
            fd_check(&model, &adapters, &batch, 0.7, &past);
        }
    }

    #[test]
    fn lambda_zero_gradients_are_task_only() {
        let model = FrozenModel::random(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let adapters = random_adapters(&model, 1, 6);
        let batch = random_batch(3, 2, 5, 7);
        let past = PastAccumulator::new()
            .accumulate(0, &Matrix::ones(4, 3))
            .unwrap();
        assert_eq!(
            backward(&model, &adapters, &batch, 0.0, &past).unwrap(),
            backward(&model, &adapters, &batch, 0.0, &PastAccumulator::new()).unwrap()
        );
    }

    #[test]
    fn zero_b_gives_zero_grad_a() {
        let model = FrozenModel::random(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let adapters = AdapterSet::init(&model, &[0, 1], 2, 9).unwrap();
        let batch = random_batch(3, 2, 8, 10);
        let grads = backward(&model, &adapters, &batch, 0.0, &PastAccumulator::new()).unwrap();
        for g in grads.values() {
            assert_eq!(g.a.max_abs(), 0.0);
            assert!(g.b.max_abs() > 0.0);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    fn scalar_set(theta: f64) -> (FrozenModel, AdapterSet) {
        let model = identity_model(1);
        let f =
            LowRankFactors::new(Matrix::filled(1, 1, theta), Matrix::filled(1, 1, 1.0)).unwrap();
        let set = AdapterSet::from_entries(&model, BTreeMap::from([(0, f)])).unwrap();
        (model, set)
    }

    fn grad_of(g_a: f64) -> Gradients {
        BTreeMap::from([(
            0,
            FactorGrads {
                a: Matrix::filled(1, 1, g_a),
                b: Matrix::zeros(1, 1),
            },
        )])
    }

    #[test]
    fn sgd_steps() {
        let (_, set) = scalar_set(1.0);
        let zero_lr = OptimizerSettings {
            learning_rate: 0.0,
            ..OptimizerSettings::default()
        };
        let (_, same) = optimizer_step(OptimizerState::new(zero_lr), &set, &grad_of(3.0)).unwrap();
        assert_eq!(same, set);

        // f(θ) = ½θ² has gradient θ.
        let s = OptimizerSettings {
            learning_rate: 0.1,
            ..OptimizerSettings::default()
        };
        let (state, next) = optimizer_step(OptimizerState::new(s), &set, &grad_of(1.0)).unwrap();
        assert!((next.get(0).unwrap().a().get(0, 0) - 0.9).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_two_steps() {
        let (_, set) = scalar_set(1.0);
        let s = OptimizerSettings {
            kind: OptimizerKind::Adam,
            learning_rate: 0.01,
            ..OptimizerSettings::default()
        };
        let g = 0.5;
        let (state, one) = optimizer_step(OptimizerState::new(s), &set, &grad_of(g)).unwrap();
        let (_, two) = optimizer_step(state, &one, &grad_of(g)).unwrap();
        // Hand trace: m1 = 0.05, v1 = 0.00025 → m̂ = 0.5, v̂ = 0.25, step = 0.5/(0.5+1e-8).
        // m2 = 0.095, v2 = 0.00049975 → m̂ = 0.5, v̂ = 0.25 again.
        let step = 0.01 * 0.5 / (0.5 + 1e-8);
        let a1 = one.get(0).unwrap().a().get(0, 0);
        let a2 = two.get(0).unwrap().a().get(0, 0);
        assert!((a1 - (1.0 - step)).abs() < 1e-14, "{a1}");
        assert!((a2 - (1.0 - 2.0 * step)).abs() < 1e-14, "{a2}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (_, set) = scalar_set(1.0);
        let err = optimizer_step(
            OptimizerState::new(OptimizerSettings::default()),
            &set,
            &grad_of(f64::NAN),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn separable_training_decreases_loss() {
        let model = FrozenModel::random(&[2, 8, 2], Activation::Tanh, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![
                    s * 2.0 + rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let labels = (0..40).map(|i| i % 2).collect();
        let batch = dataset(rows, labels, 2);
        let mut adapters = AdapterSet::init(&model, &[0, 1], 2, 5).unwrap();
        let mut state = OptimizerState::new(OptimizerSettings {
            learning_rate: 0.05,
            ..OptimizerSettings::default()
        });
        let past = PastAccumulator::new();
        let frozen_before = model.clone();
        let mut prev = task_loss(&model, &adapters, &batch).unwrap();
        for _ in 0..50 {
            let g = backward(&model, &adapters, &batch, 0.0, &past).unwrap();
            (state, adapters) = optimizer_step(state, &adapters, &g).unwrap();
            let loss = task_loss(&model, &adapters, &batch).unwrap();
            assert!(loss < prev, "{loss} >= {prev}");
            prev = loss;
        }
        assert_eq!(model, frozen_before);
    }
}
