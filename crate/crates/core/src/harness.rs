//! Sequential training over a task stream, continual-learning metrics, and
//! the forgetting diagnostics.
//!
//! One run is strictly sequential. Sweeps, seed batches and single-task
//! baselines fan out whole runs through [`crate::parallel`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    accuracy, backward, optimizer_step, task_loss, AdapterSet, FactorGrads, FrozenModel, Gradients,
    OptimizerState,
};
use crate::parallel::{derive_seed, map_indices, map_slice, Execution};
use crate::regularizer::{LayerId, PastAccumulator};
use crate::stream::{content_hash, generate_task, reseeded, Dataset, TaskSpec};

/// Version tag of the formulas behind every reported number.
pub const FORMULA_VERSION: &str = "cl-metrics/1";
pub const OPPOSING_FORMULA: &str =
    "opposing/1: sum_layers sum_ij |dW_t[ij]| * [dW_t[ij] * dW_(t-1)[ij] < 0]";

const MODEL_SEED_SALT: u64 = 0x6d6f_6465_6c00;
const ADAPTER_SEED_SALT: u64 = 0x6164_6170_7400;
const BATCH_SEED_SALT: u64 = 0x6261_7463_6800;

/// `a[i][j]`: test accuracy on task `j` after training through task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    pub a: Vec<Vec<f64>>,
    /// Single-task accuracies `a₀[t]`, when computed.
    pub baseline: Option<Vec<f64>>,
}

impl AccMatrix {
    pub fn num_tasks(&self) -> usize {
        self.a.len()
    }

    fn check_complete(&self) -> Result<usize> {
        let t = self.a.len();
        if t == 0 || self.a.iter().any(|row| row.len() != t) {
            return Err(Error::InvalidArgument(
                "accuracy matrix must be square and non-empty".into(),
            ));
        }
        if self.a.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "accuracies must lie in [0, 1]".into(),
            ));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
}

/// OA, FWT and BWT from a complete accuracy matrix.
pub fn compute_metrics(m: &AccMatrix) -> Result<Metrics> {
    let t = m.check_complete()?;
    let last = &m.a[t - 1];
    let oa = last.iter().sum::<f64>() / t as f64;
    let bwt =
        (t >= 2).then(|| (0..t - 1).map(|j| last[j] - m.a[j][j]).sum::<f64>() / (t - 1) as f64);
    let fwt = match &m.baseline {
        Some(b) if b.len() == t => Some((0..t).map(|j| m.a[j][j] - b[j]).sum::<f64>() / t as f64),
        Some(b) => {
            return Err(Error::InvalidArgument(format!(
                "baseline has {} entries for {t} tasks",
                b.len()
            )))
        }
        None => None,
    };
    Ok(Metrics { oa, fwt, bwt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDelta {
    /// Task just trained (0-based).
    pub after_task: usize,
    pub past_task: usize,
    pub batch: usize,
    pub before: f64,
    pub after: f64,
}

impl LossDelta {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub loss_deltas: Vec<LossDelta>,
    /// `(task, magnitude)` for every task after the first.
    pub opposing: Vec<(usize, f64)>,
    pub wall_time_ms: Vec<f64>,
}

impl DiagnosticsRecord {
    /// Fraction of loss changes strictly above `threshold`, over all past tasks.
    pub fn tail_mass(&self, threshold: f64) -> f64 {
        if self.loss_deltas.is_empty() {
            return 0.0;
        }
        let above = self
            .loss_deltas
            .iter()
            .filter(|d| d.delta() > threshold)
            .count();
        above as f64 / self.loss_deltas.len() as f64
    }
}

/// Fixed-width histogram; bin `k` covers `[k·w, (k+1)·w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub past_task: usize,
    pub bin_width: f64,
    pub counts: BTreeMap<i64, usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Lower edge of bin `k`.
    pub fn edge(&self, k: i64) -> f64 {
        k as f64 * self.bin_width
    }
}

/// One histogram of `loss_after − loss_before` per past task.
pub fn loss_change_histogram(rec: &DiagnosticsRecord, bin_width: f64) -> Result<Vec<Histogram>> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bin width must be > 0, got {bin_width}"
        )));
    }
    let mut per_task: BTreeMap<usize, BTreeMap<i64, usize>> = BTreeMap::new();
    for d in &rec.loss_deltas {
        let bin = (d.delta() / bin_width).floor() as i64;
        *per_task
            .entry(d.past_task)
            .or_default()
            .entry(bin)
            .or_default() += 1;
    }
    Ok(per_task
        .into_iter()
        .map(|(past_task, counts)| Histogram {
            past_task,
            bin_width,
            counts,
        })
        .collect())
}

/// Σ_layers Σ_ij |ΔW_t| over coordinates where ΔW_t and ΔW_{t−1} have
/// strictly opposite signs.
pub fn opposing_update_magnitude(
    delta_t: &BTreeMap<LayerId, Matrix>,
    delta_prev: &BTreeMap<LayerId, Matrix>,
) -> Result<f64> {
    if delta_t.keys().ne(delta_prev.keys()) {
        return Err(Error::InvalidArgument(
            "update sets cover different layers".into(),
        ));
    }
    let mut total = 0.0;
    for (id, cur) in delta_t {
        let prev = &delta_prev[id];
        let opposed = cur.zip_with(prev, "opposing_update_magnitude", |c, p| {
            if c * p < 0.0 {
                c.abs()
            } else {
                0.0
            }
        })?;
        total += opposed.values().iter().sum::<f64>();
    }
    Ok(total)
}

/// Σ_layers Σ_i ‖A_iᵀ A_t‖_F² against the stored `A` factors of past tasks.
pub fn ortho_penalty(current: &AdapterSet, past_a: &BTreeMap<LayerId, Vec<Matrix>>) -> Result<f64> {
    let mut total = 0.0;
    for (id, f) in current.entries() {
        for a_i in past_a.get(id).into_iter().flatten() {
            total += a_i.t_matmul(f.a())?.frob_norm_sq();
        }
    }
    Ok(total)
}

/// Gradient of [`ortho_penalty`] with respect to each current `A`:
/// `2 Σ_i A_i (A_iᵀ A_t)`.
pub fn ortho_penalty_grad(
    current: &AdapterSet,
    past_a: &BTreeMap<LayerId, Vec<Matrix>>,
) -> Result<BTreeMap<LayerId, Matrix>> {
    let mut out = BTreeMap::new();
    for (&id, f) in current.entries() {
        let mut g = Matrix::zeros(f.a().rows(), f.a().cols());
        for a_i in past_a.get(&id).into_iter().flatten() {
            g = g.add(&a_i.matmul(&a_i.t_matmul(f.a())?)?.scale(2.0))?;
        }
        out.insert(id, g);
    }
    Ok(out)
}

/// All datasets of a run, generated once.
pub struct StreamData {
    pub tasks: Vec<(Dataset, Dataset)>,
    pub unseen: Vec<(Dataset, Dataset)>,
    pub hash: String,
}

pub fn build_stream(config: &RunConfig) -> Result<StreamData> {
    let geometry = &run_geometry(config);
    let gen = |specs: &[TaskSpec]| -> Result<Vec<(Dataset, Dataset)>> {
        specs
            .iter()
            .map(|s| generate_task(&reseeded(s, config.seed), geometry))
            .collect()
    };
    let tasks = gen(&config.stream.tasks)?;
    let unseen = gen(&config.stream.unseen)?;
    let hash = content_hash(tasks.iter().chain(&unseen).flat_map(|(a, b)| [a, b]));
    Ok(StreamData {
        tasks,
        unseen,
        hash,
    })
}

/// Stream geometry with the base class means drawn per run seed.
pub fn run_geometry(config: &RunConfig) -> crate::stream::Geometry {
    let mut g = config.stream.geometry.clone();
    g.mean_seed = derive_seed(config.seed, g.mean_seed);
    g
}

/// Frozen base network for a run; the seed salt keeps it independent of
/// every other random stream.
pub fn base_model(config: &RunConfig) -> Result<FrozenModel> {
    FrozenModel::random(
        &config.layer_dims(),
        config.model.activation,
        derive_seed(config.seed, MODEL_SEED_SALT),
    )
}

/// Trains fresh adapters on one task on top of `model`.
fn train_task(
    config: &RunConfig,
    model: &FrozenModel,
    train: &Dataset,
    task: usize,
    lambda: f64,
    past: &PastAccumulator,
    past_a: &BTreeMap<LayerId, Vec<Matrix>>,
) -> Result<AdapterSet> {
    let mut adapters = AdapterSet::init(
        model,
        &config.adapted_layers(),
        config.model.rank,
        derive_seed(config.seed, ADAPTER_SEED_SALT + task as u64),
    )?;
    let mut state = OptimizerState::new(config.optimizer.settings());
    let ortho = match config.ella.method {
        Method::OrthoBaseline if config.ella.ortho_coefficient > 0.0 => {
            Some(config.ella.ortho_coefficient)
        }
        _ => None,
    };
    let batch_size = config.optimizer.batch_size;
    let full_batch = batch_size == 0 || batch_size >= train.len();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, BATCH_SEED_SALT + task as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len();

    for _ in 0..config.optimizer.steps_per_task {
        let batch;
        let data = if full_batch {
            train
        } else {
            if cursor + batch_size > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch = train.select(&order[cursor..cursor + batch_size]);
            cursor += batch_size;
            &batch
        };
        let mut grads: Gradients = backward(model, &adapters, data, lambda, past)?;
        if let Some(coef) = ortho {
            for (id, g) in ortho_penalty_grad(&adapters, past_a)? {
                let entry = grads
                    .get_mut(&id)
                    .expect("every adapted layer has a gradient");
                *entry = FactorGrads {
                    a: entry.a.add(&g.scale(coef))?,
                    b: entry.b.clone(),
                };
            }
        }
        (state, adapters) = optimizer_step(state, &adapters, &grads)?;
    }
    let final_loss = task_loss(model, &adapters, train)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss on task {task}")));
    }
    Ok(adapters)
}

/// Everything a finished (or aborted) sequence produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Rows for completed tasks only when aborted.
    pub acc: AccMatrix,
    pub diagnostics: DiagnosticsRecord,
    /// Frozen base with every finished task's update merged in.
    pub final_model: FrozenModel,
    pub base_model: FrozenModel,
    pub past: PastAccumulator,
    /// In-memory record of each task's update; not part of persisted state.
    pub task_deltas: Vec<BTreeMap<LayerId, Matrix>>,
    pub stream_hash: String,
    pub aborted: Option<String>,
}

impl RunOutcome {
    pub fn metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.acc)
    }
}

fn eval_row(model: &FrozenModel, data: &StreamData) -> Result<Vec<f64>> {
    let none = AdapterSet::empty();
    data.tasks
        .iter()
        .map(|(_, test)| accuracy(model, &none, test))
        .collect()
}

fn batch_losses(model: &FrozenModel, batches: &[Dataset]) -> Result<Vec<f64>> {
    let none = AdapterSet::empty();
    batches.iter().map(|b| task_loss(model, &none, b)).collect()
}

/// Trains the whole stream in order, merging each task's update into the
/// accumulator before evaluating every task on the merged model.
pub fn run_sequence(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let data = build_stream(config)?;
    run_sequence_on(config, &data)
}

pub fn run_sequence_on(config: &RunConfig, data: &StreamData) -> Result<RunOutcome> {
    let base = base_model(config)?;
    let lambdas = config.effective_lambdas();
    let held_out: Vec<Vec<Dataset>> = data
        .tasks
        .iter()
        .map(|(_, test)| test.chunks(config.output.diagnostic_batches))
        .collect();

    let mut past = PastAccumulator::new();
    let mut past_a: BTreeMap<LayerId, Vec<Matrix>> = BTreeMap::new();
    let mut current = base.clone();
    let mut rows = Vec::new();
    let mut diagnostics = DiagnosticsRecord::default();
    let mut task_deltas: Vec<BTreeMap<LayerId, Matrix>> = Vec::new();
    let mut aborted = None;

    for (t, (train, _)) in data.tasks.iter().enumerate() {
        let started = Instant::now();
        let before: Vec<Vec<f64>> = held_out[..t]
            .iter()
            .map(|b| batch_losses(&current, b))
            .collect::<Result<_>>()?;

        let adapters = match train_task(config, &current, train, t, lambdas[t], &past, &past_a) {
            Ok(a) => a,
            Err(e @ Error::NonFinite(_)) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let deltas = adapters.deltas();
        for (&id, d) in &deltas {
            past = past.accumulate(id, d)?;
        }
        past = past.finish_task();
        if config.ella.method == Method::OrthoBaseline {
            for (&id, f) in adapters.entries() {
                past_a.entry(id).or_default().push(f.a().clone());
            }
        }
        current = base.merged(&past)?;

        for (j, batches) in held_out[..t].iter().enumerate() {
            let after = batch_losses(&current, batches)?;
            for (k, (&b, a)) in before[j].iter().zip(after).enumerate() {
                diagnostics.loss_deltas.push(LossDelta {
                    after_task: t,
                    past_task: j,
                    batch: k,
                    before: b,
                    after: a,
                });
            }
        }
        if let Some(prev) = task_deltas.last() {
            diagnostics
                .opposing
                .push((t, opposing_update_magnitude(&deltas, prev)?));
        }
        task_deltas.push(deltas);
        rows.push(eval_row(&current, data)?);
        diagnostics
            .wall_time_ms
            .push(started.elapsed().as_secs_f64() * 1e3);
    }

    Ok(RunOutcome {
        acc: AccMatrix {
            a: rows,
            baseline: None,
        },
        diagnostics,
        final_model: current,
        base_model: base,
        past,
        task_deltas,
        stream_hash: data.hash.clone(),
        aborted,
    })
}

/// Accuracy of task `t` trained alone from the frozen base with the same
/// step budget and adapter seed as in the sequence.
pub fn single_task_baseline(config: &RunConfig, t: usize) -> Result<f64> {
    config.validate()?;
    let data = build_stream(config)?;
    single_task_baseline_on(config, &data, t)
}

pub fn single_task_baseline_on(config: &RunConfig, data: &StreamData, t: usize) -> Result<f64> {
    let (train, test) = data.tasks.get(t).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "task {t} out of range ({} tasks)",
            data.tasks.len()
        ))
    })?;
    let base = base_model(config)?;
    let adapters = train_task(
        config,
        &base,
        train,
        t,
        0.0,
        &PastAccumulator::new(),
        &BTreeMap::new(),
    )?;
    accuracy(&base, &adapters, test)
}

/// `a₀` for every task, fanned out across tasks.
pub fn all_baselines(config: &RunConfig, data: &StreamData, mode: Execution) -> Result<Vec<f64>> {
    map_indices(mode, data.tasks.len(), |t| {
        single_task_baseline_on(config, data, t)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralAbility {
    pub ga: f64,
    pub delta_ga: f64,
    pub per_task: Vec<f64>,
}

/// Mean unseen-task accuracy of `model`, and its change from `base`.
pub fn general_ability(
    model: &FrozenModel,
    base: &FrozenModel,
    unseen: &[(Dataset, Dataset)],
) -> Result<Option<GeneralAbility>> {
    if unseen.is_empty() {
        return Ok(None);
    }
    let none = AdapterSet::empty();
    let mean = |m: &FrozenModel| -> Result<(f64, Vec<f64>)> {
        let accs: Vec<f64> = unseen
            .iter()
            .map(|(_, test)| accuracy(m, &none, test))
            .collect::<Result<_>>()?;
        Ok((accs.iter().sum::<f64>() / accs.len() as f64, accs))
    };
    let (ga, per_task) = mean(model)?;
    let (base_ga, _) = mean(base)?;
    Ok(Some(GeneralAbility {
        ga,
        delta_ga: ga - base_ga,
        per_task,
    }))
}

/// Full run plus baselines and general ability.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub metrics: Option<Metrics>,
    pub general: Option<GeneralAbility>,
}

pub fn run_full(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let data = build_stream(config)?;
    let mut outcome = run_sequence_on(config, &data)?;
    if outcome.aborted.is_some() {
        return Ok(RunReport {
            outcome,
            metrics: None,
            general: None,
        });
    }
    outcome.acc.baseline = Some(all_baselines(config, &data, config.output.execution)?);
    let metrics = Some(outcome.metrics()?);
    let general = general_ability(&outcome.final_model, &outcome.base_model, &data.unseen)?;
    Ok(RunReport {
        outcome,
        metrics,
        general,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub oa: f64,
    pub bwt: Option<f64>,
}

/// The same config with λ = 0 on the first task and `lambda` afterwards.
pub fn with_uniform_lambda(config: &RunConfig, lambda: f64) -> RunConfig {
    let mut c = config.clone();
    c.ella.method = Method::Ella;
    c.ella.lambda_schedule = (0..c.num_tasks())
        .map(|t| if t == 0 { 0.0 } else { lambda })
        .collect();
    c
}

/// One full run per λ on the same stream and seed, sorted by λ.
pub fn lambda_sweep(config: &RunConfig, lambdas: &[f64], mode: Execution) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let data = build_stream(config)?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rows: Vec<Result<SweepRow>> = map_slice(mode, &sorted, |&lambda| {
        let c = with_uniform_lambda(config, lambda);
        c.validate()?;
        let out = run_sequence_on(&c, &data)?;
        if let Some(why) = out.aborted {
            return Err(Error::NonFinite(format!("lambda {lambda}: {why}")));
        }
        let m = out.metrics()?;
        Ok(SweepRow {
            lambda,
            oa: m.oa,
            bwt: m.bwt,
        })
    });
    rows.into_iter().collect()
}

/// Persisted continual-learning state: only `W_past`, one matrix per layer.
pub fn persisted_state(outcome: &RunOutcome) -> Vec<u8> {
    outcome.past.to_bytes()
}
