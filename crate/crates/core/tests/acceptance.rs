//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances are pinned constants below.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ella_core::config::{Method, RunConfig};
use ella_core::harness::{
    compute_metrics, lambda_sweep, persisted_state, run_sequence, with_uniform_lambda, AccMatrix,
    RunOutcome,
};
use ella_core::linalg::{LowRankFactors, Matrix};
use ella_core::model::{backward, total_loss, Activation, AdapterSet, FrozenModel};
use ella_core::regularizer::{penalty, penalty_grad, penalty_grad_factors, PastAccumulator};
use ella_core::report::TAIL_THRESHOLD;
use ella_core::stream::{Dataset, Geometry, Split, TaskKind, TaskSpec};
use ella_core::verify::{
    check_closed_form, check_equality, check_interference_bound, check_penalty_energy_bound,
    check_supremum, equality_ratio,
};
use ella_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;
const CLOSED_FORM_COORDS: usize = 100_000;
const CLOSED_FORM_SECONDS: f64 = 10.0;
const BOUND_INSTANCES: usize = 10_000;
const EQUALITY_MIN_RATIO: f64 = 1.0 - 1e-12;
const GRAD_REL_TOL: f64 = 1e-5;
/// Denominator floor of the relative error, for gradients that are ~0.
const GRAD_REL_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const GRAD_SECONDS: f64 = 30.0;
const GRAD_MODELS: u64 = 200;
const PAIRED_SEEDS: u64 = 10;
const PAIRED_REQUIRED: usize = 8;
const FORGETTING_SECONDS: f64 = 120.0;
const TUNED_LAMBDA: f64 = 1.0;
const SWEEP_LAMBDAS: [f64; 7] = [0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];
const METRIC_MATRICES: u64 = 100;
const STATE_LENGTHS: [usize; 3] = [2, 5, 10];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// 1. Closed form vs golden-section oracle on 10⁵ coordinates, < 10 s.
fn closed_form() -> Result<Outcome, String> {
    let started = Instant::now();
    let c = check_closed_form(CLOSED_FORM_COORDS, SEED, Execution::Sequential).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        c.failures == 0 && c.trials == CLOSED_FORM_COORDS && secs < CLOSED_FORM_SECONDS,
        format!(
            "{} coords, {} failures, max |err| {:.3e} (tol 1e-6), {secs:.2}s (limit {CLOSED_FORM_SECONDS}s)",
            c.trials, c.failures, c.worst
        ),
    ))
}

/// 2. Interference bound on 10⁴ instances plus the equality instance.
fn interference() -> Result<Outcome, String> {
    let c = check_interference_bound(BOUND_INSTANCES, SEED, Execution::Parallel).map_err(err)?;
    let eq = check_equality(SEED).map_err(err)?;
    let ratio = equality_ratio(SEED).map_err(err)?;
    Ok(outcome(
        c.failures == 0 && eq.passed() && ratio >= EQUALITY_MIN_RATIO,
        format!(
            "{} instances, {} violations, max LHS/RHS {:.6}; equality LHS/RHS = {ratio:.17} (need >= 1-1e-12)",
            c.trials, c.failures, c.worst
        ),
    ))
}

/// 3. Penalty-energy bound on the same instances; supremum identity.
fn penalty_energy() -> Result<Outcome, String> {
    let c = check_penalty_energy_bound(BOUND_INSTANCES, SEED, Execution::Parallel).map_err(err)?;
    let s = check_supremum(BOUND_INSTANCES, SEED, Execution::Parallel).map_err(err)?;
    Ok(outcome(
        c.passed() && s.passed(),
        format!(
            "{} violations, max ratio {:.6}; f(1/λ) vs 1/(4λ) max rel err {:.3e} over {} λ (tol 4 ulp)",
            c.failures, c.worst, s.worst, s.trials
        ),
    ))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn with_entry(m: &Matrix, idx: usize, d: f64) -> Matrix {
    let mut v = m.values().to_vec();
    v[idx] += d;
    Matrix::from_vec(m.rows(), m.cols(), v).expect("same shape")
}

/// Worst relative error of `analytic` against central differences of `f`.
fn fd_worst(analytic: &Matrix, at: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    (0..at.values().len())
        .map(|i| {
            let numeric = (f(&with_entry(at, i, FD_STEP)) - f(&with_entry(at, i, -FD_STEP)))
                / (2.0 * FD_STEP);
            rel_err(analytic.values()[i], numeric)
        })
        .fold(0.0, f64::max)
}

fn gradient_model_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = if seed.is_multiple_of(2) {
        Activation::Tanh
    } else {
        Activation::Identity
    };
    let (d_in, hidden, classes) = (
        rng.random_range(2..9),
        rng.random_range(2..9),
        rng.random_range(2..5),
    );
    let rank = rng.random_range(1..=2usize.min(d_in).min(hidden).min(classes));
    let model = FrozenModel::random(&[d_in, hidden, classes], act, seed).map_err(err)?;
    let mut entries = BTreeMap::new();
    let mut past = PastAccumulator::new();
    for (id, layer) in model.layers().iter().enumerate() {
        let (r, c) = layer.weight.shape();
        let f = LowRankFactors::new(
            random_matrix(&mut rng, r, rank, 0.5),
            random_matrix(&mut rng, rank, c, 0.5),
        )
        .map_err(err)?;
        entries.insert(id, f);
        past = past
            .accumulate(id, &random_matrix(&mut rng, r, c, 1.0))
            .map_err(err)?;
    }
    let adapters = AdapterSet::from_entries(&model, entries).map_err(err)?;
    let n = rng.random_range(3..9);
    let features = random_matrix(&mut rng, n, d_in, 1.5);
    let labels = (0..n).map(|i| i % classes).collect();
    let batch = Dataset::new(features, labels, classes, Split::Train).map_err(err)?;
    let lambda = rng.random_range(0.0..2.0);

    let mut worst: f64 = 0.0;
    for (&id, f) in adapters.entries() {
        let w_past = past.get(id).expect("every layer has a past");
        // penalty_grad against differences in ΔW.
        let delta = f.delta();
        let g = penalty_grad(&delta, w_past).map_err(err)?;
        worst = worst.max(fd_worst(&g, &delta, |d| penalty(d, w_past).unwrap()));
        // penalty_grad_factors against differences in A and B.
        let (ga, gb) = penalty_grad_factors(f, w_past).map_err(err)?;
        worst = worst.max(fd_worst(&ga, f.a(), |a| {
            penalty(&a.matmul(f.b()).unwrap(), w_past).unwrap()
        }));
        worst = worst.max(fd_worst(&gb, f.b(), |b| {
            penalty(&f.a().matmul(b).unwrap(), w_past).unwrap()
        }));
    }
    // Full backward against the total loss, every adapter parameter.
    let grads = backward(&model, &adapters, &batch, lambda, &past).map_err(err)?;
    for (&id, f) in adapters.entries() {
        let loss_with = |factors: LowRankFactors| {
            let mut e = adapters.entries().clone();
            e.insert(id, factors);
            let ad = AdapterSet::from_entries(&model, e).unwrap();
            total_loss(&model, &ad, &batch, lambda, &past).unwrap()
        };
        worst = worst.max(fd_worst(&grads[&id].a, f.a(), |a| {
            loss_with(LowRankFactors::new(a.clone(), f.b().clone()).unwrap())
        }));
        worst = worst.max(fd_worst(&grads[&id].b, f.b(), |b| {
            loss_with(LowRankFactors::new(f.a().clone(), b.clone()).unwrap())
        }));
    }
    Ok(worst)
}

/// 4. Finite-difference gradient checks on randomized 2-layer models, < 30 s.
fn gradients() -> Result<Outcome, String> {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_MODELS {
        worst = worst.max(gradient_model_check(seed)?);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        worst < GRAD_REL_TOL && secs < GRAD_SECONDS,
        format!("{GRAD_MODELS} models, max rel err {worst:.3e} (tol {GRAD_REL_TOL:e}), {secs:.2}s (limit {GRAD_SECONDS}s)"),
    ))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn identical(a: &RunOutcome, b: &RunOutcome) -> bool {
    let acc = |o: &RunOutcome| o.acc.a.iter().map(|r| bits(r)).collect::<Vec<_>>();
    let deltas = |o: &RunOutcome| {
        o.diagnostics
            .loss_deltas
            .iter()
            .map(|d| (d.before.to_bits(), d.after.to_bits()))
            .collect::<Vec<_>>()
    };
    let opposing = |o: &RunOutcome| {
        o.diagnostics
            .opposing
            .iter()
            .map(|&(t, m)| (t, m.to_bits()))
            .collect::<Vec<_>>()
    };
    acc(a) == acc(b)
        && persisted_state(a) == persisted_state(b)
        && deltas(a) == deltas(b)
        && opposing(a) == opposing(b)
        && a.aborted.is_none()
        && b.aborted.is_none()
}

/// 5. ELLA with λ = 0 everywhere is bitwise SeqLoRA.
fn lambda_zero() -> Result<Outcome, String> {
    let ella = with_uniform_lambda(&RunConfig::default(), 0.0);
    let mut seqlora = RunConfig::default();
    seqlora.ella.method = Method::Seqlora;
    let a = run_sequence(&ella).map_err(err)?;
    let b = run_sequence(&seqlora).map_err(err)?;
    Ok(outcome(
        identical(&a, &b),
        "accuracy matrix, W_past bytes, held-out losses and opposing magnitudes compared bit for bit",
    ))
}

struct Paired {
    seed: u64,
    tuned: RunOutcome,
    zero: RunOutcome,
}

fn paired_runs() -> Result<(Vec<Paired>, f64), String> {
    let started = Instant::now();
    let mut out = Vec::new();
    for seed in 1..=PAIRED_SEEDS {
        let mut base = RunConfig {
            seed,
            ..RunConfig::default()
        };
        base.output.execution = Execution::Sequential;
        let tuned = run_sequence(&with_uniform_lambda(&base, TUNED_LAMBDA)).map_err(err)?;
        let zero = run_sequence(&with_uniform_lambda(&base, 0.0)).map_err(err)?;
        out.push(Paired { seed, tuned, zero });
    }
    Ok((out, started.elapsed().as_secs_f64()))
}

fn bwt(o: &RunOutcome) -> f64 {
    o.metrics()
        .ok()
        .and_then(|m| m.bwt)
        .unwrap_or(f64::NEG_INFINITY)
}

fn opposing(o: &RunOutcome) -> f64 {
    o.diagnostics
        .opposing
        .first()
        .map_or(f64::INFINITY, |&(_, m)| m)
}

/// 6. Forgetting direction over paired seeds.
fn forgetting(runs: &[Paired], secs: f64) -> Outcome {
    let wins: Vec<u64> = runs
        .iter()
        .filter(|p| {
            bwt(&p.tuned) > bwt(&p.zero)
                && p.tuned.diagnostics.tail_mass(TAIL_THRESHOLD)
                    < p.zero.diagnostics.tail_mass(TAIL_THRESHOLD)
        })
        .map(|p| p.seed)
        .collect();
    let mean = |f: &dyn Fn(&Paired) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    outcome(
        wins.len() >= PAIRED_REQUIRED && secs < FORGETTING_SECONDS,
        format!(
            "{}/{} seeds (need {PAIRED_REQUIRED}); mean BWT {:.3} vs {:.3}, mean tail mass {:.3} vs {:.3} (λ={TUNED_LAMBDA} vs 0); {secs:.1}s for {} runs (limit {FORGETTING_SECONDS}s)",
            wins.len(),
            runs.len(),
            mean(&|p| bwt(&p.tuned)),
            mean(&|p| bwt(&p.zero)),
            mean(&|p| p.tuned.diagnostics.tail_mass(TAIL_THRESHOLD)),
            mean(&|p| p.zero.diagnostics.tail_mass(TAIL_THRESHOLD)),
            2 * runs.len()
        ),
    )
}

/// 7. Opposing-update magnitude shrinks under ELLA on the same transition.
fn opposing_updates(runs: &[Paired]) -> Outcome {
    let wins = runs
        .iter()
        .filter(|p| opposing(&p.tuned) < opposing(&p.zero))
        .count();
    let mean = |f: &dyn Fn(&Paired) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    outcome(
        wins >= PAIRED_REQUIRED,
        format!(
            "{wins}/{} seeds (need {PAIRED_REQUIRED}); mean magnitude {:.3} vs {:.3}",
            runs.len(),
            mean(&|p| opposing(&p.tuned)),
            mean(&|p| opposing(&p.zero))
        ),
    )
}

/// 8. Inverted-U over the λ grid.
fn sweep_shape() -> Result<Outcome, String> {
    let rows =
        lambda_sweep(&RunConfig::default(), &SWEEP_LAMBDAS, Execution::Parallel).map_err(err)?;
    let oa0 = rows.first().expect("grid not empty").oa;
    let oa_max = rows.last().expect("grid not empty").oa;
    let interior = &rows[1..rows.len() - 1];
    let best = interior
        .iter()
        .max_by(|a, b| a.oa.total_cmp(&b.oa))
        .expect("interior not empty");
    let shape = rows
        .iter()
        .map(|r| format!("{}:{:.3}", r.lambda, r.oa))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(outcome(
        best.oa > oa0 && oa_max < best.oa,
        format!(
            "λ*={} OA {:.3} > OA(0) {:.3} and > OA(1000) {:.3}; [{shape}]",
            best.lambda, best.oa, oa0, oa_max
        ),
    ))
}

/// Independent transcription of the OA/FWT/BWT formulas, index for index.
#[allow(clippy::needless_range_loop)]
fn reference_metrics(a: &[Vec<f64>], base: &[f64]) -> (f64, f64, f64) {
    let t = a.len();
    let mut oa = 0.0;
    for j in 0..t {
        oa += a[t - 1][j];
    }
    let mut fwt = 0.0;
    for j in 0..t {
        fwt += a[j][j] - base[j];
    }
    let mut bwt = 0.0;
    for j in 0..t - 1 {
        bwt += a[t - 1][j] - a[j][j];
    }
    (oa / t as f64, fwt / t as f64, bwt / (t - 1) as f64)
}

/// 9. compute_metrics equals the reference on 100 random matrices, exactly.
fn metric_oracle() -> Result<Outcome, String> {
    let mut mismatches = 0;
    for seed in 0..METRIC_MATRICES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(2..=12);
        let a: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..t).map(|_| rng.random_range(0.0..=1.0)).collect())
            .collect();
        let base: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..=1.0)).collect();
        let m = compute_metrics(&AccMatrix {
            a: a.clone(),
            baseline: Some(base.clone()),
        })
        .map_err(err)?;
        let (oa, fwt, bwt) = reference_metrics(&a, &base);
        if m.oa.to_bits() != oa.to_bits()
            || m.fwt.map(f64::to_bits) != Some(fwt.to_bits())
            || m.bwt.map(f64::to_bits) != Some(bwt.to_bits())
        {
            mismatches += 1;
        }
    }
    Ok(outcome(
        mismatches == 0,
        format!("{METRIC_MATRICES} matrices (T in 2..=12), {mismatches} bitwise mismatches"),
    ))
}

fn stream_of(tasks: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.stream.geometry = Geometry {
        train_per_class: 30,
        test_per_class: 20,
        ..Geometry::default()
    };
    c.stream.tasks = (0..tasks)
        .map(|t| TaskSpec {
            name: format!("rot-{t}"),
            kind: TaskKind::RotatedGaussians {
                angle: t as f64 * std::f64::consts::PI / tasks as f64,
                means: None,
            },
            seed: t as u64 + 1,
        })
        .collect();
    c.ella.lambda_schedule = (0..tasks)
        .map(|t| if t == 0 { 0.0 } else { TUNED_LAMBDA })
        .collect();
    c.optimizer.steps_per_task = 20;
    c.output.diagnostic_batches = 8;
    c
}

/// 10. Persisted state size is independent of T.
fn constant_memory() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut sizes = Vec::new();
    for t in STATE_LENGTHS {
        let out = run_sequence(&stream_of(t)).map_err(err)?;
        if out.aborted.is_some() || out.past.task_count() != t {
            return Ok(outcome(false, format!("T={t} run did not finish")));
        }
        let path = dir.path().join(format!("state-{t}.bin"));
        std::fs::write(&path, persisted_state(&out)).map_err(err)?;
        sizes.push((t, std::fs::metadata(&path).map_err(err)?.len()));
    }
    let same = sizes.windows(2).all(|w| w[0].1 == w[1].1);
    let listing = sizes
        .iter()
        .map(|(t, s)| format!("T={t}: {s} B"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(same, listing))
}

fn report(n: usize, name: &str, result: Result<Outcome, String>) -> bool {
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {n:>2} {:<4} {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    passed
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 5] = [
        ("closed-form shrinkage vs oracle", closed_form),
        ("interference bound", interference),
        ("penalty-energy bound", penalty_energy),
        ("gradient correctness", gradients),
        ("lambda=0 reduces to SeqLoRA", lambda_zero),
    ];
    let mut results = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        results.push(report(i + 1, name, check()));
    }
    match paired_runs() {
        Ok((runs, secs)) => {
            results.push(report(
                6,
                "forgetting direction",
                Ok(forgetting(&runs, secs)),
            ));
            results.push(report(
                7,
                "opposing-update direction",
                Ok(opposing_updates(&runs)),
            ));
        }
        Err(e) => {
            results.push(report(6, "forgetting direction", Err(e.clone())));
            results.push(report(7, "opposing-update direction", Err(e)));
        }
    }
    results.push(report(8, "lambda sweep inverted-U", sweep_shape()));
    results.push(report(9, "metric formula oracle", metric_oracle()));
    results.push(report(10, "constant-memory state", constant_memory()));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
