//! Monte-Carlo verification of the shrinkage solution and its bounds.
//!
//! Every trial draws from its own seeded generator, so a report is identical
//! under sequential and parallel execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::linalg::Matrix;
use crate::parallel::{derive_seed, map_indices, Execution};
use crate::regularizer::{
    energy, energy_ratio, interference, interference_bound, penalty_energy_bound, percoord_oracle,
    shrinkage_solve, EnergyMatrix, ShrinkageProblem, DEFAULT_EPSILON,
};

/// Absolute tolerance between the closed form and the 1-D oracle.
pub const CLOSED_FORM_TOL: f64 = 1e-6;
/// Bracket width the oracle is run to.
pub const ORACLE_TOL: f64 = 1e-9;
/// Relative floating-point slack allowed on the bound inequalities.
pub const BOUND_SLACK: f64 = 1e-12;
/// The equality instance must reach at least `1 − EQUALITY_TOL` of its bound.
pub const EQUALITY_TOL: f64 = 1e-12;
/// Relative error allowed on `f(1/λ) = 1/(4λ)`.
pub const SUPREMUM_TOL: f64 = 4.0 * f64::EPSILON;
/// Largest matrix side drawn for bound instances.
pub const MAX_SIDE: usize = 16;
/// Counterexamples kept per check.
pub const MAX_COUNTEREXAMPLES: usize = 5;

const CLOSED_FORM_SALT: u64 = 0x6366_0000;
const BOUND_SALT: u64 = 0x626e_0000;
const SUPREMUM_SALT: u64 = 0x7375_0000;
const EQUALITY_SALT: u64 = 0x6571_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    ClosedForm,
    InterferenceBound,
    PenaltyEnergyBound,
    SupremumIdentity,
    EqualityInstance,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::ClosedForm => "closed-form vs oracle",
            CheckKind::InterferenceBound => "interference bound",
            CheckKind::PenaltyEnergyBound => "penalty-energy bound",
            CheckKind::SupremumIdentity => "supremum identity",
            CheckKind::EqualityInstance => "equality instance",
        }
    }
}

/// Outcome of one family of checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub kind: CheckKind,
    pub trials: usize,
    pub failures: usize,
    /// Worst observed value of the check's statistic (error or ratio).
    pub worst: f64,
    pub statistic: &'static str,
    pub counterexamples: Vec<Value>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<22} trials={:<7} failures={:<5} {}={:.6e}\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.kind.name(),
                c.trials,
                c.failures,
                c.statistic,
                c.worst
            ));
        }
        out
    }

    /// Failing instances of every check, as JSON.
    pub fn counterexamples(&self) -> Value {
        Value::Array(
            self.checks
                .iter()
                .filter(|c| !c.passed())
                .map(|c| json!({ "check": c.kind, "instances": c.counterexamples }))
                .collect(),
        )
    }
}

/// One evaluated trial: its statistic, and the instance if it failed.
type Trial = (f64, Option<Value>);

fn collect(
    kind: CheckKind,
    statistic: &'static str,
    trials: Vec<Result<Trial>>,
) -> Result<CheckResult> {
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    let mut counterexamples = Vec::new();
    let n = trials.len();
    for t in trials {
        let (stat, failed) = t?;
        worst = worst.max(stat);
        if let Some(instance) = failed {
            failures += 1;
            if counterexamples.len() < MAX_COUNTEREXAMPLES {
                counterexamples.push(instance);
            }
        }
    }
    Ok(CheckResult {
        kind,
        trials: n,
        failures,
        worst,
        statistic,
        counterexamples,
    })
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

fn matrix_json(m: &Matrix) -> Value {
    json!({ "rows": m.rows(), "cols": m.cols(), "values": m.values() })
}

/// Closed form vs golden-section oracle on single coordinates with
/// `g ∈ [−10, 10]`, `e ∈ (0, 5]`, `λ ∈ [0, 100]`.
pub fn check_closed_form(trials: usize, seed: u64, mode: Execution) -> Result<CheckResult> {
    let results = map_indices(mode, trials, |i| -> Result<Trial> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ CLOSED_FORM_SALT, i as u64));
        let g = rng.random_range(-10.0..=10.0);
        let e = 5.0 - rng.random_range(0.0..5.0);
        let lambda = rng.random_range(0.0..=100.0);
        let p = ShrinkageProblem::new(
            Matrix::filled(1, 1, g),
            EnergyMatrix::from_matrix(Matrix::filled(1, 1, e), DEFAULT_EPSILON)?,
            lambda,
        )?;
        let closed = shrinkage_solve(&p).get(0, 0);
        let oracle = percoord_oracle(g, e, lambda, ORACLE_TOL)?;
        let err = (closed - oracle).abs();
        let failed = (!(err <= CLOSED_FORM_TOL)).then(
            || json!({ "g": g, "e": e, "lambda": lambda, "closed_form": closed, "oracle": oracle }),
        );
        Ok((err, failed))
    });
    collect(CheckKind::ClosedForm, "max_abs_error", results)
}

/// A random bound instance: shape up to 16×16, `G ∈ [−10, 10]`,
/// `W_past ∈ [−3, 3]`, `ε` and `λ` log-uniform.
pub struct BoundInstance {
    pub g: Matrix,
    pub w_past: Matrix,
    pub epsilon: f64,
    pub lambda: f64,
}

impl BoundInstance {
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ BOUND_SALT, index));
        let rows = rng.random_range(1..=MAX_SIDE);
        let cols = rng.random_range(1..=MAX_SIDE);
        let g = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-10.0..=10.0));
        let w_past = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-3.0..=3.0));
        let epsilon = log_uniform(&mut rng, 1e-10, 1e-2);
        let lambda = log_uniform(&mut rng, 1e-3, 1e3);
        Self {
            g,
            w_past,
            epsilon,
            lambda,
        }
    }

    pub fn problem(&self) -> Result<ShrinkageProblem> {
        ShrinkageProblem::new(
            self.g.clone(),
            energy(&self.w_past, self.epsilon)?,
            self.lambda,
        )
    }

    fn to_json(&self) -> Value {
        json!({
            "g": matrix_json(&self.g),
            "w_past": matrix_json(&self.w_past),
            "epsilon": self.epsilon,
            "lambda": self.lambda,
        })
    }
}

/// `|⟨ΔW⋆, W_past⟩| ≤ ‖G‖/(2√λ)·‖E⁻¹ ⊙ W_past‖`; statistic is LHS/RHS.
pub fn check_interference_bound(trials: usize, seed: u64, mode: Execution) -> Result<CheckResult> {
    let results = map_indices(mode, trials, |i| -> Result<Trial> {
        let inst = BoundInstance::sample(seed, i as u64);
        let p = inst.problem()?;
        let lhs = interference(&shrinkage_solve(&p), &inst.w_past)?.abs();
        let rhs = interference_bound(&p, &inst.w_past)?;
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let failed = (!(lhs <= rhs * (1.0 + BOUND_SLACK))).then(|| {
            let mut v = inst.to_json();
            v["lhs"] = json!(lhs);
            v["rhs"] = json!(rhs);
            v
        });
        Ok((ratio, failed))
    });
    collect(CheckKind::InterferenceBound, "max_lhs_over_rhs", results)
}

/// `‖E ⊙ ΔW⋆‖² ≤ ‖G‖²/(4λ)` on the same instances; statistic is LHS/RHS.
pub fn check_penalty_energy_bound(
    trials: usize,
    seed: u64,
    mode: Execution,
) -> Result<CheckResult> {
    let results = map_indices(mode, trials, |i| -> Result<Trial> {
        let inst = BoundInstance::sample(seed, i as u64);
        let (achieved, bound) = penalty_energy_bound(&inst.problem()?)?;
        let ratio = if bound > 0.0 {
            achieved / bound
        } else if achieved == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let failed = (!(achieved <= bound * (1.0 + BOUND_SLACK))).then(|| {
            let mut v = inst.to_json();
            v["achieved"] = json!(achieved);
            v["bound"] = json!(bound);
            v
        });
        Ok((ratio, failed))
    });
    collect(CheckKind::PenaltyEnergyBound, "max_lhs_over_rhs", results)
}

/// `f(1/λ) = 1/(4λ)` to a few ulps, and `f(x) ≤ 1/(4λ)` at random `x ≥ 0`;
/// statistic is the relative error at the maximizer.
pub fn check_supremum(trials: usize, seed: u64, mode: Execution) -> Result<CheckResult> {
    let results = map_indices(mode, trials, |i| -> Result<Trial> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SUPREMUM_SALT, i as u64));
        let lambda = log_uniform(&mut rng, 1e-6, 1e6);
        let sup = 1.0 / (4.0 * lambda);
        let at_max = energy_ratio(1.0 / lambda, lambda);
        let rel = ((at_max - sup) / sup).abs();
        let x = log_uniform(&mut rng, 1e-12, 1e12);
        let elsewhere = energy_ratio(x, lambda);
        let ok = rel <= SUPREMUM_TOL && elsewhere <= sup * (1.0 + SUPREMUM_TOL);
        let failed = (!ok).then(|| {
            json!({ "lambda": lambda, "f_at_inv_lambda": at_max, "sup": sup, "x": x, "f_at_x": elsewhere })
        });
        Ok((rel, failed))
    });
    collect(CheckKind::SupremumIdentity, "max_rel_error", results)
}

/// Instance with `E² = 1/λ` coordinatewise and `G ∝ W_past`, where the
/// interference bound is tight.
pub fn equality_instance(seed: u64) -> BoundInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, EQUALITY_SALT));
    let lambda = log_uniform(&mut rng, 1e-2, 1e2);
    let epsilon = 1e-8;
    let magnitude = 1.0 / lambda.sqrt() - epsilon;
    let scale = rng.random_range(0.5..2.0);
    let w_past = Matrix::from_fn(8, 8, |_, _| {
        if rng.random_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    });
    let g = w_past.scale(scale);
    BoundInstance {
        g,
        w_past,
        epsilon,
        lambda,
    }
}

/// LHS/RHS of the interference bound on [`equality_instance`].
pub fn equality_ratio(seed: u64) -> Result<f64> {
    let inst = equality_instance(seed);
    let p = inst.problem()?;
    let lhs = interference(&shrinkage_solve(&p), &inst.w_past)?.abs();
    Ok(lhs / interference_bound(&p, &inst.w_past)?)
}

pub fn check_equality(seed: u64) -> Result<CheckResult> {
    let ratio = equality_ratio(seed)?;
    let failed = (!(ratio >= 1.0 - EQUALITY_TOL)).then(|| {
        let mut v = equality_instance(seed).to_json();
        v["ratio"] = json!(ratio);
        v
    });
    // Report the shortfall so that "worst" reads like the other checks.
    collect(
        CheckKind::EqualityInstance,
        "shortfall",
        vec![Ok((1.0 - ratio, failed))],
    )
}

/// The full suite: `trials` draws for each randomized check.
pub fn run_verification(trials: usize, seed: u64, mode: Execution) -> Result<VerifyReport> {
    Ok(VerifyReport {
        seed,
        trials,
        checks: vec![
            check_closed_form(trials, seed, mode)?,
            check_interference_bound(trials, seed, mode)?,
            check_penalty_energy_bound(trials, seed, mode)?,
            check_supremum(trials, seed, mode)?,
            check_equality(seed)?,
        ],
    })
}
