//! Energy-weighted alignment penalty and its closed-form analysis.
//!
//! Training uses the raw penalty `‖ΔW ⊙ W_past‖_F²` summed over adapted
//! layers. The analysis side works with the ε-floored energy matrix
//! `E = |W_past| + ε` and the separable problem
//!
//! ```text
//! min_ΔW  ½‖ΔW − G‖_F² + (λ/2)‖E ⊙ ΔW‖_F²
//! ```
//!
//! whose minimizer is `G_ij / (1 + λ E_ij²)` coordinatewise. The bound
//! helpers evaluate both sides of the energy and interference inequalities
//! that follow from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{LowRankFactors, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const ORACLE_MAX_ITERATIONS: usize = 200;
pub const ORACLE_DEFAULT_TOL: f64 = 1e-9;

pub type LayerId = usize;

/// Running sum of finished tasks' low-rank updates, one matrix per layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PastAccumulator {
    per_layer: BTreeMap<LayerId, Matrix>,
    task_count: usize,
}

impl PastAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `delta` into the running sum for `layer`.
    pub fn accumulate(&self, layer: LayerId, delta: &Matrix) -> Result<PastAccumulator> {
        let mut next = self.clone();
        let summed = match self.per_layer.get(&layer) {
            Some(prev) => prev.add(delta)?,
            None => delta.clone(),
        };
        next.per_layer.insert(layer, summed);
        Ok(next)
    }

    /// Marks one more finished task. Called once per task by the harness.
    pub fn finish_task(&self) -> PastAccumulator {
        let mut next = self.clone();
        next.task_count += 1;
        next
    }

    pub fn get(&self, layer: LayerId) -> Option<&Matrix> {
        self.per_layer.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = (LayerId, &Matrix)> {
        self.per_layer.iter().map(|(&l, m)| (l, m))
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// Fixed-layout binary encoding: task count, layer count, then per layer
    /// `(id, rows, cols)` as little-endian u64 followed by the values as f64.
    /// The size depends only on layer shapes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ELLAPAST");
        out.extend_from_slice(&(self.task_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.per_layer.len() as u64).to_le_bytes());
        for (&id, m) in &self.per_layer {
            for v in [id, m.rows(), m.cols()] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for v in m.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::InvalidArgument("truncated or malformed accumulator state".into());
        let mut cursor = bytes.strip_prefix(b"ELLAPAST").ok_or_else(bad)?;
        let next_u64 = |c: &mut &[u8]| -> Result<u64> {
            let (head, rest) = c.split_first_chunk::<8>().ok_or_else(bad)?;
            *c = rest;
            Ok(u64::from_le_bytes(*head))
        };
        let task_count = next_u64(&mut cursor)? as usize;
        let layers = next_u64(&mut cursor)?;
        let mut per_layer = BTreeMap::new();
        for _ in 0..layers {
            let id = next_u64(&mut cursor)? as usize;
            let rows = next_u64(&mut cursor)? as usize;
            let cols = next_u64(&mut cursor)? as usize;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(f64::from_bits(next_u64(&mut cursor)?));
            }
            per_layer.insert(id, Matrix::from_vec(rows, cols, values)?);
        }
        if !cursor.is_empty() {
            return Err(bad());
        }
        Ok(Self {
            per_layer,
            task_count,
        })
    }
}

/// `E = |W_past| + ε`, strictly positive everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMatrix {
    e: Matrix,
    epsilon: f64,
}

impl EnergyMatrix {
    /// Wraps an explicit energy matrix; every entry must be positive and finite.
    pub fn from_matrix(e: Matrix, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be a positive finite number, got {epsilon}"
            )));
        }
        if e.values().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "energy entries must be positive and finite".into(),
            ));
        }
        Ok(Self { e, epsilon })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.e
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Elementwise reciprocal `E⁻¹`.
    pub fn reciprocal(&self) -> Matrix {
        self.e.map(|v| 1.0 / v)
    }
}

pub fn energy(w_past: &Matrix, epsilon: f64) -> Result<EnergyMatrix> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be a positive finite number, got {epsilon}"
        )));
    }
    Ok(EnergyMatrix {
        e: w_past.map(|v| v.abs() + epsilon),
        epsilon,
    })
}

/// Unconstrained step `G`, energy `E` and strength `λ`.
#[derive(Debug, Clone)]
pub struct ShrinkageProblem {
    g: Matrix,
    energy: EnergyMatrix,
    lambda: f64,
}

impl ShrinkageProblem {
    pub fn new(g: Matrix, energy: EnergyMatrix, lambda: f64) -> Result<Self> {
        if g.shape() != energy.matrix().shape() {
            return Err(Error::Shape {
                op: "shrinkage_problem",
                lhs: g.shape(),
                rhs: energy.matrix().shape(),
            });
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { g, energy, lambda })
    }

    pub fn g(&self) -> &Matrix {
        &self.g
    }

    pub fn energy(&self) -> &EnergyMatrix {
        &self.energy
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `‖ΔW ⊙ W_past‖_F²`
pub fn penalty(delta_w: &Matrix, w_past: &Matrix) -> Result<f64> {
    Ok(delta_w.hadamard(w_past)?.frob_norm_sq())
}

/// `∂penalty/∂ΔW = 2 (W_past ⊙ W_past) ⊙ ΔW`
pub fn penalty_grad(delta_w: &Matrix, w_past: &Matrix) -> Result<Matrix> {
    delta_w.zip_with(w_past, "penalty_grad", |d, w| 2.0 * w * w * d)
}

/// Penalty gradient pushed through `ΔW = A·B`: returns `(M·Bᵀ, Aᵀ·M)`.
pub fn penalty_grad_factors(f: &LowRankFactors, w_past: &Matrix) -> Result<(Matrix, Matrix)> {
    let m = penalty_grad(&f.delta(), w_past)?;
    Ok((m.matmul_t(f.b())?, f.a().t_matmul(&m)?))
}

/// Closed-form minimizer `G_ij / (1 + λ E_ij²)`.
pub fn shrinkage_solve(p: &ShrinkageProblem) -> Matrix {
    let lambda = p.lambda;
    p.g.zip_with(p.energy.matrix(), "shrinkage_solve", |g, e| {
        g / (1.0 + lambda * e * e)
    })
    .expect("shapes validated at construction")
}

/// `½(z − g)² + (λ/2) e² z²`
pub fn percoord_objective(z: f64, g: f64, e: f64, lambda: f64) -> f64 {
    0.5 * (z - g) * (z - g) + 0.5 * lambda * e * e * z * z
}

/// `objective(z1) − objective(z2)`, factored so it carries no cancellation
/// error when `z1` and `z2` are close.
pub fn percoord_objective_diff(z1: f64, z2: f64, g: f64, e: f64, lambda: f64) -> f64 {
    let d = z1 - z2;
    let s = z1 + z2;
    0.5 * d * (s - 2.0 * g) + 0.5 * lambda * e * e * d * s
}

/// Golden-section minimization of [`percoord_objective`] on `[−2|g|, 2|g|]`.
///
/// Independent of the closed form; used to check it. Probe points are
/// compared through [`percoord_objective_diff`] so the bracket can shrink
/// below the `√ε` resolution of raw objective values.
pub fn percoord_oracle(g: f64, e: f64, lambda: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol must be > 0, got {tol}"
        )));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-2.0 * g.abs(), 2.0 * g.abs());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    for _ in 0..ORACLE_MAX_ITERATIONS {
        if hi - lo <= tol {
            return Ok(0.5 * (lo + hi));
        }
        if percoord_objective_diff(x1, x2, g, e, lambda) <= 0.0 {
            hi = x2;
            x2 = x1;
            x1 = hi - inv_phi * (hi - lo);
        } else {
            lo = x1;
            x1 = x2;
            x2 = lo + inv_phi * (hi - lo);
        }
    }
    if hi - lo <= tol {
        return Ok(0.5 * (lo + hi));
    }
    Err(Error::NoConvergence {
        iterations: ORACLE_MAX_ITERATIONS,
        residual: hi - lo,
    })
}

/// Signed interference `⟨ΔW, W_past⟩_F`.
pub fn interference(delta_w: &Matrix, w_past: &Matrix) -> Result<f64> {
    delta_w.frob_inner(w_past)
}

fn require_positive_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "bound is undefined for lambda = 0".into(),
        ))
    }
}

/// Right-hand side `‖G‖_F / (2√λ) · ‖E⁻¹ ⊙ W_past‖_F`.
pub fn interference_bound(p: &ShrinkageProblem, w_past: &Matrix) -> Result<f64> {
    require_positive_lambda(p.lambda)?;
    let weighted = p.energy.reciprocal().hadamard(w_past)?;
    Ok(p.g.frob_norm() / (2.0 * p.lambda.sqrt()) * weighted.frob_norm())
}

/// `(‖E ⊙ ΔW⋆‖_F², ‖G‖_F² / (4λ))`
pub fn penalty_energy_bound(p: &ShrinkageProblem) -> Result<(f64, f64)> {
    require_positive_lambda(p.lambda)?;
    let solved = shrinkage_solve(p);
    let achieved = p.energy.matrix().hadamard(&solved)?.frob_norm_sq();
    Ok((achieved, p.g.frob_norm_sq() / (4.0 * p.lambda)))
}

/// `x / (1 + λx)²`, maximized over `x ≥ 0` at `x = 1/λ` with value `1/(4λ)`.
pub fn energy_ratio(x: f64, lambda: f64) -> f64 {
    x / ((1.0 + lambda * x) * (1.0 + lambda * x))
}
