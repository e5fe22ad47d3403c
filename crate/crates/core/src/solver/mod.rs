//! Levenberg–Marquardt over block-structured residuals, with an IRLS outer
//! loop for Welsch-kernel terms.
//!
//! Variables are grouped into blocks (one per agent knot). Blocks are ordered
//! by `(time step, agent)` so that second-order cliques and same-step
//! interaction terms produce a banded normal matrix.

mod irls;
mod linear;
mod lm;

pub use irls::solve_irls;
pub use linear::{BandedMatrix, LinearSolver};
pub use lm::solve_lm;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Robust kernel applied to a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    /// `weight · ‖r‖²`
    Squared,
    /// `weight · (1 − exp(−‖r‖² / 2σ²))`
    Welsch { sigma: f64 },
}

impl Kernel {
    /// True cost contribution for a squared residual norm.
    pub fn cost(&self, weight: f64, r2: f64) -> f64 {
        match self {
            Kernel::Squared => weight * r2,
            Kernel::Welsch { sigma } => weight * (1.0 - (-r2 / (2.0 * sigma * sigma)).exp()),
        }
    }
}

/// Radial-basis IRLS weight `exp(−r²/2σ²)`.
pub fn welsch_weight(r: f64, sigma: f64) -> f64 {
    (-r * r / (2.0 * sigma * sigma)).exp()
}

/// Residual and per-key Jacobians at one linearization point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    /// One `residual_dim × key_dim` block per key, in key order.
    pub jacobians: Vec<DMatrix<f64>>,
}

/// A residual over a few variable blocks.
pub trait Factor: Send + Sync {
    fn keys(&self) -> &[usize];
    fn weight(&self) -> f64;
    fn kernel(&self) -> Kernel {
        Kernel::Squared
    }
    /// Short name used in diagnostics.
    fn label(&self) -> &'static str {
        "residual"
    }
    fn residual(&self, values: &[&DVector<f64>]) -> DVector<f64> {
        self.linearize(values).residual
    }
    fn linearize(&self, values: &[&DVector<f64>]) -> Linearization;
}

/// Largest relative discrepancy between a factor's analytic Jacobians and
/// central finite differences with step `h`, using `‖ΔJ‖_F / max(‖J_fd‖_F, 1)`.
pub fn jacobian_fd_error(f: &dyn Factor, values: &[&DVector<f64>], h: f64) -> f64 {
    let lin = f.linearize(values);
    let mut worst: f64 = 0.0;
    for (k, analytic) in lin.jacobians.iter().enumerate() {
        let mut fd = DMatrix::zeros(lin.residual.len(), values[k].len());
        for c in 0..values[k].len() {
            let mut plus: Vec<DVector<f64>> = values.iter().map(|v| (*v).clone()).collect();
            let mut minus = plus.clone();
            plus[k][c] += h;
            minus[k][c] -= h;
            let rp = f.residual(&plus.iter().collect::<Vec<_>>());
            let rm = f.residual(&minus.iter().collect::<Vec<_>>());
            fd.set_column(c, &((rp - rm) / (2.0 * h)));
        }
        worst = worst.max((analytic - &fd).norm() / fd.norm().max(1.0));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarBlock {
    pub dim: usize,
    pub fixed: bool,
    /// Elimination order key; blocks are sorted by it.
    pub order: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableLayout {
    pub blocks: Vec<VarBlock>,
}

impl VariableLayout {
    pub fn push(&mut self, dim: usize, order: (usize, usize)) -> usize {
        self.blocks.push(VarBlock { dim, fixed: false, order });
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Scalar offsets of the free blocks in elimination order
    /// (`None` for fixed blocks) and the total free dimension.
    pub(crate) fn free_offsets(&self) -> (Vec<Option<usize>>, usize) {
        let mut idx: Vec<usize> = (0..self.blocks.len()).filter(|&i| !self.blocks[i].fixed).collect();
        idx.sort_by_key(|&i| (self.blocks[i].order, i));
        let mut offsets = vec![None; self.blocks.len()];
        let mut n = 0;
        for i in idx {
            offsets[i] = Some(n);
            n += self.blocks[i].dim;
        }
        (offsets, n)
    }
}

/// Stacked variable values, one vector per block.
pub type Values = Vec<DVector<f64>>;

pub struct NlsProblem {
    pub layout: VariableLayout,
    pub factors: Vec<Box<dyn Factor>>,
}

impl std::fmt::Debug for NlsProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NlsProblem")
            .field("blocks", &self.layout.len())
            .field("factors", &self.factors.len())
            .finish()
    }
}

impl NlsProblem {
    pub fn new(layout: VariableLayout) -> Self {
        Self { layout, factors: Vec::new() }
    }

    pub fn add(&mut self, f: impl Factor + 'static) {
        self.factors.push(Box::new(f));
    }

    /// Checks every key resolves and every free block is touched.
    pub fn validate(&self, values: &Values) -> Result<()> {
        if values.len() != self.layout.len() {
            return Err(Error::DimensionMismatch { expected: self.layout.len(), got: values.len() });
        }
        for (b, v) in self.layout.blocks.iter().zip(values) {
            if b.dim != v.len() {
                return Err(Error::DimensionMismatch { expected: b.dim, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid("non-finite initial value".into()));
            }
        }
        let mut touched = vec![false; self.layout.len()];
        for (fi, f) in self.factors.iter().enumerate() {
            for &k in f.keys() {
                if k >= self.layout.len() {
                    return Err(Error::Invalid(format!("factor {fi} references missing block {k}")));
                }
                touched[k] = true;
            }
        }
        for (i, t) in touched.iter().enumerate() {
            if !t && !self.layout.blocks[i].fixed {
                return Err(Error::Invalid(format!("block {i} is not touched by any residual")));
            }
        }
        Ok(())
    }

    pub(crate) fn gather<'a>(&self, f: &dyn Factor, values: &'a Values) -> Vec<&'a DVector<f64>> {
        f.keys().iter().map(|&k| &values[k]).collect()
    }

    /// Current IRLS weights: 1 for squared factors, `exp(−‖r‖²/2σ²)` for Welsch.
    pub fn welsch_weights(&self, values: &Values) -> Vec<f64> {
        self.factors
            .iter()
            .map(|f| match f.kernel() {
                Kernel::Squared => 1.0,
                Kernel::Welsch { sigma } => {
                    let r = f.residual(&self.gather(f.as_ref(), values));
                    welsch_weight(r.norm(), sigma)
                }
            })
            .collect()
    }

    /// Weight each factor carries in the least-squares surrogate.
    pub(crate) fn surrogate_weights(&self, irls: &[f64]) -> Vec<f64> {
        self.factors
            .iter()
            .zip(irls)
            .map(|(f, w)| match f.kernel() {
                Kernel::Squared => f.weight(),
                Kernel::Welsch { sigma } => f.weight() * w / (2.0 * sigma * sigma),
            })
            .collect()
    }

    /// True objective with Welsch terms in their `1 − exp` form.
    pub fn true_cost(&self, values: &Values) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let r = f.residual(&self.gather(f.as_ref(), values));
                f.kernel().cost(f.weight(), r.norm_squared())
            })
            .sum()
    }

    /// Per-factor true costs.
    pub fn factor_costs(&self, values: &Values) -> Vec<f64> {
        self.factors
            .iter()
            .map(|f| {
                let r = f.residual(&self.gather(f.as_ref(), values));
                f.kernel().cost(f.weight(), r.norm_squared())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    GradientTol,
    StepTol,
    MaxIters,
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub outer_iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub reason: ConvergenceReason,
    /// Cost after each accepted step (surrogate cost for LM, true cost per
    /// outer iteration for IRLS).
    pub cost_history: Vec<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl SolveReport {
    /// Report with the wall-clock field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_time: Duration::ZERO, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    pub irls_max_outer: usize,
    pub irls_weight_tol: f64,
    pub linear_solver: LinearSolver,
    /// Wall-clock cap in seconds; `None` disables it (deterministic runs).
    pub time_budget: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            lambda_max: 1e12,
            irls_max_outer: 20,
            irls_weight_tol: 1e-4,
            linear_solver: LinearSolver::Banded,
            time_budget: None,
        }
    }
}

impl SolverOptions {
    /// Per-cycle budget used inside the MPC loop.
    pub fn mpc() -> Self {
        Self { max_iters: 25, irls_max_outer: 4, time_budget: Some(0.1), ..Self::default() }
    }

    pub(crate) fn deadline(&self, start: Instant) -> Option<Instant> {
        self.time_budget.map(|s| start + Duration::from_secs_f64(s.max(0.0)))
    }
}
