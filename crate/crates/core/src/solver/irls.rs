use std::time::Instant;

use super::lm::lm_inner;
use super::{ConvergenceReason, Kernel, NlsProblem, SolveReport, SolverOptions, Values};
use crate::error::Result;

/// IRLS over Welsch terms: each outer pass freezes `w = exp(−‖r‖²/2σ²)` and
/// minimizes the majorizing surrogate `weight·w/(2σ²)·‖r‖²` with LM.
///
/// Because the surrogate upper-bounds the true cost up to a constant, the
/// true objective never increases between outer iterations.
pub fn solve_irls(problem: &NlsProblem, values: &mut Values, opts: &SolverOptions) -> Result<SolveReport> {
    problem.validate(values)?;
    let start = Instant::now();
    let deadline = opts.deadline(start);
    let has_robust = problem.factors.iter().any(|f| matches!(f.kernel(), Kernel::Welsch { .. }));
    let initial_cost = problem.true_cost(values);
    let mut history = vec![initial_cost];
    let mut weights = problem.welsch_weights(values);
    let mut iterations = 0;
    let mut outer = 0;
    let mut reason = ConvergenceReason::MaxIters;

    while outer < opts.irls_max_outer.max(1) {
        outer += 1;
        let rep = lm_inner(problem, values, &weights, opts, deadline)?;
        iterations += rep.iterations;
        reason = rep.reason;
        history.push(problem.true_cost(values));
        if !has_robust || reason == ConvergenceReason::TimeBudget {
            break;
        }
        let next = problem.welsch_weights(values);
        let change = weights.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        weights = next;
        if change < opts.irls_weight_tol {
            break;
        }
    }

    Ok(SolveReport {
        iterations,
        outer_iterations: outer,
        initial_cost,
        final_cost: *history.last().unwrap(),
        reason,
        cost_history: history,
        wall_time: start.elapsed(),
    })
}
