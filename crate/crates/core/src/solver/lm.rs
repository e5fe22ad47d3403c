use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use super::linear::{BandedMatrix, LinearSolver};
use super::{ConvergenceReason, Linearization, NlsProblem, SolveReport, SolverOptions, Values};
use crate::error::{Error, Result};

/// Solves the least-squares surrogate with Welsch weights frozen at 1.
pub fn solve_lm(problem: &NlsProblem, values: &mut Values, opts: &SolverOptions) -> Result<SolveReport> {
    problem.validate(values)?;
    let start = Instant::now();
    let irls = vec![1.0; problem.factors.len()];
    let mut rep = lm_inner(problem, values, &irls, opts, opts.deadline(start))?;
    rep.wall_time = start.elapsed();
    Ok(rep)
}

struct Structure {
    offsets: Vec<Option<usize>>,
    n: usize,
    bandwidth: usize,
}

fn structure(problem: &NlsProblem) -> Structure {
    let (offsets, n) = problem.layout.free_offsets();
    let mut bandwidth = 0;
    for f in &problem.factors {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for &k in f.keys() {
            if let Some(o) = offsets[k] {
                lo = lo.min(o);
                hi = hi.max(o + problem.layout.blocks[k].dim - 1);
            }
        }
        if lo != usize::MAX {
            bandwidth = bandwidth.max(hi - lo);
        }
    }
    Structure { offsets, n, bandwidth }
}

/// Weighted squared cost; errors on the first non-finite residual.
fn surrogate_cost(problem: &NlsProblem, values: &Values, weights: &[f64]) -> std::result::Result<f64, usize> {
    let per: Vec<f64> = problem
        .factors
        .par_iter()
        .zip(weights.par_iter())
        .map(|(f, w)| w * f.residual(&problem.gather(f.as_ref(), values)).norm_squared())
        .collect();
    let mut total = 0.0;
    for (i, c) in per.into_iter().enumerate() {
        if !c.is_finite() {
            return Err(i);
        }
        total += c;
    }
    Ok(total)
}

/// Gauss–Newton normal matrix `Jᵀ W J` and half-gradient `Jᵀ W r`.
fn assemble(problem: &NlsProblem, values: &Values, weights: &[f64], s: &Structure) -> (BandedMatrix, DVector<f64>) {
    let lins: Vec<Linearization> =
        problem.factors.par_iter().map(|f| f.linearize(&problem.gather(f.as_ref(), values))).collect();
    let mut h = BandedMatrix::zeros(s.n, s.bandwidth);
    let mut g = DVector::zeros(s.n);
    for ((f, lin), &w) in problem.factors.iter().zip(&lins).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let keys = f.keys();
        for (a, &ka) in keys.iter().enumerate() {
            let Some(oa) = s.offsets[ka] else { continue };
            let ja = &lin.jacobians[a];
            for i in 0..ja.ncols() {
                g[oa + i] += w * ja.column(i).dot(&lin.residual);
            }
            for (b, &kb) in keys.iter().enumerate() {
                let Some(ob) = s.offsets[kb] else { continue };
                if ob > oa {
                    continue;
                }
                let jb = &lin.jacobians[b];
                for i in 0..ja.ncols() {
                    let ci = ja.column(i);
                    for j in 0..jb.ncols() {
                        if oa + i >= ob + j {
                            h.add_lower(oa + i, ob + j, w * ci.dot(&jb.column(j)));
                        }
                    }
                }
            }
        }
    }
    (h, g)
}

fn solve_system(h: &BandedMatrix, rhs: &DVector<f64>, solver: LinearSolver) -> Option<DVector<f64>> {
    match solver {
        LinearSolver::Banded => h.clone().cholesky().map(|c| c.solve(rhs)),
        LinearSolver::Dense => h.to_dense().cholesky().map(|c| c.solve(rhs)),
    }
}

fn free_inf_norm(values: &Values, s: &Structure) -> f64 {
    values
        .iter()
        .zip(&s.offsets)
        .filter(|(_, o)| o.is_some())
        .map(|(v, _)| v.amax())
        .fold(0.0, f64::max)
}

fn apply_step(values: &Values, delta: &DVector<f64>, s: &Structure) -> Values {
    values
        .iter()
        .zip(&s.offsets)
        .map(|(v, o)| match o {
            Some(o) => v + delta.rows(*o, v.len()),
            None => v.clone(),
        })
        .collect()
}

pub(crate) fn lm_inner(
    problem: &NlsProblem,
    values: &mut Values,
    irls: &[f64],
    opts: &SolverOptions,
    deadline: Option<Instant>,
) -> Result<SolveReport> {
    let start = Instant::now();
    let weights = problem.surrogate_weights(irls);
    let s = structure(problem);
    let mut cost = surrogate_cost(problem, values, &weights).map_err(|block| Error::NonFiniteResidual { block })?;
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;
    let out_of_time = || deadline.is_some_and(|d| Instant::now() >= d);

    let reason = 'outer: loop {
        if s.n == 0 {
            break ConvergenceReason::GradientTol;
        }
        if iterations >= opts.max_iters {
            break ConvergenceReason::MaxIters;
        }
        if out_of_time() {
            break ConvergenceReason::TimeBudget;
        }
        let (h, g) = assemble(problem, values, &weights, &s);
        if g.amax() < opts.gradient_tol {
            break ConvergenceReason::GradientTol;
        }
        iterations += 1;
        let diag = h.diagonal().map(|d| d.max(1e-12));
        let rhs = -&g;
        loop {
            let mut damped = h.clone();
            damped.add_diagonal(&(&diag * lambda));
            let Some(delta) = solve_system(&damped, &rhs, opts.linear_solver) else {
                lambda *= opts.lambda_up;
                if lambda > opts.lambda_max {
                    return Err(Error::SingularNormalEquations { damping: lambda });
                }
                continue;
            };
            if delta.amax() <= opts.step_tol * (free_inf_norm(values, &s) + opts.step_tol) {
                break 'outer ConvergenceReason::StepTol;
            }
            let candidate = apply_step(values, &delta, &s);
            match surrogate_cost(problem, &candidate, &weights) {
                Ok(c) if c < cost => {
                    *values = candidate;
                    cost = c;
                    history.push(c);
                    lambda = (lambda * opts.lambda_down).max(1e-15);
                    break;
                }
                _ => {
                    lambda *= opts.lambda_up;
                    if lambda > opts.lambda_max {
                        break 'outer ConvergenceReason::StepTol;
                    }
                    if out_of_time() {
                        break 'outer ConvergenceReason::TimeBudget;
                    }
                }
            }
        }
    };

    Ok(SolveReport {
        iterations,
        outer_iterations: 1,
        initial_cost,
        final_cost: cost,
        reason,
        cost_history: history,
        wall_time: start.elapsed(),
    })
}
