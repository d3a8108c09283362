//! Newton's method with backtracking line search on the weighted, scaled
//! residual, plus a time loop with simple heuristic step control.

use std::time::Instant;

use crate::discretization::{
    assemble_jacobian, assemble_residual, assemble_schur_approx, residual_row_norms,
    weighted_residual, ReservoirModel, ResidualVector, State,
};
use crate::error::{Error, Result};
use crate::precond::{build_preconditioner, FirstStageSolver, TwoStageSpec};
use crate::sparse::csr::norm2;
use crate::sparse::dense::DenseLu;
use crate::sparse::gmres::gmres;

#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig {
    /// Relative tolerance on the weighted residual norm.
    pub rtol_f: f64,
    /// Relative tolerance on the accepted update norm.
    pub rtol_step: f64,
    pub max_newton: usize,
    /// Sufficient-decrease factor for the backtracking line search.
    pub armijo: f64,
    pub max_halvings: usize,
    pub gmres_rtol: f64,
    pub gmres_maxit: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            rtol_f: 1e-8,
            rtol_step: 1e-8,
            max_newton: 20,
            armijo: 1e-4,
            max_halvings: 8,
            gmres_rtol: 1e-8,
            gmres_maxit: 200,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol_f > 0.0 && self.rtol_step > 0.0 && self.gmres_rtol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Linear solver for each Newton system: a preconditioned GMRES run or a
/// dense LU reference solve (used by oracles and tiny cases).
#[derive(Debug, Clone, Copy)]
pub enum LinearSolver<'a> {
    TwoStage(&'a TwoStageSpec),
    DenseLu,
}

/// Per-accepted-time-step record.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub dt: f64,
    pub newton_iters: usize,
    /// GMRES iterations of each Newton step (0 for direct solves).
    pub gmres_iters: Vec<usize>,
    /// Final weighted residual 2-norms (pressure, energy, oil equations).
    pub residual_norms: (f64, f64, f64),
    /// Wall-clock seconds for the accepted solve (excluded from
    /// reproducibility comparisons).
    pub wall_seconds: f64,
}

impl StepStats {
    pub fn total_linear_iters(&self) -> usize {
        self.gmres_iters.iter().sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub steps: Vec<StepStats>,
}

impl SolveStats {
    pub fn total_newton(&self) -> usize {
        self.steps.iter().map(|s| s.newton_iters).sum()
    }

    pub fn total_linear(&self) -> usize {
        self.steps.iter().map(|s| s.total_linear_iters()).sum()
    }

    /// Average GMRES iterations per Newton iteration over all steps.
    pub fn avg_linear_per_newton(&self) -> f64 {
        let nl = self.total_newton();
        if nl == 0 {
            0.0
        } else {
            self.total_linear() as f64 / nl as f64
        }
    }
}

fn scaled_norm(model: &ReservoirModel, raw: &ResidualVector) -> f64 {
    norm2(&weighted_residual(model, raw))
}

/// Solves one implicit time step with Newton's method. `model.dt` is the
/// step size. Returns the new state and the iteration record.
pub fn newton_solve(
    model: &ReservoirModel,
    prev: &State,
    linear: LinearSolver,
    cfg: &NewtonConfig,
) -> Result<(State, StepStats)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut state = prev.clone();
    let mut raw = assemble_residual(model, &state, prev)?;
    let f0 = scaled_norm(model, &raw);
    let mut f_norm = f0;
    let mut gmres_iters = Vec::new();
    let mut converged = f0 == 0.0;

    let mut k = 0;
    while !converged && k < cfg.max_newton {
        let sys = assemble_jacobian(model, &state, prev)?;
        let rhs: Vec<f64> = weighted_residual(model, &raw).iter().map(|v| -v).collect();
        let delta = match linear {
            LinearSolver::TwoStage(spec) => {
                spec.validate(model.scaling.enabled)?;
                let schur;
                let schur_ref = if matches!(
                    spec.stage_one.solver,
                    FirstStageSolver::BlockSchur { .. }
                ) {
                    schur = assemble_schur_approx(model, &state)?;
                    Some(&schur)
                } else {
                    None
                };
                let precond = build_preconditioner(spec, &sys, schur_ref)?;
                let (x, out) = gmres(
                    &sys.matrix,
                    &rhs,
                    &precond,
                    cfg.gmres_rtol,
                    cfg.gmres_maxit,
                    cfg.gmres_maxit,
                )?;
                if !out.converged {
                    return Err(Error::Nonconvergence(format!(
                        "gmres stalled at relative residual {:.3e} in newton step {k}",
                        out.relative_residual
                    )));
                }
                gmres_iters.push(out.iterations);
                x
            }
            LinearSolver::DenseLu => {
                gmres_iters.push(0);
                DenseLu::factor(&sys.matrix.to_dense())
                    .map_err(|e| Error::Factorization(format!("newton direct solve: {e}")))?
                    .solve(&rhs)?
            }
        };

        // Backtracking line search on the weighted residual norm. A failed
        // property evaluation (state outside correlation range) counts as
        // insufficient decrease.
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut trial = state.clone();
            trial.apply_update(&delta, lambda);
            if let Ok(trial_raw) = assemble_residual(model, &trial, prev) {
                let trial_norm = scaled_norm(model, &trial_raw);
                if trial_norm <= (1.0 - cfg.armijo * lambda) * f_norm {
                    accepted = Some((trial, trial_raw, trial_norm));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let (trial, trial_raw, trial_norm) = accepted.ok_or_else(|| {
            Error::Nonconvergence(format!(
                "line search failed after {} halvings in newton step {k}",
                cfg.max_halvings
            ))
        })?;

        let step_norm = lambda * norm2(&delta);
        let x_norm = norm2(&trial.to_vec());
        state = trial;
        raw = trial_raw;
        f_norm = trial_norm;
        k += 1;
        if f_norm <= cfg.rtol_f * f0 || step_norm <= cfg.rtol_step * x_norm {
            converged = true;
        }
    }

    if !converged {
        return Err(Error::Nonconvergence(format!(
            "newton did not converge in {} iterations (|F|/|F0| = {:.3e})",
            cfg.max_newton,
            f_norm / f0
        )));
    }
    Ok((
        state,
        StepStats {
            dt: model.dt,
            newton_iters: k,
            gmres_iters,
            residual_norms: residual_row_norms(model, &raw),
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Time-stepping schedule: `steps` nominal steps of `dt`. With heuristics
/// enabled the step size adapts (halve on failure, grow after easy steps)
/// while still integrating to exactly `steps * dt`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub steps: usize,
    pub dt: f64,
    pub heuristics: bool,
    /// Maximum consecutive step-size cuts before aborting.
    pub max_cuts: usize,
    /// Grow dt when a step converges within this many Newton iterations.
    pub grow_threshold: usize,
    pub grow_factor: f64,
    /// Upper bound for the adapted dt; defaults to the nominal dt.
    pub dt_max: f64,
}

impl Schedule {
    pub fn fixed(steps: usize, dt: f64) -> Schedule {
        Schedule {
            steps,
            dt,
            heuristics: false,
            max_cuts: 5,
            grow_threshold: 5,
            grow_factor: 1.5,
            dt_max: dt,
        }
    }

    pub fn adaptive(steps: usize, dt: f64) -> Schedule {
        Schedule {
            heuristics: true,
            ..Schedule::fixed(steps, dt)
        }
    }

    pub fn total_time(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

/// Integrates from `initial` over the schedule. Without heuristics the
/// loop takes exactly `schedule.steps` steps and aborts on the first
/// Newton failure.
pub fn time_loop(
    model: &ReservoirModel,
    initial: &State,
    linear: LinearSolver,
    cfg: &NewtonConfig,
    schedule: &Schedule,
) -> Result<(State, SolveStats)> {
    let mut stats = SolveStats::default();
    let state = time_loop_into(model, initial, linear, cfg, schedule, &mut stats)?;
    Ok((state, stats))
}

/// Like [`time_loop`], but records accepted steps into `stats` so partial
/// metrics survive an abort.
pub fn time_loop_into(
    model: &ReservoirModel,
    initial: &State,
    linear: LinearSolver,
    cfg: &NewtonConfig,
    schedule: &Schedule,
    stats: &mut SolveStats,
) -> Result<State> {
    if !(schedule.dt > 0.0) || schedule.steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs steps >= 1 and dt > 0".into(),
        ));
    }
    let total = schedule.total_time();
    let mut state = initial.clone();
    let mut t = 0.0;
    let mut dt = schedule.dt;
    let mut cuts = 0usize;
    let mut step_model = model.clone();

    while t < total * (1.0 - 1e-12) {
        let dt_step = dt.min(total - t);
        step_model.dt = dt_step;
        match newton_solve(&step_model, &state, linear, cfg) {
            Ok((new_state, step)) => {
                state = new_state;
                t += dt_step;
                cuts = 0;
                if schedule.heuristics && step.newton_iters <= schedule.grow_threshold {
                    dt = (dt * schedule.grow_factor).min(schedule.dt_max);
                }
                stats.steps.push(step);
            }
            Err(e) => {
                if !schedule.heuristics {
                    return Err(Error::TimeLoopAbort(format!(
                        "fixed-step schedule failed at t = {t:.6e} s: {e}"
                    )));
                }
                cuts += 1;
                if cuts > schedule.max_cuts {
                    return Err(Error::TimeLoopAbort(format!(
                        "aborting after {cuts} consecutive dt cuts at t = {t:.6e} s \
                         (dt = {dt:.6e} s): {e}"
                    )));
                }
                dt *= 0.5;
            }
        }
    }
    Ok(state)
}
