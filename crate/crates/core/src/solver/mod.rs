//! Local SQP solver for the contouring-control NLP.

pub mod ocp;
pub mod qp;
mod sqp;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpcc::MpccProblem;
use crate::vehicle::{
    self, AugmentedInput, AugmentedState, InputVec, StateVec, VehicleParams, NU, NX,
};
use ocp::{ConstraintTerms, CostTerms, OcpModel};

/// Paired states `z_0..z_N` and inputs `u_0..u_{N-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<AugmentedState>,
    pub inputs: Vec<AugmentedInput>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Dynamically consistent trajectory obtained by applying `inputs` from `z0`.
    pub fn rollout(
        z0: &AugmentedState,
        inputs: Vec<AugmentedInput>,
        params: &VehicleParams,
        theta_max: f64,
    ) -> Self {
        let states = vehicle::rollout(z0, &inputs, params, theta_max);
        Self { states, inputs }
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.inputs.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|s| s.is_finite()) && self.inputs.iter().all(|u| u.is_finite())
    }

    /// Largest absolute dynamics defect `|f(z_k, u_k) - z_{k+1}|`.
    pub fn max_defect(&self, params: &VehicleParams, theta_max: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, u) in self.inputs.iter().enumerate() {
            let next = vehicle::step(&self.states[k], u, params, theta_max).to_vector();
            worst = worst.max((next - self.states[k + 1].to_vector()).amax());
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Success,
    MaxTimeExceeded,
    ConvergedToInfeasible,
}

impl SolveStatus {
    pub fn name(&self) -> &'static str {
        match self {
            SolveStatus::Success => "success",
            SolveStatus::MaxTimeExceeded => "max_time_exceeded",
            SolveStatus::ConvergedToInfeasible => "converged_to_infeasible",
        }
    }
}

/// How the time budget is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimingModel {
    /// Real elapsed time.
    Wall,
    /// Deterministic cost model charged per SQP iteration, QP pivot and merit
    /// evaluation, so results do not depend on machine load.
    Modeled {
        per_iteration_s: f64,
        per_qp_pivot_s: f64,
        per_merit_eval_s: f64,
    },
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel::Modeled {
            per_iteration_s: 0.01,
            per_qp_pivot_s: 2e-4,
            per_merit_eval_s: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub t_max_s: f64,
    pub max_iterations: usize,
    pub stationarity_tol: f64,
    pub feasibility_tol: f64,
    pub step_tol: f64,
    pub penalty_initial: f64,
    pub penalty_max: f64,
    pub penalty_growth: f64,
    /// Quadratic weight on the elastic slacks.
    pub slack_curvature: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    pub regularization_min: f64,
    pub regularization_max: f64,
    pub qp_max_pivots: usize,
    pub timing: TimingModel,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            t_max_s: 0.5,
            max_iterations: 40,
            stationarity_tol: 1e-4,
            feasibility_tol: 1e-4,
            step_tol: 1e-8,
            penalty_initial: 1e3,
            penalty_max: 1e7,
            penalty_growth: 10.0,
            slack_curvature: 1e-2,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-3,
            regularization_min: 1e-8,
            regularization_max: 1e4,
            qp_max_pivots: 5000,
            timing: TimingModel::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.t_max_s >= 0.0
            && self.stationarity_tol > 0.0
            && self.feasibility_tol > 0.0
            && self.penalty_initial > 0.0
            && self.penalty_max >= self.penalty_initial
            && self.penalty_growth > 1.0
            && self.slack_curvature > 0.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.min_step > 0.0
            && self.regularization_min > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::InvalidConfig)
        }
    }
}

/// Merit value of an accepted iterate and the penalty it was measured with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritRecord {
    pub penalty: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub max_violation: f64,
    pub iterations: usize,
    /// Time charged against the budget (modeled or wall, per config).
    pub solve_time_s: f64,
    pub wall_time_s: f64,
    /// Reduced Lagrangian gradient at the last linearization.
    pub kkt_residual: f64,
    pub merit_trace: Vec<MeritRecord>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolveError {
    #[error("guess has {states} states and {inputs} inputs, problem horizon is {horizon}")]
    DimensionMismatch {
        states: usize,
        inputs: usize,
        horizon: usize,
    },
    #[error("guess contains non-finite entries")]
    NonFiniteGuess,
    #[error("invalid solver configuration")]
    InvalidConfig,
}

/// `MpccProblem` viewed as a generic optimal control problem.
pub(crate) struct MpccOcp<'a> {
    problem: &'a MpccProblem,
    theta_max: f64,
}

impl<'a> MpccOcp<'a> {
    pub(crate) fn new(problem: &'a MpccProblem) -> Self {
        Self {
            problem,
            theta_max: problem.path.theta_max(),
        }
    }
}

fn sv(x: &DVector<f64>) -> StateVec {
    StateVec::from_column_slice(x.as_slice())
}

fn iv(u: &DVector<f64>) -> InputVec {
    InputVec::from_column_slice(u.as_slice())
}

impl OcpModel for MpccOcp<'_> {
    fn state_dim(&self) -> usize {
        NX
    }

    fn input_dim(&self) -> usize {
        NU
    }

    fn horizon(&self) -> usize {
        self.problem.horizon()
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_column_slice(self.problem.initial.to_vector().as_slice())
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let z = AugmentedState::from_slice(x.as_slice());
        let u = AugmentedInput::from_slice(u.as_slice());
        let next = vehicle::step(&z, &u, &self.problem.params, self.theta_max);
        DVector::from_column_slice(next.to_vector().as_slice())
    }

    fn step_jacobian(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let z = AugmentedState::from_slice(x.as_slice());
        let u = AugmentedInput::from_slice(u.as_slice());
        let (next, a, b) =
            vehicle::step_with_jacobian(&z, &u, &self.problem.params, self.theta_max);
        (
            DVector::from_column_slice(next.to_vector().as_slice()),
            DMatrix::from_column_slice(NX, NX, a.as_slice()),
            DMatrix::from_column_slice(NX, NU, b.as_slice()),
        )
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> f64 {
        let u = u.map(iv);
        self.problem.stage_cost_derivs(k, &sv(x), u.as_ref()).value
    }

    fn stage_cost_terms(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> CostTerms {
        let u = u.map(iv);
        let d = self.problem.stage_cost_derivs(k, &sv(x), u.as_ref());
        CostTerms {
            value: d.value,
            grad_x: DVector::from_column_slice(d.grad_x.as_slice()),
            grad_u: DVector::from_column_slice(d.grad_u.as_slice()),
            hess_xx: DMatrix::from_column_slice(NX, NX, d.hess_xx.as_slice()),
            hess_uu: DMatrix::from_column_slice(NU, NU, d.hess_uu.as_slice()),
        }
    }

    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let (lo, hi) = self.problem.input_bounds();
        (
            DVector::from_column_slice(lo.as_slice()),
            DVector::from_column_slice(hi.as_slice()),
        )
    }

    fn stage_constraints(
        &self,
        k: usize,
        x: &DVector<f64>,
        _u: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        DVector::from_vec(self.problem.state_residuals(k, &sv(x)).values)
    }

    fn stage_constraint_terms(
        &self,
        k: usize,
        x: &DVector<f64>,
        _u: Option<&DVector<f64>>,
    ) -> ConstraintTerms {
        let r = self.problem.state_residuals(k, &sv(x));
        let m = r.len();
        let mut jac_x = DMatrix::zeros(m, NX);
        for (i, row) in r.jac_x.iter().enumerate() {
            jac_x.row_mut(i).copy_from(&row.transpose());
        }
        ConstraintTerms {
            values: DVector::from_vec(r.values),
            jac_x,
            jac_u: DMatrix::zeros(m, NU),
        }
    }
}

fn to_dvectors(traj: &Trajectory) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let xs = traj
        .states
        .iter()
        .map(|s| DVector::from_column_slice(s.to_vector().as_slice()))
        .collect();
    let us = traj
        .inputs
        .iter()
        .map(|u| DVector::from_column_slice(u.to_vector().as_slice()))
        .collect();
    (xs, us)
}

fn from_dvectors(xs: &[DVector<f64>], us: &[DVector<f64>]) -> Trajectory {
    Trajectory {
        states: xs
            .iter()
            .map(|x| AugmentedState::from_slice(x.as_slice()))
            .collect(),
        inputs: us
            .iter()
            .map(|u| AugmentedInput::from_slice(u.as_slice()))
            .collect(),
    }
}

fn check_guess(problem: &MpccProblem, guess: &Trajectory) -> Result<(), SolveError> {
    let n = problem.horizon();
    if guess.inputs.len() != n || guess.states.len() != n + 1 {
        return Err(SolveError::DimensionMismatch {
            states: guess.states.len(),
            inputs: guess.inputs.len(),
            horizon: n,
        });
    }
    if !guess.is_finite() {
        return Err(SolveError::NonFiniteGuess);
    }
    Ok(())
}

/// Solves the NLP from `guess`; the first state of the guess is replaced by
/// the problem's initial state.
pub fn solve(
    problem: &MpccProblem,
    guess: &Trajectory,
    config: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    config.validate()?;
    check_guess(problem, guess)?;
    let model = MpccOcp::new(problem);
    let (xs, us) = to_dvectors(guess);
    let out = sqp::run(&model, xs, us, config);
    let mut trajectory = from_dvectors(&out.xs, &out.us);
    if !trajectory.is_finite() {
        trajectory = guess.clone();
        trajectory.states[0] = problem.initial;
    }
    let theta_max = problem.path.theta_max();
    let max_violation = problem
        .max_violation(&trajectory)
        .max(trajectory.max_defect(&problem.params, theta_max));
    let cost = problem.total_cost(&trajectory);
    debug!(
        "solve: status={:?} iterations={} time={:.4}s cost={:.3} violation={:.2e} kkt={:.2e}",
        out.status, out.iterations, out.elapsed_s, cost, max_violation, out.kkt
    );
    Ok(SolveResult {
        status: out.status,
        trajectory,
        cost,
        max_violation,
        iterations: out.iterations,
        solve_time_s: out.elapsed_s,
        wall_time_s: out.wall_s,
        kkt_residual: out.kkt,
        merit_trace: out
            .merit_trace
            .into_iter()
            .map(|(penalty, value)| MeritRecord { penalty, value })
            .collect(),
    })
}

/// Result of `solve_ocp` on a generic model.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub status: SolveStatus,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub cost: f64,
    /// Largest stage, input-bound or dynamics violation.
    pub max_violation: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Runs the SQP on any `OcpModel` from the given state and input guess.
pub fn solve_ocp<M: OcpModel + ?Sized>(
    model: &M,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    config: &SolverConfig,
) -> Result<OcpSolution, SolveError> {
    config.validate()?;
    let n = model.horizon();
    if states.len() != n + 1 || inputs.len() != n {
        return Err(SolveError::DimensionMismatch {
            states: states.len(),
            inputs: inputs.len(),
            horizon: n,
        });
    }
    if states
        .iter()
        .chain(&inputs)
        .any(|v| v.iter().any(|x| !x.is_finite()))
    {
        return Err(SolveError::NonFiniteGuess);
    }
    let out = sqp::run(model, states, inputs, config);
    let (cost, _, _, max_violation) = sqp::merit_parts(model, &out.xs, &out.us);
    Ok(OcpSolution {
        status: out.status,
        cost,
        max_violation,
        iterations: out.iterations,
        kkt_residual: out.kkt,
        states: out.xs,
        inputs: out.us,
    })
}

/// Stationarity measure of `traj` as used by the solver's convergence test,
/// recomputed from scratch at the minimum regularization.
pub fn kkt_residual(problem: &MpccProblem, traj: &Trajectory, config: &SolverConfig) -> f64 {
    let model = MpccOcp::new(problem);
    let (mut xs, us) = to_dvectors(traj);
    xs[0] = model.initial_state();
    let sub = sqp::Subproblem::build(&model, &xs, &us);
    match sub.solve(
        &us,
        config.penalty_max,
        config.slack_curvature,
        config.regularization_min,
        config.qp_max_pivots,
    ) {
        Ok(step) => step.kkt,
        Err(_) => f64::INFINITY,
    }
}

/// Previous solution advanced by one step: drop stage 0, repeat the last
/// input, and roll out from the problem's current initial state.
pub fn shift_previous(prev: &Trajectory, problem: &MpccProblem) -> Trajectory {
    let n = problem.horizon();
    let mut inputs: Vec<AugmentedInput> = prev.inputs.iter().skip(1).copied().collect();
    let last = prev.inputs.last().copied().unwrap_or_default();
    while inputs.len() < n {
        inputs.push(*inputs.last().unwrap_or(&last));
    }
    inputs.truncate(n);
    Trajectory::rollout(
        &problem.initial,
        inputs,
        &problem.params,
        problem.path.theta_max(),
    )
}

/// Zero jerk and steering rate with the path advancing at the current speed.
pub fn cold_start(problem: &MpccProblem) -> Trajectory {
    let v = problem.initial.ego.v.max(0.0);
    let inputs = vec![AugmentedInput::new(0.0, 0.0, v); problem.horizon()];
    Trajectory::rollout(
        &problem.initial,
        inputs,
        &problem.params,
        problem.path.theta_max(),
    )
}
