//! Multiple-shooting SQP with condensed QP subproblems.
//!
//! Each iteration linearizes dynamics and stage residuals, eliminates the
//! state increments through the linearized dynamics (the initial state is
//! fixed, so only input increments remain), and solves the resulting dense QP.
//! Stage residuals get one nonnegative elastic slack per stage, penalized by
//! `rho * t + eps/2 * t^2`; input boxes stay hard. Steps are accepted by an
//! Armijo backtracking search on the exact penalty merit
//! `cost + rho * (sum_k max_violation_k + sum_k |defect_k|_1)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::ocp::OcpModel;
use super::qp::{self, QpError};
use super::{SolveStatus, SolverConfig, TimingModel};

#[derive(Debug, Clone)]
pub(crate) struct SqpOutput {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub elapsed_s: f64,
    pub wall_s: f64,
    pub merit_trace: Vec<(f64, f64)>,
    pub kkt: f64,
}

/// Condensed QP around one iterate.
pub(crate) struct Subproblem {
    nu_total: usize,
    h_u: DMatrix<f64>,
    g_u: DVector<f64>,
    /// Free response `s_k` of the state increments (defects only).
    free: Vec<DVector<f64>>,
    /// Sensitivities `G_k` of the state increments to the input increments.
    sens: Vec<DMatrix<f64>>,
    /// Linearized soft rows per stage: (values at p = 0, rows over dU).
    soft: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// Stages owning a slack variable, in slack order.
    soft_stages: Vec<usize>,
    /// Current violation per stage (stage residuals and input box).
    stage_viol: Vec<f64>,
    defect_l1: f64,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

pub(crate) struct Step {
    pub du: DVector<f64>,
    pub dx: Vec<DVector<f64>>,
    pub pivots: usize,
    /// `|| (H + mu I) dU ||_inf / max(1, ||g||_inf)`, the reduced Lagrangian gradient.
    pub kkt: f64,
    pub predicted: f64,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn input_violation(u: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut v: f64 = 0.0;
    for i in 0..u.len() {
        v = v.max(lo[i] - u[i]).max(u[i] - hi[i]);
    }
    v
}

/// Merit parts at an iterate: (cost, sum of stage violations, defect 1-norm, max violation).
pub(crate) fn merit_parts<M: OcpModel + ?Sized>(
    model: &M,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
) -> (f64, f64, f64, f64) {
    let n = model.horizon();
    let (lo, hi) = model.input_bounds();
    let mut cost = 0.0;
    let mut stage_sum = 0.0;
    let mut defect = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..=n {
        let u = us.get(k);
        cost += model.stage_cost(k, &xs[k], u);
        let c = model.stage_constraints(k, &xs[k], u);
        let mut v = c.iter().fold(0.0f64, |m, &ci| m.max(-ci));
        if let Some(u) = u {
            v = v.max(input_violation(u, &lo, &hi));
            let next = model.step(k, &xs[k], u);
            let d = next - &xs[k + 1];
            defect += d.iter().map(|x| x.abs()).sum::<f64>();
            worst = worst.max(inf_norm(&d));
        }
        stage_sum += v;
        worst = worst.max(v);
    }
    (cost, stage_sum, defect, worst)
}

pub(crate) fn merit<M: OcpModel + ?Sized>(
    model: &M,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    rho: f64,
) -> f64 {
    let (c, s, d, _) = merit_parts(model, xs, us);
    let m = c + rho * (s + d);
    if m.is_finite() {
        m
    } else {
        f64::INFINITY
    }
}

impl Subproblem {
    pub(crate) fn build<M: OcpModel + ?Sized>(
        model: &M,
        xs: &[DVector<f64>],
        us: &[DVector<f64>],
    ) -> Self {
        let n = model.horizon();
        let nx = model.state_dim();
        let nu = model.input_dim();
        let nu_total = n * nu;
        let (lo, hi) = model.input_bounds();

        let mut free = Vec::with_capacity(n + 1);
        let mut sens = Vec::with_capacity(n + 1);
        free.push(DVector::zeros(nx));
        sens.push(DMatrix::zeros(nx, nu_total));

        let mut h_u = DMatrix::zeros(nu_total, nu_total);
        let mut g_u = DVector::zeros(nu_total);
        let mut soft = Vec::with_capacity(n + 1);
        let mut soft_stages = Vec::new();
        let mut stage_viol = Vec::with_capacity(n + 1);
        let mut defect_l1 = 0.0;

        for k in 0..=n {
            let u = us.get(k);
            let cols = k * nu;
            let s_k = free[k].clone();

            let cost = model.stage_cost_terms(k, &xs[k], u);
            if cols > 0 {
                let g_k = sens[k].columns(0, cols);
                let hg = &cost.hess_xx * g_k;
                let mut block = h_u.view_mut((0, 0), (cols, cols));
                block.gemm_tr(1.0, &g_k, &hg, 1.0);
                let w = &cost.grad_x + &cost.hess_xx * &s_k;
                let mut gv = g_u.rows_mut(0, cols);
                gv.gemv_tr(1.0, &g_k, &w, 1.0);
            }
            if u.is_some() {
                let mut hb = h_u.view_mut((cols, cols), (nu, nu));
                hb += &cost.hess_uu;
                let mut gb = g_u.rows_mut(cols, nu);
                gb += &cost.grad_u;
            }

            let con = model.stage_constraint_terms(k, &xs[k], u);
            let m = con.values.len();
            let mut rows = DMatrix::zeros(m, nu_total);
            let mut vals = con.values.clone();
            if m > 0 {
                vals += &con.jac_x * &s_k;
                if cols > 0 {
                    let mut r = rows.view_mut((0, 0), (m, cols));
                    r.gemm(1.0, &con.jac_x, &sens[k].columns(0, cols), 0.0);
                }
                if u.is_some() && con.jac_u.ncols() == nu {
                    let mut r = rows.view_mut((0, cols), (m, nu));
                    r += &con.jac_u;
                }
                soft_stages.push(k);
            }
            let raw = con.values.iter().fold(0.0f64, |m, &x| m.max(-x));
            stage_viol.push(raw.max(u.map_or(0.0, |u| input_violation(u, &lo, &hi))));
            soft.push((vals, rows));

            if let Some(u) = u {
                let (next, a, b) = model.step_jacobian(k, &xs[k], u);
                let d = next - &xs[k + 1];
                defect_l1 += d.iter().map(|x| x.abs()).sum::<f64>();
                let s_next = &a * &s_k + d;
                let mut g_next = DMatrix::zeros(nx, nu_total);
                if cols > 0 {
                    let mut gv = g_next.view_mut((0, 0), (nx, cols));
                    gv.gemm(1.0, &a, &sens[k].columns(0, cols), 0.0);
                }
                g_next.view_mut((0, cols), (nx, nu)).copy_from(&b);
                free.push(s_next);
                sens.push(g_next);
            }
        }

        Self {
            nu_total,
            h_u,
            g_u,
            free,
            sens,
            soft,
            soft_stages,
            stage_viol,
            defect_l1,
            lo,
            hi,
        }
    }

    pub(crate) fn gradient_norm(&self) -> f64 {
        inf_norm(&self.g_u)
    }

    /// Solves the QP with penalty `rho`, slack curvature `eps` and Levenberg term `mu`.
    pub(crate) fn solve(
        &self,
        us: &[DVector<f64>],
        rho: f64,
        eps: f64,
        mu: f64,
        max_pivots: usize,
    ) -> Result<Step, QpError> {
        let nv_u = self.nu_total;
        let nt = self.soft_stages.len();
        let nv = nv_u + nt;
        let nu = if us.is_empty() { 0 } else { us[0].len() };

        let mut h = DMatrix::zeros(nv, nv);
        h.view_mut((0, 0), (nv_u, nv_u)).copy_from(&self.h_u);
        for i in 0..nv_u {
            h[(i, i)] += mu;
        }
        for i in nv_u..nv {
            h[(i, i)] = eps;
        }
        let mut g = DVector::zeros(nv);
        g.rows_mut(0, nv_u).copy_from(&self.g_u);
        for i in nv_u..nv {
            g[i] = rho;
        }

        let n_box: usize = us
            .iter()
            .map(|_| {
                (0..nu).filter(|&i| self.lo[i].is_finite()).count()
                    + (0..nu).filter(|&i| self.hi[i].is_finite()).count()
            })
            .sum();
        let n_soft: usize = self.soft.iter().map(|(v, _)| v.len()).sum();
        let m = n_box + n_soft + nt;
        let mut a = DMatrix::zeros(nv, m);
        let mut b = DVector::zeros(m);
        let mut c = 0;
        for (k, u) in us.iter().enumerate() {
            for i in 0..nu {
                let col = k * nu + i;
                if self.lo[i].is_finite() {
                    a[(col, c)] = 1.0;
                    b[c] = self.lo[i] - u[i];
                    c += 1;
                }
                if self.hi[i].is_finite() {
                    a[(col, c)] = -1.0;
                    b[c] = u[i] - self.hi[i];
                    c += 1;
                }
            }
        }
        for (slot, &k) in self.soft_stages.iter().enumerate() {
            let (vals, rows) = &self.soft[k];
            for r in 0..vals.len() {
                for j in 0..nv_u {
                    a[(j, c)] = rows[(r, j)];
                }
                a[(nv_u + slot, c)] = 1.0;
                b[c] = -vals[r];
                c += 1;
            }
        }
        for slot in 0..nt {
            a[(nv_u + slot, c)] = 1.0;
            c += 1;
        }
        debug_assert_eq!(c, m);

        let sol = qp::solve(&h, &g, &a, &b, max_pivots)?;
        let du = sol.x.rows(0, nv_u).into_owned();

        let dx: Vec<DVector<f64>> = self
            .free
            .iter()
            .zip(&self.sens)
            .map(|(s, gk)| s + gk * &du)
            .collect();

        let hdu = &self.h_u * &du + &du * mu;
        let kkt = inf_norm(&hdu) / self.gradient_norm().max(1.0);

        // Model decrease of the merit.
        let before: f64 = self.stage_viol.iter().sum::<f64>() + self.defect_l1;
        let after: f64 = self
            .soft
            .iter()
            .map(|(v, rows)| {
                let lin = v + rows * &du;
                lin.iter().fold(0.0f64, |m, &x| m.max(-x))
            })
            .sum();
        let quad = self.g_u.dot(&du) + 0.5 * du.dot(&(&self.h_u * &du));
        let predicted = rho * (before - after) - quad;

        Ok(Step {
            du,
            dx,
            pivots: sol.pivots,
            kkt,
            predicted,
        })
    }
}

struct Clock<'a> {
    model: &'a TimingModel,
    start: Instant,
    modeled: f64,
}

impl Clock<'_> {
    fn charge(&mut self, seconds: f64) {
        self.modeled += seconds;
    }

    fn elapsed(&self) -> f64 {
        match self.model {
            TimingModel::Wall => self.start.elapsed().as_secs_f64(),
            TimingModel::Modeled { .. } => self.modeled,
        }
    }
}

fn simulate<M: OcpModel + ?Sized>(model: &M, us: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(model.initial_state());
    for (k, u) in us.iter().enumerate() {
        let next = model.step(k, &xs[k], u);
        xs.push(next);
    }
    xs
}

pub(crate) fn run<M: OcpModel + ?Sized>(
    model: &M,
    mut xs: Vec<DVector<f64>>,
    mut us: Vec<DVector<f64>>,
    cfg: &SolverConfig,
) -> SqpOutput {
    let nu = model.input_dim();
    let (iter_cost, pivot_cost, eval_cost) = match cfg.timing {
        TimingModel::Modeled {
            per_iteration_s,
            per_qp_pivot_s,
            per_merit_eval_s,
        } => (per_iteration_s, per_qp_pivot_s, per_merit_eval_s),
        TimingModel::Wall => (0.0, 0.0, 0.0),
    };
    let mut clock = Clock {
        model: &cfg.timing,
        start: Instant::now(),
        modeled: 0.0,
    };

    xs[0] = model.initial_state();
    let mut rho = cfg.penalty_initial;
    let mut mu = cfg.regularization_min;
    let mut phi = merit(model, &xs, &us, rho);
    let mut trace = vec![(rho, phi)];
    let mut viol_history = vec![merit_parts(model, &xs, &us).3];
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut status = None;

    // Upper bound on pivots: every constraint entering and leaving a few times.
    let max_pivots = cfg.qp_max_pivots;

    while status.is_none() {
        if clock.elapsed() >= cfg.t_max_s || iterations >= cfg.max_iterations {
            break;
        }
        iterations += 1;
        clock.charge(iter_cost);

        let sub = Subproblem::build(model, &xs, &us);
        let step = match sub.solve(&us, rho, cfg.slack_curvature, mu, max_pivots) {
            Ok(s) => s,
            Err(_) => {
                clock.charge(pivot_cost * max_pivots as f64 * 0.1);
                mu = (mu * 100.0).max(1e-4);
                if mu > cfg.regularization_max {
                    break;
                }
                continue;
            }
        };
        clock.charge(pivot_cost * step.pivots as f64);
        kkt = step.kkt;

        let viol = *viol_history.last().unwrap();
        let step_norm = inf_norm(&step.du).max(step.dx.iter().map(inf_norm).fold(0.0, f64::max));

        if viol <= cfg.feasibility_tol
            && mu <= cfg.regularization_min
            && step.kkt <= cfg.stationarity_tol
        {
            status = Some(SolveStatus::Success);
            break;
        }
        let tiny = step_norm <= cfg.step_tol || step.predicted <= 1e-12 * (1.0 + phi.abs());
        if tiny {
            if viol <= cfg.feasibility_tol {
                if mu > cfg.regularization_min {
                    mu = cfg.regularization_min;
                    continue;
                }
                // A stalled step below the stationarity tolerance is not
                // certified; the budget status is reported instead.
                if step.kkt <= cfg.stationarity_tol {
                    status = Some(SolveStatus::Success);
                }
                break;
            }
            if rho < cfg.penalty_max {
                rho = (rho * cfg.penalty_growth).min(cfg.penalty_max);
                phi = merit(model, &xs, &us, rho);
                trace.push((rho, phi));
                continue;
            }
            status = Some(SolveStatus::ConvergedToInfeasible);
            break;
        }

        // Backtracking line search on the merit.
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= cfg.min_step {
            let xt: Vec<DVector<f64>> = xs
                .iter()
                .zip(&step.dx)
                .map(|(x, d)| x + d * alpha)
                .collect();
            let ut: Vec<DVector<f64>> = us
                .iter()
                .enumerate()
                .map(|(k, u)| u + step.du.rows(k * nu, nu) * alpha)
                .collect();
            let target = phi - cfg.armijo * alpha * step.predicted;
            clock.charge(eval_cost);
            let phi_t = merit(model, &xt, &ut, rho);
            if phi_t <= target {
                accepted = Some((xt, ut, phi_t));
                break;
            }
            // Second-order correction: the same inputs with the states
            // re-simulated, which removes the linearization error in the
            // dynamics that otherwise forces tiny steps under a large penalty.
            let xr = simulate(model, &ut);
            clock.charge(eval_cost);
            let phi_r = merit(model, &xr, &ut, rho);
            if phi_r <= target {
                accepted = Some((xr, ut, phi_r));
                break;
            }
            alpha *= cfg.backtrack;
        }
        match accepted {
            Some((xt, ut, phi_t)) => {
                xs = xt;
                us = ut;
                phi = phi_t;
                trace.push((rho, phi));
                mu = (mu / 100.0).max(cfg.regularization_min);
                let v = merit_parts(model, &xs, &us).3;
                viol_history.push(v);
                let len = viol_history.len();
                if v > cfg.feasibility_tol
                    && len >= 4
                    && v > 0.9 * viol_history[len - 4]
                    && rho < cfg.penalty_max
                {
                    rho = (rho * cfg.penalty_growth).min(cfg.penalty_max);
                    phi = merit(model, &xs, &us, rho);
                    trace.push((rho, phi));
                }
            }
            None => {
                mu = (mu * 100.0).max(1e-4);
                if mu > cfg.regularization_max {
                    let v = *viol_history.last().unwrap();
                    status = Some(if v <= cfg.feasibility_tol {
                        SolveStatus::MaxTimeExceeded
                    } else {
                        SolveStatus::ConvergedToInfeasible
                    });
                }
            }
        }
    }

    let status = status.unwrap_or_else(|| {
        // Out of budget: infeasible and no longer improving counts as
        // converged to infeasibility, otherwise the budget was the limit.
        let len = viol_history.len();
        let v = viol_history[len - 1];
        let stalled = len >= 4 && v > 0.9 * viol_history[len - 4];
        if v > cfg.feasibility_tol && stalled && rho >= cfg.penalty_max {
            SolveStatus::ConvergedToInfeasible
        } else {
            SolveStatus::MaxTimeExceeded
        }
    });
    SqpOutput {
        xs,
        us,
        status,
        iterations,
        elapsed_s: clock.elapsed(),
        wall_s: clock.start.elapsed().as_secs_f64(),
        merit_trace: trace,
        kkt,
    }
}
