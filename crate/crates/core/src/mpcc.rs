//! Model predictive contouring control objective and constraint residuals.
//!
//! Sign conventions: the contouring error is positive to the right of the
//! path and the lag error is negative when the vehicle is ahead of the path
//! point at `theta`. Lane-marker offsets use the contouring-error sign.
//!
//! Every residual is feasible when `>= 0`. State residuals apply to stages
//! `1..=N` (stage 0 is the measured state and cannot be changed); input
//! residuals apply to stages `0..N`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::ReferencePath;
use crate::solver::Trajectory;
use crate::vehicle::{AugmentedInput, AugmentedState, InputVec, StateVec, VehicleParams, NU, NX};

const IX: usize = 0;
const IY: usize = 1;
const IPSI: usize = 2;
const IV: usize = 3;
const IA: usize = 4;
const IDELTA: usize = 5;
const ITHETA: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Weight on `[e_c, e_l]`.
    pub contour_lag: [[f64; 2]; 2],
    pub progress: f64,
    /// Weight on `[jerk, steer_rate]`.
    pub input: [[f64; 2]; 2],
    pub obstacle: f64,
    pub lane: f64,
    pub lane_sigma_m: f64,
    pub terminal: [[f64; 2]; 2],
}

impl Default for CostWeights {
    fn default() -> Self {
        let q = [[1.0, 0.0], [0.0, 20.0]];
        Self {
            contour_lag: q,
            progress: 5.0,
            input: [[0.1, 0.0], [0.0, 10.0]],
            obstacle: 200.0,
            lane: 5.0,
            lane_sigma_m: 0.5,
            terminal: scale(q, 10.0),
        }
    }
}

fn scale(m: [[f64; 2]; 2], s: f64) -> [[f64; 2]; 2] {
    [[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]]
}

fn sym(m: &[[f64; 2]; 2]) -> Matrix2<f64> {
    let a = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
    (a + a.transpose()) * 0.5
}

fn is_psd(m: &[[f64; 2]; 2]) -> bool {
    let a = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
    if (a - a.transpose()).amax() > 1e-12 {
        return false;
    }
    a[(0, 0)] >= 0.0 && a[(1, 1)] >= 0.0 && a.determinant() >= -1e-12
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), MpccError> {
        for (name, m) in [
            ("contour_lag", &self.contour_lag),
            ("input", &self.input),
            ("terminal", &self.terminal),
        ] {
            if !is_psd(m) {
                return Err(MpccError::InvalidWeights(format!(
                    "{name} is not symmetric PSD"
                )));
            }
        }
        if self.progress < 0.0
            || self.obstacle < 0.0
            || self.lane < 0.0
            || !(self.lane_sigma_m > 0.0)
        {
            return Err(MpccError::InvalidWeights(
                "scalar weights must be >= 0 and sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Predicted motion of one obstacle over the horizon, with conservative
/// ellipse semi-axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleForecast {
    pub id: usize,
    pub poses: Vec<ObstaclePose>,
    pub half_length_m: f64,
    pub half_width_m: f64,
}

/// Signed lane-marker offsets from the reference path, sorted ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LaneMarkers {
    pub offsets_m: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpccError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("obstacle {id} forecast has {got} poses, expected {expected}")]
    HorizonMismatch {
        id: usize,
        got: usize,
        expected: usize,
    },
    #[error("obstacle {0} has non-positive extent")]
    BadObstacle(usize),
    #[error("lane markers are not sorted")]
    UnsortedLanes,
}

#[derive(Debug, Clone)]
pub struct MpccProblem {
    pub path: Arc<ReferencePath>,
    pub weights: CostWeights,
    pub params: VehicleParams,
    pub obstacles: Vec<ObstacleForecast>,
    pub lanes: LaneMarkers,
    pub initial: AugmentedState,
}

/// Contouring and lag errors with their Jacobian in the state.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ContourEval {
    pub e: Vector2<f64>,
    pub jac: SMatrix<f64, 2, NX>,
    pub d_left: f64,
    pub d_right: f64,
    pub dd_left: f64,
    pub dd_right: f64,
}

pub(crate) fn contour_eval(z: &StateVec, path: &ReferencePath) -> ContourEval {
    let s = path.sample(z[ITHETA]);
    let p = s.point;
    let (sn, cs) = p.psi.sin_cos();
    let dx = z[IX] - p.x;
    let dy = z[IY] - p.y;
    let ec = sn * dx - cs * dy;
    let el = -cs * dx - sn * dy;
    let mut jac = SMatrix::<f64, 2, NX>::zeros();
    jac[(0, IX)] = sn;
    jac[(0, IY)] = -cs;
    jac[(0, ITHETA)] = (cs * dx + sn * dy) * s.dpsi - sn * s.dx + cs * s.dy;
    jac[(1, IX)] = -cs;
    jac[(1, IY)] = -sn;
    jac[(1, ITHETA)] = (sn * dx - cs * dy) * s.dpsi + cs * s.dx + sn * s.dy;
    ContourEval {
        e: Vector2::new(ec, el),
        jac,
        d_left: p.d_left,
        d_right: p.d_right,
        dd_left: s.dd_left,
        dd_right: s.dd_right,
    }
}

/// `(e_c, e_l)` of an augmented state with respect to `path`.
pub fn contouring_errors(z: &AugmentedState, path: &ReferencePath) -> (f64, f64) {
    let c = contour_eval(&z.to_vector(), path);
    (c.e[0], c.e[1])
}

/// Value, gradient and Gauss-Newton Hessian of a stage cost.
#[derive(Debug, Clone, Copy)]
pub struct StageDerivatives {
    pub value: f64,
    pub grad_x: SVector<f64, NX>,
    pub grad_u: SVector<f64, NU>,
    pub hess_xx: SMatrix<f64, NX, NX>,
    pub hess_uu: SMatrix<f64, NU, NU>,
}

impl StageDerivatives {
    fn zero() -> Self {
        Self {
            value: 0.0,
            grad_x: SVector::zeros(),
            grad_u: SVector::zeros(),
            hess_xx: SMatrix::zeros(),
            hess_uu: SMatrix::zeros(),
        }
    }
}

/// Stacked residuals of one stage with Jacobians.
#[derive(Debug, Clone)]
pub struct StageResiduals {
    pub values: Vec<f64>,
    pub jac_x: Vec<SVector<f64, NX>>,
    pub jac_u: Vec<SVector<f64, NU>>,
}

impl StageResiduals {
    fn with_capacity(n: usize) -> Self {
        Self {
            values: Vec::with_capacity(n),
            jac_x: Vec::with_capacity(n),
            jac_u: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, v: f64, jx: SVector<f64, NX>, ju: SVector<f64, NU>) {
        self.values.push(v);
        self.jac_x.push(jx);
        self.jac_u.push(ju);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradient of the total cost and stacked residual Jacobian, with decision
/// variables ordered as all states `z_0..z_N` followed by all inputs.
#[derive(Debug, Clone)]
pub struct TrajectoryDerivatives {
    pub cost_gradient: DVector<f64>,
    pub residuals: DVector<f64>,
    pub residual_jacobian: DMatrix<f64>,
}

impl MpccProblem {
    pub fn new(
        path: Arc<ReferencePath>,
        weights: CostWeights,
        params: VehicleParams,
        obstacles: Vec<ObstacleForecast>,
        lanes: LaneMarkers,
        initial: AugmentedState,
    ) -> Result<Self, MpccError> {
        weights.validate()?;
        params.validate().map_err(MpccError::InvalidParams)?;
        for o in &obstacles {
            if o.poses.len() != params.horizon + 1 {
                return Err(MpccError::HorizonMismatch {
                    id: o.id,
                    got: o.poses.len(),
                    expected: params.horizon + 1,
                });
            }
            if !(o.half_length_m > 0.0 && o.half_width_m > 0.0) {
                return Err(MpccError::BadObstacle(o.id));
            }
        }
        if lanes.offsets_m.windows(2).any(|w| w[0] > w[1]) {
            return Err(MpccError::UnsortedLanes);
        }
        Ok(Self {
            path,
            weights,
            params,
            obstacles,
            lanes,
            initial,
        })
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    /// Same scene with a different measured initial state.
    pub fn with_initial(&self, initial: AugmentedState) -> Self {
        Self {
            initial,
            ..self.clone()
        }
    }

    /// Same scene without obstacles.
    pub fn without_obstacles(&self) -> Self {
        Self {
            obstacles: Vec::new(),
            ..self.clone()
        }
    }

    /// Radius shared by the three discs covering the ego footprint.
    pub fn ego_disc_radius(&self) -> f64 {
        let p = &self.params;
        ((p.length_m / 6.0).powi(2) + (p.width_m / 2.0).powi(2)).sqrt()
    }

    /// Disc centers along the ego axis, measured from the rear axle: rear
    /// axle, footprint center, front axle.
    pub fn ego_disc_offsets(&self) -> [f64; 3] {
        let l = self.params.wheelbase_m;
        [0.0, 0.5 * l, l]
    }

    pub fn contouring_errors(&self, z: &AugmentedState) -> (f64, f64) {
        contouring_errors(z, &self.path)
    }

    /// `[e_c, e_l] Q [e_c, e_l]^T - q_v v_p + u^T R u`.
    pub fn running_cost(&self, z: &AugmentedState, u: &AugmentedInput) -> f64 {
        self.running_derivs(&z.to_vector(), &u.to_vector()).value
    }

    /// Obstacle and lane-marker potential fields at step `k`.
    pub fn potential_cost(&self, z: &AugmentedState, k: usize) -> f64 {
        self.potential_derivs(&z.to_vector(), k).value
    }

    /// One residual per (obstacle, ego disc) pair at step `k`.
    pub fn collision_residuals(&self, z: &AugmentedState, k: usize) -> Vec<f64> {
        let mut out = StageResiduals::with_capacity(3 * self.obstacles.len());
        self.push_collision(&z.to_vector(), k, &mut out);
        out.values
    }

    /// Road-boundary, actuator and state-limit residuals of one stage, in the
    /// order: right boundary, left boundary, jerk low/high, steer-rate
    /// low/high, steer low/high, accel low/high, speed low/high, lateral
    /// acceleration (both signs), path speed.
    pub fn boundary_and_state_residuals(&self, z: &AugmentedState, u: &AugmentedInput) -> Vec<f64> {
        let zv = z.to_vector();
        let uv = u.to_vector();
        let mut state = StageResiduals::with_capacity(10);
        self.push_state_limits(&zv, &mut state);
        let mut input = StageResiduals::with_capacity(5);
        self.push_input_limits(&uv, &mut input);
        let s = &state.values;
        let i = &input.values;
        vec![
            s[0], s[1], i[0], i[1], i[2], i[3], s[2], s[3], s[4], s[5], s[6], s[7], s[8], s[9],
            i[4],
        ]
    }

    /// Sum of running and potential costs over `0..N` plus the terminal cost.
    pub fn total_cost(&self, traj: &Trajectory) -> f64 {
        let n = traj.inputs.len();
        let mut total = 0.0;
        for k in 0..n {
            let z = traj.states[k].to_vector();
            total += self.running_derivs(&z, &traj.inputs[k].to_vector()).value;
            total += self.potential_derivs(&z, k).value;
        }
        total + self.terminal_derivs(&traj.states[n].to_vector()).value
    }

    /// Sum over stages of each stage's largest violation, the L1 measure the
    /// solver's merit function uses.
    pub fn violation_l1(&self, traj: &Trajectory) -> f64 {
        (0..=traj.inputs.len())
            .map(|k| {
                let z = traj.states[k].to_vector();
                let u = traj.inputs.get(k).map(|u| u.to_vector());
                let r = self.stage_residuals(k, &z, u.as_ref());
                r.values.iter().fold(0.0f64, |m, &v| m.max(-v))
            })
            .sum()
    }

    /// `total_cost + penalty * violation_l1`.
    pub fn penalized_cost(&self, traj: &Trajectory, penalty: f64) -> f64 {
        let c = self.total_cost(traj);
        if penalty == 0.0 {
            c
        } else {
            c + penalty * self.violation_l1(traj)
        }
    }

    /// Largest violation among all residuals of the trajectory (0 when feasible).
    pub fn max_violation(&self, traj: &Trajectory) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..=traj.inputs.len() {
            let z = traj.states[k].to_vector();
            let u = traj.inputs.get(k).map(|u| u.to_vector());
            let r = self.stage_residuals(k, &z, u.as_ref());
            for v in r.values {
                worst = worst.max(-v);
            }
        }
        worst
    }

    pub(crate) fn running_derivs(&self, z: &StateVec, u: &InputVec) -> StageDerivatives {
        let mut d = StageDerivatives::zero();
        let q = sym(&self.weights.contour_lag);
        let c = contour_eval(z, &self.path);
        let qe = q * c.e;
        d.value += c.e.dot(&qe);
        d.grad_x += c.jac.transpose() * qe * 2.0;
        d.hess_xx += c.jac.transpose() * q * c.jac * 2.0;

        d.value -= self.weights.progress * u[2];
        d.grad_u[2] -= self.weights.progress;

        let r = sym(&self.weights.input);
        let ub = Vector2::new(u[0], u[1]);
        let ru = r * ub;
        d.value += ub.dot(&ru);
        d.grad_u[0] += 2.0 * ru[0];
        d.grad_u[1] += 2.0 * ru[1];
        d.hess_uu
            .fixed_view_mut::<2, 2>(0, 0)
            .add_assign(&(r * 2.0));
        d
    }

    pub(crate) fn terminal_derivs(&self, z: &StateVec) -> StageDerivatives {
        let mut d = StageDerivatives::zero();
        let q = sym(&self.weights.terminal);
        let c = contour_eval(z, &self.path);
        let qe = q * c.e;
        d.value = c.e.dot(&qe);
        d.grad_x = c.jac.transpose() * qe * 2.0;
        d.hess_xx = c.jac.transpose() * q * c.jac * 2.0;
        d
    }

    /// Potential fields with the PSD part of their Hessian: for a term
    /// `w exp(-s)` the surrogate is `w exp(-s) grad(s) grad(s)^T`.
    pub(crate) fn potential_derivs(&self, z: &StateVec, k: usize) -> StageDerivatives {
        let mut d = StageDerivatives::zero();
        let (sp, cp) = z[IPSI].sin_cos();
        let off = 0.5 * self.params.wheelbase_m;
        let center = Vector2::new(z[IX] + off * cp, z[IY] + off * sp);
        // d(center)/d(x, y, psi)
        let dc_dpsi = Vector2::new(-off * sp, off * cp);

        if self.weights.obstacle > 0.0 {
            for o in &self.obstacles {
                let pose = &o.poses[k.min(o.poses.len() - 1)];
                let (sh, ch) = pose.heading.sin_cos();
                let rel = center - Vector2::new(pose.x, pose.y);
                let lon = ch * rel[0] + sh * rel[1];
                let lat = -sh * rel[0] + ch * rel[1];
                let (a2, b2) = (o.half_length_m.powi(2), o.half_width_m.powi(2));
                let s = lon * lon / a2 + lat * lat / b2;
                let phi = self.weights.obstacle * (-s).exp();
                if phi == 0.0 {
                    continue;
                }
                let ds_drel = Vector2::new(ch, sh) * (2.0 * lon / a2)
                    + Vector2::new(-sh, ch) * (2.0 * lat / b2);
                let mut gs = SVector::<f64, NX>::zeros();
                gs[IX] = ds_drel[0];
                gs[IY] = ds_drel[1];
                gs[IPSI] = ds_drel.dot(&dc_dpsi);
                d.value += phi;
                d.grad_x -= gs * phi;
                d.hess_xx += gs * gs.transpose() * phi;
            }
        }

        if self.weights.lane > 0.0 && !self.lanes.offsets_m.is_empty() {
            let c = contour_eval(z, &self.path);
            let dec: SVector<f64, NX> = c.jac.row(0).transpose();
            let sigma = self.weights.lane_sigma_m;
            for &offset in &self.lanes.offsets_m {
                let rho = (offset - c.e[0]) / sigma;
                let phi = self.weights.lane * (-rho * rho).exp();
                let gs = dec * (-2.0 * rho / sigma);
                d.value += phi;
                d.grad_x -= gs * phi;
                d.hess_xx += gs * gs.transpose() * phi;
            }
        }
        d
    }

    /// Full stage cost used by the optimizer: running plus potential for
    /// `k < N`, terminal at `k = N`.
    pub(crate) fn stage_cost_derivs(
        &self,
        k: usize,
        z: &StateVec,
        u: Option<&InputVec>,
    ) -> StageDerivatives {
        match u {
            Some(u) => {
                let mut d = self.running_derivs(z, u);
                let p = self.potential_derivs(z, k);
                d.value += p.value;
                d.grad_x += p.grad_x;
                d.hess_xx += p.hess_xx;
                d
            }
            None => self.terminal_derivs(z),
        }
    }

    fn push_collision(&self, z: &StateVec, k: usize, out: &mut StageResiduals) {
        let r = self.ego_disc_radius();
        let (sp, cp) = z[IPSI].sin_cos();
        for o in &self.obstacles {
            let pose = &o.poses[k.min(o.poses.len() - 1)];
            let (sh, ch) = pose.heading.sin_cos();
            let a = o.half_length_m + r;
            let b = o.half_width_m + r;
            for off in self.ego_disc_offsets() {
                let rel = Vector2::new(z[IX] + off * cp - pose.x, z[IY] + off * sp - pose.y);
                let lon = ch * rel[0] + sh * rel[1];
                let lat = -sh * rel[0] + ch * rel[1];
                let val = (lon / a).powi(2) + (lat / b).powi(2) - 1.0;
                let g = Vector2::new(ch, sh) * (2.0 * lon / (a * a))
                    + Vector2::new(-sh, ch) * (2.0 * lat / (b * b));
                let mut jx = SVector::<f64, NX>::zeros();
                jx[IX] = g[0];
                jx[IY] = g[1];
                jx[IPSI] = g.dot(&Vector2::new(-off * sp, off * cp));
                out.push(val, jx, SVector::zeros());
            }
        }
    }

    /// Right/left boundary, steer, accel, speed and lateral-acceleration
    /// residuals (10 rows).
    fn push_state_limits(&self, z: &StateVec, out: &mut StageResiduals) {
        let p = &self.params;
        let c = contour_eval(z, &self.path);
        let dec: SVector<f64, NX> = c.jac.row(0).transpose();
        let zero_u = SVector::<f64, NU>::zeros();

        let mut jx = -dec;
        jx[ITHETA] += c.dd_right;
        out.push(c.d_right - c.e[0], jx, zero_u);
        let mut jx = dec;
        jx[ITHETA] += c.dd_left;
        out.push(c.e[0] + c.d_left, jx, zero_u);

        let unit = |i: usize, s: f64| {
            let mut v = SVector::<f64, NX>::zeros();
            v[i] = s;
            v
        };
        out.push(z[IDELTA] + p.steer_max_rad, unit(IDELTA, 1.0), zero_u);
        out.push(p.steer_max_rad - z[IDELTA], unit(IDELTA, -1.0), zero_u);
        out.push(z[IA] - p.accel_min_mps2, unit(IA, 1.0), zero_u);
        out.push(p.accel_max_mps2 - z[IA], unit(IA, -1.0), zero_u);
        out.push(z[IV] - p.speed_min_mps, unit(IV, 1.0), zero_u);
        out.push(p.speed_max_mps - z[IV], unit(IV, -1.0), zero_u);

        let (v, t) = (z[IV], z[IDELTA].tan());
        let l = p.wheelbase_m;
        let lat = v * v * t / l;
        let mut g = SVector::<f64, NX>::zeros();
        g[IV] = 2.0 * v * t / l;
        g[IDELTA] = v * v * (1.0 + t * t) / l;
        out.push(p.lat_accel_max_mps2 - lat, -g, zero_u);
        out.push(p.lat_accel_max_mps2 + lat, g, zero_u);
    }

    /// Jerk, steer-rate and path-speed residuals (5 rows).
    fn push_input_limits(&self, u: &InputVec, out: &mut StageResiduals) {
        let (lo, hi) = self.input_bounds();
        let zero_x = SVector::<f64, NX>::zeros();
        for i in 0..2 {
            let mut e = SVector::<f64, NU>::zeros();
            e[i] = 1.0;
            out.push(u[i] - lo[i], zero_x, e);
            out.push(hi[i] - u[i], zero_x, -e);
        }
        let mut e = SVector::<f64, NU>::zeros();
        e[2] = 1.0;
        out.push(u[2] - lo[2], zero_x, e);
    }

    /// Box on `[jerk, steer_rate, path_speed]`; the path speed has no upper bound.
    pub fn input_bounds(&self) -> (InputVec, InputVec) {
        let p = &self.params;
        (
            InputVec::new(p.jerk_min_mps3, p.steer_rate_min_radps, 0.0),
            InputVec::new(p.jerk_max_mps3, p.steer_rate_max_radps, f64::INFINITY),
        )
    }

    /// State-dependent residuals of stage `k` (empty at `k = 0`).
    pub fn state_residuals(&self, k: usize, z: &StateVec) -> StageResiduals {
        let mut out = StageResiduals::with_capacity(10 + 3 * self.obstacles.len());
        if k == 0 {
            return out;
        }
        self.push_state_limits(z, &mut out);
        self.push_collision(z, k, &mut out);
        out
    }

    /// All residuals of stage `k`: state rows (for `k >= 1`) then input rows.
    pub fn stage_residuals(&self, k: usize, z: &StateVec, u: Option<&InputVec>) -> StageResiduals {
        let mut out = self.state_residuals(k, z);
        if let Some(u) = u {
            self.push_input_limits(u, &mut out);
        }
        out
    }

    /// Exact gradient of `total_cost` and the Jacobian of every residual.
    pub fn derivatives(&self, traj: &Trajectory) -> TrajectoryDerivatives {
        let n = traj.inputs.len();
        let nz = (n + 1) * NX;
        let nv = nz + n * NU;
        let mut grad = DVector::zeros(nv);
        let mut rows: Vec<(
            f64,
            usize,
            SVector<f64, NX>,
            Option<(usize, SVector<f64, NU>)>,
        )> = Vec::new();
        for k in 0..=n {
            let z = traj.states[k].to_vector();
            let u = traj.inputs.get(k).map(|u| u.to_vector());
            let d = self.stage_cost_derivs(k, &z, u.as_ref());
            grad.rows_mut(k * NX, NX).add_assign(&d.grad_x);
            if u.is_some() {
                grad.rows_mut(nz + k * NU, NU).add_assign(&d.grad_u);
            }
            let r = self.stage_residuals(k, &z, u.as_ref());
            for i in 0..r.len() {
                rows.push((r.values[i], k, r.jac_x[i], u.map(|_| (k, r.jac_u[i]))));
            }
        }
        let mut values = DVector::zeros(rows.len());
        let mut jac = DMatrix::zeros(rows.len(), nv);
        for (i, (v, k, jx, ju)) in rows.into_iter().enumerate() {
            values[i] = v;
            jac.view_mut((i, k * NX), (1, NX))
                .copy_from(&jx.transpose());
            if let Some((k, ju)) = ju {
                jac.view_mut((i, nz + k * NU), (1, NU))
                    .copy_from(&ju.transpose());
            }
        }
        TrajectoryDerivatives {
            cost_gradient: grad,
            residuals: values,
            residual_jacobian: jac,
        }
    }
}

use std::ops::AddAssign;

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::path::Waypoint;
    use crate::vehicle::EgoState;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn straight_path() -> Arc<ReferencePath> {
        let c: Vec<Waypoint> = (0..5)
            .map(|i| Waypoint::new(50.0 * i as f64, 0.0))
            .collect();
        let l = vec![Waypoint::new(-10.0, 3.0), Waypoint::new(300.0, 3.0)];
        let r = vec![Waypoint::new(-10.0, -3.0), Waypoint::new(300.0, -3.0)];
        Arc::new(ReferencePath::build(&c, &l, &r).unwrap())
    }

    pub(crate) fn curved_path() -> Arc<ReferencePath> {
        let c: Vec<Waypoint> = (0..12)
            .map(|i| {
                let x = 10.0 * i as f64;
                Waypoint::new(x, 4.0 * (x / 30.0).sin())
            })
            .collect();
        let l: Vec<Waypoint> = c.iter().map(|w| Waypoint::new(w.x, w.y + 4.0)).collect();
        let r: Vec<Waypoint> = c.iter().map(|w| Waypoint::new(w.x, w.y - 4.0)).collect();
        Arc::new(ReferencePath::build(&c, &l, &r).unwrap())
    }

    pub(crate) fn on_path_state(path: &ReferencePath, theta: f64, v: f64) -> AugmentedState {
        let q = path.query(theta);
        AugmentedState::new(
            EgoState {
                x: q.x,
                y: q.y,
                psi: q.psi,
                v,
                a: 0.0,
                delta: 0.0,
            },
            theta,
        )
    }

    fn bare_weights() -> CostWeights {
        CostWeights {
            contour_lag: [[0.0; 2]; 2],
            progress: 0.0,
            input: [[0.0; 2]; 2],
            obstacle: 0.0,
            lane: 0.0,
            lane_sigma_m: 1.0,
            terminal: [[0.0; 2]; 2],
        }
    }

    fn problem(weights: CostWeights, obstacles: Vec<ObstacleForecast>) -> MpccProblem {
        let path = straight_path();
        let init = on_path_state(&path, 10.0, 0.0);
        MpccProblem::new(
            path,
            weights,
            VehicleParams::default(),
            obstacles,
            LaneMarkers::default(),
            init,
        )
        .unwrap()
    }

    fn static_obstacle(x: f64, y: f64, heading: f64, n: usize) -> ObstacleForecast {
        ObstacleForecast {
            id: 0,
            poses: vec![ObstaclePose { x, y, heading }; n + 1],
            half_length_m: 5.0,
            half_width_m: 1.5,
        }
    }

    #[test]
    fn contouring_error_cases() {
        let path = straight_path();
        let z = on_path_state(&path, 20.0, 5.0);
        let (ec, el) = contouring_errors(&z, &path);
        assert_abs_diff_eq!(ec, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(el, 0.0, epsilon = 1e-12);

        let mut side = z;
        side.ego.y += 1.7;
        let (ec, el) = contouring_errors(&side, &path);
        assert_abs_diff_eq!(ec, -1.7, epsilon = 1e-9);
        assert_abs_diff_eq!(el, 0.0, epsilon = 1e-9);

        let mut ahead = z;
        ahead.ego.x += 2.5;
        let (ec, el) = contouring_errors(&ahead, &path);
        assert_abs_diff_eq!(ec, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(el, -2.5, epsilon = 1e-9);
    }

    #[test]
    fn running_cost_cases() {
        let mut w = bare_weights();
        let p = problem(w, vec![]);
        let z = on_path_state(&p.path, 20.0, 5.0);
        assert_eq!(p.running_cost(&z, &AugmentedInput::default()), 0.0);

        w.progress = 2.0;
        let p = problem(w, vec![]);
        assert_abs_diff_eq!(
            p.running_cost(&z, &AugmentedInput::new(0.0, 0.0, 5.0)),
            -10.0
        );

        w.progress = 0.0;
        w.contour_lag = [[3.0, 0.0], [0.0, 4.0]];
        let p = problem(w, vec![]);
        // e_c = 1 needs the vehicle 1 m to the right (-y); e_l = 2 needs it 2 m behind.
        let mut off = z;
        off.ego.y -= 1.0;
        off.ego.x -= 2.0;
        assert_abs_diff_eq!(
            p.running_cost(&off, &AugmentedInput::default()),
            19.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn potential_cost_cases() {
        let mut w = bare_weights();
        w.obstacle = 7.0;
        let n = VehicleParams::default().horizon;
        let p = problem(w, vec![static_obstacle(21.35, 0.0, 0.3, n)]);
        // The potential is centered on the footprint center, half a wheelbase ahead of the rear axle.
        let z = on_path_state(&p.path, 20.0, 0.0);
        assert_abs_diff_eq!(p.potential_cost(&z, 3), 7.0, epsilon = 1e-12);

        let far = on_path_state(&p.path, 121.35, 0.0);
        assert!(p.potential_cost(&far, 0) < 1e-170);

        let mut w = bare_weights();
        w.lane = 3.0;
        let mut p = problem(w, vec![]);
        p.lanes = LaneMarkers {
            offsets_m: vec![-1.75],
        };
        let mut z = on_path_state(&p.path, 20.0, 0.0);
        z.ego.y = 1.75;
        assert_abs_diff_eq!(p.potential_cost(&z, 0), 3.0, epsilon = 1e-12);
        assert!(p.potential_cost(&z, 0) >= 0.0);
    }

    #[test]
    fn collision_residual_cases() {
        let n = VehicleParams::default().horizon;
        let p = problem(bare_weights(), vec![static_obstacle(30.0, 2.0, 0.4, n)]);
        let r = p.ego_disc_radius();
        let (a, b) = (5.0 + r, 1.5 + r);
        // Rear-axle disc on the obstacle center.
        let z = AugmentedState::new(
            EgoState {
                x: 30.0,
                y: 2.0,
                ..Default::default()
            },
            30.0,
        );
        assert_abs_diff_eq!(p.collision_residuals(&z, 0)[0], -1.0, epsilon = 1e-12);

        // A point on the inflated ellipse boundary, expressed in world frame.
        let ang: f64 = 0.9;
        let (lon, lat) = (a * ang.cos(), b * ang.sin());
        let (sh, ch) = 0.4f64.sin_cos();
        let z = AugmentedState::new(
            EgoState {
                x: 30.0 + ch * lon - sh * lat,
                y: 2.0 + sh * lon + ch * lat,
                ..Default::default()
            },
            30.0,
        );
        assert_abs_diff_eq!(p.collision_residuals(&z, 0)[0], 0.0, epsilon = 1e-12);

        let z = AugmentedState::new(
            EgoState {
                x: 130.0,
                ..Default::default()
            },
            100.0,
        );
        assert!(p.collision_residuals(&z, 0).iter().all(|&v| v > 100.0));
    }

    #[test]
    fn boundary_and_state_cases() {
        let p = problem(CostWeights::default(), vec![]);
        let z = on_path_state(&p.path, 20.0, 5.0);
        let r = p.boundary_and_state_residuals(&z, &AugmentedInput::new(0.0, 0.0, 5.0));
        assert!(r.iter().all(|&v| v > 0.0), "{r:?}");

        let mut edge = z;
        edge.ego.y = -3.0; // e_c = d_rb = 3
        let r = p.boundary_and_state_residuals(&edge, &AugmentedInput::default());
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-9);

        let mut params = VehicleParams::default();
        params.lat_accel_max_mps2 = 4.0;
        let mut p2 = p.clone();
        p2.params = params;
        let mut fast = z;
        fast.ego.v = 20.0;
        fast.ego.delta = 0.1;
        let r = p2.boundary_and_state_residuals(&fast, &AugmentedInput::default());
        let expected = 4.0 - 400.0 * 0.1f64.tan() / 2.7;
        assert_abs_diff_eq!(r[12], expected, epsilon = 1e-12);
        assert!(expected < 0.0 && (expected + 10.87).abs() < 0.01);
    }

    fn zero_trajectory(p: &MpccProblem, v_p: f64) -> Trajectory {
        let n = p.horizon();
        Trajectory {
            states: vec![p.initial; n + 1],
            inputs: vec![AugmentedInput::new(0.0, 0.0, v_p); n],
        }
    }

    #[test]
    fn total_cost_cases() {
        let mut w = bare_weights();
        w.contour_lag = [[1.0, 0.0], [0.0, 1.0]];
        w.terminal = [[10.0, 0.0], [0.0, 10.0]];
        let p = problem(w, vec![]);
        assert_eq!(p.total_cost(&zero_trajectory(&p, 0.0)), 0.0);

        w.progress = 2.0;
        let p = problem(w, vec![]);
        assert_abs_diff_eq!(
            p.total_cost(&zero_trajectory(&p, 5.0)),
            -300.0,
            epsilon = 1e-9
        );

        // Obstacle present only at step 4 (elsewhere far away).
        let mut w = bare_weights();
        w.obstacle = 1000.0;
        let n = VehicleParams::default().horizon;
        let mut obs = static_obstacle(1e4, 1e4, 0.0, n);
        obs.poses[4] = ObstaclePose {
            x: 10.0 + 1.35,
            y: 0.0,
            heading: 0.0,
        };
        let p = problem(w, vec![obs]);
        assert_abs_diff_eq!(
            p.total_cost(&zero_trajectory(&p, 0.0)),
            1000.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn removing_obstacles_removes_only_obstacle_terms() {
        let n = VehicleParams::default().horizon;
        let mut obs = static_obstacle(14.0, 0.5, 0.2, n);
        obs.half_length_m = 3.0;
        let p = problem(CostWeights::default(), vec![obs]);
        let traj = random_trajectory(&p, 3);
        let with = p.total_cost(&traj);
        let without = p.without_obstacles().total_cost(&traj);
        let mut only = p.clone();
        only.weights = CostWeights {
            obstacle: p.weights.obstacle,
            ..bare_weights()
        };
        only.lanes = LaneMarkers::default();
        let obstacle_part: f64 = (0..n)
            .map(|k| only.potential_cost(&traj.states[k], k))
            .sum();
        assert_abs_diff_eq!(with - without, obstacle_part, epsilon = 1e-9);
    }

    pub(crate) fn random_trajectory(p: &MpccProblem, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.horizon();
        let states = (0..=n)
            .map(|k| {
                let theta = 10.0 + 1.2 * k as f64 + rng.random_range(-0.5..0.5);
                let q = p.path.query(theta);
                AugmentedState::new(
                    EgoState {
                        x: q.x + rng.random_range(-1.0..1.0),
                        y: q.y + rng.random_range(-1.0..1.0),
                        psi: q.psi + rng.random_range(-0.3..0.3),
                        v: rng.random_range(2.0..15.0),
                        a: rng.random_range(-2.0..2.0),
                        delta: rng.random_range(-0.3..0.3),
                    },
                    theta,
                )
            })
            .collect();
        let inputs = (0..n)
            .map(|_| {
                AugmentedInput::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.0..15.0),
                )
            })
            .collect();
        Trajectory { states, inputs }
    }

    #[test]
    fn input_gradient_is_twice_ru() {
        let p = problem(CostWeights::default(), vec![]);
        let z = p.initial.to_vector();
        let u = InputVec::new(1.5, -0.2, 3.0);
        let d = p.running_derivs(&z, &u);
        let r = sym(&p.weights.input);
        let ru = r * Vector2::new(u[0], u[1]) * 2.0;
        assert_abs_diff_eq!(d.grad_u[0], ru[0], epsilon = 1e-12);
        assert_abs_diff_eq!(d.grad_u[1], ru[1], epsilon = 1e-12);
    }

    #[test]
    fn obstacle_gradient_vanishes_at_center() {
        let mut w = bare_weights();
        w.obstacle = 50.0;
        let n = VehicleParams::default().horizon;
        let p = problem(w, vec![static_obstacle(11.35, 0.0, 0.0, n)]);
        let z = on_path_state(&p.path, 10.0, 0.0).to_vector();
        let d = p.potential_derivs(&z, 0);
        assert!(d.grad_x.amax() < 1e-12);
    }

    fn perturbed(traj: &Trajectory, i: usize, h: f64) -> Trajectory {
        let mut t = traj.clone();
        let nz = t.states.len() * NX;
        if i < nz {
            let mut v = t.states[i / NX].to_vector();
            v[i % NX] += h;
            t.states[i / NX] = AugmentedState::from_slice(v.as_slice());
        } else {
            let j = i - nz;
            let mut v = t.inputs[j / NU].to_vector();
            v[j % NU] += h;
            t.inputs[j / NU] = AugmentedInput::from_slice(v.as_slice());
        }
        t
    }

    #[test]
    fn derivatives_match_central_differences() {
        let path = curved_path();
        let n = VehicleParams::default().horizon;
        let obstacles = (0..2)
            .map(|id| {
                let poses = (0..=n)
                    .map(|k| {
                        let q = path.query(14.0 + 8.0 * id as f64 + 0.8 * k as f64);
                        ObstaclePose {
                            x: q.x + 0.7,
                            y: q.y - 0.4,
                            heading: q.psi + 0.2,
                        }
                    })
                    .collect();
                ObstacleForecast {
                    id,
                    poses,
                    half_length_m: 2.2,
                    half_width_m: 1.0,
                }
            })
            .collect();
        let lanes = LaneMarkers {
            offsets_m: vec![-1.75, 1.75],
        };
        let init = on_path_state(&path, 10.0, 8.0);
        let p = MpccProblem::new(
            path,
            CostWeights::default(),
            VehicleParams::default(),
            obstacles,
            lanes,
            init,
        )
        .unwrap();
        let h = 1e-6;
        for seed in 0..3 {
            let traj = random_trajectory(&p, seed);
            let d = p.derivatives(&traj);
            let nv = d.cost_gradient.len();
            for i in 0..nv {
                let plus = perturbed(&traj, i, h);
                let minus = perturbed(&traj, i, -h);
                let fd = (p.total_cost(&plus) - p.total_cost(&minus)) / (2.0 * h);
                let a = d.cost_gradient[i];
                assert!(
                    (a - fd).abs() / (1.0 + a.abs()) < 1e-5,
                    "cost var {i}: {a} vs {fd}"
                );
                let rp = p.derivatives(&plus).residuals;
                let rm = p.derivatives(&minus).residuals;
                for r in 0..rp.len() {
                    let fd = (rp[r] - rm[r]) / (2.0 * h);
                    let a = d.residual_jacobian[(r, i)];
                    assert!(
                        (a - fd).abs() / (1.0 + a.abs()) < 1e-5,
                        "residual {r} var {i}: {a} vs {fd}"
                    );
                }
            }
        }
    }
}
