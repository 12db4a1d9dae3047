//! Learning-aided initial guesses.
//!
//! Each predicted ego mode is fitted with a quintic Bezier curve by Bayesian
//! linear regression, using the current vehicle state as a tight prior on the
//! first three control points. Samples from the posterior are scored under
//! the planning problem and merged by a softmin-weighted average; the cheapest
//! mode competes against the shifted previous solution.

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpcc::{MpccProblem, ObstacleForecast};
use crate::path::ReferencePath;
use crate::prediction::{ModePrediction, SceneForecast};
use crate::solver::{shift_previous, Trajectory};
use crate::vehicle::{AugmentedInput, AugmentedState, EgoState, VehicleParams};

pub const DEGREE: usize = 5;
pub const N_POINTS: usize = DEGREE + 1;
/// Length of a stacked control-point vector `(x0, y0, x1, y1, ...)`.
pub const N_COORDS: usize = 2 * N_POINTS;

const BINOMIAL: [f64; N_POINTS] = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0];
const LOW_SPEED_MPS: f64 = 0.1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum WarmstartError {
    #[error("observation covariance at step {0} is not positive definite")]
    SingularObservationNoise(usize),
    #[error("prior covariance is not positive definite")]
    SingularPrior,
    #[error("covariance has no Cholesky factor")]
    CholeskyFailure,
    #[error("candidate {0} has a non-finite cost")]
    NonFiniteCost(usize),
    #[error("mode has {got} steps, expected {expected}")]
    HorizonMismatch { got: usize, expected: usize },
    #[error("no prediction modes and no previous solution")]
    NoCandidates,
    #[error("invalid refinement configuration")]
    InvalidConfig,
}

/// Bernstein basis of degree 5 at time `t` of a curve lasting `duration`.
pub fn bernstein_basis(t: f64, duration: f64) -> [f64; N_POINTS] {
    let s = (t / duration).clamp(0.0, 1.0);
    let mut out = [0.0; N_POINTS];
    for (j, o) in out.iter_mut().enumerate() {
        *o = BINOMIAL[j] * s.powi(j as i32) * (1.0 - s).powi((DEGREE - j) as i32);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BezierCurve {
    pub points: [Vector2<f64>; N_POINTS],
    pub duration_s: f64,
}

impl BezierCurve {
    pub fn from_vector(v: &DVector<f64>, duration_s: f64) -> Self {
        let mut points = [Vector2::zeros(); N_POINTS];
        for (j, p) in points.iter_mut().enumerate() {
            *p = Vector2::new(v[2 * j], v[2 * j + 1]);
        }
        Self { points, duration_s }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(N_COORDS, self.points.iter().flat_map(|p| [p.x, p.y]))
    }

    pub fn eval(&self, t: f64) -> Vector2<f64> {
        self.derivative(t, 0)
    }

    /// `order`-th time derivative, via the hodograph (forward differences).
    pub fn derivative(&self, t: f64, order: usize) -> Vector2<f64> {
        if order > DEGREE {
            return Vector2::zeros();
        }
        let mut pts: Vec<Vector2<f64>> = self.points.to_vec();
        let mut scale = 1.0;
        for r in 0..order {
            let deg = (DEGREE - r) as f64;
            pts = pts.windows(2).map(|w| w[1] - w[0]).collect();
            scale *= deg / self.duration_s;
        }
        let n = pts.len() - 1;
        let s = (t / self.duration_s).clamp(0.0, 1.0);
        // De Casteljau on the differenced points.
        for level in 0..n {
            for i in 0..n - level {
                pts[i] = pts[i] * (1.0 - s) + pts[i + 1] * s;
            }
        }
        pts[0] * scale
    }
}

fn velocity_and_acceleration(z: &EgoState, params: &VehicleParams) -> (Vector2<f64>, Vector2<f64>) {
    let (s, c) = z.psi.sin_cos();
    let heading = Vector2::new(c, s);
    let normal = Vector2::new(-s, c);
    let curvature_term = z.v * z.v * z.delta.tan() / params.wheelbase_m;
    (heading * z.v, heading * z.a + normal * curvature_term)
}

/// First three control points matching the state's position, velocity and
/// acceleration at `t = 0`.
pub fn initial_control_points(
    z0: &EgoState,
    params: &VehicleParams,
    duration_s: f64,
) -> [Vector2<f64>; 3] {
    let (vel, acc) = velocity_and_acceleration(z0, params);
    let t = duration_s;
    let p0 = Vector2::new(z0.x, z0.y);
    let p1 = p0 + vel * (t / 5.0);
    let p2 = p1 * 2.0 - p0 + acc * (t * t / 20.0);
    [p0, p1, p2]
}

/// Standard deviations of the measured state used for the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateUncertainty {
    pub position_m: f64,
    pub heading_rad: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub steer_rad: f64,
}

impl Default for StateUncertainty {
    fn default() -> Self {
        Self {
            position_m: 0.05,
            heading_rad: 0.01,
            speed_mps: 0.1,
            accel_mps2: 0.1,
            steer_rad: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointPrior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Prior whose first three points follow from the state (covariance by
/// linear propagation of `unc`) and whose last three are nearly free,
/// centered on a constant-velocity extrapolation.
pub fn control_point_prior(
    z0: &EgoState,
    params: &VehicleParams,
    duration_s: f64,
    unc: &StateUncertainty,
    free_std_m: f64,
) -> ControlPointPrior {
    let t = duration_s;
    let [p0, p1, p2] = initial_control_points(z0, params, t);
    let (vel, _) = velocity_and_acceleration(z0, params);
    let mut mean = DVector::zeros(N_COORDS);
    for (j, p) in [p0, p1, p2].iter().enumerate() {
        mean[2 * j] = p.x;
        mean[2 * j + 1] = p.y;
    }
    for j in 3..N_POINTS {
        let p = p0 + vel * (t * j as f64 / 5.0);
        mean[2 * j] = p.x;
        mean[2 * j + 1] = p.y;
    }

    // Jacobian of (P0, P1, P2) with respect to (x, y, psi, v, a, delta).
    let (s, c) = z0.psi.sin_cos();
    let l = params.wheelbase_m;
    let tan = z0.delta.tan();
    let k1 = t / 5.0;
    let k2 = t * t / 20.0;
    let lat = z0.v * z0.v * tan / l;
    let mut jac = SMatrix::<f64, 6, 6>::zeros();
    for (j, factor) in [(0usize, 0.0), (1, 1.0), (2, 2.0)] {
        let r = 2 * j;
        jac[(r, 0)] = 1.0;
        jac[(r + 1, 1)] = 1.0;
        // Velocity contribution: factor * k1 * v * (c, s).
        jac[(r, 2)] = -factor * k1 * z0.v * s;
        jac[(r + 1, 2)] = factor * k1 * z0.v * c;
        jac[(r, 3)] = factor * k1 * c;
        jac[(r + 1, 3)] = factor * k1 * s;
    }
    // Acceleration contribution of P2: k2 * (a (c, s) + lat (-s, c)).
    jac[(4, 2)] += k2 * (-z0.a * s - lat * c);
    jac[(5, 2)] += k2 * (z0.a * c - lat * s);
    jac[(4, 3)] += k2 * (-s) * 2.0 * z0.v * tan / l;
    jac[(5, 3)] += k2 * c * 2.0 * z0.v * tan / l;
    jac[(4, 4)] = k2 * c;
    jac[(5, 4)] = k2 * s;
    let dlat_ddelta = z0.v * z0.v * (1.0 + tan * tan) / l;
    jac[(4, 5)] = k2 * (-s) * dlat_ddelta;
    jac[(5, 5)] = k2 * c * dlat_ddelta;
    let sd = SMatrix::<f64, 6, 6>::from_diagonal(&nalgebra::Vector6::new(
        unc.position_m.powi(2),
        unc.position_m.powi(2),
        unc.heading_rad.powi(2),
        unc.speed_mps.powi(2),
        unc.accel_mps2.powi(2),
        unc.steer_rad.powi(2),
    ));
    let head = jac * sd * jac.transpose();

    let mut cov = DMatrix::zeros(N_COORDS, N_COORDS);
    cov.view_mut((0, 0), (6, 6)).copy_from(&head);
    // Jitter keeps the block positive definite when the state is at rest.
    let jitter = 1e-9 + 1e-6 * unc.position_m.powi(2);
    for i in 0..6 {
        cov[(i, i)] += jitter;
    }
    for i in 6..N_COORDS {
        cov[(i, i)] = free_std_m * free_std_m;
    }
    ControlPointPrior {
        mean,
        covariance: cov,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BezierPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Design matrix mapping stacked control points to stacked positions at
/// `t_k = k * duration / (steps - 1)`.
pub fn design_matrix(steps: usize, duration_s: f64) -> DMatrix<f64> {
    let mut phi = DMatrix::zeros(2 * steps, N_COORDS);
    for k in 0..steps {
        let t = duration_s * k as f64 / (steps - 1).max(1) as f64;
        let b = bernstein_basis(t, duration_s);
        for j in 0..N_POINTS {
            phi[(2 * k, 2 * j)] = b[j];
            phi[(2 * k + 1, 2 * j + 1)] = b[j];
        }
    }
    phi
}

/// Gaussian linear-model posterior over the control points given the mode's
/// means as observations with the mode's covariances as noise.
pub fn blr_fit(
    mode: &ModePrediction,
    prior: &ControlPointPrior,
    duration_s: f64,
) -> Result<BezierPosterior, WarmstartError> {
    let steps = mode.means.len();
    let phi = design_matrix(steps, duration_s);
    let prior_chol = prior
        .covariance
        .clone()
        .cholesky()
        .ok_or(WarmstartError::SingularPrior)?;
    let prior_prec = prior_chol.inverse();
    let mut precision = prior_prec.clone();
    let mut rhs = &prior_prec * &prior.mean;
    for k in 0..steps {
        let inv: Matrix2<f64> = mode.covariances[k]
            .cholesky()
            .ok_or(WarmstartError::SingularObservationNoise(k))?
            .inverse();
        let rows = phi.rows(2 * k, 2);
        let w = inv * rows;
        precision += rows.transpose() * &w;
        rhs += w.transpose() * mode.means[k];
    }
    let chol = precision
        .cholesky()
        .ok_or(WarmstartError::CholeskyFailure)?;
    let mean = chol.solve(&rhs);
    let mut covariance = chol.inverse();
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(BezierPosterior { mean, covariance })
}

/// `count` independent draws from the posterior.
pub fn sample_control_points(
    post: &BezierPosterior,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, WarmstartError> {
    let n = post.mean.len();
    let scale = post.covariance.diagonal().amax().max(1e-300);
    // A tiny relative jitter lets the degenerate zero-spread limit factorize.
    let jittered = &post.covariance + DMatrix::identity(n, n) * (scale * 1e-12);
    let l = jittered
        .cholesky()
        .ok_or(WarmstartError::CholeskyFailure)?
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            &post.mean + &l * z
        })
        .collect())
}

/// State and input trajectory implied by the curve's time derivatives.
///
/// `start` supplies the progress hint and the heading/steering held while the
/// curve is nearly stationary. Speed, acceleration and steering are clipped
/// to the vehicle limits; position and heading follow the curve exactly.
pub fn bezier_to_trajectory(
    curve: &BezierCurve,
    start: &AugmentedState,
    path: &ReferencePath,
    params: &VehicleParams,
) -> Trajectory {
    let n = params.horizon;
    let dt = params.sample_time_s;
    let l = params.wheelbase_m;
    let mut states = Vec::with_capacity(n + 1);
    let mut psi_prev = start.ego.psi;
    let mut delta_prev = start.ego.delta;
    let mut theta_prev = start.theta;
    for k in 0..=n {
        let t = k as f64 * dt;
        let p = curve.eval(t);
        let d1 = curve.derivative(t, 1);
        let d2 = curve.derivative(t, 2);
        let speed = d1.norm();
        let (psi, a, delta) = if speed < LOW_SPEED_MPS {
            let a = d2.dot(&Vector2::new(psi_prev.cos(), psi_prev.sin()));
            (psi_prev, a, delta_prev)
        } else {
            let raw = d1.y.atan2(d1.x);
            let psi = psi_prev + crate::path::wrap_angle(raw - psi_prev);
            let a = d1.dot(&d2) / speed;
            let kappa = (d1.x * d2.y - d1.y * d2.x) / speed.powi(3);
            (psi, a, (l * kappa).atan())
        };
        let theta = path.project(p.x, p.y, theta_prev).theta.max(theta_prev);
        states.push(AugmentedState::new(
            EgoState {
                x: p.x,
                y: p.y,
                psi,
                v: speed.clamp(params.speed_min_mps, params.speed_max_mps),
                a: a.clamp(params.accel_min_mps2, params.accel_max_mps2),
                delta: delta.clamp(-params.steer_max_rad, params.steer_max_rad),
            },
            theta,
        ));
        psi_prev = psi;
        delta_prev = delta;
        theta_prev = theta;
    }
    let inputs = states
        .windows(2)
        .map(|w| {
            let j =
                ((w[1].ego.a - w[0].ego.a) / dt).clamp(params.jerk_min_mps3, params.jerk_max_mps3);
            let dd = ((w[1].ego.delta - w[0].ego.delta) / dt)
                .clamp(params.steer_rate_min_radps, params.steer_rate_max_radps);
            AugmentedInput::new(j, dd, (w[1].theta - w[0].theta) / dt)
        })
        .collect();
    Trajectory { states, inputs }
}

/// Softmin weights `exp(-lambda (J - J_min))`, normalized.
pub fn softmin_weights(costs: &[f64], lambda: f64) -> Result<Vec<f64>, WarmstartError> {
    if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
        return Err(WarmstartError::NonFiniteCost(i));
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|c| (-lambda * (c - min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Softmin-weighted average of candidate control-point vectors.
pub fn cost_weighted_average(
    candidates: &[DVector<f64>],
    costs: &[f64],
    lambda: f64,
) -> Result<DVector<f64>, WarmstartError> {
    assert_eq!(candidates.len(), costs.len());
    let w = softmin_weights(costs, lambda)?;
    let mut out = DVector::zeros(candidates[0].len());
    for (c, wi) in candidates.iter().zip(w) {
        out.axpy(wi, c, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    /// Posterior samples per mode.
    pub samples: usize,
    /// Softmin temperature.
    pub lambda: f64,
    /// Divide `lambda` by the median cost spread of the candidates so the
    /// temperature is independent of the cost scale.
    pub normalize_lambda: bool,
    pub seed: u64,
    pub uncertainty: StateUncertainty,
    /// Prior standard deviation of the last three control points.
    pub free_point_std_m: f64,
    /// Weight on the summed stage violations when scoring candidates
    /// (`MpccProblem::penalized_cost`). Zero scores by the objective alone.
    pub violation_penalty: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            samples: 30,
            lambda: 2.0,
            normalize_lambda: true,
            seed: 0,
            uncertainty: StateUncertainty::default(),
            free_point_std_m: 100.0,
            violation_penalty: 1e3,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), WarmstartError> {
        if self.samples >= 1
            && self.lambda > 0.0
            && self.free_point_std_m > 0.0
            && self.violation_penalty >= 0.0
        {
            Ok(())
        } else {
            Err(WarmstartError::InvalidConfig)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMode {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// Cost of the posterior-mean curve before refinement.
    pub mean_cost: f64,
    pub control_points: DVector<f64>,
}

fn trajectory_cost(
    p: &DVector<f64>,
    duration: f64,
    problem: &MpccProblem,
    penalty: f64,
) -> (Trajectory, f64) {
    let curve = BezierCurve::from_vector(p, duration);
    let mut traj = bezier_to_trajectory(&curve, &problem.initial, &problem.path, &problem.params);
    traj.states[0] = problem.initial;
    let cost = problem.penalized_cost(&traj, penalty);
    (traj, cost)
}

/// Fits, samples, scores and averages one mode.
pub fn refine_mode(
    mode: &ModePrediction,
    problem: &MpccProblem,
    config: &RefinementConfig,
) -> Result<RefinedMode, WarmstartError> {
    config.validate()?;
    let n = problem.horizon();
    if mode.horizon() != n {
        return Err(WarmstartError::HorizonMismatch {
            got: mode.horizon(),
            expected: n,
        });
    }
    let duration = problem.params.horizon_duration();
    let prior = control_point_prior(
        &problem.initial.ego,
        &problem.params,
        duration,
        &config.uncertainty,
        config.free_point_std_m,
    );
    let post = blr_fit(mode, &prior, duration)?;
    let samples = sample_control_points(&post, config.samples, config.seed)?;
    let mut candidates = Vec::with_capacity(samples.len() + 1);
    candidates.push(post.mean.clone());
    candidates.extend(samples);

    let costs: Vec<f64> = candidates
        .par_iter()
        .map(|c| trajectory_cost(c, duration, problem, config.violation_penalty).1)
        .collect();
    let mean_cost = costs[0];
    let lambda = if config.normalize_lambda {
        let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let mut spread: Vec<f64> = costs
            .iter()
            .map(|c| c - min)
            .filter(|d| d.is_finite())
            .collect();
        spread.sort_by(f64::total_cmp);
        let median = spread.get(spread.len() / 2).copied().unwrap_or(0.0);
        if median > 1e-12 {
            config.lambda / median
        } else {
            config.lambda
        }
    } else {
        config.lambda
    };
    let averaged = cost_weighted_average(&candidates, &costs, lambda)?;
    let (trajectory, cost) =
        trajectory_cost(&averaged, duration, problem, config.violation_penalty);
    if !cost.is_finite() {
        return Err(WarmstartError::NonFiniteCost(candidates.len()));
    }
    Ok(RefinedMode {
        trajectory,
        cost,
        mean_cost,
        control_points: averaged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "mode", rename_all = "snake_case")]
pub enum WarmstartSource {
    Previous,
    Mode(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub source: WarmstartSource,
    pub mode_costs: Vec<f64>,
    pub previous_cost: Option<f64>,
}

/// Cheapest refined mode, unless the shifted previous solution is at least
/// as cheap under the current problem.
pub fn select_warmstart(
    forecast: &SceneForecast,
    prev: Option<&Trajectory>,
    problem: &MpccProblem,
    config: &RefinementConfig,
) -> Result<Selection, WarmstartError> {
    let refined: Vec<Result<RefinedMode, WarmstartError>> = forecast
        .ego_modes
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let cfg = RefinementConfig {
                seed: config
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(i as u64),
                ..config.clone()
            };
            refine_mode(m, problem, &cfg)
        })
        .collect();
    let mut best: Option<(usize, RefinedMode)> = None;
    let mut mode_costs = Vec::with_capacity(refined.len());
    for (i, r) in refined.into_iter().enumerate() {
        match r {
            Ok(r) => {
                mode_costs.push(r.cost);
                if best.as_ref().is_none_or(|(_, b)| r.cost < b.cost) {
                    best = Some((i, r));
                }
            }
            Err(e) => {
                log::warn!("mode {i} refinement failed: {e}");
                mode_costs.push(f64::INFINITY);
            }
        }
    }
    let shifted = prev.map(|p| {
        let t = shift_previous(p, problem);
        let c = problem.penalized_cost(&t, config.violation_penalty);
        (t, c)
    });
    let previous_cost = shifted.as_ref().map(|(_, c)| *c);
    match (best, shifted) {
        (None, None) => Err(WarmstartError::NoCandidates),
        (Some((i, m)), None) => Ok(Selection {
            trajectory: m.trajectory,
            cost: m.cost,
            source: WarmstartSource::Mode(i),
            mode_costs,
            previous_cost,
        }),
        (Some((i, m)), Some((_, c))) if m.cost < c => Ok(Selection {
            trajectory: m.trajectory,
            cost: m.cost,
            source: WarmstartSource::Mode(i),
            mode_costs,
            previous_cost,
        }),
        (_, Some((t, c))) => Ok(Selection {
            trajectory: t,
            cost: c,
            source: WarmstartSource::Previous,
            mode_costs,
            previous_cost,
        }),
    }
}

/// How a trajectory passes one obstacle, from the net sweep of the ego's
/// bearing in the obstacle's frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassSide {
    /// Bearing swept clockwise (e.g. passing along the obstacle's left).
    Left,
    /// Bearing swept counter-clockwise.
    Right,
    /// No significant sweep: the ego stays on the same side, typically behind.
    Behind,
}

const SWEEP_THRESHOLD_RAD: f64 = std::f64::consts::FRAC_PI_3;

/// Per-obstacle pass side of `traj`, in obstacle order.
pub fn homotopy_signature(traj: &Trajectory, obstacles: &[ObstacleForecast]) -> Vec<PassSide> {
    obstacles
        .iter()
        .map(|o| {
            let mut sweep = 0.0;
            let mut prev: Option<f64> = None;
            for (k, s) in traj.states.iter().enumerate() {
                let pose = &o.poses[k.min(o.poses.len() - 1)];
                let (sh, ch) = pose.heading.sin_cos();
                let (dx, dy) = (s.ego.x - pose.x, s.ego.y - pose.y);
                let lon = ch * dx + sh * dy;
                let lat = -sh * dx + ch * dy;
                let bearing = lat.atan2(lon);
                if let Some(p) = prev {
                    sweep += crate::path::wrap_angle(bearing - p);
                }
                prev = Some(bearing);
            }
            if sweep <= -SWEEP_THRESHOLD_RAD {
                PassSide::Left
            } else if sweep >= SWEEP_THRESHOLD_RAD {
                PassSide::Right
            } else {
                PassSide::Behind
            }
        })
        .collect()
}
