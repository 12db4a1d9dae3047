//! Multimodal motion forecasts for the ego vehicle and obstacles.
//!
//! The planner only consumes the [`Predictor`] interface. Two implementations
//! ship: [`OracleGmmPredictor`], which enumerates discrete maneuvers from the
//! scene's ground-truth layout and rolls each out with a simple tracker, and
//! [`ConstantVelocityPredictor`], a unimodal extrapolation.

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpcc::{LaneMarkers, ObstacleForecast, ObstaclePose};
use crate::path::ReferencePath;

/// Agent id reserved for the ego vehicle.
pub const EGO_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPose {
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub id: usize,
    pub poses: Vec<HistoryPose>,
    pub half_length_m: f64,
    pub half_width_m: f64,
}

impl AgentHistory {
    pub fn latest(&self) -> Option<&HistoryPose> {
        self.poses.last()
    }
}

/// One Gaussian mixture component over future ego positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePrediction {
    pub mode: usize,
    pub label: String,
    pub probability: f64,
    pub means: Vec<Vector2<f64>>,
    pub covariances: Vec<Matrix2<f64>>,
}

impl ModePrediction {
    pub fn horizon(&self) -> usize {
        self.means.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneForecast {
    pub ego_modes: Vec<ModePrediction>,
    pub obstacles: Vec<ObstacleForecast>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PredictionError {
    #[error("no history for the ego vehicle")]
    MissingEgoHistory,
    #[error("agent {0} has an empty history")]
    EmptyHistory(usize),
}

/// Ground-truth layout the oracle predictor may exploit. Lateral offsets use
/// the contouring-error convention (positive to the right of the path).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneKind {
    LaneKeep {
        lane_offset_m: f64,
    },
    Merge {
        target_offset_m: f64,
    },
    Overtake {
        lane_offset_m: f64,
        pass_offset_m: f64,
    },
    Crossing {
        lane_offset_m: f64,
    },
}

/// Map and timing information shared by all predictors.
#[derive(Debug, Clone, Copy)]
pub struct PredictionContext<'a> {
    pub path: &'a ReferencePath,
    pub lanes: &'a LaneMarkers,
    pub scene: SceneKind,
    pub sample_time_s: f64,
    pub desired_speed_mps: f64,
    pub lane_width_m: f64,
    /// Seed for the predictor's noise; predictions are pure given it.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Maximum number of ego modes kept (most probable first).
    pub modes: usize,
    /// Isotropic position variance at the current step.
    pub initial_variance_m2: f64,
    /// Variance added per future step.
    pub variance_growth_m2: f64,
    /// Standard deviation of the smooth bias added to each mode mean at the
    /// horizon end.
    pub mean_noise_m: f64,
    /// Obstacle ellipse semi-axes as a multiple of the half dimensions.
    pub obstacle_inflation: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            modes: 3,
            initial_variance_m2: 0.01,
            variance_growth_m2: 0.01,
            mean_noise_m: 0.3,
            obstacle_inflation: std::f64::consts::SQRT_2,
        }
    }
}

impl PredictionConfig {
    fn covariance(&self, k: usize) -> Matrix2<f64> {
        Matrix2::identity() * (self.initial_variance_m2 + k as f64 * self.variance_growth_m2)
    }
}

pub trait Predictor: Send + Sync {
    fn predict(
        &self,
        histories: &[AgentHistory],
        ctx: &PredictionContext<'_>,
        horizon: usize,
    ) -> Result<SceneForecast, PredictionError>;
}

fn split_histories(
    histories: &[AgentHistory],
) -> Result<(&AgentHistory, Vec<&AgentHistory>), PredictionError> {
    for h in histories {
        if h.poses.is_empty() {
            return Err(PredictionError::EmptyHistory(h.id));
        }
    }
    let ego = histories
        .iter()
        .find(|h| h.id == EGO_ID)
        .ok_or(PredictionError::MissingEgoHistory)?;
    let others = histories.iter().filter(|h| h.id != EGO_ID).collect();
    Ok((ego, others))
}

/// Constant-velocity forecast of every non-ego agent, as used by the planner.
pub fn obstacle_forecasts(
    others: &[&AgentHistory],
    horizon: usize,
    dt: f64,
    inflation: f64,
) -> Vec<ObstacleForecast> {
    others
        .iter()
        .map(|h| {
            let p = h.latest().expect("histories are non-empty");
            let (s, c) = p.psi.sin_cos();
            let poses = (0..=horizon)
                .map(|k| {
                    let t = k as f64 * dt;
                    ObstaclePose {
                        x: p.x + p.v * c * t,
                        y: p.y + p.v * s * t,
                        heading: p.psi,
                    }
                })
                .collect();
            ObstacleForecast {
                id: h.id,
                poses,
                half_length_m: h.half_length_m * inflation,
                half_width_m: h.half_width_m * inflation,
            }
        })
        .collect()
}

/// Unimodal straight-line extrapolation of the ego's latest pose.
#[derive(Debug, Clone, Default)]
pub struct ConstantVelocityPredictor {
    pub config: PredictionConfig,
}

impl Predictor for ConstantVelocityPredictor {
    fn predict(
        &self,
        histories: &[AgentHistory],
        ctx: &PredictionContext<'_>,
        horizon: usize,
    ) -> Result<SceneForecast, PredictionError> {
        let (ego, others) = split_histories(histories)?;
        let p = ego.latest().expect("histories are non-empty");
        let dir = Vector2::new(p.psi.cos(), p.psi.sin());
        let means = (0..=horizon)
            .map(|k| Vector2::new(p.x, p.y) + dir * (p.v * k as f64 * ctx.sample_time_s))
            .collect();
        let covariances = (0..=horizon).map(|k| self.config.covariance(k)).collect();
        Ok(SceneForecast {
            ego_modes: vec![ModePrediction {
                mode: 0,
                label: "constant-velocity".into(),
                probability: 1.0,
                means,
                covariances,
            }],
            obstacles: obstacle_forecasts(
                &others,
                horizon,
                ctx.sample_time_s,
                self.config.obstacle_inflation,
            ),
        })
    }
}

/// Agent state in path coordinates: progress `s`, lateral offset `d`
/// (positive right), speed along the path.
#[derive(Debug, Clone, Copy)]
struct PathAgent {
    s: f64,
    d: f64,
    v: f64,
    half_length: f64,
}

/// A discrete maneuver hypothesis for the ego.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Maneuver {
    /// Keep `lane`, following any leader in it.
    Follow { lane: f64 },
    /// Move to `lane` once aligned with the moving target `s0 + v t`,
    /// tracking that target longitudinally.
    Gap {
        lane: f64,
        s0: f64,
        v: f64,
        lo: f64,
        hi: f64,
    },
    /// Swing out to `pass_lane` immediately and return to `lane` when clear.
    Overtake { lane: f64, pass_lane: f64 },
    /// Stop before progress `stop_s`.
    Yield { lane: f64, stop_s: f64 },
    /// Proceed at the desired speed ignoring leaders.
    Go { lane: f64 },
}

const LATERAL_DURATION_S: f64 = 3.0;
const EGO_HALF_LENGTH_M: f64 = 2.25;

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
}

fn idm(v: f64, v0: f64, dv: f64, gap: f64) -> f64 {
    let (a, b, s0, th): (f64, f64, f64, f64) = (1.5, 2.0, 2.0, 1.2);
    let s_star = s0 + v * th + v * dv / (2.0 * (a * b).sqrt());
    let free = 1.0 - (v / v0.max(0.1)).powi(4);
    if gap.is_finite() {
        a * (free - (s_star.max(0.0) / gap.max(0.1)).powi(2))
    } else {
        a * free
    }
}

/// Ground-truth-intent predictor: one mode per feasible maneuver of the
/// scene, each rolled out with a path-coordinate tracker.
#[derive(Debug, Clone, Default)]
pub struct OracleGmmPredictor {
    pub config: PredictionConfig,
}

impl OracleGmmPredictor {
    pub fn new(config: PredictionConfig) -> Self {
        Self { config }
    }

    fn maneuvers(
        &self,
        ego: &PathAgent,
        others: &[PathAgent],
        ctx: &PredictionContext<'_>,
    ) -> Vec<(String, Maneuver)> {
        let half_lane = 0.5 * ctx.lane_width_m;
        let in_lane = |a: &PathAgent, lane: f64| (a.d - lane).abs() < half_lane;
        match ctx.scene {
            SceneKind::LaneKeep { lane_offset_m } => vec![(
                "lane-keep".into(),
                Maneuver::Follow {
                    lane: lane_offset_m,
                },
            )],
            SceneKind::Merge { target_offset_m } => {
                let mut lane_cars: Vec<&PathAgent> = others
                    .iter()
                    .filter(|a| in_lane(a, target_offset_m))
                    .collect();
                lane_cars.sort_by(|a, b| a.s.total_cmp(&b.s));
                let margin = EGO_HALF_LENGTH_M + 3.0;
                let mut out = Vec::new();
                // Gaps from the rear of the queue to its front.
                for i in 0..=lane_cars.len() {
                    let rear = i.checked_sub(1).map(|j| lane_cars[j]);
                    let front = lane_cars.get(i).copied();
                    let (s0, v, lo, hi) = match (rear, front) {
                        (None, None) => (ego.s, ego.v, f64::NEG_INFINITY, f64::INFINITY),
                        (None, Some(f)) => {
                            let hi = f.s - f.half_length - margin;
                            (hi - 5.0, f.v, f64::NEG_INFINITY, hi)
                        }
                        (Some(r), None) => {
                            let lo = r.s + r.half_length + margin;
                            (lo + 5.0, r.v, lo, f64::INFINITY)
                        }
                        (Some(r), Some(f)) => {
                            let lo = r.s + r.half_length + margin;
                            let hi = f.s - f.half_length - margin;
                            (0.5 * (lo + hi), 0.5 * (r.v + f.v), lo, hi)
                        }
                    };
                    let label = if lane_cars.is_empty() {
                        "merge".to_string()
                    } else {
                        format!("merge-gap-{i}")
                    };
                    out.push((
                        label,
                        Maneuver::Gap {
                            lane: target_offset_m,
                            s0,
                            v,
                            lo: lo - s0,
                            hi: hi - s0,
                        },
                    ));
                }
                out
            }
            SceneKind::Overtake {
                lane_offset_m,
                pass_offset_m,
            } => vec![
                (
                    "overtake".into(),
                    Maneuver::Overtake {
                        lane: lane_offset_m,
                        pass_lane: pass_offset_m,
                    },
                ),
                (
                    "follow".into(),
                    Maneuver::Follow {
                        lane: lane_offset_m,
                    },
                ),
            ],
            SceneKind::Crossing { lane_offset_m } => {
                // Conflict point: the closest crossing agent ahead, by progress.
                let conflict = others
                    .iter()
                    .filter(|a| a.s > ego.s)
                    .map(|a| a.s)
                    .fold(f64::INFINITY, f64::min);
                let mut out = vec![(
                    "go".into(),
                    Maneuver::Go {
                        lane: lane_offset_m,
                    },
                )];
                if conflict.is_finite() {
                    out.push((
                        "yield".into(),
                        Maneuver::Yield {
                            lane: lane_offset_m,
                            stop_s: conflict - 10.0,
                        },
                    ));
                }
                out
            }
        }
    }

    /// Rolls out a maneuver; returns path coordinates and the mean absolute
    /// commanded acceleration (used for the mode probability).
    fn simulate(
        &self,
        m: &Maneuver,
        ego: &PathAgent,
        others: &[PathAgent],
        ctx: &PredictionContext<'_>,
        horizon: usize,
    ) -> (Vec<(f64, f64)>, f64) {
        let dt = ctx.sample_time_s;
        let half_lane = 0.5 * ctx.lane_width_m;
        let v_des = ctx.desired_speed_mps;
        let (mut s, mut v) = (ego.s, ego.v);
        let d0 = ego.d;
        let mut lateral_from: Option<(f64, f64, f64)> = None;
        let mut out = Vec::with_capacity(horizon + 1);
        let mut effort = 0.0;

        let leader_accel = |s: f64, v: f64, d: f64, t: f64| {
            let mut best: Option<(f64, f64)> = None;
            for o in others {
                if (o.d - d).abs() >= half_lane {
                    continue;
                }
                let os = o.s + o.v * t;
                let gap = os - s - o.half_length - EGO_HALF_LENGTH_M;
                if os > s && best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, o.v));
                }
            }
            match best {
                Some((gap, ov)) => idm(v, v_des, v - ov, gap),
                None => idm(v, v_des, 0.0, f64::INFINITY),
            }
        };

        for k in 0..=horizon {
            let t = k as f64 * dt;
            let d = match lateral_from {
                Some((t0, from, to)) => {
                    from + (to - from) * smoothstep((t - t0) / LATERAL_DURATION_S)
                }
                None => d0,
            };
            out.push((s, d));
            let acc = match *m {
                Maneuver::Follow { lane } => {
                    if lateral_from.is_none() && (d0 - lane).abs() > 1e-6 {
                        lateral_from = Some((t, d0, lane));
                    }
                    leader_accel(s, v, d, t)
                }
                Maneuver::Go { lane } => {
                    if lateral_from.is_none() && (d0 - lane).abs() > 1e-6 {
                        lateral_from = Some((t, d0, lane));
                    }
                    idm(v, v_des, 0.0, f64::INFINITY)
                }
                Maneuver::Yield { lane, stop_s } => {
                    if lateral_from.is_none() && (d0 - lane).abs() > 1e-6 {
                        lateral_from = Some((t, d0, lane));
                    }
                    idm(v, v_des, v, (stop_s - s).max(0.1))
                }
                Maneuver::Overtake { lane, pass_lane } => {
                    match lateral_from {
                        None => lateral_from = Some((t, d0, pass_lane)),
                        Some((_, _, to)) if to == pass_lane => {
                            let clear = others
                                .iter()
                                .filter(|o| (o.d - lane).abs() < half_lane)
                                .all(|o| {
                                    s - (o.s + o.v * t) > o.half_length + EGO_HALF_LENGTH_M + 6.0
                                        || o.s + o.v * t > s + 60.0
                                });
                            if clear && t > LATERAL_DURATION_S {
                                lateral_from = Some((t, d, lane));
                            }
                        }
                        _ => {}
                    }
                    idm(v, v_des + 3.0, 0.0, f64::INFINITY)
                }
                Maneuver::Gap {
                    lane,
                    s0,
                    v: gv,
                    lo,
                    hi,
                } => {
                    let target = s0 + gv * t;
                    let rel = s - target;
                    if lateral_from.is_none() && rel >= lo && rel <= hi {
                        lateral_from = Some((t, d0, lane));
                    }
                    let a = 0.4 * (target - s) + 1.2 * (gv - v);
                    if lateral_from.is_some() {
                        a.min(leader_accel(s, v, lane, t))
                    } else {
                        a
                    }
                }
            };
            let acc = acc.clamp(-6.0, 2.5);
            effort += acc.abs();
            let v_next = (v + acc * dt).max(0.0);
            s += 0.5 * (v + v_next) * dt;
            v = v_next;
        }
        (out, effort / (horizon + 1) as f64)
    }
}

fn to_path_agent(path: &ReferencePath, p: &HistoryPose, half_length: f64, hint: f64) -> PathAgent {
    let proj = path.project(p.x, p.y, hint);
    let q = path.query(proj.theta);
    let (sp, cp) = q.psi.sin_cos();
    let d = sp * (p.x - q.x) - cp * (p.y - q.y);
    PathAgent {
        s: proj.theta,
        d,
        v: p.v * (p.psi - q.psi).cos(),
        half_length,
    }
}

impl Predictor for OracleGmmPredictor {
    fn predict(
        &self,
        histories: &[AgentHistory],
        ctx: &PredictionContext<'_>,
        horizon: usize,
    ) -> Result<SceneForecast, PredictionError> {
        let (ego_h, others_h) = split_histories(histories)?;
        let ego_pose = *ego_h.latest().expect("histories are non-empty");
        let hint = ctx.path.project(ego_pose.x, ego_pose.y, 0.0).theta;
        let hint = ctx.path.project(ego_pose.x, ego_pose.y, hint).theta;
        let ego = to_path_agent(ctx.path, &ego_pose, EGO_HALF_LENGTH_M, hint);
        let others: Vec<PathAgent> = others_h
            .iter()
            .map(|h| {
                let p = h.latest().expect("histories are non-empty");
                let guess = hint + ((p.x - ego_pose.x).powi(2) + (p.y - ego_pose.y).powi(2)).sqrt();
                let mut a = to_path_agent(ctx.path, p, h.half_length_m, guess);
                // Crossing traffic has no meaningful along-path speed.
                if (p.psi - ctx.path.query(a.s).psi).cos().abs() < 0.5 {
                    a.v = 0.0;
                    a.d = f64::INFINITY;
                }
                a
            })
            .collect();

        // Crossing agents are excluded from lane following but define the
        // conflict point of the crossing scene.
        let crossing: Vec<PathAgent> = others_h
            .iter()
            .zip(&others)
            .filter(|(_, a)| a.d.is_infinite())
            .map(|(h, a)| {
                let p = h.latest().expect("histories are non-empty");
                let q = ctx.path.query(a.s);
                // Progress of the point where the agent's heading line meets the path.
                let (dx, dy) = (p.psi.cos(), p.psi.sin());
                let (nx, ny) = (q.x - p.x, q.y - p.y);
                let along = nx * dx + ny * dy;
                let foot = ctx
                    .path
                    .project(p.x + along * dx, p.y + along * dy, a.s)
                    .theta;
                PathAgent { s: foot, ..*a }
            })
            .collect();
        let lane_agents: Vec<PathAgent> =
            others.iter().filter(|a| a.d.is_finite()).copied().collect();
        let scene_agents: Vec<PathAgent> = match ctx.scene {
            SceneKind::Crossing { .. } => crossing,
            _ => lane_agents.clone(),
        };

        let mut candidates: Vec<(String, Vec<(f64, f64)>, f64)> = self
            .maneuvers(&ego, &scene_agents, ctx)
            .into_iter()
            .map(|(label, m)| {
                let (traj, effort) = self.simulate(&m, &ego, &lane_agents, ctx, horizon);
                (label, traj, effort)
            })
            .collect();
        candidates.sort_by(|a, b| a.2.total_cmp(&b.2));
        candidates.truncate(self.config.modes.max(1));

        let weights: Vec<f64> = candidates.iter().map(|c| (-c.2).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let noise = Normal::new(0.0, self.config.mean_noise_m.max(0.0)).expect("finite std");

        let ego_modes = candidates
            .into_iter()
            .zip(weights)
            .enumerate()
            .map(|(i, ((label, traj, _), w))| {
                let bias = Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                let means = traj
                    .iter()
                    .enumerate()
                    .map(|(k, &(s, d))| {
                        let q = ctx.path.query(s);
                        let (sp, cp) = q.psi.sin_cos();
                        let frac = k as f64 / horizon.max(1) as f64;
                        Vector2::new(q.x + d * sp, q.y - d * cp) + bias * frac
                    })
                    .collect::<Vec<_>>();
                // The first mean is the measured position.
                let mut means = means;
                means[0] = Vector2::new(ego_pose.x, ego_pose.y);
                ModePrediction {
                    mode: i,
                    label,
                    probability: w / total,
                    means,
                    covariances: (0..=horizon).map(|k| self.config.covariance(k)).collect(),
                }
            })
            .collect();

        Ok(SceneForecast {
            ego_modes,
            obstacles: obstacle_forecasts(
                &others_h,
                horizon,
                ctx.sample_time_s,
                self.config.obstacle_inflation,
            ),
        })
    }
}
