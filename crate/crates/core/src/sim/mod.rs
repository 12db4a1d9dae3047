//! Closed-loop traffic simulation: IDM agents, scripted crossers, reveal
//! events, and the planner-in-the-loop episode runner.

mod episode;
mod metrics;
mod world;

pub use episode::{
    run_episode, EpisodeRecord, Outcome, PlannerConfig, PlannerVariant, PredictorKind, StepRecord,
    WarmstartTelemetry,
};
pub use metrics::{config_hash, monte_carlo, sub_seed, MetricsRow, MetricsTable, MonteCarloResult};
pub use world::{footprints_overlap, step_world, Agent, Footprint, World};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpcc::{CostWeights, LaneMarkers};
use crate::path::{PathError, ReferencePath, Waypoint};
use crate::prediction::SceneKind;
use crate::vehicle::VehicleParams;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("road: {0}")]
    Road(#[from] PathError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    pub v0_mps: f64,
    pub time_headway_s: f64,
    pub max_accel_mps2: f64,
    pub comfort_decel_mps2: f64,
    pub min_gap_m: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0_mps: 13.0,
            time_headway_s: 1.5,
            max_accel_mps2: 1.5,
            comfort_decel_mps2: 2.0,
            min_gap_m: 2.0,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn is_valid(&self) -> bool {
        [
            self.v0_mps,
            self.time_headway_s,
            self.max_accel_mps2,
            self.comfort_decel_mps2,
            self.min_gap_m,
            self.exponent,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite())
    }

    /// Bumper gap at which a follower at speed `v` behind a leader at the
    /// same speed has zero acceleration.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        let free = 1.0 - (v / self.v0_mps).powf(self.exponent);
        (self.min_gap_m + v * self.time_headway_s) / free.sqrt()
    }
}

/// Intelligent Driver Model acceleration. `dv` is the closing speed
/// (follower minus leader), `gap` the bumper-to-bumper distance; pass
/// `f64::INFINITY` when there is no leader.
pub fn idm_accel(v: f64, dv: f64, gap: f64, p: &IdmParams) -> f64 {
    let free = 1.0 - (v / p.v0_mps).powf(p.exponent);
    if !gap.is_finite() {
        return p.max_accel_mps2 * free;
    }
    let dynamic =
        v * p.time_headway_s + v * dv / (2.0 * (p.max_accel_mps2 * p.comfort_decel_mps2).sqrt());
    let s_star = p.min_gap_m + dynamic.max(0.0);
    p.max_accel_mps2 * (free - (s_star / gap.max(1e-3)).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Merge,
    OncomingOvertake,
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSpec {
    pub centerline_m: Vec<[f64; 2]>,
    pub left_boundary_m: Vec<[f64; 2]>,
    pub right_boundary_m: Vec<[f64; 2]>,
    /// Lane-marker offsets from the centerline (positive right).
    pub lane_markers_m: Vec<f64>,
    pub lane_width_m: f64,
}

impl RoadSpec {
    pub fn build(&self) -> Result<ReferencePath, SimError> {
        let pts = |v: &[[f64; 2]]| {
            v.iter()
                .map(|p| Waypoint::new(p[0], p[1]))
                .collect::<Vec<_>>()
        };
        Ok(ReferencePath::build(
            &pts(&self.centerline_m),
            &pts(&self.left_boundary_m),
            &pts(&self.right_boundary_m),
        )?)
    }

    pub fn lanes(&self) -> LaneMarkers {
        let mut offsets_m = self.lane_markers_m.clone();
        offsets_m.sort_by(f64::total_cmp);
        LaneMarkers { offsets_m }
    }
}

/// How an agent moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Route {
    /// IDM-controlled along the centerline at a fixed lateral offset;
    /// `reverse` agents drive against the path direction.
    Lane {
        offset_m: f64,
        s_m: f64,
        reverse: bool,
    },
    /// Constant speed along a straight line.
    Scripted {
        x_m: f64,
        y_m: f64,
        heading_rad: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: usize,
    pub route: Route,
    pub v_mps: f64,
    #[serde(default)]
    pub idm: IdmParams,
    pub length_m: f64,
    pub width_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub s_m: f64,
    pub offset_m: f64,
    pub v_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Effect {
    /// The agent becomes visible to the ego's perception.
    Reveal { agent_id: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub t_s: f64,
    pub effect: Effect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    /// Offset of the entrance lane from the centerline (the target lane).
    pub entrance_offset_m: f64,
    /// Progress at which the entrance lane has vanished.
    pub entrance_end_m: f64,
    /// Time the ego keeps driving after merging, so that late collisions count.
    pub grace_s: f64,
}

/// Sampling ranges applied on top of a scenario template. Each `[lo, hi]`
/// is sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Randomization {
    pub ego_s_jitter_m: f64,
    pub ego_v_mps: [f64; 2],
    pub agent_s_jitter_m: f64,
    pub agent_v_mps: [f64; 2],
    pub v0_mps: [f64; 2],
    pub time_headway_s: [f64; 2],
    pub min_gap_m: [f64; 2],
    pub max_accel_mps2: [f64; 2],
}

impl Default for Randomization {
    fn default() -> Self {
        Self {
            ego_s_jitter_m: 5.0,
            ego_v_mps: [10.0, 14.0],
            agent_s_jitter_m: 6.0,
            agent_v_mps: [10.0, 14.0],
            v0_mps: [11.0, 15.0],
            time_headway_s: [1.0, 2.0],
            min_gap_m: [1.5, 3.0],
            max_accel_mps2: [1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub road: RoadSpec,
    pub ego: EgoSpec,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    pub duration_s: f64,
    pub seed: u64,
    /// Speed the ego's predictor assumes the ego wants to drive.
    pub desired_speed_mps: f64,
    #[serde(default)]
    pub merge: Option<MergeSpec>,
    #[serde(default)]
    pub randomization: Option<Randomization>,
    pub vehicle: VehicleParams,
    pub weights: CostWeights,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(m.to_string()));
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if let Err(e) = self.vehicle.validate() {
            return Err(SimError::InvalidScenario(e));
        }
        if !(self.road.lane_width_m > 0.0) {
            return bad("lane_width_m must be positive");
        }
        for a in &self.agents {
            if a.id == crate::prediction::EGO_ID {
                return bad("agent id 0 is reserved for the ego");
            }
            if !a.idm.is_valid() || !(a.length_m > 0.0 && a.width_m > 0.0) || a.v_mps < 0.0 {
                return Err(SimError::InvalidScenario(format!(
                    "agent {} has invalid parameters",
                    a.id
                )));
            }
        }
        for e in &self.events {
            if !(0.0..=self.duration_s).contains(&e.t_s) {
                return bad("event time outside the episode");
            }
            let Effect::Reveal { agent_id } = e.effect;
            if !self.agents.iter().any(|a| a.id == agent_id) {
                return Err(SimError::InvalidScenario(format!(
                    "event refers to unknown agent {agent_id}"
                )));
            }
        }
        if self.kind == ScenarioKind::Merge && self.merge.is_none() {
            return bad("merge scenarios need a merge section");
        }
        Ok(())
    }

    /// Maneuver layout handed to the oracle predictor.
    pub fn scene_kind(&self) -> SceneKind {
        match self.kind {
            ScenarioKind::Merge => SceneKind::Merge {
                target_offset_m: 0.0,
            },
            ScenarioKind::OncomingOvertake => SceneKind::Overtake {
                lane_offset_m: 0.0,
                pass_offset_m: -self.road.lane_width_m,
            },
            ScenarioKind::Crossing => SceneKind::Crossing { lane_offset_m: 0.0 },
        }
    }

    /// Number of closed-loop steps.
    pub fn steps(&self) -> usize {
        (self.duration_s / self.vehicle.sample_time_s).round() as usize
    }

    /// A random instance of this template; identity when there is no
    /// randomization section. The result carries `seed`.
    pub fn sample(&self, seed: u64) -> Scenario {
        let mut out = self.clone();
        out.seed = seed;
        let Some(r) = &self.randomization else {
            return out;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |range: [f64; 2]| {
            if range[1] > range[0] {
                rng.random_range(range[0]..range[1])
            } else {
                range[0]
            }
        };
        out.ego.s_m += uniform([-r.ego_s_jitter_m, r.ego_s_jitter_m]);
        out.ego.v_mps = uniform(r.ego_v_mps);
        for a in &mut out.agents {
            if let Route::Lane { s_m, .. } = &mut a.route {
                *s_m += uniform([-r.agent_s_jitter_m, r.agent_s_jitter_m]);
                a.v_mps = uniform(r.agent_v_mps);
                a.idm.v0_mps = uniform(r.v0_mps);
                a.idm.time_headway_s = uniform(r.time_headway_s);
                a.idm.min_gap_m = uniform(r.min_gap_m);
                a.idm.max_accel_mps2 = uniform(r.max_accel_mps2);
            }
        }
        // Jitter must not reorder or overlap vehicles within a lane.
        let mut lane_agents: Vec<(f64, bool, usize)> = out
            .agents
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a.route {
                Route::Lane {
                    offset_m, reverse, ..
                } => Some((offset_m, reverse, i)),
                _ => None,
            })
            .collect();
        lane_agents.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for group in lane_agents.chunk_by(|a, b| a.0 == b.0 && a.1 == b.1) {
            let mut idx: Vec<usize> = group.iter().map(|g| g.2).collect();
            let s_of = |a: &AgentSpec| match a.route {
                Route::Lane { s_m, .. } => s_m,
                _ => unreachable!(),
            };
            idx.sort_by(|&i, &j| s_of(&self.agents[i]).total_cmp(&s_of(&self.agents[j])));
            for w in 1..idx.len() {
                let (prev, cur) = (&out.agents[idx[w - 1]], &out.agents[idx[w]]);
                let min_s = s_of(prev) + 0.5 * (prev.length_m + cur.length_m) + 4.0;
                if s_of(cur) < min_s {
                    if let Route::Lane { s_m, .. } = &mut out.agents[idx[w]].route {
                        *s_m = min_s;
                    }
                }
            }
        }
        out
    }
}
