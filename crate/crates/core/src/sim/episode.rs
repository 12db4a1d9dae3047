use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::world::{step_world, World};
use super::{Scenario, ScenarioKind, SimError};
use crate::mpcc::{MpccProblem, ObstacleForecast};
use crate::prediction::{
    ConstantVelocityPredictor, OracleGmmPredictor, PredictionConfig, PredictionContext, Predictor,
};
use crate::solver::{cold_start, shift_previous, solve, SolveStatus, SolverConfig, Trajectory};
use crate::vehicle::EgoState;
use crate::warmstart::{select_warmstart, RefinementConfig, WarmstartSource};

use super::metrics::sub_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerVariant {
    /// Warmstart from the shifted previous solution (cold start at t = 0).
    Baseline,
    /// Warmstart from the refined prediction modes, bounded by the shifted
    /// previous solution.
    LearningAided,
}

impl PlannerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerVariant::Baseline => "baseline",
            PlannerVariant::LearningAided => "learning_aided",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Oracle,
    ConstantVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub variant: PlannerVariant,
    #[serde(default = "default_predictor")]
    pub predictor: PredictorKind,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_predictor() -> PredictorKind {
    PredictorKind::Oracle
}

impl PlannerConfig {
    pub fn new(variant: PlannerVariant) -> Self {
        Self {
            variant,
            predictor: PredictorKind::Oracle,
            prediction: PredictionConfig::default(),
            refinement: RefinementConfig::default(),
            solver: SolverConfig::default(),
        }
    }

    fn predictor(&self) -> Box<dyn Predictor> {
        match self.predictor {
            PredictorKind::Oracle => Box::new(OracleGmmPredictor::new(self.prediction.clone())),
            PredictorKind::ConstantVelocity => Box::new(ConstantVelocityPredictor {
                config: self.prediction.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    MergeSuccess,
    MergeAborted,
    Collision,
    TimeoutOk,
    /// The planner raised an error; the episode was cut short.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmstartTelemetry {
    /// `cold`, `previous` or `mode-<i>`.
    pub source: String,
    /// Cost of the initial guess under the current problem.
    pub guess_cost: f64,
    /// Cost of the shifted previous solution under the current problem.
    pub previous_cost: Option<f64>,
    pub mode_costs: Vec<f64>,
    pub mode_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstacleSnapshot {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t_s: f64,
    pub ego: EgoState,
    pub progress_m: f64,
    pub lateral_m: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Cost of the solver output under the current problem.
    pub cost: f64,
    pub max_violation: f64,
    pub solve_time_s: f64,
    pub wall_time_s: f64,
    pub warmstart: WarmstartTelemetry,
    /// The solver failed and the shifted previous plan was executed.
    pub fallback: bool,
    pub obstacles: Vec<ObstacleSnapshot>,
    pub overlap: bool,
    pub min_ttc_s: Option<f64>,
    /// Solver output and the obstacle forecasts it was planned against.
    #[serde(skip)]
    pub solution: Trajectory,
    #[serde(skip)]
    pub forecasts: Vec<ObstacleForecast>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub scenario: String,
    pub seed: u64,
    pub variant: PlannerVariant,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub error: Option<String>,
}

impl EpisodeRecord {
    pub fn collided(&self) -> bool {
        self.outcome == Outcome::Collision
    }

    /// First step at or after `t_s`.
    pub fn step_at(&self, t_s: f64) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.t_s >= t_s - 1e-9)
    }

    /// Per-step log as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t_s,x_m,y_m,psi_rad,v_mps,a_mps2,delta_rad,status,iterations,cost,solve_ms,warmstart,fallback,min_ttc_s\n",
        );
        for s in &self.steps {
            let e = &s.ego;
            out.push_str(&format!(
                "{:.2},{:.4},{:.4},{:.5},{:.4},{:.4},{:.5},{},{},{:.4},{:.3},{},{},{}\n",
                s.t_s,
                e.x,
                e.y,
                e.psi,
                e.v,
                e.a,
                e.delta,
                s.status.name(),
                s.iterations,
                s.cost,
                1e3 * s.solve_time_s,
                s.warmstart.source,
                s.fallback,
                s.min_ttc_s.map(|t| format!("{t:.3}")).unwrap_or_default()
            ));
        }
        out
    }
}

struct MergeTracker {
    merged_at: Option<f64>,
    stopped_s: f64,
}

impl MergeTracker {
    /// Outcome once the episode is decided.
    fn update(&mut self, scn: &Scenario, world: &World) -> Option<Outcome> {
        let m = scn.merge.as_ref().expect("validated merge scenario");
        let (s, d) = world.ego_frenet();
        let front = s + 0.5 * world.params.length_m;
        let half_lane = 0.5 * world.lane_width_m;
        if self.merged_at.is_none() && d.abs() < half_lane && front < m.entrance_end_m {
            self.merged_at = Some(world.t_s);
        }
        if let Some(t) = self.merged_at {
            return (world.t_s - t >= m.grace_s - 1e-9).then_some(Outcome::MergeSuccess);
        }
        if world.ego.ego.v < 0.5 {
            self.stopped_s += world.params.sample_time_s;
        } else {
            self.stopped_s = 0.0;
        }
        if self.stopped_s >= 2.0 - 1e-9 || front >= m.entrance_end_m {
            return Some(Outcome::MergeAborted);
        }
        None
    }
}

/// Runs one closed-loop episode: predict, warmstart, solve, actuate, record.
pub fn run_episode(scn: &Scenario, planner: &PlannerConfig) -> Result<EpisodeRecord, SimError> {
    planner
        .solver
        .validate()
        .map_err(|e| SimError::InvalidScenario(format!("solver config: {e}")))?;
    planner
        .refinement
        .validate()
        .map_err(|e| SimError::InvalidScenario(format!("refinement config: {e}")))?;
    let mut world = World::new(scn)?;
    let lanes = scn.road.lanes();
    let predictor = planner.predictor();
    let n = scn.vehicle.horizon;
    let mut prev: Option<Trajectory> = None;
    let mut steps = Vec::with_capacity(scn.steps());
    let mut merge = MergeTracker {
        merged_at: None,
        stopped_s: 0.0,
    };
    let mut outcome = None;
    let mut error = None;

    if world.collided {
        outcome = Some(Outcome::Collision);
    }
    for step in 0..scn.steps() {
        if outcome.is_some() {
            break;
        }
        match plan_step(
            scn,
            planner,
            predictor.as_ref(),
            &world,
            &lanes,
            n,
            step,
            prev.as_ref(),
        ) {
            Ok((record, plan)) => {
                step_world(&mut world, &plan.inputs[0]);
                let mut record = record;
                record.overlap = world.collided;
                steps.push(record);
                prev = Some(plan);
            }
            Err(e) => {
                warn!("{} step {step}: {e}", scn.name);
                error = Some(e.to_string());
                outcome = Some(Outcome::Failed);
                break;
            }
        }
        if world.collided {
            outcome = Some(Outcome::Collision);
        } else if scn.kind == ScenarioKind::Merge {
            outcome = merge.update(scn, &world);
        }
    }
    let outcome = outcome.unwrap_or(if merge.merged_at.is_some() {
        Outcome::MergeSuccess
    } else {
        Outcome::TimeoutOk
    });
    debug!(
        "{} seed {} {}: {:?}",
        scn.name,
        scn.seed,
        planner.variant.name(),
        outcome
    );
    Ok(EpisodeRecord {
        scenario: scn.name.clone(),
        seed: scn.seed,
        variant: planner.variant,
        steps,
        outcome,
        error,
    })
}

#[allow(clippy::too_many_arguments)]
fn plan_step(
    scn: &Scenario,
    planner: &PlannerConfig,
    predictor: &dyn Predictor,
    world: &World,
    lanes: &crate::mpcc::LaneMarkers,
    n: usize,
    step: usize,
    prev: Option<&Trajectory>,
) -> Result<(StepRecord, Trajectory), SimError> {
    let planner_err = |e: String| SimError::InvalidScenario(e);
    let step_seed = sub_seed(scn.seed, step as u64);
    let ctx = PredictionContext {
        path: &world.path,
        lanes,
        scene: scn.scene_kind(),
        sample_time_s: scn.vehicle.sample_time_s,
        desired_speed_mps: scn.desired_speed_mps,
        lane_width_m: scn.road.lane_width_m,
        seed: step_seed,
    };
    let forecast = predictor
        .predict(&world.histories(), &ctx, n)
        .map_err(|e| planner_err(e.to_string()))?;
    let problem = MpccProblem::new(
        world.path.clone(),
        scn.weights,
        scn.vehicle,
        forecast.obstacles.clone(),
        lanes.clone(),
        world.ego,
    )
    .map_err(|e| planner_err(e.to_string()))?;
    let shifted = prev.map(|p| shift_previous(p, &problem));
    let previous_cost = shifted
        .as_ref()
        .map(|t| problem.penalized_cost(t, planner.refinement.violation_penalty));

    let baseline_guess = || match &shifted {
        Some(t) => (t.clone(), "previous".to_string()),
        None => (cold_start(&problem), "cold".to_string()),
    };
    let mut mode_costs = Vec::new();
    let (guess, source) = match planner.variant {
        PlannerVariant::Baseline => baseline_guess(),
        PlannerVariant::LearningAided => {
            let cfg = RefinementConfig {
                seed: sub_seed(step_seed, planner.refinement.seed),
                ..planner.refinement.clone()
            };
            match select_warmstart(&forecast, prev, &problem, &cfg) {
                Ok(sel) => {
                    mode_costs = sel.mode_costs;
                    let source = match sel.source {
                        WarmstartSource::Previous => "previous".to_string(),
                        WarmstartSource::Mode(i) => format!("mode-{i}"),
                    };
                    (sel.trajectory, source)
                }
                Err(e) => {
                    warn!("warmstart selection failed: {e}");
                    baseline_guess()
                }
            }
        }
    };
    let guess_cost = problem.penalized_cost(&guess, planner.refinement.violation_penalty);
    let result =
        solve(&problem, &guess, &planner.solver).map_err(|e| planner_err(e.to_string()))?;
    let fallback = result.status != SolveStatus::Success && shifted.is_some();
    let plan = if fallback {
        shifted.expect("checked above")
    } else {
        result.trajectory.clone()
    };
    let (progress_m, lateral_m) = world.ego_frenet();
    let record = StepRecord {
        t_s: world.t_s,
        ego: world.ego.ego,
        progress_m,
        lateral_m,
        status: result.status,
        iterations: result.iterations,
        cost: result.cost,
        max_violation: result.max_violation,
        solve_time_s: result.solve_time_s,
        wall_time_s: result.wall_time_s,
        warmstart: WarmstartTelemetry {
            source,
            guess_cost,
            previous_cost,
            mode_costs,
            mode_labels: forecast.ego_modes.iter().map(|m| m.label.clone()).collect(),
        },
        fallback,
        obstacles: world
            .agents
            .iter()
            .map(|a| super::episode::ObstacleSnapshot {
                id: a.id,
                x: a.x,
                y: a.y,
                heading: a.heading,
                v: a.v,
                visible: a.visible,
            })
            .collect(),
        overlap: false,
        min_ttc_s: world.min_time_to_collision(),
        solution: result.trajectory,
        forecasts: forecast.obstacles,
    };
    Ok((record, plan))
}
