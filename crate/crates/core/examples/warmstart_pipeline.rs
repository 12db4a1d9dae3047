//! Learning-aided warmstart on an overtake: multimodal ego forecast, Bezier
//! posterior per mode, cost-weighted refinement, selection, then a solve
//! from the selected guess next to a cold-started solve.

use std::sync::Arc;

use mpcc_warmstart::mpcc::{CostWeights, LaneMarkers, MpccProblem};
use mpcc_warmstart::path::{ReferencePath, Waypoint};
use mpcc_warmstart::prediction::{
    AgentHistory, HistoryPose, OracleGmmPredictor, PredictionConfig, PredictionContext, Predictor,
    SceneKind,
};
use mpcc_warmstart::solver::{cold_start, solve, SolverConfig};
use mpcc_warmstart::vehicle::{AugmentedState, EgoState, VehicleParams};
use mpcc_warmstart::warmstart::{
    homotopy_signature, refine_mode, select_warmstart, RefinementConfig,
};

fn history(
    id: usize,
    x: f64,
    y: f64,
    psi: f64,
    v: f64,
    half_length_m: f64,
    half_width_m: f64,
) -> AgentHistory {
    AgentHistory {
        id,
        poses: vec![HistoryPose {
            t_s: 0.0,
            x,
            y,
            psi,
            v,
        }],
        half_length_m,
        half_width_m,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let centre: Vec<Waypoint> = (0..=8)
        .map(|i| Waypoint::new(50.0 * i as f64, 0.0))
        .collect();
    let left = vec![Waypoint::new(0.0, 5.25), Waypoint::new(400.0, 5.25)];
    let right = vec![Waypoint::new(0.0, -1.75), Waypoint::new(400.0, -1.75)];
    let path = Arc::new(ReferencePath::build(&centre, &left, &right)?);
    let lanes = LaneMarkers {
        offsets_m: vec![-1.75],
    };
    let params = VehicleParams::default();

    // Ego at 8 m/s behind a 4 m/s leader; the left lane is clear.
    let histories = vec![
        history(0, 20.0, 0.0, 0.0, 8.0, 2.0, 0.9),
        history(1, 45.0, 0.0, 0.0, 4.0, 2.4, 0.95),
    ];
    let ctx = PredictionContext {
        path: &path,
        lanes: &lanes,
        scene: SceneKind::Overtake {
            lane_offset_m: 0.0,
            pass_offset_m: -3.5,
        },
        sample_time_s: params.sample_time_s,
        desired_speed_mps: 14.0,
        lane_width_m: 3.5,
        seed: 7,
    };
    let forecast = OracleGmmPredictor::new(PredictionConfig::default()).predict(
        &histories,
        &ctx,
        params.horizon,
    )?;

    let z0 = AugmentedState::new(
        EgoState {
            x: 20.0,
            v: 8.0,
            ..EgoState::default()
        },
        20.0,
    );
    let problem = MpccProblem::new(
        path,
        CostWeights::default(),
        params,
        forecast.obstacles.clone(),
        lanes,
        z0,
    )?;
    let config = RefinementConfig::default();

    for mode in &forecast.ego_modes {
        let refined = refine_mode(mode, &problem, &config)?;
        println!(
            "mode {} {:<12} p={:.2}: posterior-mean cost {:9.2}, refined cost {:9.2}, passes {:?}",
            mode.mode,
            mode.label,
            mode.probability,
            refined.mean_cost,
            refined.cost,
            homotopy_signature(&refined.trajectory, &problem.obstacles)
        );
    }
    let selection = select_warmstart(&forecast, None, &problem, &config)?;
    println!(
        "selected {:?} with cost {:.2}",
        selection.source, selection.cost
    );

    let solver = SolverConfig::default();
    for (name, guess) in [
        ("cold start", cold_start(&problem)),
        ("learning-aided", selection.trajectory),
    ] {
        let r = solve(&problem, &guess, &solver)?;
        println!(
            "{name:<15} {} in {} iterations, cost {:.2}, passes {:?}",
            r.status.name(),
            r.iterations,
            r.cost,
            homotopy_signature(&r.trajectory, &problem.obstacles)
        );
    }
    Ok(())
}
