//! Solves one contouring-control problem with a slow vehicle ahead, from a
//! cold start, and reports status, cost, timing and the pass side.

use std::sync::Arc;

use mpcc_warmstart::mpcc::{CostWeights, LaneMarkers, MpccProblem, ObstacleForecast, ObstaclePose};
use mpcc_warmstart::path::{ReferencePath, Waypoint};
use mpcc_warmstart::solver::{cold_start, solve, SolverConfig};
use mpcc_warmstart::vehicle::{AugmentedState, EgoState, VehicleParams};
use mpcc_warmstart::warmstart::homotopy_signature;

fn main() {
    let centre: Vec<Waypoint> = (0..=6)
        .map(|i| Waypoint::new(50.0 * i as f64, 0.0))
        .collect();
    let left = vec![Waypoint::new(0.0, 5.25), Waypoint::new(300.0, 5.25)];
    let right = vec![Waypoint::new(0.0, -1.75), Waypoint::new(300.0, -1.75)];
    let path = Arc::new(ReferencePath::build(&centre, &left, &right).expect("valid path"));

    let params = VehicleParams::default();
    let leader = ObstacleForecast {
        id: 1,
        poses: (0..=params.horizon)
            .map(|k| ObstaclePose {
                x: 45.0 + 4.0 * params.sample_time_s * k as f64,
                y: 0.0,
                heading: 0.0,
            })
            .collect(),
        half_length_m: 2.9,
        half_width_m: 1.3,
    };
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
        vec![leader],
        LaneMarkers {
            offsets_m: vec![-1.75],
        },
        z0,
    )
    .expect("valid problem");

    let guess = cold_start(&problem);
    println!(
        "cold start: cost {:.2}, max violation {:.3}",
        problem.total_cost(&guess),
        problem.max_violation(&guess)
    );
    let r = solve(&problem, &guess, &SolverConfig::default()).expect("solvable guess");
    println!(
        "{}: {} iterations, modeled {:.0} ms (wall {:.1} ms), cost {:.2}, max violation {:.1e}, kkt {:.1e}",
        r.status.name(),
        r.iterations,
        1e3 * r.solve_time_s,
        1e3 * r.wall_time_s,
        r.cost,
        r.max_violation,
        r.kkt_residual
    );
    println!(
        "pass side: {:?}",
        homotopy_signature(&r.trajectory, &problem.obstacles)
    );
    let end = r.trajectory.states.last().unwrap();
    println!(
        "horizon end: x {:.1} y {:.2} v {:.2} theta {:.1}",
        end.ego.x, end.ego.y, end.ego.v, end.theta
    );
}
