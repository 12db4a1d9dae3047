//! Builds a curved reference path and queries it: arc-length samples,
//! projection of off-path points, contouring/lag errors and boundary distances.

use mpcc_warmstart::mpcc::contouring_errors;
use mpcc_warmstart::path::{ReferencePath, Waypoint};
use mpcc_warmstart::vehicle::{AugmentedState, EgoState};

fn main() {
    let centre: Vec<Waypoint> = (0..=20)
        .map(|i| {
            let x = 10.0 * i as f64;
            Waypoint::new(x, 6.0 * (x / 40.0).sin())
        })
        .collect();
    let left: Vec<Waypoint> = centre
        .iter()
        .map(|w| Waypoint::new(w.x, w.y + 3.5))
        .collect();
    let right: Vec<Waypoint> = centre
        .iter()
        .map(|w| Waypoint::new(w.x, w.y - 3.5))
        .collect();
    let path = ReferencePath::build(&centre, &left, &right).expect("valid path");
    println!(
        "arc length {:.2} m over {} knots",
        path.theta_max(),
        path.knots().len()
    );

    println!(
        "{:>8} {:>9} {:>9} {:>8} {:>10} {:>7} {:>7}",
        "theta", "x", "y", "psi", "dpsi", "left", "right"
    );
    for i in 0..=8 {
        let theta = path.theta_max() * i as f64 / 8.0;
        let s = path.sample(theta);
        let q = s.point;
        println!(
            "{theta:8.2} {:9.3} {:9.3} {:8.4} {:10.5} {:7.3} {:7.3}",
            q.x, q.y, q.psi, s.dpsi, q.d_left, q.d_right
        );
    }

    for (px, py) in [(55.0, 4.0), (120.0, -1.0), (180.0, 2.5)] {
        let proj = path.project(px, py, px);
        let q = path.query(proj.theta);
        let z = AugmentedState::new(
            EgoState {
                x: px,
                y: py,
                psi: q.psi,
                ..EgoState::default()
            },
            proj.theta,
        );
        let (ec, el) = contouring_errors(&z, &path);
        println!(
            "point ({px:6.1}, {py:5.1}) -> theta {:7.3} (converged {}), e_c {ec:+.3} (positive right), e_l {el:+.2e}",
            proj.theta, proj.converged
        );
    }
}
