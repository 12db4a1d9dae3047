//! Integrates the kinematic bicycle model under a jerk/steer-rate schedule
//! and checks the one-step Jacobian against finite differences.

use mpcc_warmstart::vehicle::{
    rollout, step, step_with_jacobian, AugmentedInput, AugmentedState, EgoState, VehicleParams, NX,
};

fn main() {
    let params = VehicleParams::default();
    let z0 = AugmentedState::new(
        EgoState {
            v: 10.0,
            ..EgoState::default()
        },
        0.0,
    );
    // Accelerate for a second, then steer left and hold.
    let inputs: Vec<AugmentedInput> = (0..params.horizon)
        .map(|k| match k {
            0..=4 => AugmentedInput::new(2.0, 0.0, 10.0),
            5..=9 => AugmentedInput::new(-2.0, 0.0, 10.5),
            10..=14 => AugmentedInput::new(0.0, 0.3, 10.5),
            _ => AugmentedInput::new(0.0, 0.0, 10.5),
        })
        .collect();
    let states = rollout(&z0, &inputs, &params, 1e3);
    println!(
        "{:>5} {:>8} {:>8} {:>7} {:>6} {:>6} {:>7} {:>7}",
        "t", "x", "y", "psi", "v", "a", "delta", "theta"
    );
    for (k, z) in states.iter().enumerate().step_by(3) {
        let e = &z.ego;
        println!(
            "{:5.1} {:8.3} {:8.3} {:7.4} {:6.3} {:6.3} {:7.4} {:7.3}",
            k as f64 * params.sample_time_s,
            e.x,
            e.y,
            e.psi,
            e.v,
            e.a,
            e.delta,
            z.theta
        );
    }

    let (z, u) = (states[12], inputs[12]);
    let (_, a, _) = step_with_jacobian(&z, &u, &params, 1e3);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..NX {
        let mut plus = z.to_vector();
        let mut minus = z.to_vector();
        plus[j] += h;
        minus[j] -= h;
        let fp = step(
            &AugmentedState::from_slice(plus.as_slice()),
            &u,
            &params,
            1e3,
        )
        .to_vector();
        let fm = step(
            &AugmentedState::from_slice(minus.as_slice()),
            &u,
            &params,
            1e3,
        )
        .to_vector();
        let col = (fp - fm) / (2.0 * h);
        worst = worst.max((col - a.column(j)).amax());
    }
    println!("state Jacobian vs central differences: max error {worst:.2e}");
}
