//! Kinematic bicycle model augmented with path progress.
//!
//! The ego reference point is the rear axle. The model state is
//! `[x, y, psi, v, a, delta]`, driven by jerk and steering rate; the
//! augmented state appends the path progress `theta`, advanced by the
//! virtual path speed.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

/// Length of the augmented state vector `[x, y, psi, v, a, delta, theta]`.
pub const NX: usize = 7;
/// Length of the augmented input vector `[jerk, steer_rate, path_speed]`.
pub const NU: usize = 3;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;
type EgoVec = SVector<f64, 6>;
type EgoJac = SMatrix<f64, 6, 6>;
type EgoInputJac = SMatrix<f64, 6, 2>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub a: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub jerk: f64,
    pub steer_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentedState {
    pub ego: EgoState,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentedInput {
    pub base: ControlInput,
    pub path_speed: f64,
}

impl EgoState {
    fn to_vec(self) -> EgoVec {
        EgoVec::new(self.x, self.y, self.psi, self.v, self.a, self.delta)
    }

    fn from_vec(v: &EgoVec) -> Self {
        Self {
            x: v[0],
            y: v[1],
            psi: v[2],
            v: v[3],
            a: v[4],
            delta: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|c| c.is_finite())
    }
}

impl AugmentedState {
    pub fn new(ego: EgoState, theta: f64) -> Self {
        Self { ego, theta }
    }

    pub fn to_vector(&self) -> StateVec {
        let e = &self.ego;
        StateVec::from([e.x, e.y, e.psi, e.v, e.a, e.delta, self.theta])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            ego: EgoState {
                x: v[0],
                y: v[1],
                psi: v[2],
                v: v[3],
                a: v[4],
                delta: v[5],
            },
            theta: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ego.is_finite() && self.theta.is_finite()
    }
}

impl AugmentedInput {
    pub fn new(jerk: f64, steer_rate: f64, path_speed: f64) -> Self {
        Self {
            base: ControlInput { jerk, steer_rate },
            path_speed,
        }
    }

    pub fn to_vector(&self) -> InputVec {
        InputVec::new(self.base.jerk, self.base.steer_rate, self.path_speed)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase_m: f64,
    pub jerk_min_mps3: f64,
    pub jerk_max_mps3: f64,
    pub steer_rate_min_radps: f64,
    pub steer_rate_max_radps: f64,
    pub steer_max_rad: f64,
    pub accel_min_mps2: f64,
    pub accel_max_mps2: f64,
    pub lat_accel_max_mps2: f64,
    /// Speed range; the lower bound keeps the vehicle from reversing.
    pub speed_min_mps: f64,
    pub speed_max_mps: f64,
    pub length_m: f64,
    pub width_m: f64,
    pub sample_time_s: f64,
    pub horizon: usize,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase_m: 2.7,
            jerk_min_mps3: -10.0,
            jerk_max_mps3: 10.0,
            steer_rate_min_radps: -0.6,
            steer_rate_max_radps: 0.6,
            steer_max_rad: 0.5,
            accel_min_mps2: -8.0,
            accel_max_mps2: 3.0,
            lat_accel_max_mps2: 6.0,
            speed_min_mps: 0.0,
            speed_max_mps: 30.0,
            // Axles sit at the thirds of the footprint.
            length_m: 4.05,
            width_m: 1.8,
            sample_time_s: 0.1,
            horizon: 30,
        }
    }
}

impl VehicleParams {
    /// Checks the ordering and positivity invariants.
    pub fn validate(&self) -> Result<(), String> {
        let ordered = [
            ("jerk", self.jerk_min_mps3, self.jerk_max_mps3),
            (
                "steer_rate",
                self.steer_rate_min_radps,
                self.steer_rate_max_radps,
            ),
            ("accel", self.accel_min_mps2, self.accel_max_mps2),
            ("speed", self.speed_min_mps, self.speed_max_mps),
        ];
        for (name, lo, hi) in ordered {
            if !(lo < hi) {
                return Err(format!("{name} bounds not ordered: [{lo}, {hi}]"));
            }
        }
        if !(self.wheelbase_m > 0.0) {
            return Err("wheelbase must be positive".into());
        }
        if !(self.sample_time_s > 0.0) {
            return Err("sample time must be positive".into());
        }
        if self.horizon < 2 {
            return Err("horizon must be at least 2".into());
        }
        if !(self.steer_max_rad > 0.0 && self.steer_max_rad < std::f64::consts::FRAC_PI_2) {
            return Err("steer_max must lie in (0, pi/2)".into());
        }
        if !(self.lat_accel_max_mps2 > 0.0 && self.length_m > 0.0 && self.width_m > 0.0) {
            return Err("lateral acceleration limit and footprint must be positive".into());
        }
        Ok(())
    }

    pub fn horizon_duration(&self) -> f64 {
        self.horizon as f64 * self.sample_time_s
    }
}

/// Time derivative of the bicycle state.
pub fn continuous_dynamics(z: &EgoState, u: &ControlInput, params: &VehicleParams) -> EgoState {
    EgoState::from_vec(&ego_rhs(
        &z.to_vec(),
        u.jerk,
        u.steer_rate,
        params.wheelbase_m,
    ))
}

fn ego_rhs(z: &EgoVec, jerk: f64, steer_rate: f64, wheelbase: f64) -> EgoVec {
    let (psi, v, a, delta) = (z[2], z[3], z[4], z[5]);
    EgoVec::new(
        v * psi.cos(),
        v * psi.sin(),
        v * delta.tan() / wheelbase,
        a,
        jerk,
        steer_rate,
    )
}

fn ego_rhs_jacobian(z: &EgoVec, wheelbase: f64) -> (EgoJac, EgoInputJac) {
    let (psi, v, delta) = (z[2], z[3], z[5]);
    let mut a = EgoJac::zeros();
    a[(0, 2)] = -v * psi.sin();
    a[(0, 3)] = psi.cos();
    a[(1, 2)] = v * psi.cos();
    a[(1, 3)] = psi.sin();
    let t = delta.tan();
    a[(2, 3)] = t / wheelbase;
    a[(2, 5)] = v * (1.0 + t * t) / wheelbase;
    a[(3, 4)] = 1.0;
    let mut b = EgoInputJac::zeros();
    b[(4, 0)] = 1.0;
    b[(5, 1)] = 1.0;
    (a, b)
}

/// One RK4 step of the bicycle model plus the exact progress update.
pub fn step(
    z: &AugmentedState,
    u: &AugmentedInput,
    params: &VehicleParams,
    theta_max: f64,
) -> AugmentedState {
    let h = params.sample_time_s;
    let l = params.wheelbase_m;
    let (j, dd) = (u.base.jerk, u.base.steer_rate);
    let x = z.ego.to_vec();
    let k1 = ego_rhs(&x, j, dd, l);
    let k2 = ego_rhs(&(x + k1 * (h / 2.0)), j, dd, l);
    let k3 = ego_rhs(&(x + k2 * (h / 2.0)), j, dd, l);
    let k4 = ego_rhs(&(x + k3 * h), j, dd, l);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    AugmentedState {
        ego: EgoState::from_vec(&next),
        theta: (z.theta + u.path_speed * h).clamp(0.0, theta_max),
    }
}

/// `step` together with its Jacobians with respect to state and input.
pub fn step_with_jacobian(
    z: &AugmentedState,
    u: &AugmentedInput,
    params: &VehicleParams,
    theta_max: f64,
) -> (AugmentedState, SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>) {
    let h = params.sample_time_s;
    let l = params.wheelbase_m;
    let (j, dd) = (u.base.jerk, u.base.steer_rate);
    let x = z.ego.to_vec();

    // Chain rule through the four stages; each stage derivative is taken with
    // respect to (x, jerk, steer_rate).
    let k1 = ego_rhs(&x, j, dd, l);
    let (a1, b1) = ego_rhs_jacobian(&x, l);
    let dk1_dx = a1;
    let dk1_du = b1;

    let x2 = x + k1 * (h / 2.0);
    let k2 = ego_rhs(&x2, j, dd, l);
    let (a2, b2) = ego_rhs_jacobian(&x2, l);
    let dk2_dx = a2 * (EgoJac::identity() + dk1_dx * (h / 2.0));
    let dk2_du = a2 * dk1_du * (h / 2.0) + b2;

    let x3 = x + k2 * (h / 2.0);
    let k3 = ego_rhs(&x3, j, dd, l);
    let (a3, b3) = ego_rhs_jacobian(&x3, l);
    let dk3_dx = a3 * (EgoJac::identity() + dk2_dx * (h / 2.0));
    let dk3_du = a3 * dk2_du * (h / 2.0) + b3;

    let x4 = x + k3 * h;
    let k4 = ego_rhs(&x4, j, dd, l);
    let (a4, b4) = ego_rhs_jacobian(&x4, l);
    let dk4_dx = a4 * (EgoJac::identity() + dk3_dx * h);
    let dk4_du = a4 * dk3_du * h + b4;

    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let jx = EgoJac::identity() + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * (h / 6.0);
    let ju = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * (h / 6.0);

    let raw_theta = z.theta + u.path_speed * h;
    let theta = raw_theta.clamp(0.0, theta_max);
    let free = if raw_theta >= 0.0 && raw_theta < theta_max {
        1.0
    } else {
        0.0
    };

    let mut a = SMatrix::<f64, NX, NX>::zeros();
    a.fixed_view_mut::<6, 6>(0, 0).copy_from(&jx);
    a[(6, 6)] = free;
    let mut b = SMatrix::<f64, NX, NU>::zeros();
    b.fixed_view_mut::<6, 2>(0, 0).copy_from(&ju);
    b[(6, 2)] = free * h;
    (
        AugmentedState {
            ego: EgoState::from_vec(&next),
            theta,
        },
        a,
        b,
    )
}

/// States produced by applying `inputs` from `z0`; always `inputs.len() + 1` long.
pub fn rollout(
    z0: &AugmentedState,
    inputs: &[AugmentedInput],
    params: &VehicleParams,
    theta_max: f64,
) -> Vec<AugmentedState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*z0);
    for u in inputs {
        let next = step(states.last().unwrap(), u, params, theta_max);
        states.push(next);
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn moving(v: f64, delta: f64) -> AugmentedState {
        AugmentedState::new(
            EgoState {
                v,
                delta,
                ..Default::default()
            },
            0.0,
        )
    }

    /// Dense forward-Euler reference integration of the ego substate.
    fn euler_reference(
        z: &AugmentedState,
        u: &AugmentedInput,
        p: &VehicleParams,
        h: f64,
        n: usize,
    ) -> EgoState {
        let mut e = z.ego;
        let dt = h / n as f64;
        for _ in 0..n {
            let d = continuous_dynamics(&e, &u.base, p);
            e = EgoState {
                x: e.x + dt * d.x,
                y: e.y + dt * d.y,
                psi: e.psi + dt * d.psi,
                v: e.v + dt * d.v,
                a: e.a + dt * d.a,
                delta: e.delta + dt * d.delta,
            };
        }
        e
    }

    #[test]
    fn derivative_examples() {
        let p = VehicleParams::default();
        let rest = continuous_dynamics(
            &EgoState {
                psi: 1.2,
                ..Default::default()
            },
            &ControlInput::default(),
            &p,
        );
        assert_eq!(rest, EgoState::default());

        let d = continuous_dynamics(&moving(10.0, 0.0).ego, &ControlInput::default(), &p);
        assert_abs_diff_eq!(d.x, 10.0);
        assert_abs_diff_eq!(d.y, 0.0);
        assert_abs_diff_eq!(d.psi, 0.0);

        let d = continuous_dynamics(&moving(10.0, 0.1).ego, &ControlInput::default(), &p);
        assert_abs_diff_eq!(d.psi, 10.0 * 0.1f64.tan() / 2.7, epsilon = 1e-12);
        assert_abs_diff_eq!(d.psi, 0.3716, epsilon = 1e-4);
    }

    #[test]
    fn straight_step_and_progress() {
        let p = VehicleParams::default();
        let z = moving(10.0, 0.0);
        let next = step(&z, &AugmentedInput::new(0.0, 0.0, 10.0), &p, 100.0);
        assert_abs_diff_eq!(next.ego.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next.theta, 1.0, epsilon = 1e-12);
        let held = step(&z, &AugmentedInput::new(0.0, 0.0, 0.0), &p, 100.0);
        assert_eq!(held.theta, 0.0);
        let clamped = step(&z, &AugmentedInput::new(0.0, 0.0, 10.0), &p, 0.5);
        assert_eq!(clamped.theta, 0.5);
    }

    #[test]
    fn rk4_matches_fine_euler_on_circle() {
        let p = VehicleParams::default();
        let z = moving(5.0, 0.2);
        let u = AugmentedInput::default();
        let rk = step(&z, &u, &p, 1e9);
        let e = euler_reference(&z, &u, &p, p.sample_time_s, 1000);
        assert!((rk.ego.x - e.x).hypot(rk.ego.y - e.y) < 1e-5);
    }

    #[test]
    fn rk4_fourth_order() {
        // Local error of one step scales with h^5: halving h divides it by ~32.
        let mut p = VehicleParams::default();
        let z = moving(8.0, 0.3);
        let u = AugmentedInput::new(1.0, 0.2, 0.0);
        let err = |p: &VehicleParams| {
            let rk = step(&z, &u, p, 1e9);
            let r = euler_reference(&z, &u, p, p.sample_time_s, 2_000_000);
            (rk.ego.x - r.x).hypot(rk.ego.y - r.y)
        };
        p.sample_time_s = 0.4;
        let coarse = err(&p);
        p.sample_time_s = 0.2;
        let fine = err(&p);
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn rollout_edges() {
        let p = VehicleParams::default();
        let z0 = moving(0.0, 0.0);
        assert_eq!(rollout(&z0, &[], &p, 10.0), vec![z0]);
        let states = rollout(&z0, &vec![AugmentedInput::default(); 5], &p, 10.0);
        assert_eq!(states.len(), 6);
        assert!(states.iter().all(|s| *s == z0));
    }

    #[test]
    fn rollout_is_fold_of_step() {
        let p = VehicleParams::default();
        let z0 = moving(6.0, 0.05);
        let inputs: Vec<_> = (0..12)
            .map(|k| {
                AugmentedInput::new(
                    (k as f64 * 0.7).sin(),
                    0.1 * (k as f64).cos(),
                    6.0 + 0.1 * k as f64,
                )
            })
            .collect();
        let states = rollout(&z0, &inputs, &p, 1e3);
        let mut z = z0;
        for (k, u) in inputs.iter().enumerate() {
            assert_eq!(states[k], z);
            z = step(&z, u, &p, 1e3);
        }
        assert_eq!(states[12], z);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = VehicleParams::default();
        let z = AugmentedState::new(
            EgoState {
                x: 1.0,
                y: -2.0,
                psi: 0.4,
                v: 7.0,
                a: 0.5,
                delta: 0.12,
            },
            3.0,
        );
        let u = AugmentedInput::new(0.8, -0.1, 7.5);
        let (_, a, b) = step_with_jacobian(&z, &u, &p, 100.0);
        let h = 1e-6;
        let zv = z.to_vector();
        for i in 0..NX {
            let mut zp = zv;
            let mut zm = zv;
            zp[i] += h;
            zm[i] -= h;
            let fp = step(&AugmentedState::from_slice(zp.as_slice()), &u, &p, 100.0).to_vector();
            let fm = step(&AugmentedState::from_slice(zm.as_slice()), &u, &p, 100.0).to_vector();
            let col = (fp - fm) / (2.0 * h);
            for r in 0..NX {
                assert_abs_diff_eq!(a[(r, i)], col[r], epsilon = 1e-6);
            }
        }
        let uv = u.to_vector();
        for i in 0..NU {
            let mut up = uv;
            let mut um = uv;
            up[i] += h;
            um[i] -= h;
            let fp = step(&z, &AugmentedInput::from_slice(up.as_slice()), &p, 100.0).to_vector();
            let fm = step(&z, &AugmentedInput::from_slice(um.as_slice()), &p, 100.0).to_vector();
            let col = (fp - fm) / (2.0 * h);
            for r in 0..NX {
                assert_abs_diff_eq!(b[(r, i)], col[r], epsilon = 1e-6);
            }
        }
    }
}
