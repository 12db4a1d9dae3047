use std::collections::VecDeque;
use std::sync::Arc;

use serde::Serialize;

use super::{idm_accel, AgentSpec, Effect, Event, IdmParams, Route, Scenario, SimError};
use crate::path::ReferencePath;
use crate::prediction::{AgentHistory, HistoryPose, EGO_ID};
use crate::vehicle::{self, AugmentedInput, AugmentedState, EgoState, VehicleParams};

const HISTORY_LEN: usize = 5;

/// Oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Footprint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Footprint {
    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    fn radius_along(&self, axis: (f64, f64)) -> f64 {
        let [u, v] = self.axes();
        self.half_length * (u.0 * axis.0 + u.1 * axis.1).abs()
            + self.half_width * (v.0 * axis.0 + v.1 * axis.1).abs()
    }
}

/// Separating-axis test for two oriented rectangles.
pub fn footprints_overlap(a: &Footprint, b: &Footprint) -> bool {
    let d = (b.x - a.x, b.y - a.y);
    a.axes().into_iter().chain(b.axes()).all(|axis| {
        let dist = (d.0 * axis.0 + d.1 * axis.1).abs();
        dist < a.radius_along(axis) + b.radius_along(axis)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agent {
    pub id: usize,
    pub route: Route,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    /// Progress along the centerline (lane agents only).
    pub s: f64,
    pub idm: IdmParams,
    pub length_m: f64,
    pub width_m: f64,
    pub visible: bool,
    #[serde(skip)]
    history: VecDeque<HistoryPose>,
}

impl Agent {
    pub fn footprint(&self) -> Footprint {
        Footprint {
            x: self.x,
            y: self.y,
            heading: self.heading,
            half_length: 0.5 * self.length_m,
            half_width: 0.5 * self.width_m,
        }
    }

    fn place(&mut self, path: &ReferencePath) {
        if let Route::Lane {
            offset_m, reverse, ..
        } = self.route
        {
            let q = path.query(self.s);
            let (sp, cp) = q.psi.sin_cos();
            self.x = q.x + offset_m * sp;
            self.y = q.y - offset_m * cp;
            self.heading = if reverse {
                q.psi + std::f64::consts::PI
            } else {
                q.psi
            };
        }
    }

    fn record(&mut self, t_s: f64) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(HistoryPose {
            t_s,
            x: self.x,
            y: self.y,
            psi: self.heading,
            v: self.v,
        });
    }

    pub fn history(&self) -> AgentHistory {
        AgentHistory {
            id: self.id,
            poses: self.history.iter().copied().collect(),
            half_length_m: 0.5 * self.length_m,
            half_width_m: 0.5 * self.width_m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub t_s: f64,
    pub ego: AugmentedState,
    pub agents: Vec<Agent>,
    pub path: Arc<ReferencePath>,
    pub params: VehicleParams,
    pub lane_width_m: f64,
    /// Set once any footprint overlap was observed.
    pub collided: bool,
    pending: Vec<Event>,
    ego_history: VecDeque<HistoryPose>,
}

impl World {
    pub fn new(scn: &Scenario) -> Result<Self, SimError> {
        scn.validate()?;
        let path = Arc::new(scn.road.build()?);
        let q = path.query(scn.ego.s_m);
        let (sp, cp) = q.psi.sin_cos();
        let ego = EgoState {
            x: q.x + scn.ego.offset_m * sp,
            y: q.y - scn.ego.offset_m * cp,
            psi: q.psi,
            v: scn.ego.v_mps,
            a: 0.0,
            delta: 0.0,
        };
        let hidden: Vec<usize> = scn
            .events
            .iter()
            .map(|e| match e.effect {
                Effect::Reveal { agent_id } => agent_id,
            })
            .collect();
        let agents = scn
            .agents
            .iter()
            .map(|a| spawn(a, &path, !hidden.contains(&a.id)))
            .collect();
        let mut pending = scn.events.clone();
        pending.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
        let mut w = World {
            t_s: 0.0,
            ego: AugmentedState::new(ego, scn.ego.s_m),
            agents,
            path,
            params: scn.vehicle,
            lane_width_m: scn.road.lane_width_m,
            collided: false,
            pending,
            ego_history: VecDeque::new(),
        };
        w.ego.theta = w.project_ego(scn.ego.s_m);
        w.apply_events();
        w.record();
        w.collided = w.any_overlap();
        Ok(w)
    }

    pub fn ego_footprint(&self) -> Footprint {
        let e = &self.ego.ego;
        let off = 0.5 * self.params.wheelbase_m;
        Footprint {
            x: e.x + off * e.psi.cos(),
            y: e.y + off * e.psi.sin(),
            heading: e.psi,
            half_length: 0.5 * self.params.length_m,
            half_width: 0.5 * self.params.width_m,
        }
    }

    /// Ego progress and lateral offset (positive right) of the footprint center.
    pub fn ego_frenet(&self) -> (f64, f64) {
        let f = self.ego_footprint();
        let s = self.path.project(f.x, f.y, self.ego.theta).theta;
        let q = self.path.query(s);
        let (sp, cp) = q.psi.sin_cos();
        (s, sp * (f.x - q.x) - cp * (f.y - q.y))
    }

    pub fn any_overlap(&self) -> bool {
        let ego = self.ego_footprint();
        self.agents
            .iter()
            .any(|a| footprints_overlap(&ego, &a.footprint()))
    }

    /// Histories of the ego and every agent it can perceive.
    pub fn histories(&self) -> Vec<AgentHistory> {
        let mut out = vec![AgentHistory {
            id: EGO_ID,
            poses: self.ego_history.iter().copied().collect(),
            half_length_m: 0.5 * self.params.length_m,
            half_width_m: 0.5 * self.params.width_m,
        }];
        out.extend(self.agents.iter().filter(|a| a.visible).map(Agent::history));
        out
    }

    /// Smallest gap over closing speed among visible agents ahead whose
    /// footprint overlaps the ego's laterally; `None` when nobody closes in.
    pub fn min_time_to_collision(&self) -> Option<f64> {
        let f = self.ego_footprint();
        let (s, c) = f.heading.sin_cos();
        let ve = self.ego.ego.v;
        self.agents
            .iter()
            .filter(|a| a.visible)
            .filter_map(|a| {
                let (dx, dy) = (a.x - f.x, a.y - f.y);
                let lon = c * dx + s * dy;
                let lat = -s * dx + c * dy;
                if lon <= 0.0 || lat.abs() > f.half_width + 0.5 * a.width_m {
                    return None;
                }
                let va = a.v * (a.heading - f.heading).cos();
                let closing = ve - va;
                let gap = lon - f.half_length - 0.5 * a.length_m;
                (closing > 1e-6).then(|| gap.max(0.0) / closing)
            })
            .min_by(f64::total_cmp)
    }

    fn project_ego(&self, hint: f64) -> f64 {
        self.path
            .project(self.ego.ego.x, self.ego.ego.y, hint)
            .theta
    }

    fn apply_events(&mut self) {
        while let Some(e) = self.pending.first() {
            if e.t_s > self.t_s + 1e-9 {
                break;
            }
            let Effect::Reveal { agent_id } = e.effect;
            for a in &mut self.agents {
                if a.id == agent_id {
                    a.visible = true;
                }
            }
            self.pending.remove(0);
        }
    }

    fn record(&mut self) {
        let e = self.ego.ego;
        if self.ego_history.len() == HISTORY_LEN {
            self.ego_history.pop_front();
        }
        self.ego_history.push_back(HistoryPose {
            t_s: self.t_s,
            x: e.x,
            y: e.y,
            psi: e.psi,
            v: e.v,
        });
        let t = self.t_s;
        for a in &mut self.agents {
            a.record(t);
        }
    }

    fn idm_leader(&self, i: usize, ego_sd: (f64, f64)) -> (f64, f64) {
        let me = &self.agents[i];
        let Route::Lane {
            offset_m, reverse, ..
        } = me.route
        else {
            return (f64::INFINITY, 0.0);
        };
        let dir = if reverse { -1.0 } else { 1.0 };
        let mut best = (f64::INFINITY, 0.0);
        for (j, o) in self.agents.iter().enumerate() {
            if j == i {
                continue;
            }
            if let Route::Lane {
                offset_m: oo,
                reverse: or,
                ..
            } = o.route
            {
                if oo == offset_m && or == reverse {
                    let ahead = dir * (o.s - me.s);
                    let gap = ahead - 0.5 * (o.length_m + me.length_m);
                    if ahead > 0.0 && gap < best.0 {
                        best = (gap, o.v);
                    }
                }
            }
        }
        // Same-direction traffic treats an ego that has entered the lane as a leader.
        let (es, ed) = ego_sd;
        if !reverse && (ed - offset_m).abs() < 0.5 * self.lane_width_m + 0.5 {
            let ahead = es - me.s;
            let gap = ahead - 0.5 * (self.params.length_m + me.length_m);
            if ahead > 0.0 && gap < best.0 {
                best = (gap, self.ego.ego.v);
            }
        }
        best
    }
}

fn spawn(spec: &AgentSpec, path: &ReferencePath, visible: bool) -> Agent {
    let (x, y, heading, s) = match spec.route {
        Route::Lane { s_m, .. } => (0.0, 0.0, 0.0, s_m),
        Route::Scripted {
            x_m,
            y_m,
            heading_rad,
        } => (x_m, y_m, heading_rad, 0.0),
    };
    let mut a = Agent {
        id: spec.id,
        route: spec.route,
        x,
        y,
        heading,
        v: spec.v_mps,
        s,
        idm: spec.idm,
        length_m: spec.length_m,
        width_m: spec.width_m,
        visible,
        history: VecDeque::new(),
    };
    a.place(path);
    a
}

/// Advances the world by one sample time: IDM agents along their lanes,
/// scripted agents straight ahead, the ego under `input`. Events that are
/// due are applied and overlaps latch `collided`.
pub fn step_world(world: &mut World, input: &AugmentedInput) {
    let dt = world.params.sample_time_s;
    let ego_sd = world.ego_frenet();
    let accels: Vec<f64> = (0..world.agents.len())
        .map(|i| {
            let a = &world.agents[i];
            match a.route {
                Route::Lane { .. } => {
                    let (gap, lead_v) = world.idm_leader(i, ego_sd);
                    idm_accel(a.v, a.v - lead_v, gap, &a.idm)
                }
                Route::Scripted { .. } => 0.0,
            }
        })
        .collect();
    for (a, acc) in world.agents.iter_mut().zip(accels) {
        match a.route {
            Route::Lane { reverse, .. } => {
                let v_next = (a.v + acc * dt).max(0.0);
                let ds = 0.5 * (a.v + v_next) * dt;
                a.s += if reverse { -ds } else { ds };
                a.v = v_next;
                a.place(&world.path);
            }
            Route::Scripted { .. } => {
                a.x += a.v * a.heading.cos() * dt;
                a.y += a.v * a.heading.sin() * dt;
            }
        }
    }
    let theta_max = world.path.theta_max();
    let next = vehicle::step(&world.ego, input, &world.params, theta_max);
    world.ego = next;
    world.ego.ego.v = world.ego.ego.v.max(0.0);
    world.ego.theta = world.project_ego(next.theta);
    world.t_s += dt;
    world.apply_events();
    world.record();
    if world.any_overlap() {
        world.collided = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::episode::tests::{crossing_template, merge_template};
    use crate::sim::{EgoSpec, ScenarioKind};

    fn rect(x: f64, y: f64, heading: f64) -> Footprint {
        Footprint {
            x,
            y,
            heading,
            half_length: 2.0,
            half_width: 1.0,
        }
    }

    #[test]
    fn overlap_cases() {
        assert!(footprints_overlap(
            &rect(0.0, 0.0, 0.0),
            &rect(3.9, 0.0, 0.0)
        ));
        assert!(!footprints_overlap(
            &rect(0.0, 0.0, 0.0),
            &rect(4.1, 0.0, 0.0)
        ));
        assert!(!footprints_overlap(
            &rect(0.0, 0.0, 0.0),
            &rect(0.0, 2.1, 0.0)
        ));
        // Rotated 45 degrees: the corner reaches 2.12 along x.
        let r = rect(4.0, 0.0, std::f64::consts::FRAC_PI_4);
        assert!(footprints_overlap(&rect(0.0, 0.0, 0.0), &r));
        let r = rect(4.2, 0.0, std::f64::consts::FRAC_PI_4);
        assert!(!footprints_overlap(&rect(0.0, 0.0, 0.0), &r));
        // Diagonal offset where only the second rectangle's axes separate.
        let a = rect(0.0, 0.0, 0.0);
        let b = rect(3.0, 3.0, -std::f64::consts::FRAC_PI_4);
        assert!(!footprints_overlap(&a, &b));
    }

    #[test]
    fn ttc_ignores_adjacent_lanes() {
        let idm = IdmParams::default();
        let mut ahead = lane_car(1, 30.0, 5.0, idm);
        ahead.route = Route::Lane {
            offset_m: 0.0,
            s_m: 30.0,
            reverse: false,
        };
        let beside = lane_car(2, 10.0, 0.0, idm);
        let mut scn = empty_road(vec![ahead, beside]);
        scn.ego.v_mps = 10.0;
        let w = World::new(&scn).unwrap();
        let f = w.ego_footprint();
        let gap = 30.0 - f.x + w.path.query(0.0).x - f.half_length - 2.25;
        approx::assert_abs_diff_eq!(
            w.min_time_to_collision().unwrap(),
            gap / 5.0,
            epsilon = 1e-9
        );

        let scn = empty_road(vec![lane_car(2, 10.0, 0.0, idm)]);
        let mut w = World::new(&scn).unwrap();
        w.ego.ego.v = 10.0;
        assert_eq!(w.min_time_to_collision(), None);
    }

    fn empty_road(agents: Vec<AgentSpec>) -> Scenario {
        let mut s = merge_template();
        s.kind = ScenarioKind::OncomingOvertake;
        s.merge = None;
        s.agents = agents;
        s.events.clear();
        s.ego = EgoSpec {
            s_m: 0.0,
            offset_m: 0.0,
            v_mps: 0.0,
        };
        s
    }

    fn lane_car(id: usize, s_m: f64, v: f64, idm: IdmParams) -> AgentSpec {
        AgentSpec {
            id,
            route: Route::Lane {
                offset_m: -3.5,
                s_m,
                reverse: false,
            },
            v_mps: v,
            idm,
            length_m: 4.5,
            width_m: 1.8,
        }
    }

    #[test]
    fn free_agent_at_desired_speed_cruises() {
        let idm = IdmParams::default();
        let mut w = World::new(&empty_road(vec![lane_car(1, 20.0, idm.v0_mps, idm)])).unwrap();
        for _ in 0..50 {
            step_world(&mut w, &AugmentedInput::default());
        }
        assert!((w.agents[0].v - idm.v0_mps).abs() < 1e-12);
        assert!((w.agents[0].s - (20.0 + 5.0 * idm.v0_mps)).abs() < 1e-9);
    }

    #[test]
    fn platoon_at_equilibrium_keeps_spacing() {
        let v = 10.0;
        let follower = IdmParams::default();
        // The head cruises at its own desired speed; followers sit at the
        // equilibrium gap for that speed.
        let head = IdmParams {
            v0_mps: v,
            ..follower
        };
        let gap = follower.equilibrium_gap(v);
        let mut agents = vec![lane_car(1, 100.0, v, head)];
        for i in 1..5 {
            agents.push(lane_car(i + 1, 100.0 - i as f64 * (gap + 4.5), v, follower));
        }
        let mut w = World::new(&empty_road(agents)).unwrap();
        let initial: Vec<f64> = w.agents.windows(2).map(|p| p[0].s - p[1].s).collect();
        for _ in 0..100 {
            step_world(&mut w, &AugmentedInput::default());
        }
        for (p, g0) in w.agents.windows(2).zip(initial) {
            assert!(((p[0].s - p[1].s) - g0).abs() < 0.01);
        }
    }

    #[test]
    fn overlap_latches() {
        let idm = IdmParams::default();
        let mut s = empty_road(vec![lane_car(1, 30.0, 0.0, idm)]);
        if let Route::Lane { offset_m, .. } = &mut s.agents[0].route {
            *offset_m = 0.0;
        }
        s.ego.v_mps = 15.0;
        let mut w = World::new(&s).unwrap();
        assert!(!w.collided);
        let mut first = None;
        for k in 0..40 {
            step_world(&mut w, &AugmentedInput::default());
            if w.collided && first.is_none() {
                first = Some(k);
                assert!(w.any_overlap());
            }
        }
        assert!(first.is_some());
        assert!(w.collided);
    }

    #[test]
    fn reveal_event_controls_perception() {
        let s = crossing_template();
        let hidden = s.agents[0].id;
        let t_e = s.events[0].t_s;
        let mut w = World::new(&s).unwrap();
        let mut saw_before = false;
        let mut saw_after = false;
        while w.t_s < t_e + 1.0 {
            let seen = w.histories().iter().any(|h| h.id == hidden);
            if w.t_s < t_e - 1e-9 {
                saw_before |= seen;
            } else {
                saw_after = seen;
            }
            let u = AugmentedInput::new(0.0, 0.0, w.ego.ego.v);
            step_world(&mut w, &u);
        }
        assert!(!saw_before);
        assert!(saw_after);
        for h in w.histories() {
            assert!(h.poses.windows(2).all(|p| p[1].t_s > p[0].t_s));
        }
    }
}
