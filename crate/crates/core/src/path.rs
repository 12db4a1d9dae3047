//! Arclength-parameterized reference path with heading and road-boundary
//! distances.
//!
//! The centerline is interpolated with natural cubic splines in x and y over
//! arclength `theta`. Boundary distances are measured along the left/right
//! normal at every knot and linearly interpolated between knots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A planar waypoint in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Waypoint {
    fn from(p: [f64; 2]) -> Self {
        Self { x: p[0], y: p[1] }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("need at least 4 centerline waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoints {0} and {1} coincide")]
    DegenerateSegment(usize, usize),
    #[error("waypoint {0} is not finite")]
    NonFinite(usize),
}

/// Natural cubic spline through `(t_i, y_i)`.
#[derive(Debug, Clone)]
pub(crate) struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub(crate) fn natural(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        assert!(n >= 2 && y.len() == n);
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = t[i + 1] - t[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Self {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        }
    }

    fn segment(&self, s: f64) -> usize {
        let i = self.t.partition_point(|&k| k <= s);
        i.clamp(1, self.t.len() - 1) - 1
    }

    /// Value, first and second derivative at `s` (no clamping).
    pub(crate) fn eval(&self, s: f64) -> (f64, f64, f64) {
        let i = self.segment(s);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - s) / h;
        let b = (s - self.t[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let val = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d1 =
            (y1 - y0) / h - (3.0 * a * a - 1.0) * h / 6.0 * m0 + (3.0 * b * b - 1.0) * h / 6.0 * m1;
        let d2 = a * m0 + b * m1;
        (val, d1, d2)
    }
}

/// Piecewise-linear interpolant with its slope.
fn lerp_knots(t: &[f64], y: &[f64], s: f64) -> (f64, f64) {
    let i = t.partition_point(|&k| k <= s).clamp(1, t.len() - 1) - 1;
    let h = t[i + 1] - t[i];
    let slope = (y[i + 1] - y[i]) / h;
    (y[i] + slope * (s - t[i]), slope)
}

/// Path values at one arclength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub d_left: f64,
    pub d_right: f64,
}

/// Path values together with their derivatives in `theta`. Derivatives are
/// zero outside `[0, theta_max]` where the query clamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub point: PathPoint,
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
    pub dd_left: f64,
    pub dd_right: f64,
}

/// Result of projecting a point onto the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub theta: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ReferencePath {
    knots: Vec<f64>,
    x: CubicSpline,
    y: CubicSpline,
    psi: CubicSpline,
    d_left: Vec<f64>,
    d_right: Vec<f64>,
    theta_max: f64,
}

/// Gauss-Legendre 5-point nodes and weights on [-1, 1].
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Maximum knot spacing after resampling, in meters.
const RESAMPLE_STEP: f64 = 0.5;

fn speed_integral(x: &CubicSpline, y: &CubicSpline, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    GL5.iter()
        .map(|&(node, w)| {
            let s = mid + half * node;
            let (_, dx, _) = x.eval(s);
            let (_, dy, _) = y.eval(s);
            w * dx.hypot(dy)
        })
        .sum::<f64>()
        * half
}

impl ReferencePath {
    /// Builds the path from centerline and boundary polylines.
    pub fn build(
        center: &[Waypoint],
        left_boundary: &[Waypoint],
        right_boundary: &[Waypoint],
    ) -> Result<Self, PathError> {
        if center.len() < 4 {
            return Err(PathError::TooFewWaypoints(center.len()));
        }
        for (i, w) in center.iter().enumerate() {
            if !w.x.is_finite() || !w.y.is_finite() {
                return Err(PathError::NonFinite(i));
            }
        }
        let mut chord = vec![0.0];
        for (i, pair) in center.windows(2).enumerate() {
            let d = (pair[1].x - pair[0].x).hypot(pair[1].y - pair[0].y);
            if d <= 1e-12 {
                return Err(PathError::DegenerateSegment(i, i + 1));
            }
            chord.push(chord[i] + d);
        }
        let xs: Vec<f64> = center.iter().map(|w| w.x).collect();
        let ys: Vec<f64> = center.iter().map(|w| w.y).collect();
        let sx = CubicSpline::natural(&chord, &xs);
        let sy = CubicSpline::natural(&chord, &ys);

        // Resample each chord segment and integrate the interpolant's speed so
        // the final knots sit at true arclength.
        let mut knots = vec![0.0];
        let mut px = vec![xs[0]];
        let mut py = vec![ys[0]];
        let mut theta = 0.0;
        for i in 0..center.len() - 1 {
            let (s0, s1) = (chord[i], chord[i + 1]);
            let pieces = ((s1 - s0) / RESAMPLE_STEP).ceil().max(1.0) as usize;
            let mut prev = s0;
            for p in 1..=pieces {
                let s = if p == pieces {
                    s1
                } else {
                    s0 + (s1 - s0) * p as f64 / pieces as f64
                };
                theta += speed_integral(&sx, &sy, prev, s);
                prev = s;
                knots.push(theta);
                if p == pieces {
                    px.push(xs[i + 1]);
                    py.push(ys[i + 1]);
                } else {
                    px.push(sx.eval(s).0);
                    py.push(sy.eval(s).0);
                }
            }
        }
        let x = CubicSpline::natural(&knots, &px);
        let y = CubicSpline::natural(&knots, &py);

        let mut headings = Vec::with_capacity(knots.len());
        for (k, &t) in knots.iter().enumerate() {
            let raw = y.eval(t).1.atan2(x.eval(t).1);
            let h = if k == 0 {
                raw
            } else {
                let prev: f64 = headings[k - 1];
                prev + wrap_angle(raw - prev)
            };
            headings.push(h);
        }
        let psi = CubicSpline::natural(&knots, &headings);

        let mut d_left = Vec::with_capacity(knots.len());
        let mut d_right = Vec::with_capacity(knots.len());
        for k in 0..knots.len() {
            let p = (px[k], py[k]);
            let h = headings[k];
            let left_normal = (-h.sin(), h.cos());
            d_left.push(normal_distance(p, left_normal, left_boundary));
            d_right.push(normal_distance(
                p,
                (-left_normal.0, -left_normal.1),
                right_boundary,
            ));
        }

        let theta_max = *knots.last().unwrap();
        Ok(Self {
            knots,
            x,
            y,
            psi,
            d_left,
            d_right,
            theta_max,
        })
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(0.0, self.theta_max)
    }

    /// Interpolated path values; `theta` is clamped to `[0, theta_max]`.
    pub fn query(&self, theta: f64) -> PathPoint {
        self.sample(theta).point
    }

    /// Path values and first derivatives in `theta`.
    pub fn sample(&self, theta: f64) -> PathSample {
        let inside = (0.0..=self.theta_max).contains(&theta);
        let t = self.clamp(theta);
        let (x, dx, _) = self.x.eval(t);
        let (y, dy, _) = self.y.eval(t);
        let (psi, dpsi, _) = self.psi.eval(t);
        let (d_left, dd_left) = lerp_knots(&self.knots, &self.d_left, t);
        let (d_right, dd_right) = lerp_knots(&self.knots, &self.d_right, t);
        let g = if inside { 1.0 } else { 0.0 };
        PathSample {
            point: PathPoint {
                x,
                y,
                psi,
                d_left: d_left.max(0.0),
                d_right: d_right.max(0.0),
            },
            dx: g * dx,
            dy: g * dy,
            dpsi: g * dpsi,
            dd_left: g * dd_left,
            dd_right: g * dd_right,
        }
    }

    /// Local minimizer of the squared distance from `(px, py)` to the path,
    /// by safeguarded Newton iteration seeded at `hint`.
    pub fn project(&self, px: f64, py: f64, hint: f64) -> Projection {
        const MAX_ITER: usize = 30;
        let mut theta = self.clamp(hint);
        for _ in 0..MAX_ITER {
            let (x, dx, ddx) = self.x.eval(theta);
            let (y, dy, ddy) = self.y.eval(theta);
            let (ex, ey) = (px - x, py - y);
            let grad = -(ex * dx + ey * dy);
            let hess = dx * dx + dy * dy - (ex * ddx + ey * ddy);
            // Fall back to a gradient step where the distance is locally concave.
            let step = if hess > 1e-6 { -grad / hess } else { -grad };
            let step = step.clamp(-5.0, 5.0);
            let next = self.clamp(theta + step);
            let moved = (next - theta).abs();
            theta = next;
            if moved < 1e-12 {
                return Projection {
                    theta,
                    converged: true,
                };
            }
        }
        let (x, dx, _) = self.x.eval(theta);
        let (y, dy, _) = self.y.eval(theta);
        let grad = -((px - x) * dx + (py - y) * dy);
        let at_bound = theta <= 0.0 || theta >= self.theta_max;
        Projection {
            theta,
            converged: grad.abs() < 1e-9 || at_bound,
        }
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Distance from `p` along the unit direction `n` to the first crossing of
/// `boundary`; nearest-point distance when the ray misses the polyline.
fn normal_distance(p: (f64, f64), n: (f64, f64), boundary: &[Waypoint]) -> f64 {
    let mut best: Option<f64> = None;
    for seg in boundary.windows(2) {
        let (ax, ay) = (seg[0].x, seg[0].y);
        let (ex, ey) = (seg[1].x - ax, seg[1].y - ay);
        // Solve p + t n = a + u e.
        let det = n.0 * (-ey) - n.1 * (-ex);
        if det.abs() < 1e-12 {
            continue;
        }
        let (rx, ry) = (ax - p.0, ay - p.1);
        let t = (rx * (-ey) - ry * (-ex)) / det;
        let u = (n.0 * ry - n.1 * rx) / det;
        if t >= -1e-9 && (-1e-9..=1.0 + 1e-9).contains(&u) {
            let t = t.max(0.0);
            best = Some(best.map_or(t, |b: f64| b.min(t)));
        }
    }
    if let Some(t) = best {
        return t;
    }
    let mut nearest = f64::INFINITY;
    for seg in boundary.windows(2) {
        let (ax, ay) = (seg[0].x, seg[0].y);
        let (ex, ey) = (seg[1].x - ax, seg[1].y - ay);
        let len2 = ex * ex + ey * ey;
        let u = if len2 > 0.0 {
            (((p.0 - ax) * ex + (p.1 - ay) * ey) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        nearest = nearest.min((ax + u * ex - p.0).hypot(ay + u * ey - p.1));
    }
    if boundary.len() == 1 {
        nearest = (boundary[0].x - p.0).hypot(boundary[0].y - p.1);
    }
    if nearest.is_finite() {
        nearest
    } else {
        0.0
    }
}
