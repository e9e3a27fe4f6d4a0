//! Planar primitives in the scene-normalized frame.
//!
//! The frame maps `(-1, -1)` to the upper-left corner of the bird-eye grid and
//! `(1, 1)` to the lower-right corner, so `y` grows downwards in image space.
//! Trajectories are sampled once per simulation timestep; generated routes
//! only carry key waypoints every `stride` steps and are densified with
//! [`interpolate_trajectory`].

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default heading-scaling factor for the Bezier control-point heuristic.
pub const DEFAULT_BEZIER_K: f64 = 0.25;

/// Determinant threshold below which the two tangent lines count as parallel.
pub const PARALLEL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn rotate(self, theta: f64) -> Point2 {
        let (s, c) = theta.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the opposite edge.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Orientation in radians, kept in the principal range `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heading(f64);

impl Heading {
    pub fn new(angle: f64) -> Self {
        Heading(wrap_angle(angle))
    }

    /// Heading of a non-zero vector.
    pub fn of(v: Point2) -> Self {
        Heading(v.y.atan2(v.x))
    }

    pub fn angle(self) -> f64 {
        self.0
    }

    pub fn unit(self) -> Point2 {
        let (s, c) = self.0.sin_cos();
        Point2::new(c, s)
    }

    pub fn rotated(self, by: f64) -> Self {
        Heading::new(self.0 + by)
    }

    /// Signed angle from `self` to `other`, counterclockwise positive.
    pub fn angle_to(self, other: Heading) -> f64 {
        wrap_angle(other.0 - self.0)
    }
}

/// Densely sampled positions, one per simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Point2>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(positions: Vec<Point2>, dt: f64) -> Result<Self> {
        if positions.is_empty() {
            return invalid("trajectory must contain at least one position");
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("timestep must be positive, got {dt}"));
        }
        if let Some(i) = positions.iter().position(|p| !p.is_finite()) {
            return invalid(format!("non-finite position at index {i}"));
        }
        Ok(Self { positions, dt })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn first(&self) -> Point2 {
        self.positions[0]
    }

    pub fn last(&self) -> Point2 {
        *self.positions.last().expect("trajectory is never empty")
    }

    /// Position at `t`, holding the final sample past the end.
    pub fn at(&self, t: usize) -> Point2 {
        self.positions[t.min(self.positions.len() - 1)]
    }
}

/// Positions at times `0, s, 2s, ..., ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyWaypoints {
    pub points: Vec<Point2>,
    pub stride: usize,
}

impl KeyWaypoints {
    pub fn new(points: Vec<Point2>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return invalid("stride must be positive");
        }
        if points.len() < 2 {
            return invalid("key waypoints need at least two points");
        }
        if points.iter().any(|p| !p.is_finite()) {
            return invalid("key waypoints must be finite");
        }
        Ok(Self { points, stride })
    }

    /// Number of generated segments, `m`.
    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }
}

/// Keeps every `stride`-th position starting at index 0.
pub fn extract_keypoints(traj: &Trajectory, stride: usize) -> Result<KeyWaypoints> {
    if stride == 0 {
        return invalid("stride must be positive");
    }
    if traj.len() <= stride {
        return invalid(format!(
            "trajectory of {} points is too short for stride {stride}",
            traj.len()
        ));
    }
    let points = traj.positions.iter().step_by(stride).copied().collect();
    KeyWaypoints::new(points, stride)
}

/// `n` equally spaced points from `p0` to `p1`, both included.
pub fn linear_interpolate(p0: Point2, p1: Point2, n: usize) -> Result<Vec<Point2>> {
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    let last = (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            if i == n - 1 {
                p1
            } else {
                p0.lerp(p1, i as f64 / last)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoint {
    pub control: Point2,
    /// Heading of the vehicle on arrival at `p1`.
    pub end_heading: Heading,
    /// Set when the tangent lines were (nearly) parallel and the control
    /// point fell back to the chord midpoint.
    pub parallel_fallback: bool,
}

/// Control point of the quadratic Bezier joining `p0` (heading `d0`) to `p1`.
///
/// `alpha` is the signed angle from `d0` to the chord, the arrival heading is
/// the chord rotated by `k * alpha`, and the control point is the intersection
/// of the two tangent lines.
pub fn bezier_control_point(p0: Point2, d0: Heading, p1: Point2, k: f64) -> Result<ControlPoint> {
    let chord = p1 - p0;
    if chord.norm() == 0.0 {
        return invalid("bezier endpoints coincide");
    }
    let chord_heading = Heading::of(chord);
    let alpha = d0.angle_to(chord_heading);
    let beta = k * alpha;
    let d1 = chord_heading.rotated(beta);

    let u0 = d0.unit();
    let u1 = d1.unit();
    let det = u0.x * u1.y - u0.y * u1.x;
    if det.abs() < PARALLEL_EPS {
        return Ok(ControlPoint {
            control: p0.lerp(p1, 0.5),
            end_heading: chord_heading,
            parallel_fallback: true,
        });
    }
    let t = (chord.x * u1.y - chord.y * u1.x) / det;
    Ok(ControlPoint {
        control: p0 + u0 * t,
        end_heading: d1,
        parallel_fallback: false,
    })
}

/// Evaluates `p0 (1-t)^2 + 2 c t (1-t) + p1 t^2`.
pub fn bezier_point(p0: Point2, c: Point2, p1: Point2, t: f64) -> Point2 {
    let u = 1.0 - t;
    p0 * (u * u) + c * (2.0 * t * u) + p1 * (t * t)
}

/// `n` samples of the quadratic Bezier at uniform `t` in `[0, 1]`.
pub fn quadratic_bezier(p0: Point2, c: Point2, p1: Point2, n: usize) -> Result<Vec<Point2>> {
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    let last = (n - 1) as f64;
    Ok((0..n)
        .map(|i| match i {
            0 => p0,
            _ if i == n - 1 => p1,
            _ => bezier_point(p0, c, p1, i as f64 / last),
        })
        .collect())
}

/// Incremental densifier for a stream of key waypoints.
///
/// The first segment is linear; later ones are quadratic Bezier curves whose
/// entry heading is the exit heading of the previous segment. Zero-length
/// segments hold position and keep the current heading.
#[derive(Debug, Clone)]
pub struct SegmentInterpolator {
    k: f64,
    steps: usize,
    last: Point2,
    heading: Heading,
    segments: usize,
}

impl SegmentInterpolator {
    pub fn new(start: Point2, initial_heading: Heading, steps: usize, k: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("samples per segment must be positive");
        }
        Ok(Self {
            k,
            steps,
            last: start,
            heading: initial_heading,
            segments: 0,
        })
    }

    pub fn heading(&self) -> Heading {
        self.heading
    }

    pub fn position(&self) -> Point2 {
        self.last
    }

    /// Returns the `steps` positions after the current one, ending on `next`.
    pub fn advance(&mut self, next: Point2) -> Result<Vec<Point2>> {
        let p0 = self.last;
        let n = self.steps + 1;
        let samples = if p0 == next {
            vec![p0; n]
        } else if self.segments == 0 {
            self.heading = Heading::of(next - p0);
            linear_interpolate(p0, next, n)?
        } else {
            let cp = bezier_control_point(p0, self.heading, next, self.k)?;
            self.heading = cp.end_heading;
            quadratic_bezier(p0, cp.control, next, n)?
        };
        self.last = next;
        self.segments += 1;
        Ok(samples[1..].to_vec())
    }
}

/// Densifies key waypoints into a trajectory with `samples_per_segment`
/// steps between consecutive keypoints.
pub fn interpolate_trajectory(
    kw: &KeyWaypoints,
    initial_heading: Heading,
    samples_per_segment: usize,
    dt: f64,
    k: f64,
) -> Result<Trajectory> {
    let mut interp = SegmentInterpolator::new(kw.points[0], initial_heading, samples_per_segment, k)?;
    let mut positions = Vec::with_capacity(kw.segments() * samples_per_segment + 1);
    positions.push(kw.points[0]);
    for &p in &kw.points[1..] {
        positions.extend(interp.advance(p)?);
    }
    Trajectory::new(positions, dt)
}

/// Maps between the normalized square and a `width x height` pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn cell_width(&self) -> f64 {
        2.0 / self.width as f64
    }

    pub fn cell_height(&self) -> f64 {
        2.0 / self.height as f64
    }

    /// Normalized coordinates of the center of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> Point2 {
        Point2::new(
            -1.0 + (col as f64 + 0.5) * self.cell_width(),
            -1.0 + (row as f64 + 0.5) * self.cell_height(),
        )
    }

    /// Continuous pixel coordinates (column, row) of a normalized point.
    pub fn to_pixel(&self, p: Point2) -> (f64, f64) {
        (
            (p.x + 1.0) / self.cell_width(),
            (p.y + 1.0) / self.cell_height(),
        )
    }

    pub fn to_normalized(&self, col: f64, row: f64) -> Point2 {
        Point2::new(
            col * self.cell_width() - 1.0,
            row * self.cell_height() - 1.0,
        )
    }

    /// Cell containing `p`, or `None` outside the grid.
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        if !p.is_finite() || p.x.abs() > 1.0 || p.y.abs() > 1.0 {
            return None;
        }
        let (c, r) = self.to_pixel(p);
        let col = (c.floor() as usize).min(self.width - 1);
        let row = (r.floor() as usize).min(self.height - 1);
        Some((col, row))
    }
}

/// Row-major `height x width` grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Isotropic Gaussian bump centred on `p`, evaluated at every cell centre.
pub fn heatmap(p: Point2, sigma: f64, frame: Frame) -> Result<HeatmapGrid> {
    if !(sigma > 0.0) {
        return invalid(format!("sigma must be positive, got {sigma}"));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = Vec::with_capacity(frame.width * frame.height);
    for row in 0..frame.height {
        for col in 0..frame.width {
            let c = frame.cell_center(col, row);
            let d2 = (c.x - p.x).powi(2) + (c.y - p.y).powi(2);
            values.push((-d2 * inv).exp());
        }
    }
    Ok(HeatmapGrid {
        width: frame.width,
        height: frame.height,
        values,
    })
}

/// Piecewise-linear path with cumulative arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<Point2>,
    cum: Vec<f64>,
}

impl Polyline {
    /// Builds a path, dropping consecutive duplicate vertices.
    pub fn new(raw: &[Point2]) -> Result<Self> {
        let mut points: Vec<Point2> = Vec::with_capacity(raw.len());
        for &p in raw {
            if !p.is_finite() {
                return invalid("polyline vertices must be finite");
            }
            if points.last() != Some(&p) {
                points.push(p);
            }
        }
        if points.is_empty() {
            return invalid("polyline needs at least one vertex");
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + w[0].dist(w[1]));
        }
        Ok(Self { points, cum })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at arc length `s`, clamped to the path.
    pub fn point_at(&self, s: f64) -> Point2 {
        if self.points.len() == 1 || s <= 0.0 {
            return self.points[0];
        }
        if s >= self.length() {
            return *self.points.last().unwrap();
        }
        let i = self.cum.partition_point(|&c| c <= s) - 1;
        let seg = self.cum[i + 1] - self.cum[i];
        self.points[i].lerp(self.points[i + 1], (s - self.cum[i]) / seg)
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Point2 {
        if self.points.len() == 1 {
            return Point2::new(1.0, 0.0);
        }
        let i = (self.cum.partition_point(|&c| c <= s.max(0.0)).max(1) - 1).min(self.points.len() - 2);
        let d = self.points[i + 1] - self.points[i];
        d * (1.0 / d.norm())
    }

    /// Nearest point on the path as `(arc_length, distance)`; ties resolve to
    /// the smaller arc length.
    pub fn project(&self, p: Point2) -> (f64, f64) {
        if self.points.len() == 1 {
            return (0.0, p.dist(self.points[0]));
        }
        let mut best = (0.0, f64::INFINITY);
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let d = self.points[i + 1] - a;
            let len2 = d.dot(d);
            let t = ((p - a).dot(d) / len2).clamp(0.0, 1.0);
            let dist = p.dist(a + d * t);
            if dist < best.1 {
                best = (self.cum[i] + t * (self.cum[i + 1] - self.cum[i]), dist);
            }
        }
        best
    }
}

/// Intersection of segments `a0a1` and `b0b1` as parameters `(ta, tb)` in
/// `[0, 1]`, or `None` when they miss or are parallel.
pub fn segment_intersection(a0: Point2, a1: Point2, b0: Point2, b1: Point2) -> Option<(f64, f64)> {
    let da = a1 - a0;
    let db = b1 - b0;
    let den = da.cross(db);
    if den.abs() < 1e-14 {
        return None;
    }
    let w = b0 - a0;
    let ta = w.cross(db) / den;
    let tb = w.cross(da) / den;
    ((0.0..=1.0).contains(&ta) && (0.0..=1.0).contains(&tb)).then_some((ta, tb))
}

/// Mean over the grid of `mask * heatmap(p)` and, when requested, its
/// gradient with respect to `p`. Uses the separability of the Gaussian so
/// only `width + height` exponentials are evaluated.
pub fn gaussian_mask_mass(mask: &[f64], frame: Frame, p: Point2, sigma: f64, with_grad: bool) -> (f64, Point2) {
    debug_assert_eq!(mask.len(), frame.width * frame.height);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let gx: Vec<f64> = (0..frame.width)
        .map(|c| {
            let u = frame.cell_center(c, 0).x - p.x;
            (-u * u * inv).exp()
        })
        .collect();
    let mut total = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for row in 0..frame.height {
        let v = frame.cell_center(0, row).y - p.y;
        let gy = (-v * v * inv).exp();
        if gy == 0.0 {
            continue;
        }
        let m = &mask[row * frame.width..(row + 1) * frame.width];
        let mut s = 0.0;
        let mut sd = 0.0;
        for c in 0..frame.width {
            let w = m[c] * gx[c];
            s += w;
            if with_grad {
                sd += w * (frame.cell_center(c, 0).x - p.x);
            }
        }
        total += gy * s;
        if with_grad {
            dx += gy * sd * inv_s2;
            dy += gy * s * v * inv_s2;
        }
    }
    let cells = (frame.width * frame.height) as f64;
    (total / cells, Point2::new(dx / cells, dy / cells))
}
