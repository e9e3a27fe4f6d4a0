//! Bird-eye road rasters, lane-level routes and the three interaction cases.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{gaussian_mask_mass, Frame, KeyWaypoints, Point2, Polyline, Trajectory};

/// Distance from the centre to where routes start and end.
const EDGE: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    StraightRoad,
    Intersection,
    Roundabout,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::StraightRoad, SceneKind::Intersection, SceneKind::Roundabout];

    pub fn id(self) -> &'static str {
        match self {
            SceneKind::StraightRoad => "straight",
            SceneKind::Intersection => "intersection",
            SceneKind::Roundabout => "roundabout",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Width of each road band in pixels (two lanes).
    pub band_width_px: usize,
    /// Roundabout island radius, normalized units.
    pub inner_radius: f64,
    /// Roundabout outer radius, normalized units.
    pub outer_radius: f64,
    /// Number of roundabout arms (0, 3 or 4).
    pub entries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            band_width_px: 12,
            inner_radius: 0.3,
            outer_radius: 0.6,
            entries: 4,
        }
    }
}

/// Binary drivable-area raster. `drivable` is row-major, 1 for road.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub kind: SceneKind,
    pub frame: Frame,
    pub params: SceneParams,
    pub drivable: Vec<u8>,
}

/// First row/column of a centred band.
fn band_start(extent: usize, band: usize) -> usize {
    (extent - band).div_ceil(2)
}

pub fn make_scene(kind: SceneKind, width_px: usize, height_px: usize, params: SceneParams) -> Result<Scene> {
    if width_px < 32 || height_px < 32 {
        return invalid(format!("scene must be at least 32x32, got {width_px}x{height_px}"));
    }
    if params.band_width_px == 0 || params.band_width_px > width_px.min(height_px) {
        return invalid(format!("band width {} px does not fit", params.band_width_px));
    }
    if kind == SceneKind::Roundabout
        && !(params.inner_radius >= 0.0 && params.outer_radius > params.inner_radius)
    {
        return invalid("roundabout radii must satisfy 0 <= inner < outer");
    }
    if kind == SceneKind::Roundabout && ![0, 3, 4].contains(&params.entries) {
        return invalid("roundabout needs 0, 3 or 4 entries");
    }
    let frame = Frame::new(width_px, height_px);
    let bw = params.band_width_px;
    let row0 = band_start(height_px, bw);
    let col0 = band_start(width_px, bw);
    let in_hband = |row: usize| row >= row0 && row < row0 + bw;
    let in_vband = |col: usize| col >= col0 && col < col0 + bw;
    let mut drivable = vec![0u8; width_px * height_px];
    for row in 0..height_px {
        for col in 0..width_px {
            let c = frame.cell_center(col, row);
            let on = match kind {
                SceneKind::StraightRoad => in_hband(row),
                SceneKind::Intersection => in_hband(row) || in_vband(col),
                SceneKind::Roundabout => {
                    let r = c.norm();
                    let ring = r >= params.inner_radius && r <= params.outer_radius;
                    let arm = r >= params.inner_radius
                        && match params.entries {
                            4 => in_hband(row) || in_vband(col),
                            // East, west and south arms.
                            3 => in_hband(row) || (in_vband(col) && c.y > 0.0),
                            _ => false,
                        };
                    ring || arm
                }
            };
            drivable[row * width_px + col] = on as u8;
        }
    }
    if drivable.iter().all(|&v| v == 0) {
        return invalid("scene parameters leave no drivable cells");
    }
    Ok(Scene {
        kind,
        frame,
        params,
        drivable,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneMeta {
    kind: SceneKind,
    width: usize,
    height: usize,
    params: SceneParams,
    frame: FrameMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameMeta {
    upper_left: Point2,
    lower_right: Point2,
}

impl Scene {
    pub fn default_for(kind: SceneKind) -> Self {
        make_scene(kind, 64, 64, SceneParams::default()).expect("default scene parameters are valid")
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    pub fn width(&self) -> usize {
        self.frame.width
    }

    pub fn height(&self) -> usize {
        self.frame.height
    }

    pub fn cell(&self, col: usize, row: usize) -> u8 {
        self.drivable[row * self.frame.width + col]
    }

    pub fn drivable_count(&self) -> usize {
        self.drivable.iter().map(|&v| v as usize).sum()
    }

    /// `1 - y` per cell.
    pub fn offroad_mask(&self) -> Vec<f64> {
        self.drivable.iter().map(|&v| 1.0 - v as f64).collect()
    }

    /// Half-distance between the two lanes of a band, normalized units.
    pub fn lane_offset(&self) -> f64 {
        self.params.band_width_px as f64 * self.frame.cell_width() / 4.0
    }

    /// Normalized coordinate of the horizontal band's centre line.
    fn hband_center(&self) -> f64 {
        let r0 = band_start(self.frame.height, self.params.band_width_px) as f64;
        -1.0 + (r0 + self.params.band_width_px as f64 / 2.0) * self.frame.cell_height()
    }

    fn vband_center(&self) -> f64 {
        let c0 = band_start(self.frame.width, self.params.band_width_px) as f64;
        -1.0 + (c0 + self.params.band_width_px as f64 / 2.0) * self.frame.cell_width()
    }

    pub fn ring_radius(&self) -> f64 {
        0.5 * (self.params.inner_radius + self.params.outer_radius)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P2\n{} {}\n255\n", self.frame.width, self.frame.height);
        for row in 0..self.frame.height {
            let line: Vec<&str> = (0..self.frame.width)
                .map(|col| if self.cell(col, row) == 1 { "255" } else { "0" })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let meta = SceneMeta {
            kind: self.kind,
            width: self.frame.width,
            height: self.frame.height,
            params: self.params,
            frame: FrameMeta {
                upper_left: Point2::new(-1.0, -1.0),
                lower_right: Point2::new(1.0, 1.0),
            },
        };
        std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a PGM raster plus its JSON sidecar.
    pub fn read(pgm: &Path, sidecar: &Path) -> Result<Self> {
        let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        let text = std::fs::read_to_string(pgm)?;
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P2") {
            return Err(Error::Format("expected plain PGM (P2)".into()));
        }
        let mut num = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad PGM {what}")))
        };
        let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if w != meta.width || h != meta.height {
            return Err(Error::Format("PGM size disagrees with sidecar".into()));
        }
        let mut drivable = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            drivable.push((num("pixel")? * 2 > maxval) as u8);
        }
        Ok(Scene {
            kind: meta.kind,
            frame: Frame::new(w, h),
            params: meta.params,
            drivable,
        })
    }
}

/// True iff `p` lies inside the frame on a drivable cell.
pub fn is_on_road(scene: &Scene, p: Point2) -> bool {
    scene
        .frame
        .cell_of(p)
        .is_some_and(|(col, row)| scene.cell(col, row) == 1)
}

/// Mean over the grid of `(1/m) sum_k (1 - y) * heatmap(keypoint k)` for
/// keypoints `1..=m` (the given start is excluded).
pub fn road_loss(kw: &KeyWaypoints, scene: &Scene, sigma: f64) -> Result<f64> {
    Ok(road_loss_with_grad(kw, scene, sigma)?.0)
}

/// Road loss and its gradient per keypoint (the first entry is always zero).
pub fn road_loss_with_grad(kw: &KeyWaypoints, scene: &Scene, sigma: f64) -> Result<(f64, Vec<Point2>)> {
    if !(sigma > 0.0) {
        return invalid(format!("sigma must be positive, got {sigma}"));
    }
    let mask = scene.offroad_mask();
    let m = kw.segments() as f64;
    let mut total = 0.0;
    let mut grads = vec![Point2::default(); kw.points.len()];
    for (k, &p) in kw.points.iter().enumerate().skip(1) {
        let (v, g) = gaussian_mask_mass(&mask, scene.frame, p, sigma, true);
        total += v / m;
        grads[k] = g * (1.0 / m);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Case {
    /// Same direction, V1 behind V2.
    I,
    /// Same direction, V1 ahead of V2.
    II,
    /// Opposite or crossing directions.
    III,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::I, Case::II, Case::III];
}

/// A lane-level path through a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub name: String,
    pub path: Polyline,
}

fn straight(name: &str, a: Point2, b: Point2) -> Route {
    Route {
        name: name.into(),
        path: Polyline::new(&[a, b]).expect("distinct endpoints"),
    }
}

/// Axis directions used for road arms: east, south, west, north.
const ARM_ANGLES: [f64; 4] = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
const ARM_NAMES: [&str; 4] = ["E", "S", "W", "N"];

fn arm_angles(scene: &Scene) -> Vec<usize> {
    match scene.params.entries {
        4 => vec![0, 1, 2, 3],
        3 => vec![0, 1, 2],
        _ => vec![],
    }
}

/// All routes of a scene. Traffic keeps to the side of the band on the
/// positive normal of its heading.
pub fn routes(scene: &Scene) -> Vec<Route> {
    let off = scene.lane_offset();
    let yc = scene.hband_center();
    let xc = scene.vband_center();
    let east = straight("E", Point2::new(-EDGE, yc + off), Point2::new(EDGE, yc + off));
    let west = straight("W", Point2::new(EDGE, yc - off), Point2::new(-EDGE, yc - off));
    match scene.kind {
        SceneKind::StraightRoad => vec![east, west],
        SceneKind::Intersection => vec![
            east,
            west,
            straight("S", Point2::new(xc - off, -EDGE), Point2::new(xc - off, EDGE)),
            straight("N", Point2::new(xc + off, EDGE), Point2::new(xc + off, -EDGE)),
        ],
        SceneKind::Roundabout => {
            let arms = arm_angles(scene);
            let mut out = Vec::new();
            for &i in &arms {
                for &j in &arms {
                    if i != j {
                        out.push(roundabout_route(scene, i, j));
                    }
                }
            }
            out
        }
    }
}

/// Route entering on arm `from`, circulating with increasing polar angle
/// and leaving on arm `to`.
pub fn roundabout_route(scene: &Scene, from: usize, to: usize) -> Route {
    let r = scene.ring_radius();
    let off = scene.lane_offset();
    let delta = (off / r).asin();
    let polar = |a: f64| Point2::new(r * a.cos(), r * a.sin());
    let (ai, aj) = (ARM_ANGLES[from], ARM_ANGLES[to]);
    let ui = Point2::new(ai.cos(), ai.sin());
    let ni = Point2::new(-ai.sin(), ai.cos());
    let uj = Point2::new(aj.cos(), aj.sin());
    let nj = Point2::new(-aj.sin(), aj.cos());

    let mut pts = vec![ui * EDGE + ni * off];
    let start = ai + delta;
    let mut sweep = (aj - delta - start).rem_euclid(TAU);
    if sweep < 1e-9 {
        sweep = TAU;
    }
    let n = (sweep / 0.05).ceil() as usize;
    for k in 0..=n {
        pts.push(polar(start + sweep * k as f64 / n as f64));
    }
    pts.push(uj * EDGE - nj * off);
    Route {
        name: format!("{}{}", ARM_NAMES[from], ARM_NAMES[to]),
        path: Polyline::new(&pts).expect("finite route"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dt: f64,
    /// Number of simulated steps; trajectories hold `horizon + 1` samples.
    pub horizon: usize,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 100,
            speed_min: 0.12,
            speed_max: 0.2,
        }
    }
}

/// Initial conditions and V2's reference behaviour for one interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub case: Case,
    pub kind: SceneKind,
    pub v1_start: Point2,
    pub v2_start: Point2,
    /// V1's nominal lane path and the arc length it starts at.
    pub v1_route: Vec<Point2>,
    pub v1_start_arc: f64,
    /// Nominal constant-ish speed trajectory of V1 along its route.
    pub v1_reference: Trajectory,
    pub v2_route: Vec<Point2>,
    pub v2_start_arc: f64,
    pub v2_reference: Trajectory,
    pub v2_goal: Point2,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn v1_path(&self) -> Polyline {
        Polyline::new(&self.v1_route).expect("validated route")
    }

    pub fn v2_path(&self) -> Polyline {
        Polyline::new(&self.v2_route).expect("validated route")
    }

    /// V1's goal: the end of its nominal reference.
    pub fn v1_goal(&self) -> Point2 {
        self.v1_reference.last()
    }
}

/// Samples positions along `path` for a speed profile `speed(t)` starting at
/// arc length `s0`; positions hold at the end of the path.
pub fn drive_along(path: &Polyline, s0: f64, steps: usize, dt: f64, speed: impl Fn(usize) -> f64) -> Trajectory {
    let mut s = s0;
    let mut pts = Vec::with_capacity(steps + 1);
    pts.push(path.point_at(s));
    for t in 0..steps {
        s = (s + speed(t) * dt).min(path.length());
        pts.push(path.point_at(s));
    }
    Trajectory::new(pts, dt).expect("finite path samples")
}

/// Speed profile with a gentle sinusoidal variation around `v`.
pub fn wobbly_speed<R: Rng>(v: f64, rng: &mut R) -> impl Fn(usize) -> f64 {
    let amp = rng.random_range(0.0..0.08);
    let period = rng.random_range(40.0..120.0);
    let phase = rng.random_range(0.0..TAU);
    move |t| v * (1.0 + amp * (TAU * t as f64 / period + phase).sin())
}

fn pick<'a, R: Rng>(routes: &'a [Route], rng: &mut R) -> &'a Route {
    &routes[rng.random_range(0..routes.len())]
}

fn find<'a>(routes: &'a [Route], name: &str) -> &'a Route {
    routes.iter().find(|r| r.name == name).expect("route exists")
}

/// Arc length along `path` of its closest approach to `p`.
fn arc_near(path: &Polyline, p: Point2) -> f64 {
    path.project(p).0
}

fn try_sample<R: Rng>(scene: &Scene, case: Case, cfg: &ScenarioConfig, rng: &mut R) -> Option<ScenarioSpec> {
    let all = routes(scene);
    if all.is_empty() {
        return None;
    }
    let (r1, r2, s1, s2): (Route, Route, f64, f64) = match (case, scene.kind) {
        (Case::I | Case::II, _) => {
            let r = pick(&all, rng).clone();
            let s2 = rng.random_range(0.3..0.7);
            let gap = rng.random_range(0.2..0.45);
            let s1 = if case == Case::I { s2 - gap } else { s2 + gap };
            (r.clone(), r, s1, s2)
        }
        (Case::III, SceneKind::StraightRoad) => {
            let r2 = pick(&all, rng).clone();
            let r1 = all.iter().find(|r| r.name != r2.name).unwrap().clone();
            (r1, r2, rng.random_range(0.0..0.5), rng.random_range(0.0..0.5))
        }
        (Case::III, SceneKind::Intersection) => {
            let r2 = pick(&all, rng).clone();
            let cross: Vec<Route> = all
                .iter()
                .filter(|r| matches!((r.name.as_str(), r2.name.as_str()), ("N" | "S", "E" | "W") | ("E" | "W", "N" | "S")))
                .cloned()
                .collect();
            let r1 = pick(&cross, rng).clone();
            let centre = Point2::new(scene.vband_center(), scene.hband_center());
            let c2 = arc_near(&r2.path, centre);
            let c1 = arc_near(&r1.path, centre);
            let s2 = c2 - rng.random_range(0.35..0.9);
            let s1 = c1 - rng.random_range(0.35..0.9);
            (r1, r2, s1, s2)
        }
        (Case::III, SceneKind::Roundabout) => {
            let arms = arm_angles(scene);
            let n = arms.len();
            let a = rng.random_range(0..n);
            let from2 = arms[a];
            let to2 = arms[(a + 2) % n];
            let from1 = arms[(a + 1) % n];
            let exits: Vec<usize> = arms.iter().copied().filter(|&j| j != from1).collect();
            let to1 = exits[rng.random_range(0..exits.len())];
            let r2 = find(&all, &format!("{}{}", ARM_NAMES[from2], ARM_NAMES[to2])).clone();
            let r1 = find(&all, &format!("{}{}", ARM_NAMES[from1], ARM_NAMES[to1])).clone();
            (r1, r2, rng.random_range(0.05..0.35), rng.random_range(0.0..0.3))
        }
    };
    if s1 < 0.0 || s2 < 0.0 || s1 >= r1.path.length() || s2 >= r2.path.length() {
        return None;
    }
    let v2 = rng.random_range(cfg.speed_min..cfg.speed_max);
    let v1 = rng.random_range(cfg.speed_min..cfg.speed_max);
    let v2_reference = drive_along(&r2.path, s2, cfg.horizon, cfg.dt, wobbly_speed(v2, rng));
    let v1_reference = drive_along(&r1.path, s1, cfg.horizon, cfg.dt, wobbly_speed(v1, rng));

    if case == Case::III && scene.kind == SceneKind::Intersection {
        // V2 must clear the crossing band within the horizon.
        let centre = Point2::new(scene.vband_center(), scene.hband_center());
        let half = scene.params.band_width_px as f64 * scene.frame.cell_width() / 2.0;
        let end = arc_near(&r2.path, v2_reference.last());
        if end < arc_near(&r2.path, centre) + half + 0.02 {
            return None;
        }
    }

    let spec = ScenarioSpec {
        case,
        kind: scene.kind,
        v1_start: r1.path.point_at(s1),
        v2_start: r2.path.point_at(s2),
        v1_route: r1.path.points().to_vec(),
        v1_start_arc: s1,
        v1_reference,
        v2_route: r2.path.points().to_vec(),
        v2_start_arc: s2,
        v2_goal: v2_reference.last(),
        v2_reference,
        seed: 0,
    };
    validate_scenario(scene, &spec).ok().map(|_| spec)
}

/// Checks the on-road and case-ordering invariants of a scenario.
pub fn validate_scenario(scene: &Scene, spec: &ScenarioSpec) -> Result<()> {
    for (what, p) in [("v1_start", spec.v1_start), ("v2_start", spec.v2_start), ("v2_goal", spec.v2_goal)] {
        if !is_on_road(scene, p) {
            return invalid(format!("{what} is off-road"));
        }
    }
    if let Some(t) = spec.v2_reference.positions.iter().position(|&p| !is_on_road(scene, p)) {
        return invalid(format!("V2 reference leaves the road at step {t}"));
    }
    if let Some(t) = spec.v1_reference.positions.iter().position(|&p| !is_on_road(scene, p)) {
        return invalid(format!("V1 reference leaves the road at step {t}"));
    }
    match spec.case {
        Case::I if spec.v1_start_arc >= spec.v2_start_arc => invalid("case I needs V1 behind V2"),
        Case::II if spec.v1_start_arc <= spec.v2_start_arc => invalid("case II needs V1 ahead of V2"),
        _ => Ok(()),
    }
}

/// Rejection-samples a valid scenario of the requested case.
pub fn sample_scenario<R: Rng>(scene: &Scene, case: Case, cfg: &ScenarioConfig, rng: &mut R) -> Result<ScenarioSpec> {
    for _ in 0..1000 {
        if let Some(spec) = try_sample(scene, case, cfg, rng) {
            return Ok(spec);
        }
    }
    Err(Error::Internal(format!(
        "no valid {case:?} scenario on {} after 1000 attempts",
        scene.kind
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn straight_band_area() {
        let p = SceneParams {
            band_width_px: 9,
            ..SceneParams::default()
        };
        let s = make_scene(SceneKind::StraightRoad, 64, 64, p).unwrap();
        assert_eq!(s.drivable_count(), 9 * 64);
        for row in 0..64 {
            let expect = (28..=36).contains(&row) as u8;
            assert_eq!(s.cell(5, row), expect, "row {row}");
        }
    }

    #[test]
    fn intersection_area_by_inclusion_exclusion() {
        let p = SceneParams {
            band_width_px: 9,
            ..SceneParams::default()
        };
        let s = make_scene(SceneKind::Intersection, 64, 64, p).unwrap();
        assert_eq!(s.drivable_count(), 2 * 9 * 64 - 81);
    }

    #[test]
    fn annulus_area_matches_fine_count() {
        // Oracle: fraction of a 2048x2048 grid of cell centres inside the
        // annulus; the coarse raster must agree within discretisation error.
        let p = SceneParams {
            entries: 0,
            ..SceneParams::default()
        };
        let s = make_scene(SceneKind::Roundabout, 64, 64, p).unwrap();
        let coarse = s.drivable_count() as f64 / (64.0 * 64.0);
        let fine = Frame::new(2048, 2048);
        let mut inside = 0usize;
        for row in 0..2048 {
            for col in 0..2048 {
                let r = fine.cell_center(col, row).norm();
                if (0.3..=0.6).contains(&r) {
                    inside += 1;
                }
            }
        }
        let fine_frac = inside as f64 / (2048.0 * 2048.0);
        let analytic = PI * (0.36 - 0.09) / 4.0;
        assert!((fine_frac - analytic).abs() < 1e-3);
        assert!((coarse - analytic).abs() < 0.01, "{coarse} vs {analytic}");
    }

    #[test]
    fn degenerate_scenes_are_rejected() {
        assert!(make_scene(SceneKind::StraightRoad, 16, 64, SceneParams::default()).is_err());
        let p = SceneParams {
            inner_radius: 0.6,
            outer_radius: 0.3,
            entries: 0,
            ..SceneParams::default()
        };
        assert!(make_scene(SceneKind::Roundabout, 64, 64, p).is_err());
    }

    #[test]
    fn on_road_queries() {
        let straight = Scene::default_for(SceneKind::StraightRoad);
        assert!(is_on_road(&straight, Point2::new(0.5, 0.0)));
        assert!(!is_on_road(&straight, Point2::new(0.5, 0.8)));
        assert!(!is_on_road(&straight, Point2::new(2.0, 2.0)));
        let ring = Scene::default_for(SceneKind::Roundabout);
        assert!(!is_on_road(&ring, Point2::new(0.0, 0.0)));
        assert!(is_on_road(&ring, Point2::new(0.45, 0.0)));
    }

    #[test]
    fn routes_stay_on_road() {
        for kind in SceneKind::ALL {
            let scene = Scene::default_for(kind);
            for route in routes(&scene) {
                let len = route.path.length();
                for i in 0..=200 {
                    let p = route.path.point_at(len * i as f64 / 200.0);
                    assert!(is_on_road(&scene, p), "{kind} {} leaves road at {p:?}", route.name);
                }
            }
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = std::env::temp_dir().join(format!("scene-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let scene = Scene::default_for(SceneKind::Roundabout);
        scene.write_pgm(&dir.join("r.pgm")).unwrap();
        scene.write_sidecar(&dir.join("r.json")).unwrap();
        let back = Scene::read(&dir.join("r.pgm"), &dir.join("r.json")).unwrap();
        assert_eq!(back, scene);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn case_orderings_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ScenarioConfig::default();
        for kind in SceneKind::ALL {
            let scene = Scene::default_for(kind);
            for _ in 0..20 {
                let s = sample_scenario(&scene, Case::I, &cfg, &mut rng).unwrap();
                assert!(s.v1_start_arc < s.v2_start_arc);
                assert_eq!(s.v1_route, s.v2_route);
                let s = sample_scenario(&scene, Case::II, &cfg, &mut rng).unwrap();
                assert!(s.v1_start_arc > s.v2_start_arc);
                let s = sample_scenario(&scene, Case::III, &cfg, &mut rng).unwrap();
                assert_ne!(s.v1_route, s.v2_route);
            }
        }
    }

    #[test]
    fn intersection_case_three_crosses_perpendicular_band() {
        let scene = Scene::default_for(SceneKind::Intersection);
        let half = scene.params.band_width_px as f64 * scene.frame.cell_width() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let s = sample_scenario(&scene, Case::III, &ScenarioConfig::default(), &mut rng).unwrap();
            let first = s.v2_reference.first();
            let last = s.v2_reference.last();
            // Horizontal travel must pass the vertical band and vice versa.
            let crosses = if (first.y - last.y).abs() < 1e-9 {
                first.x.min(last.x) < -half && first.x.max(last.x) > half
            } else {
                first.y.min(last.y) < -half && first.y.max(last.y) > half
            };
            assert!(crosses, "{first:?} -> {last:?}");
        }
    }

    #[test]
    fn sampled_references_stay_on_road() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in SceneKind::ALL {
            let scene = Scene::default_for(kind);
            for case in Case::ALL {
                for _ in 0..10 {
                    let s = sample_scenario(&scene, case, &ScenarioConfig::default(), &mut rng).unwrap();
                    assert_eq!(s.v2_reference.len(), 101);
                    assert!(s.v2_reference.positions.iter().all(|&p| is_on_road(&scene, p)));
                    assert_eq!(s.v2_goal, s.v2_reference.last());
                }
            }
        }
    }

    fn kw(points: Vec<Point2>) -> KeyWaypoints {
        KeyWaypoints::new(points, 5).unwrap()
    }

    #[test]
    fn road_loss_zero_on_fully_drivable_scene() {
        let mut scene = Scene::default_for(SceneKind::StraightRoad);
        scene.drivable.iter_mut().for_each(|v| *v = 1);
        let k = kw(vec![Point2::new(0.0, 0.0), Point2::new(0.3, 0.1), Point2::new(-0.5, 0.2)]);
        assert_eq!(road_loss(&k, &scene, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn road_loss_matches_direct_summation_off_road() {
        let mut scene = Scene::default_for(SceneKind::StraightRoad);
        scene.drivable.iter_mut().for_each(|v| *v = 0);
        let p = scene.frame.cell_center(31, 31);
        let k = kw(vec![Point2::new(0.9, 0.9), p]);
        let hm = crate::geometry::heatmap(p, 0.05, scene.frame).unwrap();
        let expected = hm.sum() / (64.0 * 64.0);
        let got = road_loss(&k, &scene, 0.05).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn road_loss_grows_moving_off_road() {
        let scene = Scene::default_for(SceneKind::StraightRoad);
        let mut prev = -1.0;
        for i in 0..=12 {
            let y = 0.05 * i as f64;
            let k = kw(vec![Point2::new(0.0, 0.0), Point2::new(0.1, y)]);
            let l = road_loss(&k, &scene, 0.05).unwrap();
            assert!(l > prev, "loss must increase at y={y}");
            prev = l;
        }
        assert!(road_loss(&kw(vec![Point2::new(0.0, 0.0); 2]), &scene, 0.0).is_err());
    }

    #[test]
    fn road_loss_gradient_matches_central_differences() {
        let scene = Scene::default_for(SceneKind::Roundabout);
        let pts = vec![
            Point2::new(0.5, 0.1),
            Point2::new(0.31, -0.22),
            Point2::new(0.05, 0.62),
            Point2::new(-0.4, 0.57),
        ];
        let (_, grads) = road_loss_with_grad(&kw(pts.clone()), &scene, 0.05).unwrap();
        let h = 1e-6;
        for k in 1..pts.len() {
            for axis in 0..2 {
                let mut up = pts.clone();
                let mut dn = pts.clone();
                if axis == 0 {
                    up[k].x += h;
                    dn[k].x -= h;
                } else {
                    up[k].y += h;
                    dn[k].y -= h;
                }
                let num = (road_loss(&kw(up), &scene, 0.05).unwrap() - road_loss(&kw(dn), &scene, 0.05).unwrap()) / (2.0 * h);
                let ana = if axis == 0 { grads[k].x } else { grads[k].y };
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-9);
                assert!(rel < 1e-4, "k={k} axis={axis}: {ana} vs {num}");
            }
        }
        assert_eq!(grads[0], Point2::default());
    }
}
