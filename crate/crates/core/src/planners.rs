//! Receding-horizon planners driven along a reference trajectory: replay
//! (Data), the intelligent driver model (IDM), acceleration search (A*) and
//! the route generator used as a planner.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Heading, Point2, Polyline, SegmentInterpolator, Trajectory};
use crate::routegan::{GeneratorContext, GeneratorState, RouteGanModel, StyleCode};
use crate::scene::Scene;

/// What a planner sees at one replanning instant.
#[derive(Debug, Clone, Copy)]
pub struct PlannerInput<'a> {
    /// Own positions up to and including now.
    pub own_history: &'a [Point2],
    /// Opponent positions up to and including now.
    pub opponent_history: &'a [Point2],
    pub reference: &'a Trajectory,
    /// Current time index.
    pub t: usize,
    pub dt: f64,
    /// Number of positions to return.
    pub steps: usize,
}

impl PlannerInput<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.own_history.is_empty() || self.opponent_history.is_empty() {
            return invalid("planner input needs current positions");
        }
        if self.reference.is_empty() {
            return invalid("planner input needs a nonempty reference");
        }
        if self.steps == 0 || !(self.dt > 0.0) {
            return invalid("planner horizon and dt must be positive");
        }
        Ok(())
    }

    pub fn position(&self) -> Point2 {
        *self.own_history.last().expect("validated")
    }

    /// Heading of the last own displacement, or of the reference start.
    pub fn heading(&self) -> Heading {
        let h = self.own_history;
        if h.len() >= 2 && h[h.len() - 1] != h[h.len() - 2] {
            return Heading::of(h[h.len() - 1] - h[h.len() - 2]);
        }
        reference_heading(self.reference)
    }

    /// Speed over the last step, or the reference's initial speed.
    pub fn speed(&self) -> f64 {
        let h = self.own_history;
        if h.len() >= 2 {
            return h[h.len() - 1].dist(h[h.len() - 2]) / self.dt;
        }
        let r = self.reference;
        if r.len() >= 2 {
            r.at(1).dist(r.at(0)) / r.dt
        } else {
            0.0
        }
    }
}

/// Distance the followed path is extended past the reference's last point,
/// so planners faster than the recorded reference do not stall at its end.
pub const REFERENCE_RUNOUT: f64 = 2.0;

/// Arc-length path through the reference, extended along its final heading.
pub fn reference_path(reference: &Trajectory) -> Result<Polyline> {
    let p = &reference.positions;
    let mut pts = p.clone();
    if let Some(w) = p.windows(2).rev().find(|w| w[0] != w[1]) {
        let dir = w[1] - w[0];
        pts.push(reference.last() + dir * (REFERENCE_RUNOUT / dir.norm()));
    }
    Polyline::new(&pts)
}

/// Initial heading of a trajectory (first non-zero displacement).
pub fn reference_heading(reference: &Trajectory) -> Heading {
    let p = &reference.positions;
    p.windows(2)
        .find(|w| w[0] != w[1])
        .map(|w| Heading::of(w[1] - w[0]))
        .unwrap_or(Heading::new(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOutput {
    pub positions: Vec<Point2>,
    /// Set when the planner could not find a collision-free plan.
    pub collision_risk: bool,
}

impl PlannerOutput {
    pub fn new(positions: Vec<Point2>) -> Self {
        Self {
            positions,
            collision_risk: false,
        }
    }

    /// Checks the length and finiteness contract.
    pub fn check(&self, steps: usize) -> Result<()> {
        if self.positions.len() != steps {
            return invalid(format!("planner returned {} positions, expected {steps}", self.positions.len()));
        }
        if !self.positions.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("planner output".into()));
        }
        Ok(())
    }
}

pub trait Planner: Send {
    fn name(&self) -> &str;
    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerOutput>;
}

/// Replays the reference, ignoring the opponent.
#[derive(Debug, Clone, Default)]
pub struct DataPlanner;

pub fn data_planner(input: &PlannerInput) -> Result<PlannerOutput> {
    input.validate()?;
    let r = input.reference;
    Ok(PlannerOutput::new((1..=input.steps).map(|k| r.at(input.t + k)).collect()))
}

impl Planner for DataPlanner {
    fn name(&self) -> &str {
        "Data"
    }

    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerOutput> {
        data_planner(input)
    }
}

/// One classical fourth-order Runge-Kutta step of `dy/dt = f(t, y)`.
pub fn rk4_step<const N: usize>(f: impl Fn(f64, &[f64; N]) -> [f64; N], t: f64, y: &[f64; N], h: f64) -> [f64; N] {
    let shift = |y: &[f64; N], k: &[f64; N], c: f64| -> [f64; N] { std::array::from_fn(|i| y[i] + c * k[i]) };
    let k1 = f(t, y);
    let k2 = f(t + h / 2.0, &shift(y, &k1, h / 2.0));
    let k3 = f(t + h / 2.0, &shift(y, &k2, h / 2.0));
    let k4 = f(t + h, &shift(y, &k3, h));
    std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Integrates from `t0` over `n` steps of size `h`.
pub fn rk4_integrate<const N: usize>(
    f: impl Fn(f64, &[f64; N]) -> [f64; N],
    t0: f64,
    y0: [f64; N],
    h: f64,
    n: usize,
) -> [f64; N] {
    let mut y = y0;
    for i in 0..n {
        y = rk4_step(&f, t0 + i as f64 * h, &y, h);
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed.
    pub v0: f64,
    /// Time headway.
    pub time_headway: f64,
    /// Maximum acceleration.
    pub accel: f64,
    /// Comfortable deceleration.
    pub decel: f64,
    /// Minimum gap.
    pub s0: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 0.25,
            time_headway: 1.0,
            accel: 0.15,
            decel: 0.2,
            s0: 0.06,
            delta: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.v0, self.time_headway, self.accel, self.decel, self.s0];
        if !positive.iter().all(|&v| v > 0.0 && v.is_finite()) || !(self.delta >= 1.0) {
            return invalid(format!("IDM parameters out of range: {self:?}"));
        }
        Ok(())
    }

    /// Acceleration for speed `v`, with an optional leader at bumper gap
    /// `gap` approached at rate `dv` (own minus leader speed).
    pub fn acceleration(&self, v: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        match leader {
            None => self.accel * free,
            Some((gap, dv)) => {
                let desired = (self.s0 + v * self.time_headway + v * dv / (2.0 * (self.accel * self.decel).sqrt())).max(0.0);
                self.accel * (free - (desired / gap).powi(2))
            }
        }
    }
}

/// Longitudinal car-following along the reference. The opponent is
/// projected onto the reference and treated as a leader when ahead.
#[derive(Debug, Clone)]
pub struct IdmPlanner {
    pub params: IdmParams,
    /// Bumper-to-bumper gaps subtract this from the centre distance.
    pub vehicle_length: f64,
}

impl IdmPlanner {
    pub fn new(params: IdmParams, vehicle_length: f64) -> Result<Self> {
        params.validate()?;
        if !(vehicle_length >= 0.0) {
            return invalid("vehicle length must be non-negative");
        }
        Ok(Self { params, vehicle_length })
    }
}

/// Arc position of the opponent and its rate along `path`, from its last two observations.
fn projected_motion(path: &Polyline, history: &[Point2], dt: f64) -> (f64, f64) {
    let (arc, _) = path.project(*history.last().expect("validated"));
    let rate = if history.len() >= 2 {
        (arc - path.project(history[history.len() - 2]).0) / dt
    } else {
        0.0
    };
    (arc, rate)
}

impl Planner for IdmPlanner {
    fn name(&self) -> &str {
        "IDM"
    }

    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerOutput> {
        input.validate()?;
        let path = reference_path(input.reference)?;
        let here = input.position();
        let (mut arc, _) = path.project(here);
        let mut v = input.speed().max(0.0);
        let (opp_arc, opp_rate) = projected_motion(&path, input.opponent_history, input.dt);
        let ahead = opp_arc > arc + 1e-6;
        let p = self.params;
        let len = self.vehicle_length;
        let gap_at = |arc: f64, tau: f64| opp_arc + opp_rate * tau - arc - len;
        if ahead && gap_at(arc, 0.0) <= 0.0 {
            return Ok(PlannerOutput::new(vec![here; input.steps]));
        }
        let mut out = Vec::with_capacity(input.steps);
        let mut held = false;
        for k in 0..input.steps {
            if !held {
                let tau0 = k as f64 * input.dt;
                let rhs = |tau: f64, y: &[f64; 2]| -> [f64; 2] {
                    let vv = y[1].max(0.0);
                    let leader = ahead.then(|| (gap_at(y[0], tau).max(1e-9), vv - opp_rate));
                    [vv, p.acceleration(vv, leader)]
                };
                let next = rk4_step(rhs, tau0, &[arc, v], input.dt);
                arc = next[0].max(arc);
                v = next[1].max(0.0);
                if ahead && gap_at(arc, tau0 + input.dt) <= 0.0 {
                    held = true;
                    v = 0.0;
                }
            }
            out.push(path.point_at(arc));
        }
        Ok(PlannerOutput::new(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AStarConfig {
    /// Number of evenly spaced acceleration levels in `[-max_accel, max_accel]`.
    pub accel_levels: usize,
    pub max_accel: f64,
    pub max_speed: f64,
    /// Search horizon in steps.
    pub horizon: usize,
    /// Penalty weight on predicted proximity: each step within
    /// `safe_distance` of the opponent costs `collision_weight * (1 - d / safe_distance)`.
    pub collision_weight: f64,
    /// Weight on `|accel|` per step.
    pub accel_weight: f64,
    pub safe_distance: f64,
    /// Predicted distance below which a plan is flagged as a collision risk.
    pub collision_distance: f64,
    pub arc_bucket: f64,
    pub speed_bucket: f64,
    pub max_expansions: usize,
}

impl Default for AStarConfig {
    fn default() -> Self {
        Self {
            accel_levels: 5,
            max_accel: 0.3,
            max_speed: 0.25,
            horizon: 15,
            collision_weight: 1.0,
            accel_weight: 1e-4,
            safe_distance: 0.4,
            collision_distance: 0.06,
            arc_bucket: 2e-3,
            speed_bucket: 5e-3,
            max_expansions: 200_000,
        }
    }
}

impl AStarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accel_levels == 0 || self.horizon == 0 || self.max_expansions == 0 {
            return invalid("A* needs at least one acceleration level, horizon step and expansion");
        }
        let nonneg = [
            self.max_accel,
            self.collision_weight,
            self.accel_weight,
            self.safe_distance,
            self.collision_distance,
        ];
        if !(self.max_speed > 0.0)
            || !nonneg.iter().all(|&v| v >= 0.0 && v.is_finite())
            || !(self.arc_bucket >= 0.0 && self.speed_bucket >= 0.0)
        {
            return invalid(format!("A* parameters out of range: {self:?}"));
        }
        Ok(())
    }

    /// Acceleration grid ordered from most negative to most positive.
    pub fn accel_grid(&self) -> Vec<f64> {
        let n = self.accel_levels;
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| -self.max_accel + 2.0 * self.max_accel * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Fixed context of one search: the path, start state and predicted opponent.
#[derive(Debug, Clone)]
pub struct SearchProblem {
    pub path: Polyline,
    pub arc0: f64,
    pub v0: f64,
    pub dt: f64,
    pub opponent: Point2,
    pub opponent_velocity: Point2,
}

impl SearchProblem {
    pub fn from_input(input: &PlannerInput) -> Result<Self> {
        input.validate()?;
        let path = reference_path(input.reference)?;
        let (arc0, _) = path.project(input.position());
        let h = input.opponent_history;
        let opponent = h[h.len() - 1];
        // Observations arrive once per replanning interval of `steps`.
        let lag = input.steps.min(h.len() - 1);
        let opponent_velocity = if lag > 0 {
            (h[h.len() - 1] - h[h.len() - 1 - lag]) * (1.0 / (lag as f64 * input.dt))
        } else {
            Point2::new(0.0, 0.0)
        };
        Ok(Self {
            path,
            arc0,
            v0: input.speed(),
            dt: input.dt,
            opponent,
            opponent_velocity,
        })
    }

    /// Constant-velocity opponent prediction at step `k`.
    pub fn opponent_at(&self, k: usize) -> Point2 {
        self.opponent + self.opponent_velocity * (k as f64 * self.dt)
    }

    /// Applies acceleration `a` for one step from `(arc, v)`.
    pub fn advance(&self, cfg: &AStarConfig, arc: f64, v: f64, a: f64) -> (f64, f64) {
        let v1 = (v + a * self.dt).clamp(0.0, cfg.max_speed);
        let arc1 = (arc + 0.5 * (v + v1) * self.dt).min(self.path.length());
        (arc1, v1)
    }

    /// Predicted own-opponent distance after step `k` landing at `arc1`.
    pub fn predicted_distance(&self, arc1: f64, k: usize) -> f64 {
        self.path.point_at(arc1).dist(self.opponent_at(k))
    }

    /// Cost of the step landing at `arc1` on step `k`: lost progress
    /// relative to full speed, proximity penalty and acceleration effort.
    pub fn step_cost(&self, cfg: &AStarConfig, arc: f64, arc1: f64, k: usize, a: f64) -> f64 {
        let lost = cfg.max_speed * self.dt - (arc1 - arc);
        let d = self.predicted_distance(arc1, k);
        let risk = if d < cfg.safe_distance {
            cfg.collision_weight * (1.0 - d / cfg.safe_distance)
        } else {
            0.0
        };
        lost + risk + cfg.accel_weight * a.abs()
    }

    /// Lower bound on the remaining cost: full throttle progress, capped by the path end.
    fn heuristic(&self, cfg: &AStarConfig, arc: f64, v: f64, remaining: usize) -> f64 {
        let (mut s, mut vv) = (arc, v);
        for _ in 0..remaining {
            (s, vv) = self.advance(cfg, s, vv, cfg.max_accel);
        }
        (remaining as f64 * cfg.max_speed * self.dt - (s - arc)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub cost: f64,
    pub accels: Vec<f64>,
    /// Arc positions after each step.
    pub arcs: Vec<f64>,
    pub collision_risk: bool,
    pub expansions: usize,
}

struct Open {
    f: f64,
    effort: f64,
    seq: usize,
    node: usize,
}

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Open {}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Open {
    // Reversed so the max-heap pops the lowest f, then lowest |a|, then earliest push.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.effort.total_cmp(&self.effort))
            .then(other.seq.cmp(&self.seq))
    }
}

struct SearchNode {
    arc: f64,
    v: f64,
    k: usize,
    g: f64,
    parent: Option<usize>,
    accel: f64,
    hit: bool,
}

/// Best-first search over acceleration sequences of `cfg.horizon` steps.
pub fn astar_search(problem: &SearchProblem, cfg: &AStarConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let grid = cfg.accel_grid();
    let key = |arc: f64, v: f64, k: usize| -> (usize, i64, i64) {
        let q = |x: f64, b: f64| if b > 0.0 { (x / b).round() as i64 } else { x.to_bits() as i64 };
        (k, q(arc, cfg.arc_bucket), q(v, cfg.speed_bucket))
    };
    let mut nodes = vec![SearchNode {
        arc: problem.arc0,
        v: problem.v0.clamp(0.0, cfg.max_speed),
        k: 0,
        g: 0.0,
        parent: None,
        accel: 0.0,
        hit: false,
    }];
    let mut best: HashMap<(usize, i64, i64), f64> = HashMap::new();
    best.insert(key(nodes[0].arc, nodes[0].v, 0), 0.0);
    let mut open = BinaryHeap::new();
    let mut seq = 0usize;
    open.push(Open {
        f: problem.heuristic(cfg, nodes[0].arc, nodes[0].v, cfg.horizon),
        effort: 0.0,
        seq,
        node: 0,
    });
    let mut expansions = 0usize;
    while let Some(Open { node, .. }) = open.pop() {
        let (arc, v, k, g) = (nodes[node].arc, nodes[node].v, nodes[node].k, nodes[node].g);
        if best.get(&key(arc, v, k)).is_some_and(|&b| b < g) {
            continue;
        }
        if k == cfg.horizon {
            return Ok(unwind(&nodes, node, expansions));
        }
        expansions += 1;
        if expansions > cfg.max_expansions {
            return Err(Error::Internal(format!("A* exceeded {} expansions", cfg.max_expansions)));
        }
        for &a in &grid {
            let (arc1, v1) = problem.advance(cfg, arc, v, a);
            let step = problem.step_cost(cfg, arc, arc1, k + 1, a);
            let g1 = g + step;
            let kk = key(arc1, v1, k + 1);
            if best.get(&kk).is_some_and(|&b| b <= g1) {
                continue;
            }
            best.insert(kk, g1);
            let hit = problem.predicted_distance(arc1, k + 1) < cfg.collision_distance;
            nodes.push(SearchNode {
                arc: arc1,
                v: v1,
                k: k + 1,
                g: g1,
                parent: Some(node),
                accel: a,
                hit,
            });
            seq += 1;
            open.push(Open {
                f: g1 + problem.heuristic(cfg, arc1, v1, cfg.horizon - k - 1),
                effort: a.abs(),
                seq,
                node: nodes.len() - 1,
            });
        }
    }
    Err(Error::Internal("A* exhausted the search space without reaching the horizon".into()))
}

fn unwind(nodes: &[SearchNode], goal: usize, expansions: usize) -> SearchResult {
    let mut accels = Vec::new();
    let mut arcs = Vec::new();
    let mut risk = false;
    let mut at = Some(goal);
    while let Some(i) = at {
        let n = &nodes[i];
        if n.parent.is_some() {
            accels.push(n.accel);
            arcs.push(n.arc);
            risk |= n.hit;
        }
        at = n.parent;
    }
    accels.reverse();
    arcs.reverse();
    SearchResult {
        cost: nodes[goal].g,
        accels,
        arcs,
        collision_risk: risk,
        expansions,
    }
}

/// Searches accelerations along the reference and executes the first `s` steps.
#[derive(Debug, Clone)]
pub struct AStarPlanner {
    pub config: AStarConfig,
}

impl AStarPlanner {
    pub fn new(config: AStarConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl Planner for AStarPlanner {
    fn name(&self) -> &str {
        "Astar"
    }

    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerOutput> {
        let problem = SearchProblem::from_input(input)?;
        let mut cfg = self.config;
        cfg.horizon = cfg.horizon.max(input.steps);
        let result = astar_search(&problem, &cfg)?;
        Ok(PlannerOutput {
            positions: result.arcs[..input.steps].iter().map(|&a| problem.path.point_at(a)).collect(),
            collision_risk: result.collision_risk,
        })
    }
}

/// The route generator as a planner: one recurrent step per call, densified
/// to `s` positions by segment interpolation.
pub struct RouteGanPlanner<'m> {
    model: &'m RouteGanModel,
    ctx: GeneratorContext,
    state: GeneratorState,
    interp: SegmentInterpolator,
}

impl<'m> RouteGanPlanner<'m> {
    pub fn new(
        model: &'m RouteGanModel,
        scene: &Scene,
        goal: Point2,
        start: Point2,
        heading: Heading,
        q: &StyleCode,
        z: &[f64],
    ) -> Result<Self> {
        let (ctx, state) = model.encode_context(scene, goal, start, q, z)?;
        let c = &model.config;
        let interp = SegmentInterpolator::new(start, heading, c.stride, c.bezier_k)?;
        Ok(Self {
            model,
            ctx,
            state,
            interp,
        })
    }
}

impl Planner for RouteGanPlanner<'_> {
    fn name(&self) -> &str {
        "RouteGAN"
    }

    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerOutput> {
        input.validate()?;
        if input.steps != self.model.config.stride {
            return invalid(format!(
                "generator emits one keypoint per {} steps, asked for {}",
                self.model.config.stride, input.steps
            ));
        }
        let obs = *input.opponent_history.last().expect("validated");
        let (next, kp) = self.model.generator_step(&self.ctx, &self.state, obs)?;
        self.state = next;
        Ok(PlannerOutput::new(self.interp.advance(kp)?))
    }
}

/// Planners under test, selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlannerKind {
    Data,
    Idm,
    Astar,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::Data, PlannerKind::Idm, PlannerKind::Astar];

    pub fn label(self) -> &'static str {
        match self {
            PlannerKind::Data => "Data",
            PlannerKind::Idm => "IDM",
            PlannerKind::Astar => "Astar",
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "data" => Ok(PlannerKind::Data),
            "idm" => Ok(PlannerKind::Idm),
            "astar" | "a*" => Ok(PlannerKind::Astar),
            other => invalid(format!("unknown planner '{other}' (expected data, idm or astar)")),
        }
    }
}

/// Parameters for building any tested planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerSettings {
    pub idm: IdmParams,
    pub astar: AStarConfig,
    pub vehicle_length: f64,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            idm: IdmParams::default(),
            astar: AStarConfig::default(),
            vehicle_length: 0.06,
        }
    }
}

impl PlannerSettings {
    pub fn build(&self, kind: PlannerKind) -> Result<Box<dyn Planner>> {
        Ok(match kind {
            PlannerKind::Data => Box::new(DataPlanner),
            PlannerKind::Idm => Box::new(IdmPlanner::new(self.idm, self.vehicle_length)?),
            PlannerKind::Astar => Box::new(AStarPlanner::new(self.astar)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight(n: usize, speed: f64, dt: f64) -> Trajectory {
        Trajectory::new((0..n).map(|i| Point2::new(-0.9 + speed * dt * i as f64, 0.0)).collect(), dt).unwrap()
    }

    fn input<'a>(own: &'a [Point2], opp: &'a [Point2], r: &'a Trajectory, t: usize) -> PlannerInput<'a> {
        PlannerInput {
            own_history: own,
            opponent_history: opp,
            reference: r,
            t,
            dt: r.dt,
            steps: 5,
        }
    }

    #[test]
    fn data_planner_replays_and_holds() {
        let r = straight(12, 0.2, 0.1);
        let own = [r.at(0)];
        let a = data_planner(&input(&own, &[Point2::new(0.0, 0.5)], &r, 0)).unwrap();
        let b = data_planner(&input(&own, &[Point2::new(-0.9, 0.01)], &r, 0)).unwrap();
        assert_eq!(a, b);
        for k in 0..5 {
            assert_eq!(a.positions[k], r.positions[k + 1]);
        }
        let late = data_planner(&input(&own, &own, &r, 9)).unwrap();
        assert_eq!(late.positions[0], r.positions[10]);
        assert_eq!(late.positions[1], r.positions[11]);
        assert!(late.positions[2..].iter().all(|&p| p == r.last()));
        let done = data_planner(&input(&own, &own, &r, 40)).unwrap();
        assert_eq!(done.positions, vec![r.last(); 5]);
    }

    #[test]
    fn rk4_matches_exponential_and_is_fourth_order() {
        let f = |_t: f64, y: &[f64; 1]| [-y[0]];
        let exact = (-1.0f64).exp();
        let at = |dt: f64| (rk4_integrate(f, 0.0, [1.0], dt, (1.0 / dt).round() as usize)[0] - exact).abs();
        assert!(at(0.1) < 1e-6, "{}", at(0.1));
        let dts = [0.2, 0.1, 0.05];
        let xs: Vec<f64> = dts.iter().map(|d: &f64| d.ln()).collect();
        let ys: Vec<f64> = dts.iter().map(|&d| at(d).ln()).collect();
        let mx = xs.iter().sum::<f64>() / 3.0;
        let my = ys.iter().sum::<f64>() / 3.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 4.0).abs() <= 0.3, "slope {slope}");
    }

    #[test]
    fn idm_free_road_equilibrium() {
        let p = IdmParams::default();
        assert_eq!(p.acceleration(p.v0, None), 0.0);
        let far = p.acceleration(0.0, Some((100.0, 0.0)));
        assert!((far - p.accel * (1.0 - (p.s0 / 100.0).powi(2))).abs() < 1e-15);
        let dt = 0.1;
        let r = straight(200, p.v0, dt);
        let own = [r.at(0) - Point2::new(p.v0 * dt, 0.0), r.at(0)];
        let opp = [Point2::new(-0.95, 0.0)];
        let mut planner = IdmPlanner::new(p, 0.06).unwrap();
        let out = planner.plan(&input(&own, &opp, &r, 0)).unwrap();
        for (k, q) in out.positions.iter().enumerate() {
            assert!((q.x - (r.at(0).x + p.v0 * dt * (k + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn idm_stops_behind_stopped_leader() {
        let p = IdmParams::default();
        let dt = 0.1;
        let r = straight(400, 0.25, dt);
        let leader = Point2::new(0.4, 0.0);
        let mut planner = IdmPlanner::new(p, 0.06).unwrap();
        for v_init in [0.0, 0.05, 0.1, 0.2, 0.25] {
            let mut own = vec![r.at(0) - Point2::new(v_init * dt, 0.0), r.at(0)];
            for t in (0..600).step_by(5) {
                let out = planner.plan(&input(&own, &[leader], &r, t)).unwrap();
                own.extend(out.positions);
            }
            let n = own.len();
            let speed = own[n - 1].dist(own[n - 2]) / dt;
            let gap = leader.x - own[n - 1].x - 0.06;
            assert!(speed < 1e-3, "v_init {v_init}: still moving at {speed}");
            assert!(gap >= p.s0 * 0.95, "v_init {v_init}: gap {gap}");
            assert!(own.iter().all(|q| q.x < leader.x - 0.06));
        }
    }

    #[test]
    fn idm_holds_at_zero_gap() {
        let r = straight(50, 0.2, 0.1);
        let own = [r.at(3), r.at(4)];
        let opp = [r.at(4) + Point2::new(0.03, 0.0)];
        let mut planner = IdmPlanner::new(IdmParams::default(), 0.06).unwrap();
        let out = planner.plan(&input(&own, &opp, &r, 4)).unwrap();
        assert_eq!(out.positions, vec![r.at(4); 5]);
    }

    #[test]
    fn idm_ignores_opponent_behind() {
        let r = straight(100, 0.2, 0.1);
        let own = [r.at(10)];
        let behind = [r.at(2)];
        let nobody = [Point2::new(-0.95, 0.9)];
        let mut planner = IdmPlanner::new(IdmParams::default(), 0.06).unwrap();
        let a = planner.plan(&input(&own, &behind, &r, 10)).unwrap();
        let b = planner.plan(&input(&own, &nobody, &r, 10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn astar_free_road_is_full_throttle() {
        let r = straight(100, 0.2, 0.1);
        let own = [r.at(0)];
        let opp = [Point2::new(0.0, 0.9)];
        let cfg = AStarConfig::default();
        let problem = SearchProblem::from_input(&input(&own, &opp, &r, 0)).unwrap();
        let res = astar_search(&problem, &cfg).unwrap();
        let mut v = problem.v0;
        for &a in &res.accels {
            let expect = if v < cfg.max_speed { cfg.max_accel } else { 0.0 };
            assert_eq!(a, expect, "speed {v}");
            v = (v + a * problem.dt).min(cfg.max_speed);
        }
        assert!(!res.collision_risk);
    }

    #[test]
    fn astar_stops_short_of_blocking_opponent() {
        let r = straight(100, 0.2, 0.1);
        let own = [r.at(0) - Point2::new(0.02, 0.0), r.at(0)];
        let block = Point2::new(-0.2, 0.0);
        let opp = [block, block];
        let mut planner = AStarPlanner::new(AStarConfig::default()).unwrap();
        let mut hist = own.to_vec();
        for t in (0..100).step_by(5) {
            let out = planner.plan(&input(&hist, &opp, &r, t)).unwrap();
            assert!(!out.collision_risk);
            hist.extend(out.positions);
        }
        let closest = hist.iter().map(|p| p.dist(block)).fold(f64::INFINITY, f64::min);
        assert!(closest >= 0.06, "closest {closest}");
        assert!(closest >= AStarConfig::default().safe_distance - 1e-9);
        let n = hist.len();
        assert!(hist[n - 1].dist(hist[n - 2]) < 1e-9, "still moving");
    }

    #[test]
    fn astar_is_deterministic() {
        let r = straight(100, 0.2, 0.1);
        let own = [r.at(0)];
        let opp = [Point2::new(-0.3, 0.05), Point2::new(-0.32, 0.05)];
        let mut p = AStarPlanner::new(AStarConfig::default()).unwrap();
        let a = p.plan(&input(&own, &opp, &r, 0)).unwrap();
        let b = p.plan(&input(&own, &opp, &r, 0)).unwrap();
        assert_eq!(a, b);
    }

    /// Independent brute force over every acceleration sequence.
    fn brute_force(problem: &SearchProblem, cfg: &AStarConfig) -> f64 {
        let grid = cfg.accel_grid();
        let n = grid.len();
        let total = n.pow(cfg.horizon as u32);
        let mut best = f64::INFINITY;
        for code in 0..total {
            let (mut arc, mut v, mut cost, mut c) = (problem.arc0, problem.v0.clamp(0.0, cfg.max_speed), 0.0, code);
            for k in 1..=cfg.horizon {
                let a = grid[c % n];
                c /= n;
                let v1 = (v + a * problem.dt).clamp(0.0, cfg.max_speed);
                let arc1 = (arc + 0.5 * (v + v1) * problem.dt).min(problem.path.length());
                let pos = problem.path.point_at(arc1);
                let opp = problem.opponent + problem.opponent_velocity * (k as f64 * problem.dt);
                cost += cfg.max_speed * problem.dt - (arc1 - arc) + cfg.accel_weight * a.abs();
                let d = pos.dist(opp);
                cost += cfg.collision_weight * (1.0 - d / cfg.safe_distance).max(0.0);
                arc = arc1;
                v = v1;
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn astar_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..50 {
            let horizon = rng.random_range(2..=8);
            let levels = rng.random_range(2..=5);
            let cfg = AStarConfig {
                accel_levels: levels,
                horizon,
                arc_bucket: 0.0,
                speed_bucket: 0.0,
                max_expansions: 1_000_000,
                ..AStarConfig::default()
            };
            let r = straight(60, 0.2, 0.1);
            let problem = SearchProblem {
                path: Polyline::new(&r.positions).unwrap(),
                arc0: rng.random_range(0.0..0.5),
                v0: rng.random_range(0.0..0.25),
                dt: 0.1,
                opponent: Point2::new(rng.random_range(-0.8..0.0), rng.random_range(-0.1..0.1)),
                opponent_velocity: Point2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1)),
            };
            let res = astar_search(&problem, &cfg).unwrap();
            let oracle = brute_force(&problem, &cfg);
            assert!((res.cost - oracle).abs() < 1e-12, "case {case}: {} vs {oracle}", res.cost);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn planners_return_s_finite_positions(
            t in 0usize..120,
            ox in -1.0f64..1.0, oy in -1.0f64..1.0,
            dx in -0.05f64..0.05, dy in -0.05f64..0.05,
            off in -0.05f64..0.05,
            kind in 0usize..3,
        ) {
            let r = straight(101, 0.18, 0.1);
            let here = r.at(t.min(100)) + Point2::new(0.0, off);
            let own = [here - Point2::new(0.015, 0.0), here];
            let opp = [Point2::new(ox, oy), Point2::new(ox + dx, oy + dy)];
            let mut p = PlannerSettings::default().build(PlannerKind::ALL[kind]).unwrap();
            let out = p.plan(&input(&own, &opp, &r, t)).unwrap();
            prop_assert!(out.check(5).is_ok());
        }
    }
}
