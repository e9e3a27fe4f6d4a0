//! Closed-loop two-vehicle rollouts, the criticality sweep evaluation,
//! joint generator-vs-generator interactions and latent grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionEpisode, LabelRule, SceneBank};
use crate::error::{invalid, Error, Result};
use crate::geometry::{Point2, Trajectory};
use crate::planners::{reference_heading, DataPlanner, Planner, PlannerInput, PlannerKind, PlannerSettings, RouteGanPlanner};
use crate::routegan::{RouteGanModel, StyleCode};
use crate::scene::{is_on_road, sample_scenario, Case, ScenarioConfig, ScenarioSpec, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Disc radius of each vehicle; a collision is a centre distance below `2r`.
    pub collision_radius: f64,
    /// Episode length in steps.
    pub t_max: usize,
    pub dt: f64,
    /// Steps executed per planning call.
    pub steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            collision_radius: 0.03,
            t_max: 100,
            dt: 0.1,
            steps: 5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.collision_radius >= 0.0) || !(self.dt > 0.0) || self.steps == 0 {
            return invalid(format!("simulation settings out of range: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub x1: Vec<Point2>,
    pub x2: Vec<Point2>,
    pub collided: bool,
    pub collision_step: Option<usize>,
    pub min_distance: f64,
    /// Steps each vehicle spent off the drivable area.
    pub offroad_v1: usize,
    pub offroad_v2: usize,
}

impl RolloutResult {
    pub fn v1_offroad(&self) -> bool {
        self.offroad_v1 > 0
    }

    pub fn v2_offroad(&self) -> bool {
        self.offroad_v2 > 0
    }

    /// The realized interaction as a labelled episode.
    pub fn to_episode(&self, scene_id: &str, dt: f64, rule: &LabelRule) -> Result<InteractionEpisode> {
        InteractionEpisode::new(
            scene_id,
            Trajectory::new(self.x1.clone(), dt)?,
            Trajectory::new(self.x2.clone(), dt)?,
            rule,
        )
    }
}

/// Runs V1 (adversary slot) and V2 (tested slot) in lock step: every
/// `steps` both plan from the same observations, positions advance one
/// `dt` at a time and a collision ends the episode. Any planner error or
/// contract breach is returned as an error, marking the rollout invalid.
pub fn rollout_pair(
    scene: &Scene,
    spec: &ScenarioSpec,
    v1: &mut dyn Planner,
    v2: &mut dyn Planner,
    cfg: &SimConfig,
) -> Result<RolloutResult> {
    cfg.validate()?;
    let mut out = RolloutResult {
        x1: Vec::new(),
        x2: Vec::new(),
        collided: false,
        collision_step: None,
        min_distance: f64::INFINITY,
        offroad_v1: 0,
        offroad_v2: 0,
    };
    if cfg.t_max == 0 {
        return Ok(out);
    }
    let threshold = 2.0 * cfg.collision_radius;
    let record = |out: &mut RolloutResult, a: Point2, b: Point2| -> bool {
        let t = out.x1.len();
        out.x1.push(a);
        out.x2.push(b);
        out.offroad_v1 += !is_on_road(scene, a) as usize;
        out.offroad_v2 += !is_on_road(scene, b) as usize;
        let d = a.dist(b);
        out.min_distance = out.min_distance.min(d);
        if d < threshold {
            out.collided = true;
            out.collision_step = Some(t);
        }
        out.collided
    };
    if record(&mut out, spec.v1_start, spec.v2_start) {
        return Ok(out);
    }
    let mut t = 0;
    while t < cfg.t_max {
        let plan = |p: &mut dyn Planner, own: &[Point2], opp: &[Point2], reference: &Trajectory| {
            let input = PlannerInput {
                own_history: own,
                opponent_history: opp,
                reference,
                t,
                dt: cfg.dt,
                steps: cfg.steps,
            };
            let o = p.plan(&input)?;
            o.check(cfg.steps).map_err(|e| Error::Internal(format!("{} at t={t}: {e}", p.name())))?;
            Ok::<_, Error>(o.positions)
        };
        let p1 = plan(v1, &out.x1, &out.x2, &spec.v1_reference)?;
        let p2 = plan(v2, &out.x2, &out.x1, &spec.v2_reference)?;
        for (a, b) in p1.into_iter().zip(p2) {
            if t == cfg.t_max {
                break;
            }
            t += 1;
            if record(&mut out, a, b) {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

/// One sampled evaluation episode, shared by every cell of the table.
#[derive(Debug, Clone)]
pub struct EvalEpisode {
    pub scene: usize,
    pub spec: ScenarioSpec,
    pub z: Vec<f64>,
}

/// Episode `index` of a seeded evaluation: scene and case cycle so every
/// scene/case pair is balanced; the RNG stream is per episode.
pub fn sample_episode(bank: &SceneBank, scenario: &ScenarioConfig, noise_dims: usize, seed: u64, index: usize) -> Result<EvalEpisode> {
    let n_scenes = bank.scenes().len();
    if n_scenes == 0 {
        return invalid("no scenes to evaluate on");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let scene = index % n_scenes;
    let case = Case::ALL[(index / n_scenes) % Case::ALL.len()];
    let spec = sample_scenario(&bank.scenes()[scene], case, scenario, &mut rng)?;
    let z = (0..noise_dims).map(|_| rng.sample(StandardNormal)).collect();
    Ok(EvalEpisode { scene, spec, z })
}

/// Style code with `q1` on the first dimension and zeros elsewhere.
pub fn style_with_q1(q1: f64, dims: usize) -> Result<StyleCode> {
    let mut v = vec![0.0; dims];
    if let Some(first) = v.first_mut() {
        *first = q1;
    }
    StyleCode::new(v)
}

/// Generator adversary as V1 against `v2` on one episode.
pub fn adversary_rollout(
    model: &RouteGanModel,
    bank: &SceneBank,
    episode: &EvalEpisode,
    q: &StyleCode,
    v2: &mut dyn Planner,
    cfg: &SimConfig,
) -> Result<RolloutResult> {
    let scene = &bank.scenes()[episode.scene];
    let spec = &episode.spec;
    let mut v1 = RouteGanPlanner::new(
        model,
        scene,
        spec.v2_goal,
        spec.v1_start,
        reference_heading(&spec.v1_reference),
        q,
        &episode.z,
    )?;
    rollout_pair(scene, spec, &mut v1, v2, cfg)
}

/// Per-episode result as the table consumes it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpisodeOutcome {
    Valid { collided: bool, min_distance: f64 },
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub q: f64,
    pub episodes: usize,
    /// Valid episodes (the rate's denominator).
    pub n: usize,
    pub invalid_n: usize,
    pub collisions: usize,
    /// Collisions over valid episodes; `None` when no episode was valid.
    pub rate: Option<f64>,
    pub mean_min_distance: Option<f64>,
}

impl CellResult {
    fn from_outcomes(q: f64, outcomes: &[EpisodeOutcome]) -> Self {
        let mut n = 0;
        let mut collisions = 0;
        let mut dist = 0.0;
        for o in outcomes {
            if let EpisodeOutcome::Valid { collided, min_distance } = *o {
                n += 1;
                collisions += collided as usize;
                dist += min_distance;
            }
        }
        Self {
            q,
            episodes: outcomes.len(),
            n,
            invalid_n: outcomes.len() - n,
            collisions,
            rate: (n > 0).then(|| collisions as f64 / n as f64),
            mean_min_distance: (n > 0).then(|| dist / n as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRow {
    pub planner: String,
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub q_values: Vec<f64>,
    pub n_episodes: usize,
    pub seed: u64,
    pub rows: Vec<PlannerRow>,
}

impl EvaluationReport {
    pub fn row(&self, planner: &str) -> Option<&PlannerRow> {
        self.rows.iter().find(|r| r.planner == planner)
    }

    /// Rows are planners; each q value contributes `rate`, `n` and
    /// `invalid_n` columns. Undefined rates are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("planner");
        for q in &self.q_values {
            s.push_str(&format!(",rate@{q},n@{q},invalid_n@{q}"));
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.planner);
            for c in &row.cells {
                let rate = c.rate.map(|r| format!("{r:.6}")).unwrap_or_default();
                s.push_str(&format!(",{rate},{},{}", c.n, c.invalid_n));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs `episode(row, col, index)` for every cell and episode on `workers`
/// threads and reduces in a fixed order, so the report does not depend on
/// scheduling.
pub fn evaluate_cells<F>(
    rows: &[String],
    q_values: &[f64],
    n_episodes: usize,
    seed: u64,
    workers: usize,
    episode: F,
) -> Result<EvaluationReport>
where
    F: Fn(usize, usize, usize) -> EpisodeOutcome + Sync,
{
    let jobs: Vec<(usize, usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..q_values.len()).flat_map(move |c| (0..n_episodes).map(move |i| (r, c, i))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    let outcomes: Vec<EpisodeOutcome> = pool.install(|| jobs.par_iter().map(|&(r, c, i)| episode(r, c, i)).collect());
    let per_cell = n_episodes;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(r, name)| PlannerRow {
            planner: name.clone(),
            cells: q_values
                .iter()
                .enumerate()
                .map(|(c, &q)| {
                    let start = (r * q_values.len() + c) * per_cell;
                    CellResult::from_outcomes(q, &outcomes[start..start + per_cell])
                })
                .collect(),
        })
        .collect();
    Ok(EvaluationReport {
        q_values: q_values.to_vec(),
        n_episodes,
        seed,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub q_values: Vec<f64>,
    pub n_episodes: usize,
    pub seed: u64,
    pub workers: usize,
    pub scenario: ScenarioConfig,
    pub sim: SimConfig,
    pub planners: PlannerSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            q_values: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            n_episodes: 200,
            seed: 0,
            workers: 1,
            scenario: ScenarioConfig::default(),
            sim: SimConfig::default(),
            planners: PlannerSettings::default(),
        }
    }
}

/// Collision rates of each tested planner against the generator adversary
/// at every q1 value. Episodes (scenario and noise) are shared across cells.
pub fn evaluate_table(
    model: &RouteGanModel,
    bank: &SceneBank,
    tested: &[PlannerKind],
    cfg: &EvalConfig,
) -> Result<EvaluationReport> {
    if tested.is_empty() {
        return invalid("at least one tested planner is required");
    }
    cfg.sim.validate()?;
    let dims = model.config.style_dims;
    let styles = cfg.q_values.iter().map(|&q| style_with_q1(q, dims)).collect::<Result<Vec<_>>>()?;
    let episodes = (0..cfg.n_episodes)
        .map(|i| sample_episode(bank, &cfg.scenario, model.config.noise_dims, cfg.seed, i))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = tested.iter().map(|k| k.label().to_string()).collect();
    evaluate_cells(&names, &cfg.q_values, cfg.n_episodes, cfg.seed, cfg.workers, |r, c, i| {
        let run = || -> Result<RolloutResult> {
            let mut v2 = cfg.planners.build(tested[r])?;
            adversary_rollout(model, bank, &episodes[i], &styles[c], v2.as_mut(), &cfg.sim)
        };
        match run() {
            Ok(res) => EpisodeOutcome::Valid {
                collided: res.collided,
                min_distance: res.min_distance,
            },
            Err(_) => EpisodeOutcome::Invalid,
        }
    })
}

/// Both vehicles driven by the generator with their own styles and noise,
/// each observing the other's latest position.
#[allow(clippy::too_many_arguments)]
pub fn joint_generation(
    model: &RouteGanModel,
    scene: &Scene,
    spec: &ScenarioSpec,
    q1: &StyleCode,
    q2: &StyleCode,
    z1: &[f64],
    z2: &[f64],
    cfg: &SimConfig,
) -> Result<RolloutResult> {
    let v1_goal = spec.v1_goal();
    let mut a = RouteGanPlanner::new(model, scene, spec.v2_goal, spec.v1_start, reference_heading(&spec.v1_reference), q1, z1)?;
    let mut b = RouteGanPlanner::new(model, scene, v1_goal, spec.v2_start, reference_heading(&spec.v2_reference), q2, z2)?;
    rollout_pair(scene, spec, &mut a, &mut b, cfg)
}

/// Scenario with the two vehicles' roles exchanged.
pub fn swap_roles(spec: &ScenarioSpec) -> ScenarioSpec {
    ScenarioSpec {
        case: spec.case,
        kind: spec.kind,
        v1_start: spec.v2_start,
        v2_start: spec.v1_start,
        v1_route: spec.v2_route.clone(),
        v1_start_arc: spec.v2_start_arc,
        v1_reference: spec.v2_reference.clone(),
        v2_route: spec.v1_route.clone(),
        v2_start_arc: spec.v1_start_arc,
        v2_reference: spec.v1_reference.clone(),
        v2_goal: spec.v1_goal(),
        seed: spec.seed,
    }
}

pub const SWEEP_VALUES: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub qi: f64,
    pub qj: f64,
    pub result: RolloutResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub dims: (usize, usize),
    /// Row-major over `qi` then `qj`.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, qi: f64, qj: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.qi == qi && c.qj == qj)
    }
}

/// Rollouts over a 5x5 grid of style dims `i` and `j` against the
/// scenario's replayed V2, with `base` supplying every other dim.
pub fn latent_sweep(
    model: &RouteGanModel,
    scene: &Scene,
    spec: &ScenarioSpec,
    dims: (usize, usize),
    base: &StyleCode,
    z: &[f64],
    cfg: &SimConfig,
) -> Result<SweepGrid> {
    let c = model.config.style_dims;
    if dims.0 >= c || dims.1 >= c || dims.0 == dims.1 {
        return invalid(format!("sweep dims {dims:?} invalid for {c} style dims"));
    }
    let mut cells = Vec::with_capacity(25);
    for &qi in &SWEEP_VALUES {
        for &qj in &SWEEP_VALUES {
            let mut v = base.values().to_vec();
            v[dims.0] = qi;
            v[dims.1] = qj;
            let q = StyleCode::new(v)?;
            let mut a = RouteGanPlanner::new(model, scene, spec.v2_goal, spec.v1_start, reference_heading(&spec.v1_reference), &q, z)?;
            let result = rollout_pair(scene, spec, &mut a, &mut DataPlanner, cfg)?;
            cells.push(SweepCell { qi, qj, result });
        }
    }
    Ok(SweepGrid { dims, cells })
}

/// Ranks with ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` for mismatched, short or constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pairs of (true q1, reconstructed q1) on held-out scenarios with q1
/// drawn uniformly; other style dims are zero.
pub fn style_reconstruction(
    model: &RouteGanModel,
    bank: &SceneBank,
    scenario: &ScenarioConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let m = model.config.keypoints;
    (0..n)
        .map(|i| {
            let ep = sample_episode(bank, scenario, model.config.noise_dims, seed, i)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            rng.set_stream(i as u64);
            let q1 = rng.random_range(-2.0..=2.0);
            let q = style_with_q1(q1, model.config.style_dims)?;
            let scene = &bank.scenes()[ep.scene];
            let v2 = &ep.spec.v2_reference;
            let kp = model.rollout(scene, ep.spec.v2_goal, ep.spec.v1_start, &q, &ep.z, m, |t| v2.at(t))?;
            Ok((q1, model.reconstruct(scene, &kp)?[0]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planners::{PlannerOutput, DataPlanner};
    use crate::routegan::RouteGanConfig;
    use crate::scene::{ScenarioSpec, SceneKind};

    fn line(y: f64, x0: f64, vx: f64, n: usize) -> Trajectory {
        Trajectory::new((0..n).map(|i| Point2::new(x0 + vx * 0.1 * i as f64, y)).collect(), 0.1).unwrap()
    }

    fn spec_from(r1: Trajectory, r2: Trajectory) -> ScenarioSpec {
        ScenarioSpec {
            case: Case::III,
            kind: SceneKind::StraightRoad,
            v1_start: r1.first(),
            v2_start: r2.first(),
            v1_route: r1.positions.clone(),
            v1_start_arc: 0.0,
            v2_route: r2.positions.clone(),
            v2_start_arc: 0.0,
            v2_goal: r2.last(),
            v1_reference: r1,
            v2_reference: r2,
            seed: 0,
        }
    }

    fn small_model() -> RouteGanModel {
        RouteGanModel::new(RouteGanConfig {
            hidden_dim: 16,
            mlp_width: 16,
            embed_dim: 8,
            conv_channels: vec![2, 2, 2],
            ..RouteGanConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn replayed_references_give_geometric_min_distance() {
        let bank = SceneBank::default();
        let r1 = line(0.05, -0.9, 0.15, 101);
        let r2 = line(-0.05, 0.9, -0.12, 101);
        let expect = r1.positions.iter().zip(&r2.positions).map(|(a, b)| a.dist(*b)).fold(f64::INFINITY, f64::min);
        let spec = spec_from(r1, r2);
        let res = rollout_pair(&bank.scenes()[0], &spec, &mut DataPlanner, &mut DataPlanner, &SimConfig::default()).unwrap();
        assert!(!res.collided);
        assert_eq!(res.x1.len(), 101);
        assert!((res.min_distance - expect).abs() < 1e-15);
    }

    #[test]
    fn crossing_at_same_step_collides() {
        let bank = SceneBank::default();
        let r1 = line(0.0, -0.5, 0.2, 101);
        let r2 = line(0.0, 0.5, -0.2, 101);
        let spec = spec_from(r1, r2);
        let res = rollout_pair(&bank.scenes()[0], &spec, &mut DataPlanner, &mut DataPlanner, &SimConfig::default()).unwrap();
        assert!(res.collided);
        let t = res.collision_step.unwrap();
        assert_eq!(res.x1.len(), t + 1);
        assert!(res.x1[t].dist(res.x2[t]) < 0.06);
        assert!(res.x1[t - 1].dist(res.x2[t - 1]) >= 0.06);
    }

    #[test]
    fn zero_horizon_is_empty() {
        let bank = SceneBank::default();
        let spec = spec_from(line(0.0, -0.5, 0.2, 11), line(0.0, -0.5, 0.2, 11));
        let cfg = SimConfig { t_max: 0, ..SimConfig::default() };
        let res = rollout_pair(&bank.scenes()[0], &spec, &mut DataPlanner, &mut DataPlanner, &cfg).unwrap();
        assert!(!res.collided && res.x1.is_empty() && res.x2.is_empty());
    }

    #[test]
    fn collision_is_symmetric_in_vehicles() {
        let bank = SceneBank::default();
        let r1 = line(0.02, -0.5, 0.2, 101);
        let r2 = line(-0.02, 0.5, -0.25, 101);
        let a = rollout_pair(&bank.scenes()[0], &spec_from(r1.clone(), r2.clone()), &mut DataPlanner, &mut DataPlanner, &SimConfig::default()).unwrap();
        let b = rollout_pair(&bank.scenes()[0], &spec_from(r2, r1), &mut DataPlanner, &mut DataPlanner, &SimConfig::default()).unwrap();
        assert_eq!(a.collided, b.collided);
        assert_eq!(a.collision_step, b.collision_step);
        assert_eq!(a.min_distance, b.min_distance);
        assert_eq!(a.x1, b.x2);
    }

    struct Teleport;

    impl Planner for Teleport {
        fn name(&self) -> &str {
            "Teleport"
        }

        fn plan(&mut self, input: &PlannerInput) -> Result<PlannerOutput> {
            let far = input.position() + Point2::new(10.0, 10.0);
            Ok(PlannerOutput::new((1..=input.steps).map(|k| far * k as f64).collect()))
        }
    }

    struct Broken;

    impl Planner for Broken {
        fn name(&self) -> &str {
            "Broken"
        }

        fn plan(&mut self, _: &PlannerInput) -> Result<PlannerOutput> {
            Ok(PlannerOutput::new(vec![Point2::new(0.0, 0.0)]))
        }
    }

    #[test]
    fn unreachable_planner_never_collides_and_broken_planner_is_invalid() {
        let model = small_model();
        let bank = SceneBank::default();
        let cfg = SimConfig::default();
        for i in 0..6 {
            let ep = sample_episode(&bank, &ScenarioConfig::default(), 4, 3, i).unwrap();
            let q = style_with_q1(2.0, 2).unwrap();
            let res = adversary_rollout(&model, &bank, &ep, &q, &mut Teleport, &cfg).unwrap();
            assert!(!res.collided);
            assert!(adversary_rollout(&model, &bank, &ep, &q, &mut Broken, &cfg).is_err());
        }
    }

    #[test]
    fn bernoulli_rates_are_recovered() {
        use rand::Rng;
        let p = [0.05, 0.3, 0.7];
        let n = 4000;
        let report = evaluate_cells(&["mock".into()], &[-1.0, 0.0, 1.0], n, 9, 2, |_, c, i| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            rng.set_stream((c * n + i) as u64);
            if i % 50 == 0 {
                return EpisodeOutcome::Invalid;
            }
            EpisodeOutcome::Valid {
                collided: rng.random_bool(p[c]),
                min_distance: 0.0,
            }
        })
        .unwrap();
        for (c, cell) in report.rows[0].cells.iter().enumerate() {
            let valid = cell.n as f64;
            assert_eq!(cell.invalid_n, n / 50);
            let sigma = (p[c] * (1.0 - p[c]) / valid).sqrt();
            assert!((cell.rate.unwrap() - p[c]).abs() <= 3.0 * sigma, "{cell:?}");
        }
    }

    #[test]
    fn empty_cells_have_no_rate() {
        let report = evaluate_cells(&["x".into()], &[0.0], 0, 0, 1, |_, _, _| EpisodeOutcome::Invalid).unwrap();
        assert_eq!(report.rows[0].cells[0].rate, None);
        assert!(report.to_csv().contains("x,,0,0"));
    }

    #[test]
    fn report_is_worker_independent_and_model_untouched() {
        let model = small_model();
        let before = model.param_hash();
        let bank = SceneBank::default();
        let mut cfg = EvalConfig {
            n_episodes: 6,
            q_values: vec![-2.0, 2.0],
            ..EvalConfig::default()
        };
        let a = evaluate_table(&model, &bank, &PlannerKind::ALL, &cfg).unwrap();
        cfg.workers = 3;
        let b = evaluate_table(&model, &bank, &PlannerKind::ALL, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(model.param_hash(), before);
        assert_eq!(a.rows.len(), 3);
        assert!(a.rows.iter().all(|r| r.cells.iter().all(|c| c.episodes == 6)));
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("planner,rate@-2,n@-2,invalid_n@-2,rate@2,"));
    }

    #[test]
    fn joint_generation_mirrors_under_role_swap() {
        let model = small_model();
        let bank = SceneBank::default();
        let cfg = SimConfig::default();
        for i in 0..3 {
            let ep = sample_episode(&bank, &ScenarioConfig::default(), 4, 11, i).unwrap();
            let scene = &bank.scenes()[ep.scene];
            let q1 = style_with_q1(-1.5, 2).unwrap();
            let q2 = StyleCode::new(vec![1.0, 0.5]).unwrap();
            let z2 = vec![0.3, -0.2, 1.1, 0.0];
            let a = joint_generation(&model, scene, &ep.spec, &q1, &q2, &ep.z, &z2, &cfg).unwrap();
            let b = joint_generation(&model, scene, &swap_roles(&ep.spec), &q2, &q1, &z2, &ep.z, &cfg).unwrap();
            assert_eq!(a.x1.len(), a.x2.len());
            assert_eq!(a.x1.len(), b.x1.len());
            for (p, q) in a.x1.iter().zip(&b.x2).chain(a.x2.iter().zip(&b.x1)) {
                assert!(p.dist(*q) < 1e-3);
            }
            assert_eq!(a.collided, b.collided);
        }
    }

    #[test]
    fn latent_sweep_grid() {
        let model = small_model();
        let bank = SceneBank::default();
        let cfg = SimConfig::default();
        let ep = sample_episode(&bank, &ScenarioConfig::default(), 4, 2, 4).unwrap();
        let scene = &bank.scenes()[ep.scene];
        let base = StyleCode::new(vec![0.0, 0.0]).unwrap();
        let grid = latent_sweep(&model, scene, &ep.spec, (0, 1), &base, &ep.z, &cfg).unwrap();
        assert_eq!(grid.cells.len(), 25);
        let direct = adversary_rollout(&model, &bank, &ep, &base, &mut DataPlanner, &cfg).unwrap();
        assert_eq!(grid.cell(0.0, 0.0).unwrap().result, direct);
        assert!(latent_sweep(&model, scene, &ep.spec, (0, 0), &base, &ep.z, &cfg).is_err());
        assert!(latent_sweep(&model, scene, &ep.spec, (0, 2), &base, &ep.z, &cfg).is_err());
    }

    #[test]
    fn spearman_reference_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // Ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]: Pearson of the ranks is 0.9486832980505138.
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }
}
