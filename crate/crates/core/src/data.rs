//! Interaction episodes, safe/critical labeling, pseudo-critical
//! augmentation and the joint normalization used by the pair discriminators.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{extract_keypoints, segment_intersection, KeyWaypoints, Point2, Polyline, Trajectory};
use crate::scene::{is_on_road, sample_scenario, Case, ScenarioConfig, ScenarioSpec, Scene, SceneKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Safe,
    Critical,
}

/// Disc radius per vehicle and the extra margin that still counts as critical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub collision_radius: f64,
    pub critical_margin: f64,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self {
            collision_radius: 0.03,
            critical_margin: 0.02,
        }
    }
}

impl LabelRule {
    pub fn threshold(&self) -> f64 {
        2.0 * self.collision_radius + self.critical_margin
    }
}

/// Minimum distance over aligned timesteps and the first step attaining it.
pub fn min_distance(x1: &[Point2], x2: &[Point2]) -> (f64, usize) {
    x1.iter()
        .zip(x2)
        .enumerate()
        .map(|(t, (a, b))| (a.dist(*b), t))
        .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
}

pub fn label_of(x1: &Trajectory, x2: &Trajectory, rule: &LabelRule) -> Result<Label> {
    if x1.is_empty() || x2.is_empty() {
        return invalid("trajectories must be nonempty");
    }
    let (d, _) = min_distance(&x1.positions, &x2.positions);
    Ok(if d < rule.threshold() { Label::Critical } else { Label::Safe })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEpisode {
    pub scene_id: String,
    pub label: Label,
    pub x1: Trajectory,
    pub x2: Trajectory,
    pub goal: Point2,
}

impl InteractionEpisode {
    /// Builds an episode, labeling it by `rule`.
    pub fn new(scene_id: impl Into<String>, x1: Trajectory, x2: Trajectory, rule: &LabelRule) -> Result<Self> {
        if x1.len() != x2.len() {
            return invalid(format!("trajectory lengths differ: {} vs {}", x1.len(), x2.len()));
        }
        if x1.dt != x2.dt {
            return invalid("trajectory timesteps differ");
        }
        let label = label_of(&x1, &x2, rule)?;
        let goal = x2.last();
        Ok(Self {
            scene_id: scene_id.into(),
            label,
            x1,
            x2,
            goal,
        })
    }

    pub fn min_distance(&self) -> f64 {
        min_distance(&self.x1.positions, &self.x2.positions).0
    }

    pub fn horizon(&self) -> usize {
        self.x1.len() - 1
    }

    fn with_x1(&self, positions: Vec<Point2>, rule: &LabelRule) -> Result<Self> {
        Self::new(self.scene_id.clone(), Trajectory::new(positions, self.x1.dt)?, self.x2.clone(), rule)
    }
}

/// Label rule applied by [`label_episode`].
pub fn label_episode(ep: &InteractionEpisode, rule: &LabelRule) -> Result<Label> {
    label_of(&ep.x1, &ep.x2, rule)
}

/// Position along a sampled trajectory at fractional time `tau`.
fn sample_at(positions: &[Point2], tau: f64) -> Point2 {
    let last = positions.len() - 1;
    if tau <= 0.0 {
        return positions[0];
    }
    if tau >= last as f64 {
        return positions[last];
    }
    let i = tau.floor() as usize;
    positions[i].lerp(positions[i + 1], tau - i as f64)
}

/// First spatial crossing of the two sampled paths, walking along V2, as
/// fractional times `(t1, t2)`.
fn first_crossing(x1: &[Point2], x2: &[Point2]) -> Option<(f64, f64)> {
    for i in 0..x2.len().saturating_sub(1) {
        if x2[i] == x2[i + 1] {
            continue;
        }
        for j in 0..x1.len().saturating_sub(1) {
            if x1[j] == x1[j + 1] {
                continue;
            }
            if let Some((tb, ta)) = segment_intersection(x2[i], x2[i + 1], x1[j], x1[j + 1]) {
                return Some((j as f64 + ta, i as f64 + tb));
            }
        }
    }
    None
}

/// Re-times V1 along its unchanged path so it reaches the first spatial
/// crossing with V2 at the step V2 does.
pub fn temporal_realignment(ep: &InteractionEpisode, rule: &LabelRule) -> Result<InteractionEpisode> {
    let x1 = &ep.x1.positions;
    let (t1, t2) = first_crossing(x1, &ep.x2.positions)
        .ok_or_else(|| Error::NotApplicable("paths never cross spatially".into()))?;
    let horizon = ep.horizon() as f64;
    let meet = t2.round().clamp(1.0, horizon - 1.0);
    // Piecewise-linear clock: tau(0) = 0, tau(meet) = t1, tau(T) = T.
    let before = t1 / meet;
    let after = (horizon - t1) / (horizon - meet);
    if !(0.25..=4.0).contains(&before) || !(0.0..=4.0).contains(&after) {
        return Err(Error::NotApplicable(format!(
            "re-timing would scale V1's speed by {before:.2} / {after:.2}"
        )));
    }
    let positions = (0..x1.len())
        .map(|t| {
            let t = t as f64;
            let tau = if t <= meet { t * before } else { t1 + (t - meet) * after };
            sample_at(x1, tau)
        })
        .collect();
    let out = ep.with_x1(positions, rule)?;
    if out.label != Label::Critical {
        return Err(Error::NotApplicable("re-timed episode is still safe".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    /// Half-width of the raised-cosine bump in arc length.
    pub half_width: f64,
    /// Largest displacement the bump may apply.
    pub max_deform: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            half_width: 0.4,
            max_deform: 0.35,
        }
    }
}

/// Cumulative arc length of a sampled path.
fn arc_lengths(points: &[Point2]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(points.len());
    out.push(0.0);
    for w in points.windows(2) {
        acc += w[0].dist(w[1]);
        out.push(acc);
    }
    out
}

/// Adds a raised-cosine bump of height `amplitude` along `direction`,
/// centred on V1's arc length at step `at`. Both endpoints stay fixed.
pub fn deform_toward(
    ep: &InteractionEpisode,
    at: usize,
    direction: Point2,
    amplitude: f64,
    half_width: f64,
    rule: &LabelRule,
) -> Result<InteractionEpisode> {
    if amplitude == 0.0 {
        return Ok(ep.clone());
    }
    let x1 = &ep.x1.positions;
    let arcs = arc_lengths(x1);
    let total = *arcs.last().unwrap();
    let centre = arcs[at.min(x1.len() - 1)];
    let hw = half_width.min(centre).min(total - centre);
    if hw <= 1e-6 {
        return Err(Error::NotApplicable("bump centre too close to a path end".into()));
    }
    let positions = x1
        .iter()
        .zip(&arcs)
        .map(|(&p, &a)| {
            let d = a - centre;
            if d.abs() >= hw {
                p
            } else {
                let w = 0.5 * (1.0 + (std::f64::consts::PI * d / hw).cos());
                p + direction * (amplitude * w)
            }
        })
        .collect();
    ep.with_x1(positions, rule)
}

/// Bends V1's path toward V2 at their closest aligned approach so the two
/// meet there.
pub fn local_deformation<R: Rng>(
    ep: &InteractionEpisode,
    cfg: &DeformConfig,
    rule: &LabelRule,
    rng: &mut R,
) -> Result<InteractionEpisode> {
    let x1 = &ep.x1.positions;
    let x2 = &ep.x2.positions;
    let arcs = arc_lengths(x1);
    let total = *arcs.last().unwrap();
    let half_width = cfg.half_width * rng.random_range(0.8..1.2);
    // Closest approach among steps whose bump fits inside the path.
    let candidate = (0..x1.len())
        .filter(|&t| arcs[t] > 0.05 && total - arcs[t] > 0.05)
        .map(|t| (x1[t].dist(x2[t]), t))
        .fold(None, |best: Option<(f64, usize)>, cur| match best {
            Some(b) if b.0 <= cur.0 => Some(b),
            _ => Some(cur),
        });
    let (gap, at) = candidate.ok_or_else(|| Error::NotApplicable("V1 barely moves".into()))?;
    if gap > cfg.max_deform {
        return Err(Error::NotApplicable(format!(
            "closest approach {gap:.3} exceeds the deformation limit {:.3}",
            cfg.max_deform
        )));
    }
    if gap == 0.0 {
        return ep.with_x1(x1.clone(), rule);
    }
    let direction = (x2[at] - x1[at]) * (1.0 / gap);
    let out = deform_toward(ep, at, direction, gap, half_width, rule)?;
    if out.label != Label::Critical {
        return Err(Error::NotApplicable("deformed episode is still safe".into()));
    }
    Ok(out)
}

/// Key waypoints of both vehicles at a shared stride.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointPair {
    pub k1: KeyWaypoints,
    pub k2: KeyWaypoints,
}

impl KeypointPair {
    pub fn new(k1: KeyWaypoints, k2: KeyWaypoints) -> Result<Self> {
        if k1.stride != k2.stride || k1.points.len() != k2.points.len() {
            return invalid("keypoint pair must share stride and count");
        }
        Ok(Self { k1, k2 })
    }

    pub fn from_episode(ep: &InteractionEpisode, stride: usize) -> Result<Self> {
        Self::new(extract_keypoints(&ep.x1, stride)?, extract_keypoints(&ep.x2, stride)?)
    }
}

/// Subtracts the joint mean of both sequences and rotates both by `theta`.
pub fn gamma_augment(pair: &KeypointPair, theta: f64) -> KeypointPair {
    let n = (pair.k1.points.len() + pair.k2.points.len()) as f64;
    let sum = pair
        .k1
        .points
        .iter()
        .chain(&pair.k2.points)
        .fold(Point2::default(), |acc, &p| acc + p);
    let mean = sum * (1.0 / n);
    let map = |k: &KeyWaypoints| KeyWaypoints {
        points: k.points.iter().map(|&p| (p - mean).rotate(theta)).collect(),
        stride: k.stride,
    };
    KeypointPair {
        k1: map(&pair.k1),
        k2: map(&pair.k2),
    }
}

/// One default-parameter scene per kind, addressed by id.
#[derive(Debug, Clone)]
pub struct SceneBank {
    scenes: Vec<Scene>,
}

impl Default for SceneBank {
    fn default() -> Self {
        Self {
            scenes: SceneKind::ALL.iter().map(|&k| Scene::default_for(k)).collect(),
        }
    }
}

impl SceneBank {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        if scenes.is_empty() {
            return invalid("scene bank needs at least one scene");
        }
        Ok(Self { scenes })
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn get(&self, id: &str) -> Result<&Scene> {
        self.scenes
            .iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene {id:?}")))
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.scenes
            .iter()
            .position(|s| s.id() == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene {id:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenario: ScenarioConfig,
    pub rule: LabelRule,
    /// Smallest distance a safe episode keeps, well above the critical threshold.
    pub safe_clearance: f64,
    pub deform: DeformConfig,
    pub stride: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            rule: LabelRule::default(),
            safe_clearance: 0.12,
            deform: DeformConfig::default(),
            stride: 5,
        }
    }
}

fn along(path: &Polyline, arcs: &[f64], dt: f64) -> Result<Trajectory> {
    Trajectory::new(arcs.iter().map(|&s| path.point_at(s)).collect(), dt)
}

/// V1's natural arc-length schedule from the scenario's reference.
fn natural_arcs(spec: &ScenarioSpec, path: &Polyline) -> Vec<f64> {
    let mut prev = spec.v1_start_arc;
    spec.v1_reference
        .positions
        .iter()
        .map(|&p| {
            // Project near the previous arc so self-approaching routes stay unambiguous.
            let s = path.project(p).0.max(prev);
            prev = s;
            s
        })
        .collect()
}

/// V1 keeps its lane and adapts its timing so it never comes close to V2.
pub fn safe_motion(scene: &Scene, spec: &ScenarioSpec, cfg: &DatasetConfig) -> Result<Trajectory> {
    let path = spec.v1_path();
    let nat = natural_arcs(spec, &path);
    let x2 = &spec.v2_reference.positions;
    let keep = 0.25;
    let arcs: Vec<f64> = match spec.case {
        Case::I | Case::II => {
            let mut prev = spec.v2_start_arc;
            let s2: Vec<f64> = x2
                .iter()
                .map(|&p| {
                    prev = path.project(p).0.max(prev);
                    prev
                })
                .collect();
            let gap0 = (spec.v1_start_arc - spec.v2_start_arc).abs().min(keep);
            let mut last = spec.v1_start_arc;
            nat.iter()
                .zip(&s2)
                .map(|(&n, &v2)| {
                    let s = if spec.case == Case::I {
                        n.min(v2 - gap0)
                    } else {
                        n.max(v2 + gap0).min(path.length())
                    };
                    last = s.max(last);
                    last
                })
                .collect()
        }
        Case::III => {
            // Yield: do not advance into a spot V2 occupies within the next two seconds.
            let look = 20;
            let mut s = spec.v1_start_arc;
            let mut out = vec![s];
            for t in 0..nat.len() - 1 {
                let step = nat[t + 1] - nat[t];
                let cand = path.point_at(s + step);
                let blocked = (t + 1..(t + 1 + look).min(x2.len())).any(|k| cand.dist(x2[k]) < keep);
                if !blocked {
                    s += step;
                }
                out.push(s);
            }
            out
        }
    };
    let traj = along(&path, &arcs, cfg.scenario.dt)?;
    let (d, _) = min_distance(&traj.positions, x2);
    if d < cfg.safe_clearance {
        return Err(Error::NotApplicable(format!("safe motion comes within {d:.3}")));
    }
    if traj.positions.iter().any(|&p| !is_on_road(scene, p)) {
        return Err(Error::NotApplicable("safe motion leaves the road".into()));
    }
    Ok(traj)
}

/// V1 drives along its lane to meet V2 at a step where V2 is on V1's path.
pub fn direct_conflict<R: Rng>(spec: &ScenarioSpec, cfg: &DatasetConfig, rng: &mut R) -> Result<Trajectory> {
    let path = spec.v1_path();
    let x2 = &spec.v2_reference.positions;
    let dt = cfg.scenario.dt;
    let horizon = x2.len() - 1;
    let candidates: Vec<(usize, f64)> = (horizon / 4..horizon)
        .filter_map(|t| {
            let (s, d) = path.project(x2[t]);
            (d < 0.02 && s > spec.v1_start_arc + 0.02).then_some((t, s))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NotApplicable("V2 never enters V1's lane ahead of it".into()));
    }
    let (meet, target) = candidates[rng.random_range(0..candidates.len())];
    let speed = (target - spec.v1_start_arc) / (meet as f64 * dt);
    if !(0.03..=0.4).contains(&speed) {
        return Err(Error::NotApplicable(format!("meeting needs speed {speed:.3}")));
    }
    let same_route = spec.v1_route == spec.v2_route;
    let mut arcs = Vec::with_capacity(horizon + 1);
    let mut s = spec.v1_start_arc;
    for t in 0..=horizon {
        if t <= meet {
            s = spec.v1_start_arc + speed * t as f64 * dt;
        } else if same_route {
            // Stay locked onto V2 after contact.
            s = path.project(x2[t]).0.max(s);
        } else {
            s += speed * dt;
        }
        arcs.push(s);
    }
    along(&path, &arcs, dt)
}

fn episode_rng(seed: u64, label: Label, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label == Label::Critical) as u64) << 32 | index as u64);
    rng
}

fn scene_and_case(bank: &SceneBank, index: usize) -> (&Scene, Case) {
    let scenes = bank.scenes();
    let scene = &scenes[index % scenes.len()];
    let case = Case::ALL[(index / scenes.len()) % Case::ALL.len()];
    (scene, case)
}

/// Generates one safe episode for the given scene and case.
pub fn make_safe<R: Rng>(scene: &Scene, case: Case, cfg: &DatasetConfig, rng: &mut R) -> Result<InteractionEpisode> {
    for _ in 0..200 {
        let spec = sample_scenario(scene, case, &cfg.scenario, rng)?;
        if let Ok(x1) = safe_motion(scene, &spec, cfg) {
            let ep = InteractionEpisode::new(scene.id(), x1, spec.v2_reference.clone(), &cfg.rule)?;
            if ep.label == Label::Safe {
                return Ok(ep);
            }
        }
    }
    Err(Error::Internal(format!("no safe {case:?} episode on {} after 200 scenarios", scene.id())))
}

/// Generates one critical episode, choosing among direct conflicts,
/// re-timing and path deformation.
pub fn make_critical<R: Rng>(
    scene: &Scene,
    case: Case,
    cfg: &DatasetConfig,
    rng: &mut R,
) -> Result<InteractionEpisode> {
    for _ in 0..200 {
        let spec = sample_scenario(scene, case, &cfg.scenario, rng)?;
        let base = || -> Result<InteractionEpisode> {
            let x1 = safe_motion(scene, &spec, cfg).or_else(|_| Trajectory::new(spec.v1_reference.positions.clone(), cfg.scenario.dt))?;
            InteractionEpisode::new(scene.id(), x1, spec.v2_reference.clone(), &cfg.rule)
        };
        let roll: f64 = rng.random();
        let attempt = if roll < 0.5 {
            direct_conflict(&spec, cfg, rng)
                .and_then(|x1| InteractionEpisode::new(scene.id(), x1, spec.v2_reference.clone(), &cfg.rule))
        } else if roll < 0.75 {
            base().and_then(|ep| temporal_realignment(&ep, &cfg.rule))
        } else {
            base().and_then(|ep| local_deformation(&ep, &cfg.deform, &cfg.rule, rng))
        };
        if let Ok(ep) = attempt {
            if ep.label == Label::Critical && ep.x1.positions.iter().all(|&p| is_on_road(scene, p)) {
                return Ok(ep);
            }
        }
    }
    Err(Error::Internal(format!(
        "no critical {case:?} episode on {} after 200 scenarios",
        scene.id()
    )))
}

/// Balanced safe and critical episodes over all scenes and cases. Episode
/// `i` of each label uses its own RNG stream, so results do not depend on
/// thread count.
pub fn build_dataset(
    bank: &SceneBank,
    cfg: &DatasetConfig,
    n_safe: usize,
    n_critical: usize,
    seed: u64,
) -> Result<Vec<InteractionEpisode>> {
    if n_safe + n_critical == 0 {
        return invalid("dataset needs at least one episode");
    }
    let jobs: Vec<(Label, usize)> = (0..n_safe)
        .map(|i| (Label::Safe, i))
        .chain((0..n_critical).map(|i| (Label::Critical, i)))
        .collect();
    jobs.par_iter()
        .map(|&(label, i)| {
            let mut rng = episode_rng(seed, label, i);
            let (scene, case) = scene_and_case(bank, i);
            match label {
                Label::Safe => make_safe(scene, case, cfg, &mut rng),
                Label::Critical => make_critical(scene, case, cfg, &mut rng),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeRecord {
    scene_id: String,
    label: Label,
    dt: f64,
    x1: Vec<Point2>,
    x2: Vec<Point2>,
    goal: Point2,
}

impl From<&InteractionEpisode> for EpisodeRecord {
    fn from(ep: &InteractionEpisode) -> Self {
        Self {
            scene_id: ep.scene_id.clone(),
            label: ep.label,
            dt: ep.x1.dt,
            x1: ep.x1.positions.clone(),
            x2: ep.x2.positions.clone(),
            goal: ep.goal,
        }
    }
}

pub fn episode_to_json(ep: &InteractionEpisode) -> Result<String> {
    Ok(serde_json::to_string(&EpisodeRecord::from(ep))?)
}

/// Parses one JSONL record, checking the stored label against `rule`.
pub fn episode_from_json(line: &str, rule: &LabelRule) -> Result<InteractionEpisode> {
    let rec: EpisodeRecord = serde_json::from_str(line)?;
    let ep = InteractionEpisode::new(
        rec.scene_id,
        Trajectory::new(rec.x1, rec.dt)?,
        Trajectory::new(rec.x2, rec.dt)?,
        rule,
    )?;
    if ep.label != rec.label {
        return Err(Error::Format(format!("stored label {:?} disagrees with the labeling rule", rec.label)));
    }
    if ep.goal != rec.goal {
        return Err(Error::Format("goal is not V2's final position".into()));
    }
    Ok(ep)
}

pub fn write_jsonl(path: &Path, episodes: &[InteractionEpisode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        writeln!(out, "{}", episode_to_json(ep)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path, rule: &LabelRule) -> Result<Vec<InteractionEpisode>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            episode_from_json(&line, rule).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub pgm: String,
    pub meta: String,
}

/// Dataset-level description written next to the episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub episodes: String,
    pub scenes: Vec<SceneEntry>,
    pub counts: BTreeMap<Label, usize>,
    pub seed: u64,
    pub stride: usize,
    pub dt: f64,
    pub collision_radius: f64,
    pub critical_margin: f64,
    pub config: DatasetConfig,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn label_counts(episodes: &[InteractionEpisode]) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::from([(Label::Safe, 0), (Label::Critical, 0)]);
    for ep in episodes {
        *counts.entry(ep.label).or_default() += 1;
    }
    counts
}
