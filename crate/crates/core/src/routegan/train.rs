use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionEpisode, Label};
use crate::error::{invalid, Error, Result};
use crate::geometry::Point2;
use crate::nn::{adam_step, AdamConfig, Graph, Tensor};

use super::loss::{discriminator_loss, generator_loss, info_loss, road_penalty, DiscBatch, GenBatch};
use super::model::{GenerationInputs, RouteGanModel, SceneSet, GROUP_AUX, GROUP_DISC, GROUP_GEN};

/// Names of the loss terms logged every step.
pub const METRIC_TERMS: [&str; 7] = ["d_valid", "d_safe", "d_critical", "g_adv", "info", "road", "gq_total"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub d_valid: f64,
    pub d_safe: f64,
    pub d_critical: f64,
    pub g_adv: f64,
    pub info: f64,
    pub road: f64,
    pub gq_total: f64,
    /// Real-vs-generated accuracy of the valid branch on the last update.
    pub d_accuracy: f64,
    /// Fraction of generated keypoints on drivable cells.
    pub on_road_rate: f64,
}

impl MetricsRow {
    pub fn terms(&self) -> [f64; 7] {
        [
            self.d_valid,
            self.d_safe,
            self.d_critical,
            self.g_adv,
            self.info,
            self.road,
            self.gq_total,
        ]
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["step"];
        cols.extend(METRIC_TERMS);
        cols.extend(["d_accuracy", "on_road_rate"]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(self.terms().iter().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.4}", self.d_accuracy));
        cols.push(format!("{:.4}", self.on_road_rate));
        cols.join(",")
    }
}

/// One episode cut to the model's keypoint grid.
#[derive(Debug, Clone)]
struct Sample {
    scene: usize,
    label: Label,
    v1: Vec<f64>,
    v2: Vec<f64>,
    start: Point2,
    goal: Point2,
    observations: Vec<Point2>,
}

/// Training episodes prepared for batching.
#[derive(Debug, Clone)]
pub struct TrainData {
    samples: Vec<Sample>,
    safe: Vec<usize>,
    critical: Vec<usize>,
}

fn flatten(points: &[Point2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

impl TrainData {
    pub fn new(episodes: &[InteractionEpisode], scenes: &SceneSet, stride: usize, keypoints: usize) -> Result<Self> {
        let need = stride * keypoints + 1;
        let mut samples = Vec::with_capacity(episodes.len());
        for (i, ep) in episodes.iter().enumerate() {
            if ep.x1.len() < need {
                return invalid(format!("episode {i} has {} steps, need {need}", ep.x1.len()));
            }
            let pick = |traj: &crate::geometry::Trajectory| -> Vec<Point2> {
                (0..=keypoints).map(|k| traj.positions[k * stride]).collect()
            };
            let k1 = pick(&ep.x1);
            let k2 = pick(&ep.x2);
            samples.push(Sample {
                scene: scenes.index_of(&ep.scene_id)?,
                label: ep.label,
                v1: flatten(&k1),
                v2: flatten(&k2),
                start: k1[0],
                goal: ep.goal,
                observations: k2[..keypoints].to_vec(),
            });
        }
        let safe: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == Label::Safe).collect();
        let critical: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == Label::Critical).collect();
        if safe.is_empty() || critical.is_empty() {
            return invalid(format!(
                "training needs both labels, got {} safe and {} critical episodes",
                safe.len(),
                critical.len()
            ));
        }
        Ok(Self { samples, safe, critical })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn gen_batch(&self, model: &RouteGanModel, rng: &mut ChaCha8Rng) -> GenBatch {
        let c = &model.config;
        let idx: Vec<usize> = (0..c.batch).map(|_| rng.random_range(0..self.samples.len())).collect();
        let picked: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let q = (0..c.batch)
            .map(|_| (0..c.style_dims).map(|_| rng.random_range(-2.0..=2.0)).collect())
            .collect();
        let z = (0..c.batch)
            .map(|_| (0..c.noise_dims).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let angles = (0..c.batch).map(|_| rng.random_range(0.0..TAU)).collect();
        GenBatch {
            inputs: GenerationInputs {
                scene_idx: picked.iter().map(|s| s.scene).collect(),
                start: picked.iter().map(|s| s.start).collect(),
                goal: picked.iter().map(|s| s.goal).collect(),
                q,
                z,
                observations: picked.iter().map(|s| s.observations.clone()).collect(),
            },
            v2_keypoints: picked.iter().map(|s| s.v2.clone()).collect(),
            angles,
        }
    }

    fn pick(&self, pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<&Sample> {
        (0..n).map(|_| &self.samples[pool[rng.random_range(0..pool.len())]]).collect()
    }

    fn disc_batch(&self, model: &RouteGanModel, scenes: &SceneSet, rng: &mut ChaCha8Rng) -> Result<DiscBatch> {
        let b = model.config.batch;
        let fake = self.gen_batch(model, rng);
        let mut g = Graph::new();
        let kp = model.generate_on(&mut g, scenes, &fake.inputs)?;
        let kp: Tensor = g.value(kp).clone();
        let fake_rows: Vec<Vec<f64>> = (0..b).map(|i| kp.row(i).to_vec()).collect();
        let all: Vec<usize> = (0..self.samples.len()).collect();
        let real = self.pick(&all, b, rng);
        let safe = self.pick(&self.safe, b, rng);
        let critical = self.pick(&self.critical, b, rng);
        let pair = |s: &Sample| [s.v1.as_slice(), s.v2.as_slice()].concat();
        let mut angles = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..TAU)).collect() };
        Ok(DiscBatch {
            real_keypoints: real.iter().map(|s| s.v1.clone()).collect(),
            real_scenes: real.iter().map(|s| s.scene).collect(),
            fake_pairs: fake_rows.iter().zip(&fake.v2_keypoints).map(|(a, b)| [a.as_slice(), b].concat()).collect(),
            fake_keypoints: fake_rows,
            fake_scenes: fake.inputs.scene_idx.clone(),
            safe_pairs: safe.iter().map(|s| pair(s)).collect(),
            critical_pairs: critical.iter().map(|s| pair(s)).collect(),
            safe_angles: angles(b),
            critical_angles: angles(b),
            fake_angles: fake.angles,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
}

fn finite_or_abort(step: usize, row: &MetricsRow) -> Result<()> {
    if row.terms().iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let breakdown: Vec<String> = METRIC_TERMS
        .iter()
        .zip(row.terms())
        .map(|(n, v)| format!("{n}={v}"))
        .collect();
    Err(Error::NonFinite(format!("loss at step {step}: {}", breakdown.join(" "))))
}

/// Alternates `d_steps` discriminator updates (generator and auxiliary
/// frozen) with one joint generator/auxiliary update (discriminator
/// frozen) for `config.steps` outer steps. On a non-finite loss the
/// offending update is skipped and an error returned, leaving `model` at
/// the last finite step. `on_step` sees the updated model and every
/// metrics row as it is logged.
pub fn train(
    model: &mut RouteGanModel,
    data: &TrainData,
    scenes: &SceneSet,
    mut on_step: impl FnMut(&RouteGanModel, &MetricsRow),
) -> Result<TrainOutcome> {
    let c = model.config.clone();
    let adam = AdamConfig {
        lr: c.lr,
        beta1: c.beta1,
        beta2: c.beta2,
        eps: 1e-8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    rng.set_stream(0x7a11);
    let mut metrics = Vec::with_capacity(c.steps);
    for step in 0..c.steps {
        let mut row = MetricsRow {
            step,
            d_valid: 0.0,
            d_safe: 0.0,
            d_critical: 0.0,
            g_adv: 0.0,
            info: 0.0,
            road: 0.0,
            gq_total: 0.0,
            d_accuracy: 0.0,
            on_road_rate: 0.0,
        };
        for _ in 0..c.d_steps {
            let batch = data.disc_batch(model, scenes, &mut rng)?;
            let mut g = Graph::new();
            let terms = discriminator_loss(&mut g, model, scenes, &batch)?;
            row.d_valid = g.value(terms.valid).item();
            row.d_safe = g.value(terms.safe).item();
            row.d_critical = g.value(terms.critical).item();
            let real = &g.value(terms.valid_real_logits).data;
            let fake = &g.value(terms.valid_fake_logits).data;
            let correct = real.iter().filter(|&&v| v > 0.0).count() + fake.iter().filter(|&&v| v < 0.0).count();
            row.d_accuracy = correct as f64 / (real.len() + fake.len()) as f64;
            if !g.value(terms.total).item().is_finite() {
                finite_or_abort(step, &row)?;
            }
            let back = g.backward(terms.total)?;
            adam_step(&mut model.params, &back.grads, &adam, &[GROUP_DISC])?;
        }

        let batch = data.gen_batch(model, &mut rng);
        let mut g = Graph::new();
        let kp = model.generate_on(&mut g, scenes, &batch.inputs)?;
        let adv = generator_loss(&mut g, model, scenes, kp, &batch)?;
        let info = info_loss(&mut g, model, scenes, kp, &batch.inputs)?;
        let road = road_penalty(&mut g, scenes, kp, &batch.inputs.scene_idx, c.sigma)?;
        let wi = g.scale(info, c.lambda1);
        let wr = g.scale(road, c.lambda2);
        let partial = g.add(adv.total, wi)?;
        let total = g.add(partial, wr)?;
        row.g_adv = g.value(adv.total).item();
        row.info = g.value(info).item();
        row.road = g.value(road).item();
        row.gq_total = g.value(total).item();
        let kpv = g.value(kp);
        let per_row = kpv.cols() / 2;
        let mut on = 0usize;
        for i in 0..kpv.rows() {
            let r = kpv.row(i);
            for k in 1..per_row {
                on += scenes.on_road(batch.inputs.scene_idx[i], Point2::new(r[2 * k], r[2 * k + 1])) as usize;
            }
        }
        row.on_road_rate = on as f64 / (kpv.rows() * (per_row - 1)) as f64;
        finite_or_abort(step, &row)?;
        let back = g.backward(total)?;
        adam_step(&mut model.params, &back.grads, &adam, &[GROUP_GEN, GROUP_AUX])?;
        on_step(model, &row);
        metrics.push(row);
    }
    Ok(TrainOutcome { metrics })
}
