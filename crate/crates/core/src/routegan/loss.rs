use crate::error::{invalid, Result};
use crate::nn::{Graph, Var};

use super::model::{Branch, GenerationInputs, RouteGanModel, SceneSet};

/// Real and generated samples for one discriminator update. Rows are
/// flattened `(x, y)` keypoints; pair rows hold V1's sequence then V2's.
#[derive(Debug, Clone)]
pub struct DiscBatch {
    pub real_keypoints: Vec<Vec<f64>>,
    pub real_scenes: Vec<usize>,
    pub fake_keypoints: Vec<Vec<f64>>,
    pub fake_scenes: Vec<usize>,
    pub safe_pairs: Vec<Vec<f64>>,
    pub critical_pairs: Vec<Vec<f64>>,
    pub fake_pairs: Vec<Vec<f64>>,
    /// Rotation for each pair in `safe_pairs`, `critical_pairs`, `fake_pairs`.
    pub safe_angles: Vec<f64>,
    pub critical_angles: Vec<f64>,
    pub fake_angles: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscTerms {
    pub valid: Var,
    pub safe: Var,
    pub critical: Var,
    pub total: Var,
    /// Per-sample logits of the valid branch on real and generated inputs.
    pub valid_real_logits: Var,
    pub valid_fake_logits: Var,
}

/// Conditioning for generated rollouts plus V2's keypoints for pairing.
#[derive(Debug, Clone)]
pub struct GenBatch {
    pub inputs: GenerationInputs,
    pub v2_keypoints: Vec<Vec<f64>>,
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct GenTerms {
    pub valid: Var,
    pub safe: Option<Var>,
    pub critical: Option<Var>,
    pub total: Var,
    /// Rollouts with `q1 = 0`, which feed neither pair term.
    pub unrouted: usize,
}

fn matrix(g: &mut Graph, rows: &[Vec<f64>], what: &str) -> Result<Var> {
    let Some(first) = rows.first() else {
        return invalid(format!("{what} is empty"));
    };
    let cols = first.len();
    if rows.iter().any(|r| r.len() != cols) {
        return invalid(format!("{what} rows differ in length"));
    }
    Ok(g.constant_matrix(rows.len(), cols, rows.iter().flatten().copied().collect()))
}

/// `-mean(log sigmoid(sign * logits))`.
fn nll(g: &mut Graph, logits: Var, positive: bool) -> Var {
    let x = if positive { logits } else { g.scale(logits, -1.0) };
    let ls = g.log_sigmoid(x);
    let m = g.mean(ls);
    g.scale(m, -1.0)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Negated log-likelihood of the three discriminator branches: real
/// samples are positives; generated samples are negatives everywhere, and
/// each pair branch also treats the other label's real pairs as negatives.
pub fn discriminator_loss(g: &mut Graph, model: &RouteGanModel, scenes: &SceneSet, batch: &DiscBatch) -> Result<DiscTerms> {
    let real_kp = matrix(g, &batch.real_keypoints, "real keypoints")?;
    let fake_kp = matrix(g, &batch.fake_keypoints, "generated keypoints")?;
    let nr = batch.real_scenes.len();
    let all: Vec<usize> = batch.real_scenes.iter().chain(&batch.fake_scenes).copied().collect();
    let both = model.embed_scenes_for(g, Some(Branch::Valid), scenes, &all)?;
    let real_scene = g.gather_rows(both, &(0..nr).collect::<Vec<_>>())?;
    let fake_scene = g.gather_rows(both, &(nr..all.len()).collect::<Vec<_>>())?;
    let real_logits = model.discriminate_on(g, Branch::Valid, real_kp, Some(real_scene))?;
    let fake_logits = model.discriminate_on(g, Branch::Valid, fake_kp, Some(fake_scene))?;
    let a = nll(g, real_logits, true);
    let b = nll(g, fake_logits, false);
    let valid = g.add(a, b)?;

    let safe_raw = matrix(g, &batch.safe_pairs, "safe pairs")?;
    let crit_raw = matrix(g, &batch.critical_pairs, "critical pairs")?;
    let fake_raw = matrix(g, &batch.fake_pairs, "generated pairs")?;
    let safe_pairs = g.center_rotate(safe_raw, &batch.safe_angles)?;
    let crit_pairs = g.center_rotate(crit_raw, &batch.critical_angles)?;
    let fake_pairs = g.center_rotate(fake_raw, &batch.fake_angles)?;

    let branch_loss = |g: &mut Graph, branch: Branch, pos: Var, neg: Var| -> Result<Var> {
        let lp = model.discriminate_on(g, branch, pos, None)?;
        let lf = model.discriminate_on(g, branch, fake_pairs, None)?;
        let ln = model.discriminate_on(g, branch, neg, None)?;
        let terms = [nll(g, lp, true), nll(g, lf, false), nll(g, ln, false)];
        sum_vars(g, &terms)
    };
    let safe = branch_loss(g, Branch::Safe, safe_pairs, crit_pairs)?;
    let critical = branch_loss(g, Branch::Critical, crit_pairs, safe_pairs)?;
    let total = sum_vars(g, &[valid, safe, critical])?;
    Ok(DiscTerms {
        valid,
        safe,
        critical,
        total,
        valid_real_logits: real_logits,
        valid_fake_logits: fake_logits,
    })
}

/// Non-saturating generator objective on generated keypoint rows `kp`:
/// `alpha * valid + safe(q1 < 0) + critical(q1 > 0)`.
pub fn generator_loss(g: &mut Graph, model: &RouteGanModel, scenes: &SceneSet, kp: Var, batch: &GenBatch) -> Result<GenTerms> {
    let b = batch.inputs.len();
    if batch.v2_keypoints.len() != b || batch.angles.len() != b {
        return invalid("generator batch sizes disagree");
    }
    // The discriminator is frozen during generator updates.
    let scene = model.embed_scenes_for(g, Some(Branch::Valid), scenes, &batch.inputs.scene_idx)?;
    let scene = g.detach(scene);
    let logits = model.discriminate_on(g, Branch::Valid, kp, Some(scene))?;
    let valid = nll(g, logits, true);
    let v2 = matrix(g, &batch.v2_keypoints, "V2 keypoints")?;
    let pairs_raw = g.concat_cols(&[kp, v2])?;
    let pairs = g.center_rotate(pairs_raw, &batch.angles)?;

    let q1: Vec<f64> = batch.inputs.q.iter().map(|q| q[0]).collect();
    let neg: Vec<usize> = (0..b).filter(|&i| q1[i] < 0.0).collect();
    let pos: Vec<usize> = (0..b).filter(|&i| q1[i] > 0.0).collect();
    let routed = |g: &mut Graph, idx: &[usize], branch: Branch| -> Result<Option<Var>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let rows = g.gather_rows(pairs, idx)?;
        let l = model.discriminate_on(g, branch, rows, None)?;
        Ok(Some(nll(g, l, true)))
    };
    let safe = routed(g, &neg, Branch::Safe)?;
    let critical = routed(g, &pos, Branch::Critical)?;
    let mut total = g.scale(valid, model.config.alpha);
    for t in [safe, critical].into_iter().flatten() {
        total = g.add(total, t)?;
    }
    Ok(GenTerms {
        valid,
        safe,
        critical,
        total,
        unrouted: b - neg.len() - pos.len(),
    })
}

/// `0.5 * mean_i |q_i - Q(kp_i, scene_i)|^2`.
pub fn info_loss(g: &mut Graph, model: &RouteGanModel, scenes: &SceneSet, kp: Var, inputs: &GenerationInputs) -> Result<Var> {
    let recon = model.reconstruct_on(g, scenes, &inputs.scene_idx, kp)?;
    let q = matrix(g, &inputs.q, "style codes")?;
    let d = g.sub(q, recon)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5 / inputs.len() as f64))
}

/// Batch mean of the road loss over generated keypoints (the start
/// position is excluded).
pub fn road_penalty(g: &mut Graph, scenes: &SceneSet, kp: Var, scene_idx: &[usize], sigma: f64) -> Result<Var> {
    let cols = g.shape(kp)[1];
    if cols < 4 {
        return invalid("road penalty needs at least one generated keypoint");
    }
    let generated = g.slice_cols(kp, 2, cols - 2)?;
    let per_row = g.mask_penalty(generated, scenes.masks.clone(), scene_idx, sigma)?;
    Ok(g.mean(per_row))
}
