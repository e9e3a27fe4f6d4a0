use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SceneBank;
use crate::error::{invalid, Result};
use crate::geometry::Point2;
use crate::nn::{sha256_hex, Activation, Checkpoint, Graph, LayerSpec, MaskBank, Network, NetworkSpec, ParameterSet, Tensor, Var};
use crate::scene::Scene;

pub const GROUP_GEN: &str = "gen";
pub const GROUP_DISC: &str = "disc";
pub const GROUP_AUX: &str = "aux";

/// Every hyperparameter of the model and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteGanConfig {
    /// Number of style dimensions `c`.
    pub style_dims: usize,
    pub noise_dims: usize,
    /// Recurrent state width.
    pub hidden_dim: usize,
    pub mlp_width: usize,
    pub mlp_depth: usize,
    pub embed_dim: usize,
    pub conv_channels: Vec<usize>,
    pub scene_px: usize,
    /// Simulation steps between keypoints.
    pub stride: usize,
    /// Keypoints generated per rollout during training.
    pub keypoints: usize,
    pub dt: f64,
    /// Largest displacement between consecutive keypoints.
    pub max_step: f64,
    /// Also feed the observation's offset from V1's current keypoint to `H_2`.
    #[serde(default)]
    pub observe_offset: bool,
    pub bezier_k: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
    pub leaky_slope: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub d_steps: usize,
    pub seed: u64,
}

impl Default for RouteGanConfig {
    fn default() -> Self {
        Self {
            style_dims: 2,
            noise_dims: 4,
            hidden_dim: 64,
            mlp_width: 64,
            mlp_depth: 2,
            embed_dim: 32,
            conv_channels: vec![8, 16, 32],
            scene_px: 64,
            stride: 5,
            keypoints: 20,
            dt: 0.1,
            max_step: 0.2,
            observe_offset: false,
            bezier_k: 0.25,
            alpha: 0.5,
            lambda1: 1.0,
            lambda2: 10.0,
            sigma: 0.05,
            leaky_slope: 0.2,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 32,
            steps: 20_000,
            d_steps: 4,
            seed: 0,
        }
    }
}

impl RouteGanConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("style_dims", self.style_dims),
            ("noise_dims", self.noise_dims),
            ("hidden_dim", self.hidden_dim),
            ("mlp_width", self.mlp_width),
            ("embed_dim", self.embed_dim),
            ("scene_px", self.scene_px),
            ("stride", self.stride),
            ("keypoints", self.keypoints),
            ("batch", self.batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be positive"));
        }
        if self.style_dims < 2 {
            return invalid("at least two style dimensions are required");
        }
        for (name, v) in [("dt", self.dt), ("max_step", self.max_step), ("sigma", self.sigma), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Simulation steps covered by one training rollout.
    pub fn horizon(&self) -> usize {
        self.stride * self.keypoints
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Style vector with every entry in `[-2, 2]`; the first entry is criticality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode(Vec<f64>);

impl StyleCode {
    pub const RANGE: f64 = 2.0;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return invalid("style code needs at least two entries");
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() <= Self::RANGE)) {
            return invalid(format!("style entry {v} outside [-2, 2]"));
        }
        Ok(Self(values))
    }

    /// Criticality `q1` with every other entry zero.
    pub fn criticality(q1: f64, dims: usize) -> Result<Self> {
        let mut v = vec![0.0; dims.max(2)];
        v[0] = q1;
        Self::new(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn q1(&self) -> f64 {
        self.0[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Valid,
    Safe,
    Critical,
}

/// Per-rollout embeddings that stay fixed while the route is generated.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorContext {
    pub scene: Vec<f64>,
    pub goal: Vec<f64>,
    pub init: Vec<f64>,
    pub q: StyleCode,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub h: Vec<f64>,
    /// Time index of the newest keypoint, starting at `-stride`.
    pub t: i64,
    /// V1's newest keypoint.
    pub position: Point2,
}

/// Scene rasters as network inputs plus their off-road masks.
#[derive(Debug, Clone)]
pub struct SceneSet {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub masks: Arc<MaskBank>,
}

fn scene_image(scene: &Scene) -> Tensor {
    Tensor {
        shape: vec![1, scene.height(), scene.width()],
        data: scene.drivable.iter().map(|&v| v as f64).collect(),
    }
}

impl SceneSet {
    pub fn new(bank: &SceneBank) -> Self {
        let scenes = bank.scenes();
        Self {
            ids: scenes.iter().map(|s| s.id().to_string()).collect(),
            images: scenes.iter().map(scene_image).collect(),
            masks: Arc::new(MaskBank {
                frame: scenes[0].frame,
                masks: scenes.iter().map(Scene::offroad_mask).collect(),
            }),
        }
    }

    /// Whether `p` falls on a drivable cell of scene `idx`.
    pub fn on_road(&self, idx: usize, p: Point2) -> bool {
        let frame = self.masks.frame;
        frame
            .cell_of(p)
            .is_some_and(|(col, row)| self.masks.masks[idx][row * frame.width + col] == 0.0)
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        match self.ids.iter().position(|s| s == id) {
            Some(i) => Ok(i),
            None => invalid(format!("unknown scene {id:?}")),
        }
    }
}

/// Batched conditioning for open-loop generation against known V2 motion.
#[derive(Debug, Clone)]
pub struct GenerationInputs {
    pub scene_idx: Vec<usize>,
    pub start: Vec<Point2>,
    pub goal: Vec<Point2>,
    pub q: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// V2's position at times `0, s, ..., (m-1)s` for each rollout.
    pub observations: Vec<Vec<Point2>>,
}

impl GenerationInputs {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

fn points_matrix(g: &mut Graph, pts: &[Point2]) -> Var {
    g.constant_matrix(pts.len(), 2, pts.iter().flat_map(|p| [p.x, p.y]).collect())
}

fn rows_matrix(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
    let cols = rows.first().map_or(0, Vec::len);
    g.constant_matrix(rows.len(), cols, rows.iter().flatten().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Nets {
    scene: Network,
    goal: Network,
    init: Network,
    h_init: Network,
    h_obs: Network,
    update: Network,
    trajectory: Network,
    valid_scene: Network,
    valid: Network,
    safe: Network,
    critical: Network,
    aux_scene: Network,
    aux: Network,
}

/// All eleven networks and their shared parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteGanModel {
    pub config: RouteGanConfig,
    pub params: ParameterSet,
    nets: Nets,
}

impl RouteGanModel {
    pub fn new(config: RouteGanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x1417);
        let mut params = ParameterSet::new();
        let c = &config;
        let leaky = Activation::LeakyRelu(c.leaky_slope);
        let hidden = vec![c.mlp_width; c.mlp_depth];
        let mlp = |input: usize, output: usize, out: Activation| NetworkSpec::mlp(input, &hidden, output, leaky, out);
        let conv = || {
            let mut layers: Vec<LayerSpec> = c
                .conv_channels
                .iter()
                .map(|&ch| LayerSpec::Conv {
                    channels: ch,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    activation: leaky,
                })
                .collect();
            layers.push(LayerSpec::Flatten);
            layers.push(LayerSpec::Dense {
                units: c.embed_dim,
                activation: Activation::Tanh,
            });
            NetworkSpec {
                input: vec![1, c.scene_px, c.scene_px],
                layers,
            }
        };
        let e = c.embed_dim;
        let kp = 2 * (c.keypoints + 1);
        let mut build = |name: &str, group: &str, spec: NetworkSpec| Network::build(&mut params, name, group, &spec, &mut rng);
        let nets = Nets {
            scene: build("scene", GROUP_GEN, conv())?,
            goal: build("goal", GROUP_GEN, mlp(2, e, Activation::Tanh))?,
            init: build("init", GROUP_GEN, mlp(2, e, Activation::Tanh))?,
            h_init: build(
                "h_init",
                GROUP_GEN,
                mlp(3 * e + c.style_dims + c.noise_dims, c.hidden_dim, Activation::Tanh),
            )?,
            h_obs: build("h_obs", GROUP_GEN, mlp(if config.observe_offset { 4 } else { 2 }, e, Activation::Tanh))?,
            update: build("update", GROUP_GEN, mlp(e + c.hidden_dim, c.hidden_dim, Activation::Tanh))?,
            trajectory: build(
                "trajectory",
                GROUP_GEN,
                mlp(c.hidden_dim + c.style_dims + c.noise_dims, 2, Activation::Tanh),
            )?,
            valid_scene: build("valid_scene", GROUP_DISC, conv())?,
            valid: build("valid", GROUP_DISC, mlp(kp + e, 1, Activation::Identity))?,
            safe: build("safe", GROUP_DISC, mlp(2 * kp, 1, Activation::Identity))?,
            critical: build("critical", GROUP_DISC, mlp(2 * kp, 1, Activation::Identity))?,
            aux_scene: build("aux_scene", GROUP_AUX, conv())?,
            aux: build("aux", GROUP_AUX, mlp(kp + e, c.style_dims, Activation::Identity))?,
        };
        Ok(Self { config, params, nets })
    }

    pub fn from_checkpoint(ck: &Checkpoint<RouteGanConfig>) -> Result<Self> {
        let mut model = Self::new(ck.config.clone())?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint<RouteGanConfig>> {
        Checkpoint::new(self.config.clone(), step, self.params.clone())
    }

    /// Hash of every parameter value, for reproducibility checks.
    pub fn param_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (_, p) in self.params.iter() {
            bytes.extend(p.name.as_bytes());
            for v in &p.value.data {
                bytes.extend(v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// Scene embeddings for a batch, encoding each distinct scene once.
    fn embed_scenes(&self, g: &mut Graph, net: &Network, scenes: &SceneSet, idx: &[usize]) -> Result<Var> {
        let mut distinct: Vec<usize> = idx.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut rows = Vec::with_capacity(distinct.len());
        for &s in &distinct {
            let image = scenes
                .images
                .get(s)
                .ok_or_else(|| crate::Error::InvalidArgument(format!("scene index {s} out of range")))?;
            let x = g.constant(image.clone());
            rows.push(net.apply(g, &self.params, x)?);
        }
        let table = g.concat_rows(&rows)?;
        let gather: Vec<usize> = idx.iter().map(|i| distinct.binary_search(i).unwrap()).collect();
        g.gather_rows(table, &gather)
    }

    pub fn embed_scenes_for(&self, g: &mut Graph, branch: Option<Branch>, scenes: &SceneSet, idx: &[usize]) -> Result<Var> {
        let net = match branch {
            None => &self.nets.scene,
            Some(Branch::Valid) => &self.nets.valid_scene,
            Some(_) => return invalid("only the valid branch sees the scene"),
        };
        self.embed_scenes(g, net, scenes, idx)
    }

    /// Initial recurrent state from scene, goal, start, style and noise embeddings.
    pub fn encode_on(&self, g: &mut Graph, scene: Var, goal: Var, start: Var, q: Var, z: Var) -> Result<Var> {
        let zg = self.nets.goal.apply(g, &self.params, goal)?;
        let zi = self.nets.init.apply(g, &self.params, start)?;
        let cat = g.concat_cols(&[scene, zg, zi, q, z])?;
        self.nets.h_init.apply(g, &self.params, cat)
    }

    /// One recurrence: observe V2, update the state, emit V1's next keypoint.
    pub fn step_on(&self, g: &mut Graph, h: Var, position: Var, q: Var, z: Var, observation: Var) -> Result<(Var, Var)> {
        let obs_in = if self.config.observe_offset {
            let offset = g.sub(observation, position)?;
            g.concat_cols(&[observation, offset])?
        } else {
            observation
        };
        let z2 = self.nets.h_obs.apply(g, &self.params, obs_in)?;
        let cat = g.concat_cols(&[z2, h])?;
        let h_next = self.nets.update.apply(g, &self.params, cat)?;
        let head_in = g.concat_cols(&[h_next, q, z])?;
        let raw = self.nets.trajectory.apply(g, &self.params, head_in)?;
        let delta = g.scale(raw, self.config.max_step);
        let moved = g.add(position, delta)?;
        Ok((h_next, g.clamp(moved, -1.0, 1.0)))
    }

    /// Open-loop batched generation; returns `[B, 2(m+1)]` keypoint rows
    /// starting with each rollout's start position.
    pub fn generate_on(&self, g: &mut Graph, scenes: &SceneSet, inputs: &GenerationInputs) -> Result<Var> {
        let b = inputs.len();
        if b == 0 {
            return invalid("empty generation batch");
        }
        let steps = inputs.observations[0].len();
        if inputs.observations.iter().any(|o| o.len() != steps)
            || inputs.q.iter().any(|q| q.len() != self.config.style_dims)
            || inputs.z.iter().any(|z| z.len() != self.config.noise_dims)
        {
            return invalid("inconsistent generation inputs");
        }
        let scene = self.embed_scenes(g, &self.nets.scene, scenes, &inputs.scene_idx)?;
        let goal = points_matrix(g, &inputs.goal);
        let start = points_matrix(g, &inputs.start);
        let q = rows_matrix(g, &inputs.q);
        let z = rows_matrix(g, &inputs.z);
        let mut h = self.encode_on(g, scene, goal, start, q, z)?;
        let mut pos = start;
        let mut cols = vec![start];
        for k in 0..steps {
            let obs: Vec<Point2> = inputs.observations.iter().map(|o| o[k]).collect();
            let obs = points_matrix(g, &obs);
            let (h2, kp) = self.step_on(g, h, pos, q, z, obs)?;
            h = h2;
            pos = kp;
            cols.push(kp);
        }
        g.concat_cols(&cols)
    }

    /// Raw logits of one discriminator branch. `Valid` takes keypoint rows
    /// and scene embeddings; `Safe`/`Critical` take normalized pair rows.
    pub fn discriminate_on(&self, g: &mut Graph, branch: Branch, input: Var, scene: Option<Var>) -> Result<Var> {
        match (branch, scene) {
            (Branch::Valid, Some(s)) => {
                let cat = g.concat_cols(&[input, s])?;
                self.nets.valid.apply(g, &self.params, cat)
            }
            (Branch::Safe, None) => self.nets.safe.apply(g, &self.params, input),
            (Branch::Critical, None) => self.nets.critical.apply(g, &self.params, input),
            (Branch::Valid, None) => invalid("the valid branch needs a scene"),
            _ => invalid("pair branches do not take a scene"),
        }
    }

    /// Style reconstruction from keypoint rows and the scene.
    pub fn reconstruct_on(&self, g: &mut Graph, scenes: &SceneSet, idx: &[usize], keypoints: Var) -> Result<Var> {
        let s = self.embed_scenes(g, &self.nets.aux_scene, scenes, idx)?;
        let cat = g.concat_cols(&[keypoints, s])?;
        self.nets.aux.apply(g, &self.params, cat)
    }

    /// Style reconstruction for one keypoint sequence.
    pub fn reconstruct(&self, scene: &Scene, keypoints: &[Point2]) -> Result<Vec<f64>> {
        if keypoints.len() != self.config.keypoints + 1 {
            return invalid(format!(
                "expected {} keypoints, got {}",
                self.config.keypoints + 1,
                keypoints.len()
            ));
        }
        let mut g = Graph::new();
        let img = g.input(scene_image(scene));
        let s = self.nets.aux_scene.apply(&mut g, &self.params, img)?;
        let kp = g.constant_matrix(1, 2 * keypoints.len(), keypoints.iter().flat_map(|p| [p.x, p.y]).collect());
        let cat = g.concat_cols(&[kp, s])?;
        let out = self.nets.aux.apply(&mut g, &self.params, cat)?;
        Ok(g.value(out).data.clone())
    }

    /// Embeds the rollout context and returns the initial state at `t = -s`.
    pub fn encode_context(
        &self,
        scene: &Scene,
        goal: Point2,
        start: Point2,
        q: &StyleCode,
        z: &[f64],
    ) -> Result<(GeneratorContext, GeneratorState)> {
        if q.values().len() != self.config.style_dims {
            return invalid(format!("style code must have {} entries", self.config.style_dims));
        }
        if z.len() != self.config.noise_dims {
            return invalid(format!("noise must have {} entries", self.config.noise_dims));
        }
        if !goal.is_finite() || !start.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return invalid("context inputs must be finite");
        }
        if scene.width() != self.config.scene_px || scene.height() != self.config.scene_px {
            return invalid("scene raster size does not match the model");
        }
        let mut g = Graph::new();
        let img = g.input(scene_image(scene));
        let zs = self.nets.scene.apply(&mut g, &self.params, img)?;
        let gv = points_matrix(&mut g, &[goal]);
        let sv = points_matrix(&mut g, &[start]);
        let zg = self.nets.goal.apply(&mut g, &self.params, gv)?;
        let zi = self.nets.init.apply(&mut g, &self.params, sv)?;
        let qv = g.constant_matrix(1, q.values().len(), q.values().to_vec());
        let zv = g.constant_matrix(1, z.len(), z.to_vec());
        let cat = g.concat_cols(&[zs, zg, zi, qv, zv])?;
        let h = self.nets.h_init.apply(&mut g, &self.params, cat)?;
        let ctx = GeneratorContext {
            scene: g.value(zs).data.clone(),
            goal: g.value(zg).data.clone(),
            init: g.value(zi).data.clone(),
            q: q.clone(),
            z: z.to_vec(),
        };
        let state = GeneratorState {
            h: g.value(h).data.clone(),
            t: -(self.config.stride as i64),
            position: start,
        };
        Ok((ctx, state))
    }

    /// Consumes V2's newest observed position and produces V1's next keypoint.
    pub fn generator_step(
        &self,
        ctx: &GeneratorContext,
        state: &GeneratorState,
        observation: Point2,
    ) -> Result<(GeneratorState, Point2)> {
        if !observation.is_finite() {
            return invalid("observation must be finite");
        }
        let mut g = Graph::new();
        let h = g.constant_matrix(1, state.h.len(), state.h.clone());
        let pos = points_matrix(&mut g, &[state.position]);
        let q = g.constant_matrix(1, ctx.q.values().len(), ctx.q.values().to_vec());
        let z = g.constant_matrix(1, ctx.z.len(), ctx.z.clone());
        let obs = points_matrix(&mut g, &[observation]);
        let (h2, kp) = self.step_on(&mut g, h, pos, q, z, obs)?;
        let v = &g.value(kp).data;
        let next = Point2::new(v[0], v[1]);
        Ok((
            GeneratorState {
                h: g.value(h2).data.clone(),
                t: state.t + self.config.stride as i64,
                position: next,
            },
            next,
        ))
    }

    /// `steps` keypoints against V2 observations supplied by `observe(t)`,
    /// prefixed by the start position.
    pub fn rollout(
        &self,
        scene: &Scene,
        goal: Point2,
        start: Point2,
        q: &StyleCode,
        z: &[f64],
        steps: usize,
        mut observe: impl FnMut(usize) -> Point2,
    ) -> Result<Vec<Point2>> {
        let (ctx, mut state) = self.encode_context(scene, goal, start, q, z)?;
        let mut out = vec![start];
        for k in 0..steps {
            let (next, kp) = self.generator_step(&ctx, &state, observe(k * self.config.stride))?;
            state = next;
            out.push(kp);
        }
        Ok(out)
    }
}
