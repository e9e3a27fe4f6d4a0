use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    /// Adam first moment.
    pub m: Vec<f64>,
    /// Adam second moment.
    pub v: Vec<f64>,
    pub steps: u64,
}

/// Named trainable tensors plus their optimizer state.
///
/// `version` increments on every optimizer update so gradients computed
/// against older values can be detected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            version: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.numel();
        self.params.push(Parameter {
            name: name.into(),
            group: group.into(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        });
        self.version += 1;
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialised weight.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, group, Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars in the given group (all groups if `None`).
    pub fn count(&self, group: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Copies values and optimizer state from `other`, which must have the
    /// same layout.
    pub fn load_from(&mut self, other: &ParameterSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return invalid("parameter count mismatch");
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape != b.value.shape {
                return invalid(format!("parameter layout mismatch at {}", a.name));
            }
        }
        self.params = other.params.clone();
        self.version += 1;
        Ok(())
    }

    pub(crate) fn bump(&mut self) {
        self.version += 1;
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }
}

/// Gradients keyed by parameter, tagged with the parameter version they were
/// computed against.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) version: u64,
    pub(crate) params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update restricted to parameters whose group is in
/// `groups`. Parameters without a gradient entry are left untouched.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, cfg: &AdamConfig, groups: &[&str]) -> Result<()> {
    if grads.version != params.version() {
        return Err(Error::StaleTape(format!(
            "gradients computed at parameter version {} but parameters are at {}",
            grads.version,
            params.version()
        )));
    }
    for (id, g) in grads.iter() {
        let p = params.get(id);
        if !groups.contains(&p.group.as_str()) {
            continue;
        }
        if g.len() != p.value.numel() {
            return Err(Error::Internal(format!("gradient shape mismatch for {}", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
    }
    for (id, g) in grads.iter() {
        let p = &mut params.params_mut()[id.0];
        if !groups.contains(&p.group.as_str()) {
            continue;
        }
        p.steps += 1;
        let t = p.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..g.len() {
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = p.m[i] / bc1;
            let vhat = p.v[i] / bc2;
            p.value.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    params.bump();
    Ok(())
}
