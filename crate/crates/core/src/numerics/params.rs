use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "sendtime-model";
pub const MODEL_VERSION: u32 = 1;

/// Gradient per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn insert(&mut self, name: String, g: Tensor) {
        self.0.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.values())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Named parameters with Adam state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let zeros = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()]).expect("shape");
        self.moments.insert(
            name.to_string(),
            Moments {
                first: zeros.clone(),
                second: zeros,
            },
        );
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidParameter(format!("missing parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn parameter_count(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Sets every parameter to zero and clears optimizer state.
    pub fn zeroed(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in &self.values {
            out.insert(n, t.map(|_| 0.0));
        }
        out
    }
}

/// Uniform `(-k, k)` initialisation with `k = 1 / sqrt(fan_in)`.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let k = 1.0 / (fan_in.max(1) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-k..k)).collect();
    Tensor::matrix(rows, cols, values).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update. Parameters without a gradient keep
    /// their values and moments. Non-finite gradients leave the store
    /// untouched.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = store.require(name)?;
            if !p.same_shape(g) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let m = store.moments.get_mut(name).expect("moments exist for every parameter");
            let p = store.values.get_mut(name).expect("checked above");
            let (first, second) = (m.first.values_mut(), m.second.values_mut());
            for (i, (&gi, pi)) in g.values().iter().zip(p.values_mut()).enumerate() {
                first[i] = self.beta1 * first[i] + (1.0 - self.beta1) * gi;
                second[i] = self.beta2 * second[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = first[i] / c1;
                let vhat = second[i] / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SerializedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Versioned model file: a kind tag, free-form metadata and parameters.
#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub model_kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    params: Vec<SerializedParam>,
}

impl ModelFile {
    pub fn new(model_kind: &str, meta: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model_kind: model_kind.into(),
            meta,
            params: store
                .iter()
                .map(|(n, t)| SerializedParam {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.insert(&p.name, Tensor::new(p.shape.clone(), p.values.clone())?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&s)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Schema {
                file: path.display().to_string(),
                message: format!("unsupported model file {} v{}", file.format, file.version),
            });
        }
        Ok(file)
    }
}
