use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container, Container};
use super::tape::BnUpdate;
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named trainable parameters plus their Adam moments, and non-trainable
/// buffers (batch-norm running statistics).
///
/// Names are hierarchical (`encoder.level0.raise.l0.w`) and unique. Iteration
/// follows registration order, which keeps serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    buffers: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    /// Mutable access to the values. Shapes stay fixed because only the data
    /// slice is exposed.
    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn step(&self, id: ParamId) -> u64 {
        self.params[id.0].step
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Folds batch statistics into the running buffers `<name>.running_mean`
    /// and `<name>.running_var`: `running = (1 - momentum) * running +
    /// momentum * observed`. Several observations of one layer within a step
    /// are averaged first.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        let mut grouped: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for u in updates {
            let e = grouped
                .entry(u.name.as_str())
                .or_insert_with(|| (vec![0.0; u.mean.len()], vec![0.0; u.var.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&u.mean) {
                *a += b;
            }
            for (a, b) in e.1.iter_mut().zip(&u.var) {
                *a += b;
            }
            e.2 += 1;
        }
        for (name, (mean, var, count)) in grouped {
            for (suffix, observed) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{name}.{suffix}");
                let default = if suffix == "running_var" { 1.0 } else { 0.0 };
                let buf = self
                    .buffers
                    .entry(key)
                    .or_insert_with(|| Tensor::filled(&[1, observed.len()], default));
                for (r, o) in buf.data_mut().iter_mut().zip(&observed) {
                    *r = (1.0 - momentum) * *r + momentum * o / count as f64;
                }
            }
        }
    }

    /// Writes parameters, Adam moments, step counters and buffers as a
    /// [`Container`] with the given metadata.
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut tensors = Vec::with_capacity(self.params.len() * 3 + self.buffers.len());
        let mut steps = BTreeMap::new();
        for p in &self.params {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
            tensors.push((format!("adam_m/{}", p.name), p.m.clone()));
            tensors.push((format!("adam_v/{}", p.name), p.v.clone()));
            steps.insert(p.name.clone(), p.step);
        }
        for (k, v) in &self.buffers {
            tensors.push((format!("buffer/{k}"), v.clone()));
        }
        let meta = serde_json::json!({ "adam_steps": steps, "user": meta });
        Container { meta, tensors }
    }

    pub fn from_container(c: Container) -> Result<(ParamStore, serde_json::Value)> {
        let steps: BTreeMap<String, u64> = serde_json::from_value(c.meta["adam_steps"].clone())
            .map_err(|e| TensorError::Format(format!("adam_steps: {e}")))?;
        let mut store = ParamStore::new();
        let mut moments: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in c.tensors {
            if let Some(n) = name.strip_prefix("param/") {
                let id = store.insert(n, t)?;
                store.params[id.0].step = steps.get(n).copied().unwrap_or(0);
            } else if let Some(n) = name.strip_prefix("buffer/") {
                store.buffers.insert(n.to_string(), t);
            } else {
                moments.insert(name, t);
            }
        }
        for p in &mut store.params {
            for (prefix, slot) in [("adam_m/", &mut p.m), ("adam_v/", &mut p.v)] {
                let key = format!("{prefix}{}", p.name);
                let t = moments
                    .remove(&key)
                    .ok_or_else(|| TensorError::Format(format!("missing {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(TensorError::Format(format!("{key} has the wrong shape")));
                }
                *slot = t;
            }
        }
        let user = c.meta.get("user").cloned().unwrap_or(serde_json::Value::Null);
        Ok((store, user))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container(serde_json::Value::Null))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        Ok(Self::from_container(read_container(path)?)?.0)
    }
}

/// One bias-corrected Adam update. `grads` must hold one tensor per
/// parameter, in store order, with matching shapes.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], hyper: &AdamHyper) -> Result<()> {
    if grads.len() != store.params.len() {
        return Err(TensorError::Misaligned(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.params.len()
        )));
    }
    if let Some((p, g)) = store.params.iter().zip(grads).find(|(p, g)| p.value.shape() != g.shape()) {
        return Err(TensorError::Misaligned(format!(
            "gradient for `{}` has shape {:?}, expected {:?}",
            p.name,
            g.shape(),
            p.value.shape()
        )));
    }
    for (p, g) in store.params.iter_mut().zip(grads) {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for (((x, m), v), &g) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
