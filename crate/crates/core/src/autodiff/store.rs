//! Named trainable parameters plus their Adam optimizer state.

use super::array::Array;
use super::tape::{NodeId, Tape};
use super::AutodiffError;

struct Entry {
    name: String,
    value: Array,
    m: Vec<f64>,
    v: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order everywhere — tape attachment, serialization, checkpoints — so a
/// fixed seed reproduces training bit for bit. One Adam step counter covers
/// the whole store; every parameter shares the same bias correction.
pub struct ParameterStore {
    entries: Vec<Entry>,
    step: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            step: 0,
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Array) -> Result<(), AutodiffError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(AutodiffError::DuplicateParameter { name: name.into() });
        }
        let n = value.len();
        self.entries.push(Entry {
            name: name.into(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            grad: None,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Completed Adam steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn set(&mut self, name: &str, value: Array) -> Result<(), AutodiffError> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| AutodiffError::UnknownParameter { name: name.into() })?;
        if entry.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "ParameterStore::set",
                details: format!("{:?} vs {:?}", entry.value.shape(), value.shape()),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Record every parameter as a leaf on `tape`, in store order. The
    /// returned ids align with that order and feed `collect_grads` later.
    pub fn attach(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }

    /// Pull gradients off a differentiated tape into the store. Parameters
    /// the loss never touched get zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, ids: &[NodeId]) -> Result<(), AutodiffError> {
        if ids.len() != self.entries.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "collect_grads",
                details: format!("{} ids for {} parameters", ids.len(), self.entries.len()),
            });
        }
        for (entry, &id) in self.entries.iter_mut().zip(ids) {
            entry.grad = Some(match tape.grad(id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; entry.value.len()],
            });
        }
        Ok(())
    }

    /// One Adam update over every parameter, using the gradients loaded by
    /// `collect_grads`. `l2_weight` adds 2·l2·θ to each gradient before the
    /// moment updates (no-op at 0.0). Bias correction uses the shared step
    /// counter, incremented once per call.
    pub fn adam_step(
        &mut self,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        l2_weight: f64,
    ) -> Result<(), AutodiffError> {
        if let Some(entry) = self.entries.iter().find(|e| e.grad.is_none()) {
            return Err(AutodiffError::MissingGradient {
                name: entry.name.clone(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for entry in &mut self.entries {
            let grad = entry.grad.take().expect("checked above");
            for (i, theta) in entry.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] + 2.0 * l2_weight * *theta;
                entry.m[i] = beta1 * entry.m[i] + (1.0 - beta1) * g;
                entry.v[i] = beta2 * entry.v[i] + (1.0 - beta2) * g * g;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copy of all parameter values, in store order (checkpointing).
    pub fn snapshot(&self) -> Vec<Array> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restore values from a `snapshot`. Optimizer moments are left alone;
    /// restoring mid-training resumes from the restored weights.
    pub fn restore(&mut self, values: &[Array]) -> Result<(), AutodiffError> {
        if values.len() != self.entries.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "restore",
                details: format!("{} values for {} parameters", values.len(), self.entries.len()),
            });
        }
        for (entry, value) in self.entries.iter_mut().zip(values) {
            if entry.value.shape() != value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "restore",
                    details: format!("{:?} vs {:?}", entry.value.shape(), value.shape()),
                });
            }
            entry.value = value.clone();
        }
        Ok(())
    }

    /// True once every parameter holds only finite values.
    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.data().iter().all(|v| v.is_finite()))
    }
}
