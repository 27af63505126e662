use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::task::TaskKind;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Which side of the split a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Head,
    Body,
    Tail,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Head => "head.",
            Role::Body => "body.",
            Role::Tail => "tail.",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Role::Head, Role::Body, Role::Tail]
            .into_iter()
            .find(|r| name.starts_with(r.prefix()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered, named collection of parameters with their gradients.
///
/// Names carry the role prefix (`head.`, `body.`, `tail.`) so a set can be
/// recovered from a weight blob alone. Iteration order is insertion order,
/// which is fixed by the architecture.
#[derive(Clone, PartialEq)]
pub struct ParamSet {
    role: Role,
    task: Option<TaskKind>,
    entries: IndexMap<String, Param>,
    grads_ready: bool,
}

/// Graph handles for every entry of a [`ParamSet`] bound into one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new(role: Role, task: Option<TaskKind>) -> Self {
        Self {
            role,
            task,
            entries: IndexMap::new(),
            grads_ready: false,
        }
    }

    pub fn from_entries(
        role: Role,
        task: Option<TaskKind>,
        entries: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut set = Self::new(role, task);
        for (name, value) in entries {
            set.insert(name, value)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ModelError> {
        let name = name.into();
        if !name.starts_with(self.role.prefix()) {
            return Err(ModelError::Registry(format!(
                "parameter `{name}` does not belong to the {:?} set",
                self.role
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(ModelError::Registry(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let grad = Tensor::zeros_like(&value);
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn task(&self) -> Option<TaskKind> {
        self.task
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// `(name, value)` pairs in iteration order.
    pub fn values(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &v.value))
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, p1), (n2, p2))| n1 == n2 && p1.value.shape() == p2.value.shape())
    }

    /// Overwrites values from `other`, which must share this set's layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<(), ModelError> {
        if !self.same_layout(other) {
            return Err(ModelError::Registry(
                "cannot copy values between parameter sets with different layouts".into(),
            ));
        }
        for (dst, src) in self.entries.values_mut().zip(other.entries.values()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), graph.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Replaces stored gradients with those of `bound`; unreached parameters get zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (name, p) in self.entries.iter_mut() {
            p.grad = match grads.get(bound.var(name)) {
                Some(g) => g.clone(),
                None => Tensor::zeros_like(&p.value),
            };
        }
        self.grads_ready = true;
    }

    /// Adds `factor × grad` from `bound` into the stored gradients.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients, factor: f32) {
        for (name, p) in self.entries.iter_mut() {
            if let Some(g) = grads.get(bound.var(name)) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(acc, v)| *acc += factor * v);
            }
        }
        self.grads_ready = true;
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_ready = false;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn mark_grads_ready(&mut self, ready: bool) {
        self.grads_ready = ready;
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// L∞ distance between the values of two sets with equal layout.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f32 {
        if !self.same_layout(other) {
            return f32::INFINITY;
        }
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f32::max)
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamSet")
            .field("role", &self.role)
            .field("task", &self.task)
            .field("entries", &self.entries.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

/// Truncated-normal (σ = 0.02, cut at 2σ) weights, zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
    pub std: f32,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, std: 0.02 }
    }

    pub fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f32 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * self.std;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn uniform(&mut self, shape: &[usize], low: f32, high: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(low..high)).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn sample_set() -> ParamSet {
        let mut init = Initializer::new(rng_for(7, "params-test"));
        let mut set = ParamSet::new(Role::Tail, Some(TaskKind::Detection));
        set.insert("tail.w", init.trunc_normal(&[3, 4])).unwrap();
        set.insert("tail.b", Tensor::zeros(&[4])).unwrap();
        set
    }

    #[test]
    fn names_are_unique_and_prefixed() {
        let mut set = sample_set();
        assert!(set.insert("tail.w", Tensor::zeros(&[1])).is_err());
        assert!(set.insert("head.w", Tensor::zeros(&[1])).is_err());
        assert_eq!(set.names().collect::<Vec<_>>(), ["tail.w", "tail.b"]);
    }

    #[test]
    fn init_is_truncated_and_deterministic() {
        let a = sample_set();
        let b = sample_set();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(a
            .value("tail.w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let a = sample_set();
        let mut b = a.clone();
        b.iter_mut().next().unwrap().1.value.data_mut()[0] += 1e-6;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert!(a.max_abs_diff(&b) > 0.0);
    }
}
