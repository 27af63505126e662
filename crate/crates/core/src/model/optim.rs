use serde::{Deserialize, Serialize};

use super::{ModelError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Plain gradient descent, in place.
pub fn sgd_step(params: &mut ParamSet, lr: f32) -> Result<(), ModelError> {
    require_grads(params)?;
    for (_, p) in params.iter_mut() {
        for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *w -= lr * g;
        }
    }
    params.mark_grads_ready(false);
    Ok(())
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    steps: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f32) -> Result<(), ModelError> {
        require_grads(params)?;
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| vec![0.0; p.value.numel()])
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(ModelError::Registry(
                "Adam state does not match parameter set".into(),
            ));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((_, p), (m, v)) in params
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.mark_grads_ready(false);
        Ok(())
    }
}

/// Optimizer bound to one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                Optimizer::Adam(Adam::new(beta1, beta2, eps))
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f32) -> Result<(), ModelError> {
        match self {
            Optimizer::Sgd => sgd_step(params, lr),
            Optimizer::Adam(adam) => adam.step(params, lr),
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_gradients(params: &mut ParamSet, max_norm: f32) -> f32 {
    let norm = params.grad_norm();
    if norm <= f64::from(max_norm) || norm == 0.0 {
        return 1.0;
    }
    let scale = (f64::from(max_norm) / norm) as f32;
    for (_, p) in params.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    scale
}

fn require_grads(params: &ParamSet) -> Result<(), ModelError> {
    if params.grads_ready() {
        Ok(())
    } else {
        Err(ModelError::MissingGradient(format!(
            "{:?} parameter set",
            params.role()
        )))
    }
}
