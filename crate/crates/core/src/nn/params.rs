use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One parameter tensor with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        Self {
            shape,
            data,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered parameter store with optimizer state.
///
/// `version` increments on every update so that recorded tapes can detect
/// that the weights moved underneath them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub tensors: Vec<ParamTensor>,
    step: u64,
    version: u64,
}

/// Gradients laid out like [`NetParams::tensors`].
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl NetParams {
    pub fn new(tensors: Vec<ParamTensor>) -> Self {
        Self {
            tensors,
            step: 0,
            version: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Mark the weights as modified outside the optimizer.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    /// Checksum of the raw parameter bits (not the optimizer state).
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::shape("adam_step tensors", self.tensors.len(), grads.len()));
        }
        for (i, (t, g)) in self.tensors.iter().zip(grads).enumerate() {
            if t.len() != g.len() {
                return Err(Error::shape(format!("adam_step tensor {i}"), t.len(), g.len()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            for i in 0..t.data.len() {
                let gi = g[i];
                t.m[i] = cfg.beta1 * t.m[i] + (1.0 - cfg.beta1) * gi;
                t.v[i] = cfg.beta2 * t.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = t.m[i] / bc1;
                let v_hat = t.v[i] / bc2;
                t.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.version += 1;
        Ok(())
    }
}

/// `acc += k * g`, tensor by tensor.
pub fn accumulate(acc: &mut ParamGrads, g: &ParamGrads, k: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += k * y;
        }
    }
}
