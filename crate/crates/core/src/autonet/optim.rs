use super::{ParamStore, Tensor};
use crate::error::{bail_shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            state: AdamState {
                t: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    /// Applies one bias-corrected update. `grads[i]` belongs to parameter
    /// `i`; `None` is treated as a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&[f32]>]) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            bail_shape!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.state.m.len(),
                params.len()
            );
        }
        let c = self.config;
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step = (c.lr * bc2.sqrt() / bc1) as f32;
        let eps_hat = (c.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensor_mut(i).data_mut();
            if g.len() != p.len() {
                bail_shape!("gradient of {} entries for a parameter of {}", g.len(), p.len());
            }
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps_hat);
            }
        }
        Ok(())
    }

    /// Moments as a parameter store (`m/<name>`, `v/<name>`), for checkpoints.
    pub fn moments_store(&self, params: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (i, (name, t)) in params.iter().enumerate() {
            out.insert(format!("m/{name}"), Tensor::new(t.shape().to_vec(), self.state.m[i].clone())?)?;
            out.insert(format!("v/{name}"), Tensor::new(t.shape().to_vec(), self.state.v[i].clone())?)?;
        }
        Ok(out)
    }

    pub fn from_moments(config: AdamConfig, t: u64, params: &ParamStore, moments: &ParamStore) -> Result<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}/{name}");
                let Some(t) = moments.get(&key) else {
                    return Err(crate::error::Error::Format(format!("optimizer state lacks {key}")));
                };
                if t.shape() != p.shape() {
                    bail_shape!("{key} has shape {:?}, parameter has {:?}", t.shape(), p.shape());
                }
                dst.push(t.data().to_vec());
            }
        }
        Ok(Self {
            config,
            state: AdamState { t, m, v },
        })
    }
}
