use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

/// RMSProp with a per-entry running mean of squared gradients:
///
/// `m <- decay * m + (1 - decay) * g^2`, `theta <- theta - lr * g / sqrt(m + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    mean_sq: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParamSet) -> Self {
        let mean_sq = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { config, mean_sq }
    }

    pub fn mean_sq(&self) -> &[Vec<f64>] {
        &self.mean_sq
    }

    /// Applies one update. Parameters without a gradient still have their
    /// running mean decayed, as if the gradient were zero.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.mean_sq.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer for {} params, got {} params and {} gradients",
                self.mean_sq.len(),
                params.len(),
                grads.len()
            )));
        }
        let RmsPropConfig { lr, decay, eps } = self.config;
        for (id, ms) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&mut self.mean_sq)
        {
            let value = params.get_mut(id);
            if value.len() != ms.len() {
                return Err(Error::Shape(format!(
                    "optimizer state length mismatch for {}",
                    id.index()
                )));
            }
            match grads.get(id) {
                Some(g) => {
                    for ((theta, m), gi) in value.data_mut().iter_mut().zip(ms.iter_mut()).zip(g) {
                        *m = decay * *m + (1.0 - decay) * gi * gi;
                        *theta -= lr * gi / (*m + eps).sqrt();
                    }
                }
                None => ms.iter_mut().for_each(|m| *m *= decay),
            }
        }
        Ok(())
    }

    /// Optimizer state as named tensors, for checkpointing.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        params
            .iter()
            .zip(&self.mean_sq)
            .map(|((_, name, t), ms)| {
                let state =
                    Tensor::new(t.shape().to_vec(), ms.clone()).expect("aligned with params");
                (format!("rmsprop/{name}"), state)
            })
            .collect()
    }

    pub fn load_state(&mut self, params: &ParamSet, tensors: &[(String, Tensor)]) -> Result<()> {
        for ((_, name, _), ms) in params.iter().zip(&mut self.mean_sq) {
            let key = format!("rmsprop/{name}");
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
            if t.len() != ms.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state {key} has wrong length"
                )));
            }
            ms.copy_from_slice(t.data());
        }
        Ok(())
    }
}
