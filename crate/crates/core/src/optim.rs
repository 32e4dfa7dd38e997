//! Adam over a named parameter set, with state that can be checkpointed.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn checksum(&self) -> Result<String> {
        crate::ops::tensors_checksum(
            self.entries
                .iter()
                .map(|(n, v)| (n.as_str(), v.as_tensor())),
        )
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs; names and shapes must match.
    pub fn load(&self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (name, var) in &self.entries {
            let t = values
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("parameter `{name}` missing")))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let first = params
            .iter()
            .map(|(_, v)| zeros(v))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = params
            .iter()
            .map(|(_, v)| zeros(v))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            config,
            state: AdamState {
                step: 0,
                first,
                second,
            },
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState) -> Result<()> {
        if state.first.len() != self.state.first.len()
            || state.second.len() != self.state.second.len()
        {
            return Err(Error::Format(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        for (a, b) in state
            .first
            .iter()
            .chain(&state.second)
            .zip(self.state.first.iter().chain(&self.state.second))
        {
            if a.dims() != b.dims() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
        }
        self.state = state;
        Ok(())
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamSet, grads: &GradStore) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients can carry autograd history; keep it out of the moments.
            let g = g.detach();
            let m = ((&self.state.first[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.state.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.state.first[i] = m;
            self.state.second[i] = v;
        }
        Ok(())
    }
}
