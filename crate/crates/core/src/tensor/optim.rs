//! First-order optimizers that update a subset of parameter groups.

use std::collections::BTreeMap;

use super::{Group, ParameterSet, Tensor};
use crate::error::{Error, Result};

fn gradient<'a>(name: &str, grad: &'a Option<Tensor>) -> Result<&'a Tensor> {
    grad.as_ref()
        .ok_or_else(|| Error::State(format!("parameter {name:?} has no gradient")))
}

/// Plain stochastic gradient descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    /// `p -= lr * grad` for every parameter in `groups`. Parameters of
    /// other groups are not touched, even if they carry a gradient.
    pub fn step(&self, params: &mut ParameterSet, groups: &[Group]) -> Result<()> {
        for (name, p) in params.iter_mut().filter(|(_, p)| groups.contains(&p.group)) {
            let grad = gradient(name, &p.grad)?;
            for (v, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                *v -= self.lr * g;
            }
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. Moment state is kept per parameter name and
/// survives across calls to [`Adam::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, AdamMoments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, groups: &[Group]) -> Result<()> {
        for (name, p) in params.iter_mut().filter(|(_, p)| groups.contains(&p.group)) {
            let grad = gradient(name, &p.grad)?;
            let n = p.value.numel();
            let st = self.state.entry(name.to_string()).or_insert_with(|| AdamMoments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if st.m.len() != n {
                return Err(Error::State(format!(
                    "moment buffers of {name:?} have {} entries, parameter has {n}",
                    st.m.len()
                )));
            }
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
