use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Adam moment estimates for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Fresh state with β1=0.9, β2=0.999, ε=1e-8.
    pub fn with_defaults(params: &ParamStore) -> Self {
        Self::new(params, 0.9, 0.999, 1e-8)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Rebuilds a state from saved moments.
    pub fn from_parts(
        params: &ParamStore,
        (beta1, beta2, eps): (f64, f64, f64),
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) -> Result<Self> {
        let ok = first.len() == params.len()
            && second.len() == params.len()
            && params
                .values()
                .iter()
                .zip(first.iter().zip(&second))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !ok {
            return Err(Error::Incongruent("Adam moments do not match parameters".into()));
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            step,
            first,
            second,
        })
    }

    /// One bias-corrected Adam update. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::Incongruent("Adam state built for another store".into()));
        }
        if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
            return Err(Error::MissingGradient(params.name(id).to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let grad = params.grad(id).expect("checked above").data().to_vec();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let p = params.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        if params.values().iter().all(Tensor::is_finite) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "adam_step" })
        }
    }
}
