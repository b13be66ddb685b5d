use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Gradients, Model, ParamId, Scalar, TrainableSet};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over a fixed parameter group.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    params: TrainableSet,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Array2<F>, Array2<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: TrainableSet, lr: f64) -> Self {
        Self {
            params,
            lr,
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &TrainableSet {
        &self.params
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Gradients for parameters outside the group are an
    /// error; parameters without a gradient are left untouched.
    pub fn step(&mut self, model: &mut Model<F>, grads: &Gradients<F>) -> Result<()> {
        if let Some(id) = grads.ids().find(|&id| !self.params.contains(id)) {
            return Err(Error::invalid(format!("gradient for {id}, which this optimizer does not own")));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let f = |x: f64| F::from(x).unwrap();
        let (b1, b2, eps, lr) = (f(self.beta1), f(self.beta2), f(self.eps), f(self.lr));
        let (c1, c2) = (f(c1), f(c2));
        for (id, g) in grads.iter() {
            let p = model
                .param_mut(id)
                .ok_or_else(|| Error::invalid(format!("model has no parameter {id}")))?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!("{id}: gradient {:?} vs parameter {:?}", g.dim(), p.dim())));
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
