use super::{NumArray, ParamStore};
use crate::error::{Error, Result};

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    t: u64,
    m: ParamStore,
    v: ParamStore,
}

fn zeros_like(params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in params.iter() {
        out.insert(name.clone(), NumArray::zeros(p.value().shape().to_vec()));
    }
    out
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            t: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn with_clip(mut self, max_grad_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_grad_norm;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&ParamStore, &ParamStore) {
        (&self.m, &self.v)
    }

    /// Restores step count and moments, e.g. from a checkpoint.
    pub fn restore(&mut self, t: u64, m: ParamStore, v: ParamStore) -> Result<()> {
        if !m.same_layout(&self.m) || !v.same_layout(&self.v) {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if !params.same_layout(&self.m) {
            return Err(Error::Shape("parameters do not match optimizer state".into()));
        }
        for (name, p) in params.iter() {
            if let Some(i) = p.grad().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{name}'[{i}] is {}",
                    p.grad()[i]
                )));
            }
        }
        let mut factor = 1.0;
        if let Some(max) = self.max_grad_norm {
            let norm = params.grad_norm();
            if norm > max {
                factor = max / norm;
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut err = Ok(());
        params.for_each_mut(|name, value, grad| {
            let (Ok(m), Ok(v)) = (m.value_mut(name), v.value_mut(name)) else {
                err = Err(Error::Shape(format!("no optimizer state for '{name}'")));
                return;
            };
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..value.len() {
                let g = grad[i] * factor;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                grad[i] = 0.0;
            }
        });
        err
    }
}
