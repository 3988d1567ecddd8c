use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Populated by [`Graph::backward`](super::Graph::backward); accumulates
    /// across calls until [`ParamStore::zero_grad`].
    pub grad: Option<Vec<T>>,
}

/// Ordered, named set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_any_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a = T::from_f64(a.to_f64() + b.to_f64());
                }
            }
            None => p.grad = Some(grad.to_vec()),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
                })
                .collect(),
        }
    }
}

/// Plain minibatch SGD with L2 weight decay and optional heavy-ball momentum.
///
/// Update: `v <- momentum * v + (grad + weight_decay * p)`, `p <- p - lr * v`.
/// With zero momentum this is `p <- p - lr * (grad + weight_decay * p)`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }

    /// Applies one update to every parameter, then clears all gradients.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.momentum != 0.0 && self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            if self.momentum == 0.0 {
                for (v, g) in values.iter_mut().zip(&grad) {
                    let x = v.to_f64();
                    *v = T::from_f64(x - lr * (g.to_f64() + weight_decay * x));
                }
            } else {
                let vel = &mut self.velocity[i];
                for ((v, g), m) in values.iter_mut().zip(&grad).zip(vel.iter_mut()) {
                    let x = v.to_f64();
                    *m = self.momentum * *m + g.to_f64() + weight_decay * x;
                    *v = T::from_f64(x - lr * *m);
                }
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value));
        store.get_mut(id).grad = Some(vec![grad]);
        store
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = single(1.0, 0.0);
        Sgd::new(0.0).step(&mut store, 0.1, 0.0).unwrap();
        assert_eq!(store.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut store = single(1.0, 0.0);
        Sgd::new(0.0).step(&mut store, 0.1, 0.5).unwrap();
        assert!((store.iter().next().unwrap().value.item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn step_clears_grads() {
        let mut store = single(1.0, 2.0);
        Sgd::new(0.0).step(&mut store, 0.1, 0.0).unwrap();
        assert!(!store.has_any_grad());
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("head.weight", Tensor::scalar(1.0));
        let err = Sgd::new(0.0).step(&mut store, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = single(1.0, 1.0);
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut store, 0.1, 0.0).unwrap();
        store.get_mut(ParamId(0)).grad = Some(vec![1.0]);
        sgd.step(&mut store, 0.1, 0.0).unwrap();
        // 1 - 0.1 * 1 - 0.1 * (0.9 + 1)
        assert!((store.get(ParamId(0)).value.item() - 0.71).abs() < 1e-12);
    }
}
