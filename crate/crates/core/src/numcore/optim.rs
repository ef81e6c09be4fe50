use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Slot<T> {
    name: String,
    tensor: Tensor<T>,
    reads: AtomicU64,
}

/// Named trainable tensors. Reads through [`ParamStore::get`] are counted so
/// callers can verify which parameters a computation touched.
#[derive(Debug, Default)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    tensor: s.tensor.clone(),
                    reads: AtomicU64::new(0),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    /// Registers a tensor; it is marked trainable.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(true);
        self.slots.push(Slot {
            name: name.into(),
            tensor,
            reads: AtomicU64::new(0),
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        let slot = &self.slots[id.0];
        slot.reads.fetch_add(1, Ordering::Relaxed);
        &slot.tensor
    }

    /// Access without bumping the read counter (serialization, diffs).
    pub fn peek(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].tensor
    }

    pub fn read_count(&self, id: ParamId) -> u64 {
        self.slots[id.0].reads.load(Ordering::Relaxed)
    }

    pub fn reset_read_counts(&self) {
        for s in &self.slots {
            s.reads.store(0, Ordering::Relaxed);
        }
    }

    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.slots[id.0].tensor.zero_grad();
        }
    }

    pub fn zero_grad_all(&mut self) {
        for s in &mut self.slots {
            s.tensor.zero_grad();
        }
    }

    /// Total scalar count over `ids`.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.slots[id.0].tensor.numel()).sum()
    }

    /// Euclidean norm of the gradients over `ids` (absent gradients count as zero).
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.slots[id.0].tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[T]) {
        self.slots[id.0].tensor.accumulate_grad(g);
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param`, `param <- param - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to `ids`; gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if store.peek(id).grad().is_none() {
                return Err(TensorError::MissingGrad(store.name(id).to_string()));
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        for &id in ids {
            let (grad, data) = store.get_mut(id).grad_and_data_mut();
            let grad = grad.expect("checked above");
            let v = self.velocity[id.0].get_or_insert_with(|| vec![T::zero(); data.len()]);
            for ((p, &g), v) in data.iter_mut().zip(grad).zip(v.iter_mut()) {
                *v = mom * *v + g + wd * *p;
                *p -= lr * *v;
            }
            if data.iter().any(|p| !p.is_finite()) {
                return Err(TensorError::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

/// One-shot update with fresh momentum state.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    Sgd::new(lr, momentum, weight_decay).step(store, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value));
        store.get_mut(id).zero_grad();
        store.accumulate(id, &[grad]);
        (store, id)
    }

    #[test]
    fn plain_step() {
        let (mut store, id) = single(1.0, 1.0);
        sgd_step(&mut store, &[id], 0.1, 0.0, 0.0).unwrap();
        assert!((store.peek(id).item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut store, id) = single(1.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut store, &[id]).unwrap();
        assert!((store.peek(id).item() - 0.9).abs() < 1e-12);
        opt.step(&mut store, &[id]).unwrap();
        assert!((store.peek(id).item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn pure_weight_decay() {
        let (mut store, id) = single(1.0, 0.0);
        sgd_step(&mut store, &[id], 1.0, 0.0, 0.1).unwrap();
        assert!((store.peek(id).item() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let err = sgd_step(&mut store, &[id], 0.1, 0.0, 0.0).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("w".into()));
    }

    #[test]
    fn reads_are_counted() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(2.0));
        let _ = store.get(a);
        let _ = store.get(a);
        let _ = store.peek(b);
        assert_eq!(store.read_count(a), 2);
        assert_eq!(store.read_count(b), 0);
    }
}
