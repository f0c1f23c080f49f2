use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// A trainable tensor with its Adam moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step_count: u64,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step_count: 0,
            grad: None,
        }
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Named, ordered collection of parameters belonging to one network.
///
/// Each store carries a process-unique id so a graph can route gradients
/// back to the right store; clones receive a new id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            params: self.params.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            names: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.params.push(Parameter::new(value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub(crate) fn first_pending(&self) -> Option<&str> {
        self.params
            .iter()
            .position(|p| p.grad.is_some())
            .map(|i| self.names[i].as_str())
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, grad: &[f64]) {
        let p = &mut self.params[index];
        match &mut p.grad {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape().to_vec(), grad.to_vec())
                        .expect("gradient shape tracks parameter shape"),
                );
            }
        }
    }
}

/// Glorot/Xavier uniform draw on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update to every parameter and clears the gradients.
    /// Fails without touching anything if any gradient is missing.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(i) = store.params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(store.names[i].clone()));
        }
        for p in store.params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One Adam step with the canonical constants.
pub fn adam_step(store: &mut ParamStore, learning_rate: f64) -> Result<()> {
    Adam::new(learning_rate).step(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("x", Tensor::from_vec(vec![x]));
        s
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = (6.0f64 / 5.0).sqrt();
        assert!((b - 1.09545).abs() < 1e-5);
        let t = xavier_uniform(&[100_000], 2, 3, &mut rng);
        let (mut lo, mut hi, mut sum) = (f64::MAX, f64::MIN, 0.0);
        for &v in t.data() {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        assert!(lo >= -b && hi <= b);
        assert!((sum / 1e5).abs() < 0.01 * b);
        let t = xavier_uniform(&[1000], 3, 3, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn xavier_is_seeded() {
        let a = xavier_uniform(&[4, 3], 3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = xavier_uniform(&[4, 3], 3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = scalar_store(0.7);
        s.accumulate_grad(0, &[0.0]);
        adam_step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(0).value.data(), &[0.7]);
        assert_eq!(s.get(0).step_count(), 1);
        assert!(s.get(0).grad().is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.002] {
            let mut s = scalar_store(1.0);
            s.accumulate_grad(0, &[g]);
            adam_step(&mut s, 0.01).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let moved = s.get(0).value.data()[0] - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-12);
            assert!((moved + 0.01 * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = scalar_store(1.0);
        for _ in 0..200 {
            let x = s.get(0).value.data()[0];
            s.accumulate_grad(0, &[2.0 * x]);
            adam_step(&mut s, 0.1).unwrap();
        }
        assert!(s.get(0).value.data()[0].abs() < 0.01);
        assert_eq!(s.get(0).step_count(), 200);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = scalar_store(1.0);
        assert!(matches!(
            adam_step(&mut s, 0.1),
            Err(Error::MissingGradient(name)) if name == "x"
        ));
    }

    #[test]
    fn clones_get_distinct_ids() {
        let s = ParamStore::new();
        assert_ne!(s.id(), s.clone().id());
    }
}
