//! Named learnable parameters and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tensor, TensorError};

/// One learnable tensor with a stable name (used by checkpoints and
/// diagnostics).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of parameters. Order is fixed at construction and is
/// the contract behind [`crate::graph::Graph::from_params`] and the
/// checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a parameter and returns its slot index.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::GlorotUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Normal { std } => {
                let dist = rand_distr::Normal::new(0.0, std).expect("std is finite");
                (0..n).map(|_| rng.sample(dist)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let tensor = Tensor::new(shape, data)
            .expect("init produces matching data length")
            .with_requires_grad();
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    /// Appends an already-built parameter (checkpoint loading).
    pub fn push_param(&mut self, param: Param) -> usize {
        self.params.push(param);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Copies values (not grads) from a store with identical layout.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if self.params.len() != other.params.len() {
            return Err(TensorError::DimMismatch {
                op: "load_values",
                left: vec![self.params.len()],
                right: vec![other.params.len()],
            });
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(TensorError::DimMismatch {
                    op: "load_values",
                    left: dst.tensor.shape().to_vec(),
                    right: src.tensor.shape().to_vec(),
                });
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Adam state: one first/second moment buffer per parameter, aligned with
/// the store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Standard defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyperparams(store, 1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v_moment: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter, in place. Every
/// parameter must hold a populated gradient; gradients are zeroed after the
/// update.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<(), TensorError> {
    for p in store.iter() {
        if p.tensor.grad.is_none() {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (slot, p) in store.params.iter_mut().enumerate() {
        let grad = p.tensor.grad.take().expect("checked above");
        let m = &mut state.m[slot];
        let v = &mut state.v_moment[slot];
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("p", vec![values.len()], Init::Zeros, &mut rng);
        store.get_mut(0).tensor.data_mut().copy_from_slice(values);
        store
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = store_with(&[0.5, -1.5]);
        let mut state = AdamState::new(&store);
        store.get_mut(0).tensor.grad = Some(vec![0.0, 0.0]);
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.get(0).tensor.data(), &[0.5, -1.5]);
        assert_eq!(state.step_count, 1);
        assert!(store.get(0).tensor.grad.is_none());
    }

    #[test]
    fn constant_gradient_moves_parameter_against_its_sign() {
        let mut store = store_with(&[0.0]);
        let mut state = AdamState::new(&store);
        for _ in 0..50 {
            store.get_mut(0).tensor.grad = Some(vec![2.5]);
            adam_step(&mut store, &mut state).unwrap();
        }
        assert!(store.get(0).tensor.data()[0] < 0.0);
        assert_eq!(state.step_count, 50);
    }

    #[test]
    fn first_step_matches_hand_evaluated_update() {
        // p = 0, g = 1, defaults: m̂ = 1, v̂ = 1 after bias correction,
        // so the step is -lr / (1 + eps).
        let mut store = store_with(&[0.0]);
        let mut state = AdamState::new(&store);
        store.get_mut(0).tensor.grad = Some(vec![1.0]);
        adam_step(&mut store, &mut state).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        let got = store.get(0).tensor.data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("enc.w1", vec![2], Init::Zeros, &mut rng);
        let mut state = AdamState::new(&store);
        let err = adam_step(&mut store, &mut state).unwrap_err();
        assert!(err.to_string().contains("enc.w1"));
    }
}
