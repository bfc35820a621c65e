//! Named parameter storage and the Adam optimizer.

use super::Tensor;
use rand::Rng;
use std::collections::BTreeMap;

/// Named map of parameters with deterministic (lexicographic) iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        assert!(
            !self.map.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.map.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Same parameter names with identical shapes (weights may differ).
    pub fn same_architecture(&self, other: &ParameterSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Weight matrix initialized uniformly in ±sqrt(1/fan_in).
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name.to_string(), Tensor::new(vec![fan_in, fan_out], data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name.to_string(), Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, len: usize) {
        self.insert(name.to_string(), Tensor::new(vec![len], vec![1.0; len]));
    }

    /// Free vector/table parameter (mask tokens, positional tables), same
    /// uniform rule with fan_in = last dimension.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, rng: &mut impl Rng) {
        let fan = *shape.last().expect("non-empty shape");
        let bound = (1.0 / fan as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name.to_string(), Tensor::new(shape, data));
    }
}

/// Gradient map produced by `Tape::backward`, keyed like the parameter set.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Largest |g| over all coordinates.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet, hyper: AdamHyper) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            m.insert(name.to_string(), Tensor::zeros(t.shape().to_vec()));
            v.insert(name.to_string(), Tensor::zeros(t.shape().to_vec()));
        }
        AdamState {
            hyper,
            step: 0,
            m,
            v,
        }
    }
}

/// Standard bias-corrected Adam update; increments the step counter.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as f64;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let grad = grads
            .get(&name)
            .unwrap_or_else(|| panic!("missing gradient for parameter {name:?}"));
        let m = state.m.get_mut(&name).expect("adam state covers params");
        let v = state.v.get_mut(&name).expect("adam state covers params");
        let p = params.get_mut(&name).unwrap();
        assert_eq!(
            grad.shape(),
            p.shape(),
            "gradient shape mismatch for {name:?}: {:?} vs {:?}",
            grad.shape(),
            p.shape()
        );
        for i in 0..p.numel() {
            let g = grad.data()[i];
            let mi = h.beta1 * m.data()[i] + (1.0 - h.beta1) * g;
            let vi = h.beta2 * v.data()[i] + (1.0 - h.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
}
