use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every trainable tensor of a model. Modules hold [`ParamId`]s into it,
/// so two modules built from the same ids share weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Replaces every parameter's gradient with the matching entry of `grads`.
    pub fn set_grads(&mut self, grads: Grads) {
        assert_eq!(grads.0.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads.0) {
            p.grad = g;
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; one per worker, reduced in order.
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.0[id.0].add_assign(g);
    }

    pub fn merge(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| g.scale(s));
    }
}

/// Normal samples with standard deviation `std`, redrawn outside ±2·std.
/// Weight-matrix initialization: truncated normal with a fixed deviation, or
/// with deviation `1/√fan_in`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    Normal { std: f64 },
    FanIn,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::Normal { std: 0.02 }
    }
}

impl WeightInit {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            WeightInit::Normal { std } => std,
            WeightInit::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn sample(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        truncated_normal(shape, self.std(fan_in), rng)
    }
}

pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape is consistent")
}
