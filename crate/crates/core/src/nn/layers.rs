use rand::Rng;

use super::kernels::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear_backward, linear_forward, LayerNormCache,
};
use super::{Grads, ParamId, ParamStore, Tensor, WeightInit};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (d_in, d_out): (usize, usize),
        bias: bool,
        init: WeightInit,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.sample(&[d_in, d_out], d_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, store.value(self.weight), self.bias.map(|b| store.value(b)))
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let mut dw = Tensor::zeros(store.value(self.weight).shape());
        let mut db = self.bias.map(|b| Tensor::zeros(store.value(b).shape()));
        let dx = linear_backward(x, store.value(self.weight), dy, &mut dw, db.as_mut());
        grads.accumulate(self.weight, &dw);
        if let (Some(id), Some(g)) = (self.bias, db) {
            grads.accumulate(id, &g);
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, store.value(self.gamma), store.value(self.beta))
    }

    pub fn backward(&self, store: &ParamStore, cache: &LayerNormCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let gamma = store.value(self.gamma);
        let mut dg = Tensor::zeros(gamma.shape());
        let mut db = Tensor::zeros(gamma.shape());
        let dx = layer_norm_backward(cache, gamma, dy, &mut dg, &mut db);
        grads.accumulate(self.gamma, &dg);
        grads.accumulate(self.beta, &db);
        dx
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, init: WeightInit, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), (d, hidden), true, init, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), (hidden, d), true, init, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(store, x)?;
        let act = gelu(&pre);
        let out = self.fc2.forward(store, &act)?;
        Ok((out, MlpCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&self, store: &ParamStore, cache: &MlpCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let dact = self.fc2.backward(store, &cache.act, dy, grads);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(store, &cache.x, &dpre, grads)
    }
}
