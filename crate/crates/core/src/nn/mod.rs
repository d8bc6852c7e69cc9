//! Minimal dense neural-network toolkit: tensors, a reverse-mode graph,
//! parameter storage and the AdamW optimizer.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use params::{Gradients, NamedTensor, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::Rng;

/// Fully connected layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_bias(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::from_vec(1, width, vec![1.0; width]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, width));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron with a SiLU between the layers.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), fan_in, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.silu(h);
        self.second.forward(g, h)
    }
}
