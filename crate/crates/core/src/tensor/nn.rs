//! Small parameterized building blocks shared by the networks.

use rand::Rng;

use super::{Graph, Param, ParamSet, Value};

/// Affine map y = x W + b on the last axis of a rank-2 value.
#[derive(Clone)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    w: Param,
    b: Param,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Linear {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            d_in,
            d_out,
            w: params.add(Param::randn(&format!("{}.w", prefix), &[d_in, d_out], std, rng)),
            b: params.add(Param::zeros(&format!("{}.b", prefix), &[d_out])),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Value) -> Value {
        x.matmul(&g.param(&self.w)).add(&g.param(&self.b))
    }
}

/// Two-layer MLP: linear, swish, linear.
#[derive(Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Mlp {
        Mlp {
            l1: Linear::new(&format!("{}.l1", prefix), d_in, d_hidden, params, rng),
            l2: Linear::new(&format!("{}.l2", prefix), d_hidden, d_out, params, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Value) -> Value {
        self.l2.forward(g, &self.l1.forward(g, x).swish())
    }
}
