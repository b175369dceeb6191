use crate::error::Result;

use super::graph::{Graph, Var};
use super::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl<T: Real> Graph<T> {
    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Linear => x,
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    /// Chain of affine layers `(weight [out, in], bias [out], activation)`.
    pub fn mlp(&mut self, input: Var, layers: &[(Var, Var, Activation)]) -> Result<Var> {
        let mut h = input;
        for &(w, b, act) in layers {
            let z = self.linear(h, w, Some(b))?;
            h = self.activate(z, act);
        }
        Ok(h)
    }
}
