//! Named parameter storage and the dense layers built on it.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::sampling::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named set of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform `[fan_in × fan_out]` matrix drawn from a stream keyed by
    /// the parameter name.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &RngState) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut s = rng.derive(name, 0).stream(0);
        let u = s.uniform_tensor(&[fan_in, fan_out]);
        self.add(name, u.map(|v| (2.0 * v - 1.0) * bound))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value with one of the same name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Validation(format!(
                "parameter sets differ: expected {} tensors, got {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, (mine, theirs)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Validation(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    theirs.shape(),
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Parameters recorded on a tape for one step.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros for parameters the root did not reach.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &RngState) -> Self {
        let weight = store.add_glorot(&format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, params.var(self.weight))?;
        tape.add_bias(y, params.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive layers
/// and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, so `[a, b]` is a single layer.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], activation: Activation, rng: &RngState) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.activation.apply(tape, h)?;
            }
            h = layer.forward(tape, params, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_is_deterministic_and_bounded() {
        let rng = RngState::new(0);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ia = a.add_glorot("w", 4, 6, &rng);
        let ib = b.add_glorot("w", 4, 6, &rng);
        assert_eq!(a.get(ia), b.get(ib));
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.get(ia).data().iter().all(|v| v.abs() <= bound));
        let ic = a.add_glorot("v", 4, 6, &rng);
        assert_ne!(a.get(ia), a.get(ic));
    }

    #[test]
    fn mlp_shapes_and_unreached_gradients() {
        let rng = RngState::new(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], Activation::Tanh, &rng);
        let unused = store.add("unused", Tensor::ones(&[2]));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::ones(&[4, 3]));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let grads = p.gradients(&g, &store);
        assert_eq!(grads.len(), store.len());
        assert_eq!(grads[unused.0], Tensor::zeros(&[2]));
        assert_eq!(store.name(mlp.layers[1].weight), "m.1.weight");
    }

    #[test]
    fn load_from_checks_shapes() {
        let rng = RngState::new(2);
        let mut a = ParamStore::new();
        a.add_glorot("w", 2, 2, &rng);
        let mut b = ParamStore::new();
        b.add_glorot("w", 2, 3, &rng);
        assert!(a.load_from(&b).is_err());
        let mut c = ParamStore::new();
        c.add("w", Tensor::ones(&[2, 2]));
        a.load_from(&c).unwrap();
        assert_eq!(a.tensors()[0], Tensor::ones(&[2, 2]));
    }
}
