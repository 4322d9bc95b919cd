//! Graph convolution backbone and the node-classification objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::sampling::{NoiseStream, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub layers: usize,
    /// Drop probability on each layer's input while training.
    #[serde(default)]
    pub dropout: f64,
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::arg("GCN needs at least one layer and non-empty input/output"));
        }
        if self.layers > 1 && self.hidden_dim == 0 {
            return Err(Error::arg("GCN hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.layers - 1));
        dims.push(self.num_classes);
        dims
    }
}

#[derive(Clone, Debug)]
pub struct Gcn {
    pub config: GcnConfig,
    pub weights: Vec<ParamId>,
}

impl Gcn {
    pub fn new(config: GcnConfig, store: &mut ParamStore, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let rng = rng.derive("gcn", 0);
        let weights = config
            .dims()
            .windows(2)
            .enumerate()
            .map(|(l, w)| store.add_glorot(&format!("gcn.{l}.weight"), w[0], w[1], &rng))
            .collect();
        Ok(Self { config, weights })
    }

    /// Class logits `[N×classes]` from features `h` and an already normalized
    /// adjacency. `dropout` supplies the mask stream in training; `None`
    /// disables dropout regardless of the configured rate.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        h: Var,
        norm_adj: Var,
        mut dropout: Option<&mut NoiseStream>,
    ) -> Result<Var> {
        let shape = tape.shape(h);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::dim("gcn_forward", shape, &[0, self.config.input_dim]));
        }
        let mut h = h;
        for (l, &w) in self.weights.iter().enumerate() {
            if l > 0 {
                h = tape.relu(h)?;
            }
            if let (Some(stream), p) = (dropout.as_deref_mut(), self.config.dropout) {
                if p > 0.0 {
                    h = apply_dropout(tape, h, p, stream)?;
                }
            }
            let hw = tape.matmul(h, params.var(w))?;
            h = tape.matmul(norm_adj, hw)?;
        }
        Ok(h)
    }
}

fn apply_dropout(tape: &mut Tape, h: Var, p: f64, stream: &mut NoiseStream) -> Result<Var> {
    let u = stream.uniform_tensor(tape.shape(h));
    let mask = u.map(|v| if v >= p { 1.0 / (1.0 - p) } else { 0.0 });
    let mask = tape.constant(mask);
    tape.mul(h, mask)
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the row sums of `A + I`.
pub fn normalize_adjacency(tape: &mut Tape, a: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("normalize_adjacency", &shape, &[shape[0], shape[0]]));
    }
    if tape.value(a).data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain {
            op: "normalize_adjacency",
            detail: "negative adjacency entry".into(),
        });
    }
    let eye = tape.constant(Tensor::eye(shape[0]));
    let a_hat = tape.add(a, eye)?;
    let deg = tape.sum_rows(a_hat);
    let inv_sqrt = tape.pow(deg, -0.5)?;
    // Scale by the outer product so entry (i, j) is a_ij · (s_i s_j): one
    // rounding per factor, identical for (j, i), so symmetry survives exactly.
    let col = tape.reshape(inv_sqrt, &[shape[0], 1])?;
    let row = tape.reshape(inv_sqrt, &[1, shape[0]])?;
    let outer = tape.matmul(col, row)?;
    tape.mul(a_hat, outer)
}

fn check_mask(op: &str, n: usize, labels: &[usize], mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::arg(format!("{op}: empty mask")));
    }
    if labels.len() != n {
        return Err(Error::arg(format!("{op}: {} labels for {n} nodes", labels.len())));
    }
    if let Some(&i) = mask.iter().find(|&&i| i >= n) {
        return Err(Error::arg(format!("{op}: mask index {i} out of range for {n} nodes")));
    }
    Ok(())
}

/// Mean of `-log softmax(logits_i)[label_i]` over masked nodes.
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    check_mask("masked_cross_entropy", shape[0], labels, mask)?;
    let c = shape[1];
    if let Some(&i) = mask.iter().find(|&&i| labels[i] >= c) {
        return Err(Error::arg(format!("label {} of node {i} exceeds {c} classes", labels[i])));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.select(logp, mask.iter().map(|&i| i * c + labels[i]).collect())?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Row argmax, ties to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    check_mask("accuracy", logits.rows(), labels, mask)?;
    let pred = predict(logits);
    let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(input: usize, layers: usize) -> GcnConfig {
        GcnConfig {
            input_dim: input,
            hidden_dim: 4,
            num_classes: 3,
            layers,
            dropout: 0.0,
        }
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let n = normalize_adjacency(&mut tape, z).unwrap();
        assert_eq!(tape.value(n), &Tensor::eye(3));

        let o = tape.constant(Tensor::ones(&[2, 2]));
        let n = normalize_adjacency(&mut tape, o).unwrap();
        // Row sums of A + I are 3, so the result is (A + I) / 3, not ones / 3.
        let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (g, w) in tape.value(n).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }

        let neg = tape.constant(Tensor::full(&[2, 2], -0.1));
        assert!(normalize_adjacency(&mut tape, neg).is_err());
    }

    #[test]
    fn identity_layer_propagates_features() {
        let mut store = ParamStore::new();
        let mut c = cfg(3, 1);
        c.num_classes = 3;
        let gcn = Gcn::new(c, &mut store, &RngState::new(0)).unwrap();
        *store.get_mut(gcn.weights[0]) = Tensor::eye(3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = Tensor::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap();
        let xv = tape.constant(x.clone());
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let an = normalize_adjacency(&mut tape, a).unwrap();
        let y = gcn.forward(&mut tape, &p, xv, an, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn logits_shape() {
        let mut store = ParamStore::new();
        let gcn = Gcn::new(cfg(5, 2), &mut store, &RngState::new(0)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::ones(&[7, 5]));
        let a = tape.constant(Tensor::eye(7));
        let y = gcn.forward(&mut tape, &p, x, a, None).unwrap();
        assert_eq!(tape.shape(y), &[7, 3]);
        let bad = tape.constant(Tensor::ones(&[7, 4]));
        assert!(gcn.forward(&mut tape, &p, bad, a, None).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[4, 5]));
        let l = masked_cross_entropy(&mut tape, u, &[0, 1, 2, 3], &[0, 2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-15);

        let big = tape.constant(Tensor::from_rows(&[vec![500., 0.], vec![0., 500.]]).unwrap());
        let l = masked_cross_entropy(&mut tape, big, &[0, 1], &[0, 1]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
        assert!(masked_cross_entropy(&mut tape, big, &[0, 1], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::from_rows(&[vec![2., 1.], vec![0., 3.], vec![1., 1.]]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0], &[0, 1, 2]).unwrap(), 1.0);
        let flat = Tensor::zeros(&[4, 3]);
        assert_eq!(accuracy(&flat, &[0, 2, 0, 1], &[0, 1, 2, 3]).unwrap(), 0.5);
        assert!(accuracy(&flat, &[0, 2, 0, 1], &[]).is_err());
    }
}
