//! Forward definitions of the recorded primitives.

use super::kernels;
use super::{BinaryKind, Op, Tape, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Indices that order `x` non-increasingly. Stable: equal values keep their
/// original relative order.
pub fn argsort_descending(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
    idx
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (pos, &src) in perm.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::arg(format!("permutation of length {} applied to {n} columns", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::arg(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, s, &[])),
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", av)?;
        let (k2, n) = require_2d("matmul", bv)?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.len() == 1 {
            av.shape().to_vec()
        } else if av.len() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::dim("elementwise", av.shape(), bv.shape()));
        };
        let (ad, bd) = (av.data(), bv.data());
        let n = shape.iter().product::<usize>();
        let ai = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bi = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if matches!(kind, BinaryKind::Div) && bd.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let data = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => ai(i) + bi(i),
                BinaryKind::Sub => ai(i) - bi(i),
                BinaryKind::Mul => ai(i) * bi(i),
                BinaryKind::Div => ai(i) / bi(i),
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match kind {
            UnaryKind::Log => {
                if let Some(bad) = xv.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
            }
            UnaryKind::Pow(p) => {
                let ok = xv
                    .data()
                    .iter()
                    .all(|&v| (v > 0.0) || (v == 0.0 && p >= 1.0) || (v < 0.0 && p.fract() == 0.0));
                if !ok {
                    return Err(Error::Domain {
                        op: "pow",
                        detail: format!("exponent {p} outside the base's domain"),
                    });
                }
            }
            UnaryKind::Clamp(lo, hi) if lo > hi => {
                return Err(Error::arg(format!("clamp bounds [{lo}, {hi}] are inverted")));
            }
            _ => {}
        }
        let f = |v: f64| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Neg => -v,
            UnaryKind::Scale(c) => c * v,
            UnaryKind::AddScalar(c) => v + c,
            UnaryKind::Sigmoid => kernels::sigmoid(v),
            UnaryKind::Softplus => kernels::softplus(v),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
            UnaryKind::Pow(p) => v.powf(p),
        };
        let out = xv.map(f);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log; errors on any non-positive entry.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    /// `max(x, 0)`; the adjoint at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    /// Clamps into `[lo, hi]`; gradient passes unchanged inside the closed range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(p), x)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "log_softmax_rows" });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::arg("mean of an empty tensor"));
        }
        let m = xv.mean();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Per-row sums, `[n×m] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums: Vec<f64> = (0..xv.rows()).map(|i| xv.row(i).iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(sums), Op::SumRows(x), rg)
    }

    /// Per-row sums of absolute values, `[n×m] -> [n]`.
    pub fn l1_norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums: Vec<f64> = (0..xv.rows()).map(|i| xv.row(i).iter().map(|v| v.abs()).sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(sums), Op::L1NormRows(x), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * la..(o + 1) * la]);
            data.extend_from_slice(&bv.data()[o * lb..(o + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b, axis }, rg))
    }

    /// Gathers within each row: `out[r][c] = x[r][perms[r][c]]`. A vector is
    /// a single row. The adjoint scatters with the inverse permutation.
    pub fn permute_rows(&mut self, x: Var, perms: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if perms.len() != r {
            return Err(Error::arg(format!("{} permutations for {r} rows", perms.len())));
        }
        let mut data = Vec::with_capacity(xv.len());
        for (i, perm) in perms.iter().enumerate() {
            check_perm(perm, c)?;
            let row = xv.row(i);
            data.extend(perm.iter().map(|&p| row[p]));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PermuteRows { x, perms }, rg))
    }

    /// Applies one permutation to a vector: `out[c] = x[perm[c]]`.
    pub fn permute_apply(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::dim("permute_apply", self.shape(x), &[perm.len()]));
        }
        self.permute_rows(x, vec![perm.to_vec()])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// All-pairs broadcast sum: rows `p[i] + q[j]` stacked as row `i * m + j`
    /// of an `[n·m × d]` result.
    pub fn pair_add(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        let (n, d) = require_2d("pair_add", pv)?;
        let (m, d2) = require_2d("pair_add", qv)?;
        if d != d2 {
            return Err(Error::dim("pair_add", pv.shape(), qv.shape()));
        }
        let mut data = Vec::with_capacity(n * m * d);
        for i in 0..n {
            let pr = pv.row(i);
            for j in 0..m {
                data.extend(pr.iter().zip(qv.row(j)).map(|(a, b)| a + b));
            }
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::new(vec![n * m, d], data)?, Op::PairAdd(p, q), rg))
    }

    /// For edge-embedding rows of the complete directed graph on `n` nodes
    /// (row `i * n + j` is edge `(i, j)`), the mean embedding over all other
    /// edges sharing an endpoint. Edges with no such neighbor (only when
    /// `n == 1`) get zeros.
    pub fn adjoint_mean(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = require_2d("adjoint_mean", xv)?;
        if rows != n * n {
            return Err(Error::dim("adjoint_mean", xv.shape(), &[n * n, d]));
        }
        let mut data = kernels::adjoint_neighbor_sum(xv.data(), n, d);
        for i in 0..n {
            for j in 0..n {
                let deg = kernels::adjoint_degree(n, i, j);
                if deg > 0 {
                    let s = 1.0 / deg as f64;
                    data[(i * n + j) * d..(i * n + j + 1) * d].iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::AdjointMean { x, n }, rg))
    }

    /// `out[i][j] = x[i][j] * s[i]`
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (r, c) = require_2d("scale_rows", xv)?;
        if sv.len() != r {
            return Err(Error::dim("scale_rows", xv.shape(), sv.shape()));
        }
        let data = xv.data().iter().enumerate().map(|(j, v)| v * sv.data()[j / c]).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ScaleRows(x, s), rg))
    }

    /// `out[i][j] = x[i][j] * s[j]`
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (r, c) = require_2d("scale_cols", xv)?;
        if sv.len() != c {
            return Err(Error::dim("scale_cols", xv.shape(), sv.shape()));
        }
        let data = xv.data().iter().enumerate().map(|(j, v)| v * sv.data()[j % c]).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ScaleCols(x, s), rg))
    }

    /// Adds a length-`c` bias to every row of an `[r×c]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, c) = require_2d("add_bias", xv)?;
        if bv.len() != c {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let data = xv.data().iter().enumerate().map(|(j, v)| v + bv.data()[j % c]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Gathers flat (row-major) positions into a vector.
    pub fn select(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::arg(format!("select index {bad} out of range for {} elements", xv.len())));
        }
        let data: Vec<f64> = indices.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Select { x, indices }, rg))
    }

    /// Rank-position gate: for each `k[i]`, the row
    /// `h[d] = 1 - 0.5 (1 + tanh((d - k[i]) / λ))` for ranks `d = 1..=width`.
    ///
    /// With `hard`, the forward value is the step `d <= k[i]` while the
    /// adjoint stays that of the smooth gate.
    pub fn heaviside_gate(&mut self, k: Var, width: usize, lambda: f64, hard: bool) -> Result<Var> {
        if !(lambda > 0.0) {
            return Err(Error::arg(format!("gate temperature must be positive, got {lambda}")));
        }
        let kv = self.value(k);
        let n = kv.len();
        let mut data = Vec::with_capacity(n * width);
        for &ki in kv.data() {
            data.extend((1..=width).map(|d| kernels::gate_value(d as f64, ki, lambda, hard)));
        }
        let rg = self.rg(&[k]);
        Ok(self.push(Tensor::new(vec![n, width], data)?, Op::Gate { k, lambda }, rg))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim("straight_through", self.shape(soft), hard.shape()));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = t.constant(m(&[vec![1., 0.], vec![0., 1.]]));
        let b = t.constant(m(&[vec![3., 4.], vec![5., 6.]]));
        let r = t.matmul(i, b).unwrap();
        assert_eq!(t.value(r).data(), &[3., 4., 5., 6.]);

        let a = t.constant(m(&[vec![1., 2.]]));
        let c = t.constant(m(&[vec![3.], vec![4.]]));
        let r = t.matmul(a, c).unwrap();
        assert_eq!(t.value(r).data(), &[11.]);
        assert_eq!(t.value(r).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let th = t.tanh(z).unwrap();
        assert_eq!(t.value(th).data(), &[0.0]);

        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.5]));
        let e = t.exp(x).unwrap();
        let l = t.log(e).unwrap();
        assert!(t.value(l).max_abs_diff(t.value(x)) < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
        let one = t.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(t.div(one, x), Err(Error::Domain { .. })));
        let y = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn scalar_broadcast() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(x, c).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(c).unwrap().data(), &[6.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![0., 0., 0.], vec![1000., 0., 0.]]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.at(1, 0), 1.0);
        assert!(v.at(1, 1) < 1e-300);
        let bad = t.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(matches!(t.softmax_rows(bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1., 2.], vec![3., 4.]]));
        let s = t.sum(x);
        assert_eq!(t.value(s).data(), &[10.0]);
        let mu = t.mean(x).unwrap();
        let g = t.backward(mu).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));

        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1., -2.], vec![-3., 4.]]));
        let l1 = t.l1_norm_rows(x);
        assert_eq!(t.value(l1).data(), &[3.0, 7.0]);
        let sr = t.sum_rows(x);
        assert_eq!(t.value(sr).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn concat_and_gradient_routing() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1., 2.]));
        let b = t.leaf(Tensor::vector(vec![3.]));
        let c = t.concat(a, b, 0).unwrap();
        assert_eq!(t.value(c).data(), &[1., 2., 3.]);
        let (sa, sb) = t.value(c).split(0, 2).unwrap();
        assert_eq!((&sa, &sb), (t.value(a), t.value(b)));

        let w = t.constant(Tensor::vector(vec![10., 20., 30.]));
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10., 20.]);
        assert_eq!(g.get(b).unwrap().data(), &[30.]);
    }

    #[test]
    fn concat_columns() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![1.], vec![2.]]));
        let b = t.constant(m(&[vec![3., 4.], vec![5., 6.]]));
        let c = t.concat(a, b, 1).unwrap();
        assert_eq!(t.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let bad = t.constant(Tensor::zeros(&[3, 1]));
        assert!(t.concat(a, bad, 1).is_err());
    }

    #[test]
    fn argsort_examples() {
        assert_eq!(argsort_descending(&[0.2, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(argsort_descending(&[0.3; 4]), vec![0, 1, 2, 3]);
        let x = [0.4, -1.0, 3.0, 0.4, 2.0];
        let p = argsort_descending(&x);
        let inv = invert_permutation(&p);
        let sorted: Vec<f64> = p.iter().map(|&i| x[i]).collect();
        let restored: Vec<f64> = inv.iter().map(|&i| sorted[i]).collect();
        assert_eq!(restored, x);
    }

    #[test]
    fn permute_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1., 2., 3.]));
        let p = t.permute_apply(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.value(p).data(), &[3., 1., 2.]);
        let back = t.permute_apply(p, &invert_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(t.value(back), t.value(x));
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1., 2., 3.]));
        assert!(matches!(t.permute_apply(x, &[0, 0, 1]), Err(Error::Argument(_))));
        assert!(matches!(t.permute_apply(x, &[0, 1]), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_contract() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(t.backward(w), Err(Error::Argument(_))));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.; 4]);
        assert!(t.backward(s).is_err());
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn backward_quadratic() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1., 2.]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn gate_shape_and_hard_limit() {
        let mut t = Tape::new();
        let k = t.constant(Tensor::vector(vec![2.5]));
        let h = t.heaviside_gate(k, 5, 1e-6, false).unwrap();
        assert_eq!(t.value(h).data(), &[1., 1., 0., 0., 0.]);
        let h = t.heaviside_gate(k, 5, 1.0, true).unwrap();
        assert_eq!(t.value(h).data(), &[1., 1., 0., 0., 0.]);
        assert!(t.heaviside_gate(k, 5, 0.0, false).is_err());
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, 0.7]));
        let y = t.straight_through(x, Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 1.0]);
        let w = t.constant(Tensor::vector(vec![2.0, 3.0]));
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn permutation_routing_conserves_gradient_multiset(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..12),
            seed in any::<u64>(),
        ) {
            let n = vals.len();
            // Deterministic shuffle from the seed.
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(vals.clone()));
            let p = t.permute_apply(x, &perm).unwrap();
            let w = t.constant(Tensor::vector((0..n).map(|i| i as f64 + 0.5).collect()));
            let y = t.mul(p, w).unwrap();
            let s = t.sum(y);
            let g = t.backward(s).unwrap();
            let mut got: Vec<f64> = g.get(x).unwrap().data().to_vec();
            let mut want: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(vals));
            let y = t.softmax_rows(x).unwrap();
            let s: f64 = t.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(t.value(y).data().iter().all(|&v| v >= 0.0));
        }
    }
}
