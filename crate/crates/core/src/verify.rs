//! Finite-difference verification suite: every primitive adjoint, then the
//! full generator → GCN → loss composite on small random graphs.

use rand::Rng;

use crate::autodiff::{check_gradient, finite_difference_check, FdConfig, FdReport, OpKind, Tape, Var};
use crate::data::GraphDataset;
use crate::dgg::SelectMode;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::sampling::RngState;
use crate::tensor::Tensor;
use crate::train::{objective, Model, TrainConfig};

/// Relative-error threshold for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Threshold for the composite loss, where round-off accumulates over many ops.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckLine {
    fn from_report(name: impl Into<String>, report: &FdReport, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_error: report.max_rel_error,
            checked: report.checked,
            tolerance,
            passed: report.passed(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub nodes: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub graphs: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            nodes: 10,
            feature_dim: 6,
            latent_dim: 8,
            graphs: 5,
            seed: 0,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let w = t.constant(Tensor::new(t.shape(y).to_vec(), (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn unary(f: fn(&mut Tape, Var) -> Result<Var>) -> Build {
    Box::new(move |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y)
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Build {
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y)
    })
}

/// One check per primitive, at points away from kinks and sort ties.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = RngState::new(seed).derive("gradcheck", 0).stream(0);
    let r = rng.rng();
    // Signed values bounded away from zero.
    let signed = |r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        uniform(r, shape, 0.1, 1.5).map(|v| if v > 0.8 { v } else { -v })
    };
    let a = uniform(r, &[2, 3], -1.0, 1.0);
    let b = uniform(r, &[2, 3], 0.5, 2.0);
    let x = signed(r, &[2, 4]);
    let pos = uniform(r, &[2, 4], 0.2, 2.0);
    let sq = uniform(r, &[3, 3], -1.0, 1.0);
    let p = uniform(r, &[3, 2], -1.0, 1.0);
    let q = uniform(r, &[3, 2], -1.0, 1.0);
    let c = uniform(r, &[16, 3], -1.0, 1.0);
    let rows = uniform(r, &[2], 0.5, 1.5);
    let cols = uniform(r, &[3], 0.5, 1.5);

    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![sq.clone(), p.clone()], binary(|t, x, y| t.matmul(x, y))),
        ("add", vec![a.clone(), b.clone()], binary(|t, x, y| t.add(x, y))),
        ("sub", vec![a.clone(), b.clone()], binary(|t, x, y| t.sub(x, y))),
        ("mul", vec![a.clone(), b.clone()], binary(|t, x, y| t.mul(x, y))),
        ("div", vec![a.clone(), b.clone()], binary(|t, x, y| t.div(x, y))),
        ("exp", vec![x.clone()], unary(|t, v| t.exp(v))),
        ("log", vec![pos.clone()], unary(|t, v| t.log(v))),
        ("tanh", vec![x.clone()], unary(|t, v| t.tanh(v))),
        ("relu", vec![x.clone()], unary(|t, v| t.relu(v))),
        ("neg", vec![x.clone()], unary(|t, v| t.neg(v))),
        ("scale", vec![x.clone()], unary(|t, v| t.scale(v, -2.5))),
        ("add_scalar", vec![x.clone()], unary(|t, v| t.add_scalar(v, 0.7))),
        ("sigmoid", vec![x.clone()], unary(|t, v| t.sigmoid(v))),
        ("softplus", vec![x.clone()], unary(|t, v| t.softplus(v))),
        ("abs", vec![x.clone()], unary(|t, v| t.abs(v))),
        ("clamp", vec![x.clone()], unary(|t, v| t.clamp(v, -1.2, 1.0))),
        ("pow", vec![pos.clone()], unary(|t, v| t.pow(v, -0.5))),
        ("softmax_rows", vec![x.clone()], unary(|t, v| t.softmax_rows(v))),
        ("log_softmax_rows", vec![x.clone()], unary(|t, v| t.log_softmax_rows(v))),
        ("sum", vec![x.clone()], Box::new(|t: &mut Tape, v: &[Var]| Ok(t.sum(v[0])))),
        ("mean", vec![x.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))),
        ("sum_rows", vec![x.clone()], unary(|t, v| Ok(t.sum_rows(v)))),
        ("l1_norm_rows", vec![x.clone()], unary(|t, v| Ok(t.l1_norm_rows(v)))),
        ("concat", vec![a.clone(), b.clone()], binary(|t, x, y| t.concat(x, y, 1))),
        ("transpose", vec![a.clone()], unary(|t, v| t.transpose(v))),
        ("reshape", vec![a.clone()], unary(|t, v| t.reshape(v, &[3, 2]))),
        ("select", vec![a.clone()], unary(|t, v| t.select(v, vec![5, 0, 0, 3]))),
        (
            "permute_rows",
            vec![a.clone()],
            unary(|t, v| t.permute_rows(v, vec![vec![2, 0, 1], vec![1, 2, 0]])),
        ),
        ("pair_add", vec![p, q], binary(|t, x, y| t.pair_add(x, y))),
        ("adjoint_mean", vec![c], unary(|t, v| t.adjoint_mean(v, 4))),
        ("scale_rows", vec![a.clone(), rows], binary(|t, x, y| t.scale_rows(x, y))),
        ("scale_cols", vec![a.clone(), cols.clone()], binary(|t, x, y| t.scale_cols(x, y))),
        ("add_bias", vec![a, cols], binary(|t, x, y| t.add_bias(x, y))),
        (
            "heaviside_gate",
            vec![Tensor::vector(vec![1.3, 2.7, 0.4])],
            unary(|t, v| t.heaviside_gate(v, 5, 1.0, false)),
        ),
    ];

    let fd = FdConfig::with_tolerance(PRIMITIVE_TOLERANCE);
    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let report = check_gradient(&inputs, build, &fd)?;
            Ok(CheckLine::from_report(name, &report, PRIMITIVE_TOLERANCE))
        })
        .collect()
}

/// Random labeled graph with edge density 0.3 and every node in the training mask.
pub fn random_graph(nodes: usize, feature_dim: usize, classes: usize, seed: u64) -> Result<GraphDataset> {
    let mut s = RngState::new(seed).derive("random-graph", 0).stream(0);
    let r = s.rng();
    let features = uniform(r, &[nodes, feature_dim], -1.0, 1.0);
    let mut edges = Vec::new();
    for i in 0..nodes {
        for j in 0..nodes {
            if i != j && r.random_bool(0.3) {
                edges.push((i, j));
            }
        }
    }
    let labels: Vec<usize> = (0..nodes).map(|i| i % classes).collect();
    let mut d = GraphDataset {
        features,
        edges,
        labels,
        num_classes: classes,
        train_mask: (0..nodes).collect(),
        val_mask: Vec::new(),
        test_mask: Vec::new(),
    };
    d.canonicalize();
    d.validate()?;
    Ok(d)
}

/// Config used for the composite check: soft selection, learned degrees,
/// intermediate loss and KL switched on, no dropout.
pub fn composite_config(latent_dim: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        mode: SelectMode::Soft,
        lambda: 0.5,
        latent_dim,
        encoder_hidden: vec![8],
        scorer_hidden: vec![8],
        hidden_dim: 8,
        w0: 0.5,
        kl_weight: 0.1,
        dropout: 0.0,
        ..TrainConfig::default()
    }
}

/// Analytic gradient of the epoch-0 training objective against central
/// differences over every parameter, with the generator's noise frozen.
pub fn composite_gradcheck(data: &GraphDataset, config: &TrainConfig, fd: &FdConfig) -> Result<FdReport> {
    if config.dropout > 0.0 {
        return Err(Error::arg("composite gradient check needs dropout = 0"));
    }
    let mut store = ParamStore::new();
    let model = Model::new(config, data.feature_dim(), data.num_classes, &mut store)?;
    let mut noise = model.noise_source();
    let mut frozen = noise.freeze()?;

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let pass = model.forward(&mut tape, &bound, data, &mut frozen, true)?;
    let obj = objective(&model, &mut tape, &pass, data, 0)?;
    let grads = tape.backward(obj.total)?;
    let analytic = bound.gradients(&grads, &store);

    let mut inputs = store.tensors().to_vec();
    finite_difference_check(
        &mut inputs,
        &analytic,
        |xs| {
            frozen.rewind();
            let mut s = store.clone();
            s.tensors_mut().clone_from_slice(xs);
            let mut tape = Tape::new();
            let bound = s.bind(&mut tape);
            let pass = model.forward(&mut tape, &bound, data, &mut frozen, true)?;
            let obj = objective(&model, &mut tape, &pass, data, 0)?;
            tape.value(obj.total).item()
        },
        fd,
    )
}

/// Primitive checks followed by one composite line per random graph.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckLine>> {
    let mut lines = primitive_checks(opts.seed)?;
    let fd = FdConfig::with_tolerance(COMPOSITE_TOLERANCE);
    for g in 0..opts.graphs {
        let seed = opts.seed + g as u64;
        let data = random_graph(opts.nodes, opts.feature_dim, 3, seed)?;
        let config = composite_config(opts.latent_dim, seed);
        let report = composite_gradcheck(&data, &config, &fd)?;
        lines.push(CheckLine::from_report(format!("composite[graph {g}]"), &report, COMPOSITE_TOLERANCE));
    }
    Ok(lines)
}

/// Operation kinds accepted for adjoint fault injection, by the names the
/// primitive checks report.
pub fn fault_kind(name: &str) -> Option<OpKind> {
    use OpKind::*;
    let kind = match name {
        "matmul" => MatMul,
        "add" => Add,
        "sub" => Sub,
        "mul" => Mul,
        "div" => Div,
        "exp" => Exp,
        "log" => Log,
        "tanh" => Tanh,
        "relu" => Relu,
        "neg" => Neg,
        "scale" => Scale,
        "add_scalar" => AddScalar,
        "sigmoid" => Sigmoid,
        "softplus" => Softplus,
        "abs" => Abs,
        "clamp" => Clamp,
        "pow" => Pow,
        "softmax_rows" => SoftmaxRows,
        "log_softmax_rows" => LogSoftmaxRows,
        "sum" => Sum,
        "mean" => Mean,
        "sum_rows" => SumRows,
        "l1_norm_rows" => L1NormRows,
        "concat" => Concat,
        "permute_rows" => PermuteRows,
        "transpose" => Transpose,
        "reshape" => Reshape,
        "pair_add" => PairAdd,
        "adjoint_mean" => AdjointMean,
        "scale_rows" => ScaleRows,
        "scale_cols" => ScaleCols,
        "add_bias" => AddBias,
        "select" => Select,
        "heaviside_gate" => HeavisideGate,
        "straight_through" => StraightThrough,
        _ => return None,
    };
    Some(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_names() {
        assert_eq!(fault_kind("matmul"), Some(OpKind::MatMul));
        assert_eq!(fault_kind("mat_mul"), None);
        assert_eq!(fault_kind("l1_norm_rows"), Some(OpKind::L1NormRows));
        for line in primitive_checks(0).unwrap() {
            assert!(fault_kind(&line.name).is_some(), "{}", line.name);
        }
    }

    #[test]
    fn primitives_pass() {
        for line in primitive_checks(3).unwrap() {
            assert!(line.passed, "{line:?}");
        }
    }
}
