//! The differentiable graph generator.
//!
//! Given node features `X [N×d]` the generator emits an adjacency
//! `A [N×N]` with entries in `[0, 1]`, together with the latent features
//! `X̂ [N×d']` it computed along the way. The pipeline:
//!
//! 1. **Node encoding**: `X̂ = encoder(X)`.
//! 2. **Edge ranking**: local edge embeddings `c_ij = tanh(x̂_i W_src + x̂_j W_dst + b)`
//!    over the complete graph (self-edges included), refined by a mean over
//!    adjacent edges in the line graph, scored into probabilities
//!    `p_ij ∈ (0, 1)` and relaxed with Gumbel-Softmax into row-stochastic
//!    edge samples `e_i`.
//! 3. **Degree estimation**: `z_i = μ(x̂_i) + ε_i σ(x̂_i)`, decoded to
//!    `k_i = clamp(D(z_i) + ‖e_i‖₁, 0, N)`.
//! 4. **Top-k selection**: each row of `e` is sorted, multiplied by a
//!    tanh-smoothed step whose inflection sits at rank `k_i`, and unsorted.
//!
//! In straight-through mode the forward value uses the hard step while the
//! gradient follows the smooth one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{argsort_descending, invert_permutation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::sampling::{NoiseSource, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Smoothed gate in both passes.
    Soft,
    /// Hard step forward, smoothed gate's gradient backward.
    StraightThrough,
}

/// How the Gumbel perturbation enters the edge softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GumbelForm {
    /// `softmax_j((log p_ij + g_ij) / τ)` with independent noise per edge.
    Standard,
    /// `softmax_j(log p_ij + g_i + τ)` with one noise value per node. Both
    /// the noise and τ are row constants here, so they cancel in the
    /// softmax; kept only for comparison runs.
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DggConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Hidden widths of the node encoder; empty means a single affine layer.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the edge scorer before its sigmoid head.
    pub scorer_hidden: Vec<usize>,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Gate temperature.
    pub lambda: f64,
    pub mode: SelectMode,
    pub symmetric: bool,
    /// In straight-through mode, emit 1 instead of `e_ij` at selected positions.
    pub binarize: bool,
    /// Replace the Gumbel noise with zeros.
    pub deterministic_edges: bool,
    /// Replace the degree noise ε with zeros.
    pub deterministic_degree: bool,
    /// Initial bias of the degree decoder, so training starts near
    /// `k = 1 + degree_init`.
    pub degree_init: f64,
    pub gumbel_form: GumbelForm,
}

impl DggConfig {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            encoder_hidden: Vec::new(),
            scorer_hidden: Vec::new(),
            tau: 1.0,
            lambda: 1.0,
            mode: SelectMode::Soft,
            symmetric: false,
            binarize: false,
            deterministic_edges: false,
            deterministic_degree: false,
            degree_init: 0.0,
            gumbel_form: GumbelForm::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::arg("generator dimensions must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::arg(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.degree_init.is_finite() {
            return Err(Error::arg("degree_init must be finite"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::arg(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Where the per-node degree comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegreeSource {
    Learned,
    /// Degree estimator bypassed; every node uses this `k`.
    Fixed(usize),
}

/// Learnable weights of the generator.
#[derive(Clone, Debug)]
pub struct Dgg {
    pub config: DggConfig,
    pub encoder: Mlp,
    pub edge_src: ParamId,
    pub edge_dst: ParamId,
    pub edge_bias: ParamId,
    pub refine_self: ParamId,
    pub refine_diff: ParamId,
    pub refine_bias: ParamId,
    pub scorer: Mlp,
    pub degree_mean: Linear,
    pub degree_spread: Linear,
    pub degree_decoder: Linear,
}

#[derive(Clone, Debug)]
pub struct DggOutput {
    pub adjacency: Var,
    /// Soft top-k adjacency that straight-through mode backpropagates
    /// through; the same `Var` as `adjacency` in soft mode.
    pub relaxed_adjacency: Var,
    pub latent: Var,
    pub degrees: Var,
    pub edge_samples: Var,
    pub edge_probs: Var,
    /// `(μ, σ)` of the degree latent; `None` when the degree is fixed.
    pub degree_moments: Option<(Var, Var)>,
    pub k_mean: f64,
    pub k_std: f64,
}

/// Line-graph neighborhoods of the complete directed graph on `n` nodes,
/// self-loops included. Edge `(i, j)` has index `i * n + j`; two distinct
/// edges are neighbors iff they share an endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjointStructure {
    pub n: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl AdjointStructure {
    pub fn is_adjacent(&self, e: usize, f: usize) -> bool {
        self.neighbors.get(e).is_some_and(|nb| nb.binary_search(&f).is_ok())
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }
}

/// Builds the neighborhoods directly from endpoints: the neighbors of
/// `(i, j)` are the out- and in-edges of `i` and `j`, minus `(i, j)`.
/// Empty for `n < 2`.
pub fn adjoint_neighbors(n: usize) -> AdjointStructure {
    if n < 2 {
        return AdjointStructure {
            n,
            neighbors: Vec::new(),
        };
    }
    let mut neighbors = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut nb = Vec::new();
            for &v in &[i, j] {
                for w in 0..n {
                    nb.push(v * n + w);
                    nb.push(w * n + v);
                }
            }
            nb.sort_unstable();
            nb.dedup();
            nb.retain(|&f| f != i * n + j);
            neighbors.push(nb);
        }
    }
    AdjointStructure { n, neighbors }
}

impl Dgg {
    pub fn new(config: DggConfig, store: &mut ParamStore, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let (d, dl) = (config.input_dim, config.latent_dim);
        let rng = rng.derive("dgg", 0);

        let mut enc_dims = vec![d];
        enc_dims.extend(&config.encoder_hidden);
        enc_dims.push(dl);
        let encoder = Mlp::new(store, "dgg.encoder", &enc_dims, Activation::Tanh, &rng);

        // The 2d'→d' local edge layer, split into the halves acting on x̂_i and x̂_j.
        let edge_src = store.add_glorot("dgg.edge.w_src", dl, dl, &rng);
        let edge_dst = store.add_glorot("dgg.edge.w_dst", dl, dl, &rng);
        let edge_bias = store.add("dgg.edge.bias", Tensor::zeros(&[dl]));

        // Affine 2d'→d' refinement on [ĉ ∥ ĉ - ĉ_neighbor].
        let refine_self = store.add_glorot("dgg.refine.w_self", dl, dl, &rng);
        let refine_diff = store.add_glorot("dgg.refine.w_diff", dl, dl, &rng);
        let refine_bias = store.add("dgg.refine.bias", Tensor::zeros(&[dl]));

        let mut sc_dims = vec![dl];
        sc_dims.extend(&config.scorer_hidden);
        sc_dims.push(1);
        let scorer = Mlp::new(store, "dgg.scorer", &sc_dims, Activation::Tanh, &rng);

        let degree_mean = Linear::new(store, "dgg.degree.mean", dl, dl, &rng);
        let degree_spread = Linear::new(store, "dgg.degree.spread", dl, dl, &rng);
        let degree_decoder = Linear::new(store, "dgg.degree.decoder", dl, 1, &rng);
        *store.get_mut(degree_decoder.bias) = Tensor::vector(vec![config.degree_init]);

        Ok(Self {
            config,
            encoder,
            edge_src,
            edge_dst,
            edge_bias,
            refine_self,
            refine_diff,
            refine_bias,
            scorer,
            degree_mean,
            degree_spread,
            degree_decoder,
        })
    }

    /// `X̂ = encoder(X)`.
    pub fn node_encode(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.input_dim || shape[0] == 0 {
            return Err(Error::dim("node_encode", shape, &[0, self.config.input_dim]));
        }
        self.encoder.forward(tape, params, x)
    }

    /// Complete-graph edge embeddings `[N²×d']`, row `i*N + j` for edge `(i, j)`.
    pub fn local_edge_embed(&self, tape: &mut Tape, params: &Bound, latent: Var) -> Result<Var> {
        let src = tape.matmul(latent, params.var(self.edge_src))?;
        let src = tape.add_bias(src, params.var(self.edge_bias))?;
        let dst = tape.matmul(latent, params.var(self.edge_dst))?;
        let pre = tape.pair_add(src, dst)?;
        tape.tanh(pre)
    }

    /// Mean over line-graph neighbors of `h(ĉ_e ∥ ĉ_e - ĉ_f)`. With `h` affine
    /// the mean moves inside: `h(ĉ_e ∥ ĉ_e - mean_f ĉ_f)`.
    pub fn edge_refine(&self, tape: &mut Tape, params: &Bound, edges: Var, n: usize) -> Result<Var> {
        let neighbor_mean = tape.adjoint_mean(edges, n)?;
        let diff = tape.sub(edges, neighbor_mean)?;
        let a = tape.matmul(edges, params.var(self.refine_self))?;
        let b = tape.matmul(diff, params.var(self.refine_diff))?;
        let sum = tape.add(a, b)?;
        tape.add_bias(sum, params.var(self.refine_bias))
    }

    /// `p_ij = sigmoid(scorer(ĉ'_ij))`, shape `[N×N]`.
    pub fn edge_probabilities(&self, tape: &mut Tape, params: &Bound, refined: Var, n: usize) -> Result<Var> {
        let scores = self.scorer.forward(tape, params, refined)?;
        let scores = tape.reshape(scores, &[n, n])?;
        tape.sigmoid(scores)
    }

    /// Reparameterized degree latent `z = μ + ε σ`; returns `(z, μ, σ)`.
    /// `eps = None` means ε = 0.
    pub fn degree_encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        latent: Var,
        eps: Option<Tensor>,
    ) -> Result<(Var, Var, Var)> {
        let mu = self.degree_mean.forward(tape, params, latent)?;
        let pre = self.degree_spread.forward(tape, params, latent)?;
        let sigma = tape.softplus(pre)?;
        let z = match eps {
            Some(eps) => {
                let eps = tape.constant(eps);
                let noise = tape.mul(eps, sigma)?;
                tape.add(mu, noise)?
            }
            None => mu,
        };
        Ok((z, mu, sigma))
    }

    /// `k_i = clamp(D(z_i) + ‖e_i‖₁, 0, N)`.
    pub fn degree_decode(&self, tape: &mut Tape, params: &Bound, z: Var, edge_samples: Var) -> Result<Var> {
        let n = tape.shape(edge_samples)[0];
        let offset = self.degree_decoder.forward(tape, params, z)?;
        let offset = tape.reshape(offset, &[n])?;
        let base = tape.l1_norm_rows(edge_samples);
        let k = tape.add(offset, base)?;
        tape.clamp(k, 0.0, n as f64)
    }

    /// KL divergence of `N(μ, σ²)` from `N(0, 1)`, averaged over nodes.
    pub fn kl_divergence(&self, tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
        // 0.5 Σ (μ² + σ² - 1 - 2 ln σ)
        let n = tape.shape(mu)[0] as f64;
        let mu2 = tape.mul(mu, mu)?;
        let s2 = tape.mul(sigma, sigma)?;
        let ls = tape.log(sigma)?;
        let ls2 = tape.scale(ls, 2.0)?;
        let t = tape.add(mu2, s2)?;
        let t = tape.sub(t, ls2)?;
        let t = tape.add_scalar(t, -1.0)?;
        let s = tape.sum(t);
        tape.scale(s, 0.5 / n)
    }

    /// Full generator pass. `ids` are stable node identities keying the noise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        features: Var,
        ids: &[u64],
        noise: &mut NoiseSource,
        degree: DegreeSource,
        candidates: Option<&Tensor>,
    ) -> Result<DggOutput> {
        let cfg = &self.config;
        let n = tape.shape(features).first().copied().unwrap_or(0);
        if ids.len() != n {
            return Err(Error::arg(format!("{} node ids for {n} nodes", ids.len())));
        }
        if let Some(c) = candidates {
            if c.shape() != [n, n] {
                return Err(Error::dim("candidates", c.shape(), &[n, n]));
            }
        }
        if let DegreeSource::Fixed(k) = degree {
            if k == 0 || k > n {
                return Err(Error::arg(format!("fixed degree {k} outside 1..={n}")));
            }
        }

        let latent = self.node_encode(tape, params, features)?;
        let edges = self.local_edge_embed(tape, params, latent)?;
        let refined = self.edge_refine(tape, params, edges, n)?;
        let probs = self.edge_probabilities(tape, params, refined, n)?;

        let edge_samples = match cfg.gumbel_form {
            GumbelForm::Standard => {
                let g = if cfg.deterministic_edges {
                    None
                } else {
                    Some(noise.edge_gumbel(ids)?)
                };
                gumbel_edge_samples(tape, probs, cfg.tau, g, candidates)?
            }
            GumbelForm::Printed => {
                let g = if cfg.deterministic_edges {
                    Tensor::zeros(&[n])
                } else {
                    noise.node_gumbel(ids)?
                };
                gumbel_edge_samples_printed(tape, probs, cfg.tau, &g, candidates)?
            }
        };

        let (degrees, moments) = match degree {
            DegreeSource::Learned => {
                let eps = if cfg.deterministic_degree {
                    None
                } else {
                    Some(noise.node_gaussian(ids, cfg.latent_dim)?)
                };
                let (z, mu, sigma) = self.degree_encode(tape, params, latent, eps)?;
                (self.degree_decode(tape, params, z, edge_samples)?, Some((mu, sigma)))
            }
            DegreeSource::Fixed(k) => (tape.constant(Tensor::full(&[n], k as f64)), None),
        };

        let (mut adjacency, mut relaxed) =
            topk_select_relaxed(tape, edge_samples, degrees, cfg.lambda, cfg.mode, cfg.binarize)?;
        if cfg.symmetric {
            let same = adjacency == relaxed;
            adjacency = symmetrize(tape, adjacency)?;
            relaxed = if same { adjacency } else { symmetrize(tape, relaxed)? };
        }

        let kv = tape.value(degrees);
        Ok(DggOutput {
            adjacency,
            relaxed_adjacency: relaxed,
            latent,
            degrees,
            edge_samples,
            edge_probs: probs,
            degree_moments: moments,
            k_mean: kv.mean(),
            k_std: kv.std(),
        })
    }

    /// Ablation path: same pipeline with the degree estimator removed and
    /// `k_i = k` for every node.
    pub fn fixed_k_bypass(
        &self,
        tape: &mut Tape,
        params: &Bound,
        features: Var,
        ids: &[u64],
        noise: &mut NoiseSource,
        k: usize,
        candidates: Option<&Tensor>,
    ) -> Result<DggOutput> {
        self.forward(tape, params, features, ids, noise, DegreeSource::Fixed(k), candidates)
    }
}

/// Logit offset that removes a non-candidate edge from the row softmax.
const EXCLUDED: f64 = -1e30;

/// Constant `0` at candidate edges (nonzero entries and the diagonal) and a
/// huge negative offset elsewhere.
pub fn candidate_offsets(candidates: &Tensor) -> Tensor {
    let n = candidates.rows();
    let mut out = candidates.map(|v| if v != 0.0 { 0.0 } else { EXCLUDED });
    for i in 0..n {
        out.data_mut()[i * n + i] = 0.0;
    }
    out
}

fn exclude(tape: &mut Tape, logits: Var, candidates: Option<&Tensor>) -> Result<Var> {
    match candidates {
        Some(c) => {
            let off = tape.constant(candidate_offsets(c));
            tape.add(logits, off)
        }
        None => Ok(logits),
    }
}

/// Gumbel-Softmax edge samples `e_ij = softmax_j((log p_ij + g_ij) / τ)`.
/// `noise = None` is the noise-free relaxation. The noise is a constant.
/// With `candidates`, the softmax runs over each row's candidate edges
/// (plus the self-edge) and every other `e_ij` is exactly 0.
pub fn gumbel_edge_samples(
    tape: &mut Tape,
    probs: Var,
    tau: f64,
    noise: Option<Tensor>,
    candidates: Option<&Tensor>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let logp = tape.log(probs)?;
    let perturbed = match noise {
        Some(g) => {
            let g = tape.constant(g);
            tape.add(logp, g)?
        }
        None => logp,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    let scaled = exclude(tape, scaled, candidates)?;
    tape.softmax_rows(scaled)
}

/// `e_ij = softmax_j(log p_ij + g_i + τ)`, with one noise value per row.
pub fn gumbel_edge_samples_printed(
    tape: &mut Tape,
    probs: Var,
    tau: f64,
    node_noise: &Tensor,
    candidates: Option<&Tensor>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(probs).to_vec();
    let n = shape[0];
    let cols = shape[1];
    if node_noise.len() != n {
        return Err(Error::dim("gumbel_edge_samples_printed", &shape, node_noise.shape()));
    }
    let shift: Vec<f64> = (0..n)
        .flat_map(|i| std::iter::repeat_n(node_noise.data()[i] + tau, cols))
        .collect();
    let logp = tape.log(probs)?;
    let shift = tape.constant(Tensor::new(shape, shift)?);
    let y = tape.add(logp, shift)?;
    let y = exclude(tape, y, candidates)?;
    tape.softmax_rows(y)
}

/// Smoothed-step gate rows `h[i][d-1] = 1 - 0.5 (1 + tanh((d - k_i) / λ))`
/// for ranks `d = 1..=width`.
pub fn smooth_heaviside_gate(tape: &mut Tape, k: Var, width: usize, lambda: f64) -> Result<Var> {
    tape.heaviside_gate(k, width, lambda, false)
}

/// Top-k edge selection: `a_i = unsort(sort_desc(e_i) ⊙ gate(k_i))`.
///
/// `Soft` uses the smooth gate throughout. `StraightThrough` outputs the
/// hard-step result (positions with rank ≤ k_i keep `e_ij`, or 1 with
/// `binarize`; the rest are exactly 0) and backpropagates through the soft
/// result.
pub fn topk_select(
    tape: &mut Tape,
    edge_samples: Var,
    degrees: Var,
    lambda: f64,
    mode: SelectMode,
    binarize: bool,
) -> Result<Var> {
    Ok(topk_select_relaxed(tape, edge_samples, degrees, lambda, mode, binarize)?.0)
}

/// [`topk_select`] that also returns the soft result (the same `Var` in
/// `Soft` mode).
pub fn topk_select_relaxed(
    tape: &mut Tape,
    edge_samples: Var,
    degrees: Var,
    lambda: f64,
    mode: SelectMode,
    binarize: bool,
) -> Result<(Var, Var)> {
    let ev = tape.value(edge_samples);
    let (rows, width) = (ev.rows(), ev.cols());
    if tape.value(degrees).len() != rows {
        return Err(Error::dim("topk_select", ev.shape(), tape.shape(degrees)));
    }
    let perms: Vec<Vec<usize>> = (0..rows).map(|i| argsort_descending(ev.row(i))).collect();
    let inverse: Vec<Vec<usize>> = perms.iter().map(|p| invert_permutation(p)).collect();

    let sorted = tape.permute_rows(edge_samples, perms)?;
    let gate = smooth_heaviside_gate(tape, degrees, width, lambda)?;
    let gate = tape.reshape(gate, tape.shape(sorted).to_vec().as_slice())?;
    let gated = tape.mul(sorted, gate)?;
    let soft = tape.permute_rows(gated, inverse.clone())?;
    if mode == SelectMode::Soft {
        return Ok((soft, soft));
    }

    let sv = tape.value(sorted);
    let kv = tape.value(degrees).data();
    let mut hard = vec![0.0; rows * width];
    for i in 0..rows {
        for (d, &src) in inverse[i].iter().enumerate() {
            // `inverse[i][d]` is the sorted position (0-based rank) of column d.
            let rank = (src + 1) as f64;
            let v = sv.data()[i * width + src];
            // Excluded candidates carry exactly 0 and stay 0 even when binarized.
            if rank <= kv[i] && v > 0.0 {
                hard[i * width + d] = if binarize { 1.0 } else { v };
            }
        }
    }
    let hard = Tensor::new(tape.shape(soft).to_vec(), hard)?;
    Ok((tape.straight_through(soft, hard)?, soft))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(tape: &mut Tape, a: Var) -> Result<Var> {
    let t = tape.transpose(a)?;
    let s = tape.add(a, t)?;
    tape.scale(s, 0.5)
}
