//! Training loop, objectives, optimizer and the ablation driver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::GraphDataset;
use crate::dgg::{DegreeSource, Dgg, DggConfig, DggOutput, GumbelForm, SelectMode};
use crate::error::{Error, Result};
use crate::gcn::{accuracy, masked_cross_entropy, normalize_adjacency, Gcn, GcnConfig};
use crate::nn::{Bound, ParamStore};
use crate::sampling::{NoiseSource, RngState};
use crate::tensor::Tensor;

/// Keeps `log` finite at exactly 0 or 1 adjacency entries.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,

    pub tau: f64,
    pub lambda: f64,
    pub mode: SelectMode,
    pub symmetric: bool,
    pub binarize: bool,
    pub gumbel_form: GumbelForm,
    pub deterministic_edges: bool,
    pub deterministic_degree: bool,
    /// Initial degree-decoder bias (learned `k` starts near `1 + degree_init`).
    /// Unset means the dataset's mean out-degree, so the generator starts
    /// out keeping roughly every candidate edge.
    pub degree_init: Option<f64>,
    /// Bypasses the degree estimator with this `k` for every node.
    pub fixed_k: Option<usize>,
    /// Weight of the degree-latent KL term; 0 disables it.
    pub kl_weight: f64,
    pub candidates: Candidates,

    /// Initial weight of the intermediate adjacency loss.
    pub w0: f64,
    /// Epoch at which that weight reaches 0; `None` means `epochs / 2`.
    pub anneal_epochs: Option<usize>,

    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub scorer_hidden: Vec<usize>,
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub dropout: f64,

    /// Plain GCN on the dataset's own edges and raw features, no generator.
    pub baseline: bool,
}

/// Which edges the generator may select from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    /// The dataset's edges plus self-edges; the complete graph if the
    /// dataset has no edges.
    InputGraph,
    /// Every ordered pair, ignoring the dataset's edges.
    Complete,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            tau: 1.0,
            lambda: 1.0,
            mode: SelectMode::Soft,
            symmetric: false,
            binarize: false,
            gumbel_form: GumbelForm::Standard,
            deterministic_edges: false,
            deterministic_degree: false,
            degree_init: None,
            fixed_k: None,
            kl_weight: 0.0,
            candidates: Candidates::InputGraph,
            w0: 0.0,
            anneal_epochs: None,
            latent_dim: 32,
            encoder_hidden: Vec::new(),
            scorer_hidden: Vec::new(),
            hidden_dim: 64,
            gcn_layers: 2,
            dropout: 0.0,
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn anneal_horizon(&self) -> usize {
        self.anneal_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::arg(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam needs beta1, beta2 in [0, 1) and adam_eps > 0".into());
        }
        if !(self.w0 >= 0.0) {
            return fail(format!("w0 must be non-negative, got {}", self.w0));
        }
        if self.anneal_horizon() > self.epochs {
            return fail(format!(
                "anneal_epochs ({}) exceeds epochs ({})",
                self.anneal_horizon(),
                self.epochs
            ));
        }
        if !(self.kl_weight >= 0.0) {
            return fail("kl_weight must be non-negative".into());
        }
        if self.fixed_k == Some(0) {
            return fail("fixed_k must be at least 1".into());
        }
        if self.latent_dim == 0 || self.gcn_layers == 0 {
            return fail("latent_dim and gcn_layers must be positive".into());
        }
        self.dgg_config(1).validate()?;
        Ok(())
    }

    pub fn dgg_config(&self, input_dim: usize) -> DggConfig {
        DggConfig {
            input_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            scorer_hidden: self.scorer_hidden.clone(),
            tau: self.tau,
            lambda: self.lambda,
            mode: self.mode,
            symmetric: self.symmetric,
            binarize: self.binarize,
            deterministic_edges: self.deterministic_edges,
            deterministic_degree: self.deterministic_degree,
            degree_init: self.degree_init.unwrap_or(0.0),
            gumbel_form: self.gumbel_form,
        }
    }

    /// Copy with data-dependent defaults filled in.
    pub fn resolved(&self, data: &GraphDataset) -> Self {
        let mut c = self.clone();
        if c.degree_init.is_none() {
            let n = data.num_nodes().max(1);
            c.degree_init = Some(data.edges.len() as f64 / n as f64);
        }
        c
    }

    fn degree_source(&self) -> DegreeSource {
        self.fixed_k.map_or(DegreeSource::Learned, DegreeSource::Fixed)
    }
}

/// `w0 · max(0, 1 - epoch / horizon)`; 0 from `horizon` on.
pub fn anneal_weight(epoch: usize, w0: f64, horizon: usize) -> f64 {
    if epoch >= horizon {
        return 0.0;
    }
    w0 * (1.0 - epoch as f64 / horizon as f64)
}

/// Binary cross-entropy between `A_ij` and `[label_i == label_j]` over ordered
/// pairs `i != j` of training nodes, averaged. Entries are clamped to
/// `[ε, 1 - ε]` before the log; a clamped entry contributes no gradient.
pub fn intermediate_adjacency_loss(tape: &mut Tape, a: Var, labels: &[usize], train: &[usize]) -> Result<Var> {
    if train.len() < 2 {
        return Err(Error::arg("intermediate loss needs at least two labeled training nodes"));
    }
    let n = tape.shape(a)[0];
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for &i in train {
        for &j in train {
            if i != j {
                if labels[i] == labels[j] { &mut same } else { &mut diff }.push(i * n + j);
            }
        }
    }
    let pairs = (same.len() + diff.len()) as f64;
    let squash = |tape: &mut Tape, v: Var| tape.clamp(v, BCE_EPS, 1.0 - BCE_EPS);
    let mut terms = Vec::new();
    if !same.is_empty() {
        let s = tape.select(a, same)?;
        let s = squash(tape, s)?;
        let l = tape.log(s)?;
        terms.push(tape.sum(l));
    }
    if !diff.is_empty() {
        let d = tape.select(a, diff)?;
        let d = squash(tape, d)?;
        let neg = tape.neg(d)?;
        let comp = tape.add_scalar(neg, 1.0)?;
        let l = tape.log(comp)?;
        terms.push(tape.sum(l));
    }
    let mut total = terms[0];
    if let Some(&t) = terms.get(1) {
        total = tape.add(total, t)?;
    }
    tape.scale(total, -1.0 / pairs)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Rejects the whole step, leaving parameters untouched, if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::arg(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Generator plus backbone, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub dgg: Option<Dgg>,
    pub gcn: Gcn,
}

pub struct ForwardPass {
    pub logits: Var,
    pub adjacency: Var,
    pub dgg: Option<DggOutput>,
    /// GCN input features and normalized adjacency, kept so the backbone
    /// can be rerun without dropout on the same generated graph.
    pub gcn_input: Var,
    pub norm_adjacency: Var,
}

impl Model {
    pub fn new(config: &TrainConfig, feature_dim: usize, num_classes: usize, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let rng = RngState::new(config.seed).derive("init", 0);
        let dgg = if config.baseline {
            None
        } else {
            Some(Dgg::new(config.dgg_config(feature_dim), store, &rng)?)
        };
        let gcn_in = if config.baseline { feature_dim } else { config.latent_dim };
        let gcn = Gcn::new(
            GcnConfig {
                input_dim: gcn_in,
                hidden_dim: config.hidden_dim,
                num_classes,
                layers: config.gcn_layers,
                dropout: config.dropout,
            },
            store,
            &rng,
        )?;
        Ok(Self {
            config: config.clone(),
            dgg,
            gcn,
        })
    }

    /// Noise for the generator comes from `noise` at its current step;
    /// `training` turns dropout on.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        data: &GraphDataset,
        noise: &mut NoiseSource,
        training: bool,
    ) -> Result<ForwardPass> {
        let x = tape.constant(data.features.clone());
        let (h, adjacency, dgg_out) = match &self.dgg {
            None => (x, tape.constant(data.adjacency()), None),
            Some(dgg) => {
                let ids: Vec<u64> = (0..data.num_nodes() as u64).collect();
                let cand = self.uses_input_graph(data).then(|| data.adjacency());
                let source = self.config.degree_source();
                let out = dgg.forward(tape, params, x, &ids, noise, source, cand.as_ref())?;
                (out.latent, out.adjacency, Some(out))
            }
        };
        let norm = normalize_adjacency(tape, adjacency)?;
        let mut stream = RngState::new(self.config.seed)
            .derive("dropout", noise.step())
            .stream(0);
        let logits = self
            .gcn
            .forward(tape, params, h, norm, training.then_some(&mut stream))?;
        Ok(ForwardPass {
            logits,
            adjacency,
            dgg: dgg_out,
            gcn_input: h,
            norm_adjacency: norm,
        })
    }

    /// Backbone logits for `pass`'s graph with dropout off.
    pub fn inference_logits(&self, tape: &mut Tape, params: &Bound, pass: &ForwardPass) -> Result<Var> {
        self.gcn.forward(tape, params, pass.gcn_input, pass.norm_adjacency, None)
    }

    /// Whether the generator ranks only the dataset's edges (plus self-edges).
    pub fn uses_input_graph(&self, data: &GraphDataset) -> bool {
        self.config.candidates == Candidates::InputGraph && !data.edges.is_empty()
    }

    pub fn noise_source(&self) -> NoiseSource {
        NoiseSource::new(RngState::new(self.config.seed).derive("noise", 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Total objective that was minimized.
    pub train_loss: f64,
    pub classification_loss: f64,
    pub intermediate_loss: Option<f64>,
    pub intermediate_weight: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub k_mean: f64,
    pub k_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation accuracy (first on ties).
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    /// Test accuracy at `best_epoch`.
    pub test_acc: Option<f64>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc,k_mean,k_std\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_acc, r.k_mean, r.k_std));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    /// Final parameters.
    pub params: ParamStore,
    /// Parameters as they were at the start of `best_epoch`, i.e. the ones
    /// that produced its metrics.
    pub best_params: ParamStore,
}

fn mask_loss(tape: &mut Tape, logits: Var, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Ok(f64::NAN);
    }
    let l = masked_cross_entropy(tape, logits, labels, mask)?;
    tape.value(l).item()
}

fn mask_acc(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Ok(f64::NAN);
    }
    accuracy(logits, labels, mask)
}

/// Metrics of one forward pass; shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub val_loss: f64,
    pub k_mean: f64,
    pub k_std: f64,
    /// Generated (or input) adjacency.
    #[serde(skip)]
    pub adjacency: Option<Tensor>,
}

fn evaluate_pass(tape: &mut Tape, pass: &ForwardPass, logits: Var, data: &GraphDataset) -> Result<Evaluation> {
    let val_loss = mask_loss(tape, logits, &data.labels, &data.val_mask)?;
    let lv = tape.value(logits);
    let (k_mean, k_std) = pass.dgg.as_ref().map_or((0.0, 0.0), |d| (d.k_mean, d.k_std));
    Ok(Evaluation {
        train_acc: mask_acc(lv, &data.labels, &data.train_mask)?,
        val_acc: mask_acc(lv, &data.labels, &data.val_mask)?,
        test_acc: mask_acc(lv, &data.labels, &data.test_mask)?,
        val_loss,
        k_mean,
        k_std,
        adjacency: Some(tape.value(pass.adjacency).clone()),
    })
}

/// Inference pass at a given noise step, no dropout.
pub fn evaluate(model: &Model, params: &ParamStore, data: &GraphDataset, step: u64) -> Result<Evaluation> {
    check_dims(model, data)?;
    let mut noise = model.noise_source();
    noise.set_step(step);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let pass = model.forward(&mut tape, &bound, data, &mut noise, false)?;
    evaluate_pass(&mut tape, &pass, pass.logits, data)
}

fn check_dims(model: &Model, data: &GraphDataset) -> Result<()> {
    let want = model.dgg.as_ref().map_or(model.gcn.config.input_dim, |d| d.config.input_dim);
    if data.feature_dim() != want {
        return Err(Error::Validation(format!(
            "dataset has {} features, model expects {want}",
            data.feature_dim()
        )));
    }
    if data.num_classes != model.gcn.config.num_classes {
        return Err(Error::Validation(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes, model.gcn.config.num_classes
        )));
    }
    if let Some(k) = model.config.fixed_k {
        if k > data.num_nodes() {
            return Err(Error::arg(format!("fixed_k {k} exceeds {} nodes", data.num_nodes())));
        }
    }
    Ok(())
}

/// Loss terms of one training step.
pub struct Objective {
    pub total: Var,
    pub classification: Var,
    pub intermediate: Option<Var>,
    /// Annealed weight the intermediate term was scaled by.
    pub weight: f64,
}

/// Cross-entropy on the training mask, plus the annealed intermediate
/// adjacency loss and the degree KL term when they are switched on.
pub fn objective(model: &Model, tape: &mut Tape, pass: &ForwardPass, data: &GraphDataset, epoch: usize) -> Result<Objective> {
    let config = &model.config;
    let ce = masked_cross_entropy(tape, pass.logits, &data.labels, &data.train_mask)?;
    let mut total = ce;
    let weight = if model.dgg.is_some() { anneal_weight(epoch, config.w0, config.anneal_horizon()) } else { 0.0 };
    let mut inter = None;
    if weight > 0.0 {
        // A hard 0/1 adjacency gives the clamped BCE no gradient, so the
        // supervision goes to the relaxation straight-through differentiates.
        let target = pass.dgg.as_ref().map_or(pass.adjacency, |o| o.relaxed_adjacency);
        let il = intermediate_adjacency_loss(tape, target, &data.labels, &data.train_mask)?;
        inter = Some(il);
        let wl = tape.scale(il, weight)?;
        total = tape.add(total, wl)?;
    }
    if config.kl_weight > 0.0 {
        if let (Some(dgg), Some((mu, sigma))) = (&model.dgg, pass.dgg.as_ref().and_then(|o| o.degree_moments)) {
            let kl = dgg.kl_divergence(tape, mu, sigma)?;
            let kl = tape.scale(kl, config.kl_weight)?;
            total = tape.add(total, kl)?;
        }
    }
    Ok(Objective {
        total,
        classification: ce,
        intermediate: inter,
        weight,
    })
}

/// Full-batch training. Epoch `e` draws generator noise at step `e`; its
/// metrics come from the same forward pass that produced the gradient, so
/// they describe the parameters before that epoch's update.
pub fn train(data: &GraphDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    data.validate()?;
    let config = &config.resolved(data);
    if data.train_mask.is_empty() {
        return Err(Error::arg("training mask is empty"));
    }
    let start = Instant::now();
    let mut store = ParamStore::new();
    let model = Model::new(config, data.feature_dim(), data.num_classes, &mut store)?;
    check_dims(&model, data)?;
    let mut adam = Adam::new(&store, config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut noise = model.noise_source();

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut best_params = store.clone();

    for epoch in 0..config.epochs {
        noise.set_step(epoch as u64);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, data, &mut noise, true)?;
        let obj = objective(&model, &mut tape, &pass, data, epoch)?;
        let (total, ce, weight) = (obj.total, obj.classification, obj.weight);
        let inter = obj.intermediate.map(|v| tape.value(v).item()).transpose()?;
        let loss = tape.value(total).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }

        // Metrics need dropout-free logits; the generated graph is the same.
        let logits = if config.dropout > 0.0 {
            model.inference_logits(&mut tape, &bound, &pass)?
        } else {
            pass.logits
        };
        let eval = evaluate_pass(&mut tape, &pass, logits, data)?;
        if best.is_none_or(|(_, v, _)| eval.val_acc > v) {
            best = Some((epoch, eval.val_acc, eval.test_acc));
            best_params = store.clone();
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss,
            classification_loss: tape.value(ce).item()?,
            intermediate_loss: inter,
            intermediate_weight: weight,
            train_acc: eval.train_acc,
            val_loss: eval.val_loss,
            val_acc: eval.val_acc,
            test_acc: eval.test_acc,
            k_mean: eval.k_mean,
            k_std: eval.k_std,
        });

        let grads = tape.backward(total)?;
        let grads = bound.gradients(&grads, &store);
        adam.step(&mut store, &grads)?;
    }

    let report = TrainReport {
        config: config.clone(),
        epochs: records,
        best_epoch: best.map(|b| b.0),
        best_val_acc: best.map(|b| b.1),
        test_acc: best.map(|b| b.2),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        report,
        model,
        params: store,
        best_params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub k: Option<usize>,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub k: Option<usize>,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("variant,k,seed,accuracy\n");
        for r in &self.rows {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.variant, k, r.seed, r.accuracy));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,k,runs,mean,std\n");
        for r in &self.summary {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", r.variant, k, r.runs, r.mean, r.std));
        }
        s
    }

    pub fn mean(&self, variant: &str, k: Option<usize>) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant && s.k == k).map(|s| s.mean)
    }
}

/// The ablation variants for one seed: every fixed `k`, then deterministic
/// edge ranking, deterministic degree estimation and the full generator.
pub fn ablation_variants(base: &TrainConfig, ks: &[usize], seed: u64) -> Vec<(String, Option<usize>, TrainConfig)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.fixed_k = None;
    cfg.deterministic_edges = false;
    cfg.deterministic_degree = false;
    let mut out: Vec<_> = ks
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.fixed_k = Some(k);
            ("fixed_k".to_string(), Some(k), c)
        })
        .collect();
    let mut de = cfg.clone();
    de.deterministic_edges = true;
    out.push(("deterministic_edges".into(), None, de));
    let mut dd = cfg.clone();
    dd.deterministic_degree = true;
    out.push(("deterministic_degree".into(), None, dd));
    out.push(("full".into(), None, cfg));
    out
}

/// Runs every variant for every seed, in seed-major order, and reports
/// best-validation test accuracy per run plus per-variant means.
pub fn ablate(data: &GraphDataset, base: &TrainConfig, ks: &[usize], seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (variant, k, cfg) in ablation_variants(base, ks, seed) {
            let out = train(data, &cfg)?;
            rows.push(AblationRow {
                variant,
                k,
                seed,
                accuracy: out.report.test_acc.unwrap_or(f64::NAN),
            });
        }
    }
    let mut summary: Vec<AblationSummary> = Vec::new();
    for r in &rows {
        if summary.iter().any(|s| s.variant == r.variant && s.k == r.k) {
            continue;
        }
        let accs: Vec<f64> = rows
            .iter()
            .filter(|o| o.variant == r.variant && o.k == r.k)
            .map(|o| o.accuracy)
            .collect();
        let t = Tensor::vector(accs.clone());
        summary.push(AblationSummary {
            variant: r.variant.clone(),
            k: r.k,
            runs: accs.len(),
            mean: t.mean(),
            std: t.std(),
        });
    }
    Ok(AblationTable { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_weight(0, 0.5, 10), 0.5);
        assert_eq!(anneal_weight(10, 0.5, 10), 0.0);
        assert_eq!(anneal_weight(25, 0.5, 10), 0.0);
        assert_eq!(anneal_weight(5, 0.5, 10), 0.25);
        assert_eq!(anneal_weight(0, 0.5, 0), 0.0);
    }

    #[test]
    fn intermediate_loss_examples() {
        let labels = [0, 0, 1];
        let train = [0, 1, 2];
        let target = Tensor::from_rows(&[vec![0., 1., 0.], vec![1., 0., 0.], vec![0., 0., 0.]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(target);
        let l = intermediate_adjacency_loss(&mut tape, a, &labels, &train).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        let half = tape.constant(Tensor::full(&[3, 3], 0.5));
        let l = intermediate_adjacency_loss(&mut tape, half, &labels, &train).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(intermediate_adjacency_loss(&mut tape, half, &labels, &[0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_and_constant_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0, -2.0]);

        // With a constant gradient the bias-corrected step is lr·g/(|g| + eps).
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(&store, 0.01, 0.9, 0.999, 1e-8);
        for t in 1..=50 {
            let before = store.tensors()[0].data()[0];
            adam.step(&mut store, &[Tensor::vector(vec![3.0])]).unwrap();
            let delta = before - store.tensors()[0].data()[0];
            assert!((delta - 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-12, "step {t}: {delta}");
        }
    }

    #[test]
    fn adam_names_nan_parameter() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.0]));
        store.add("b.weight", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        let err = adam
            .step(&mut store, &[Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("b.weight"), "{err}");
        assert_eq!(store.tensors()[0].data(), &[0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.anneal_epochs = Some(301);
        assert!(c.validate().is_err());
        c.anneal_epochs = None;
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c.learning_rate = 0.01;
        c.w0 = -1.0;
        assert!(c.validate().is_err());
        c.w0 = 0.0;
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_variant_layout() {
        let v = ablation_variants(&TrainConfig::default(), &[1, 5, 10], 7);
        assert_eq!(v.len(), 6);
        let full = &v[5].2;
        let de = &v[3].2;
        assert_eq!(full.seed, 7);
        let mut diff = de.clone();
        diff.deterministic_edges = false;
        assert_eq!(&diff, full);
    }
}
