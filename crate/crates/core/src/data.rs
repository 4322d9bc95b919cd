//! Graph datasets: the JSON file format, a stochastic block model generator,
//! and edge-noise injection.
//!
//! The on-disk form is one JSON document:
//!
//! ```json
//! {"num_nodes":2,"num_classes":2,"features":[[0.5,1.0],[-1.0,0.0]],
//!  "edges":[[0,1]],"labels":[0,1],"train_mask":[0],"val_mask":[1],"test_mask":[]}
//! ```
//!
//! Masks are lists of node indices. [`save_dataset`] writes edges and masks
//! sorted, floats in shortest round-trip form and no whitespace, so saving
//! the same dataset twice gives identical bytes. Paths ending in `.gz` are
//! gzip-compressed.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub features: Tensor,
    /// Directed `(src, dst)` pairs, sorted, without duplicates or self-loops.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_mask: Vec<usize>,
    pub val_mask: Vec<usize>,
    pub test_mask: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    num_nodes: usize,
    num_classes: usize,
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    labels: Vec<usize>,
    train_mask: Vec<usize>,
    val_mask: Vec<usize>,
    test_mask: Vec<usize>,
}

impl GraphDataset {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Dense 0/1 adjacency of the input edges.
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_nodes();
        let mut a = Tensor::zeros(&[n, n]);
        for &(s, d) in &self.edges {
            a.data_mut()[s * n + d] = 1.0;
        }
        a
    }

    /// Sorts and deduplicates edges and masks and drops self-loops.
    pub fn canonicalize(&mut self) {
        self.edges.retain(|&(s, d)| s != d);
        self.edges.sort_unstable();
        self.edges.dedup();
        for m in [&mut self.train_mask, &mut self.val_mask, &mut self.test_mask] {
            m.sort_unstable();
            m.dedup();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        let bad = |msg: String| Err(Error::Validation(msg));
        if n == 0 {
            return bad("dataset has no nodes".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return bad(format!("features have shape {:?}, expected {n} rows", self.features.shape()));
        }
        if !self.features.is_finite() {
            return bad("features contain non-finite values".into());
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return bad(format!("label {l} of node {i} is not < num_classes ({})", self.num_classes));
        }
        if let Some(&(s, d)) = self.edges.iter().find(|&&(s, d)| s >= n || d >= n) {
            return bad(format!("edge ({s}, {d}) has an endpoint outside 0..{n}"));
        }
        let mut seen = vec![None; n];
        for (name, mask) in [("train_mask", &self.train_mask), ("val_mask", &self.val_mask), ("test_mask", &self.test_mask)] {
            for &i in mask {
                if i >= n {
                    return bad(format!("{name} index {i} outside 0..{n}"));
                }
                if let Some(prev) = seen[i] {
                    return bad(format!("node {i} appears in both {prev} and {name}; masks must be disjoint"));
                }
                seen[i] = Some(name);
            }
        }
        Ok(())
    }

    fn from_file(f: DatasetFile) -> Result<Self> {
        if f.features.len() != f.num_nodes {
            return Err(Error::Validation(format!(
                "{} feature rows for num_nodes = {}",
                f.features.len(),
                f.num_nodes
            )));
        }
        if f.labels.len() != f.num_nodes {
            return Err(Error::Validation(format!("{} labels for num_nodes = {}", f.labels.len(), f.num_nodes)));
        }
        let features = if f.num_nodes == 0 {
            Tensor::zeros(&[0, 0])
        } else {
            Tensor::from_rows(&f.features).map_err(|_| Error::Validation("feature rows have unequal lengths".into()))?
        };
        let mut d = GraphDataset {
            features,
            edges: f.edges.iter().map(|e| (e[0], e[1])).collect(),
            labels: f.labels,
            num_classes: f.num_classes,
            train_mask: f.train_mask,
            val_mask: f.val_mask,
            test_mask: f.test_mask,
        };
        d.validate()?;
        d.canonicalize();
        Ok(d)
    }

    fn to_file(&self) -> DatasetFile {
        DatasetFile {
            num_nodes: self.num_nodes(),
            num_classes: self.num_classes,
            features: (0..self.num_nodes()).map(|i| self.features.row(i).to_vec()).collect(),
            edges: self.edges.iter().map(|&(s, d)| [s, d]).collect(),
            labels: self.labels.clone(),
            train_mask: self.train_mask.clone(),
            val_mask: self.val_mask.clone(),
            test_mask: self.test_mask.clone(),
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<GraphDataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut text = String::new();
    if is_gz(path) {
        GzDecoder::new(file).read_to_string(&mut text)?;
    } else {
        BufReader::new(file).read_to_string(&mut text)?;
    }
    parse_dataset(&text).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        },
        other => other,
    })
}

pub fn parse_dataset(text: &str) -> Result<GraphDataset> {
    let f: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: "<string>".into(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    GraphDataset::from_file(f)
}

/// Canonical serialization (see the module docs).
pub fn dataset_to_string(d: &GraphDataset) -> Result<String> {
    d.validate()?;
    let mut c = d.clone();
    c.canonicalize();
    let mut s = serde_json::to_string(&c.to_file()).map_err(|e| Error::Validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_dataset(d: &GraphDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = dataset_to_string(d)?;
    let file = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(text.as_bytes())?;
        enc.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(text.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmSpec {
    pub nodes_per_class: usize,
    pub num_classes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Per-class intra-block probability overriding `p_intra`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_intra_per_class: Option<Vec<f64>>,
    pub feature_dim: usize,
    /// Class `c` has mean `separation` on every coordinate `j` with
    /// `j % num_classes == c` and 0 elsewhere.
    pub separation: f64,
    pub noise_std: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            nodes_per_class: 100,
            num_classes: 3,
            p_intra: 0.10,
            p_inter: 0.05,
            p_intra_per_class: None,
            feature_dim: 16,
            separation: 0.5,
            noise_std: 1.0,
            train_fraction: 0.1,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::arg(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        if self.nodes_per_class == 0 || self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::arg("nodes_per_class, num_classes and feature_dim must be positive"));
        }
        prob("p_intra", self.p_intra)?;
        prob("p_inter", self.p_inter)?;
        if let Some(ps) = &self.p_intra_per_class {
            if ps.len() != self.num_classes {
                return Err(Error::arg(format!(
                    "p_intra_per_class has {} entries for {} classes",
                    ps.len(),
                    self.num_classes
                )));
            }
            for &p in ps {
                prob("p_intra_per_class", p)?;
            }
        }
        if !(self.separation >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::arg("separation and noise_std must be non-negative"));
        }
        prob("train_fraction", self.train_fraction)?;
        prob("val_fraction", self.val_fraction)?;
        if self.train_fraction + self.val_fraction > 1.0 {
            return Err(Error::arg("train_fraction + val_fraction exceeds 1"));
        }
        Ok(())
    }

    fn intra(&self, c: usize) -> f64 {
        self.p_intra_per_class.as_ref().map_or(self.p_intra, |ps| ps[c])
    }
}

/// Undirected SBM (each sampled pair is stored in both directions) with
/// Gaussian class-clustered features and class-stratified masks.
pub fn generate_sbm(spec: &SbmSpec) -> Result<GraphDataset> {
    spec.validate()?;
    let (m, c, d) = (spec.nodes_per_class, spec.num_classes, spec.feature_dim);
    let n = m * c;
    let root = RngState::new(spec.seed).derive("sbm", 0);
    let labels: Vec<usize> = (0..n).map(|i| i / m).collect();

    let mut edge_rng = root.derive("edges", 0).stream(0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { spec.intra(labels[i]) } else { spec.p_inter };
            if edge_rng.uniform_open() < p {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }

    let mut feat_rng = root.derive("features", 0).stream(0);
    let mut x = Vec::with_capacity(n * d);
    for &l in &labels {
        for j in 0..d {
            let mean = if j % c == l { spec.separation } else { 0.0 };
            x.push(mean + spec.noise_std * feat_rng.gaussian());
        }
    }

    let mut mask_rng = root.derive("masks", 0).stream(0);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..c {
        let mut members: Vec<usize> = (class * m..(class + 1) * m).collect();
        members.shuffle(mask_rng.rng());
        let nt = (spec.train_fraction * m as f64).round() as usize;
        let nv = ((spec.val_fraction * m as f64).round() as usize).min(m - nt);
        train.extend_from_slice(&members[..nt]);
        val.extend_from_slice(&members[nt..nt + nv]);
        test.extend_from_slice(&members[nt + nv..]);
    }

    let mut ds = GraphDataset {
        features: Tensor::new(vec![n, d], x)?,
        edges,
        labels,
        num_classes: c,
        train_mask: train,
        val_mask: val,
        test_mask: test,
    };
    ds.canonicalize();
    Ok(ds)
}

/// Adds `⌈fraction·|E|⌉` directed edges drawn uniformly from the non-edges
/// (self-loops excluded). Existing edges are kept.
pub fn inject_edge_noise(d: &GraphDataset, fraction: f64, seed: u64) -> Result<GraphDataset> {
    if !(fraction >= 0.0) {
        return Err(Error::arg(format!("noise fraction must be non-negative, got {fraction}")));
    }
    let n = d.num_nodes();
    let capacity = n * n.saturating_sub(1);
    let existing: BTreeSet<(usize, usize)> = d.edges.iter().copied().collect();
    if existing.len() >= capacity {
        return Err(Error::arg("graph is already complete; no edges can be added"));
    }
    let want = (fraction * existing.len() as f64).ceil() as usize;
    let free = capacity - existing.len();
    if want > free {
        return Err(Error::arg(format!("cannot add {want} edges, only {free} non-edges exist")));
    }
    let mut rng = RngState::new(seed).derive("edge-noise", 0).stream(0);
    let mut all = existing.clone();
    let mut added = 0;
    while added < want {
        let s = rng.rng().random_range(0..n);
        let t = rng.rng().random_range(0..n);
        if s != t && all.insert((s, t)) {
            added += 1;
        }
    }
    let mut out = d.clone();
    out.edges = all.into_iter().collect();
    Ok(out)
}
