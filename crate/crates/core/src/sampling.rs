//! Seeded noise for the two reparameterizations: Gumbel noise perturbing the
//! edge log-probabilities and Gaussian noise for the degree latent.
//!
//! Randomness is keyed, not sequential. An [`RngState`] is a 256-bit key;
//! [`RngState::derive`] hashes a label and index into a child key, and
//! [`RngState::stream`] opens a ChaCha8 stream on it. Noise for node `i` is
//! drawn from the stream keyed by node identity, so batching or relabeling
//! nodes never changes the noise a given node sees.

use std::ops::{Deref, DerefMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform draws are clamped into `[UNIFORM_EPS, 1 - UNIFORM_EPS]` before
/// the Gumbel double log.
pub const UNIFORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    key: [u8; 32],
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"dgg-rng");
        h.update(seed.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    /// Child state for a named subsystem; same parent, label and index always
    /// give the same child.
    pub fn derive(&self, label: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn stream(&self, index: u64) -> NoiseStream {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        NoiseStream { rng }
    }
}

/// A sequential source of uniform, Gumbel and Gaussian variates.
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    /// Position in 32-bit words from the start of the stream.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform on (0, 1), clamped away from both endpoints. Consumes one
    /// 64-bit word pair.
    pub fn uniform_open(&mut self) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    /// Standard Gumbel variate `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// The underlying generator, for shuffles and integer ranges.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform_tensor(&mut self, shape: &[usize]) -> Tensor {
        self.fill(shape, Self::uniform_open)
    }

    fn fill(&mut self, shape: &[usize], f: fn(&mut Self) -> f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| f(self)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

/// Gumbel(0, 1) samples in row-major order.
pub fn gumbel_noise(stream: &mut NoiseStream, shape: &[usize]) -> Tensor {
    stream.fill(shape, NoiseStream::gumbel)
}

/// Standard normal samples in row-major order.
pub fn gaussian_noise(stream: &mut NoiseStream, shape: &[usize]) -> Tensor {
    stream.fill(shape, NoiseStream::gaussian)
}

#[derive(Debug)]
struct Replay {
    draws: Vec<Tensor>,
    cursor: usize,
    recording: bool,
}

/// Noise provider for one forward pass of the generator.
///
/// Draws are keyed by `(seed, step, node identity)`. Inside a
/// [`freeze`](NoiseSource::freeze) scope the first evaluation is recorded
/// and later evaluations replay it, which is what finite-difference checks
/// need.
#[derive(Debug)]
pub struct NoiseSource {
    root: RngState,
    step: u64,
    replay: Option<Replay>,
}

impl NoiseSource {
    pub fn new(root: RngState) -> Self {
        Self {
            root,
            step: 0,
            replay: None,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(RngState::new(seed))
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self) -> bool {
        self.replay.is_some()
    }

    /// `[N×N]` Gumbel noise; entry `(i, j)` depends only on the identities
    /// `ids[i]`, `ids[j]`, the step and the seed.
    pub fn edge_gumbel(&mut self, ids: &[u64]) -> Result<Tensor> {
        let n = ids.len();
        let root = self.root.derive("edge-gumbel", self.step);
        self.draw(&[n, n], || {
            let width = ids.iter().max().map_or(0, |&m| m as usize + 1);
            let mut data = Vec::with_capacity(n * n);
            let mut row = vec![0.0; width];
            for &src in ids {
                let mut s = root.stream(src);
                row.iter_mut().for_each(|v| *v = s.gumbel());
                data.extend(ids.iter().map(|&dst| row[dst as usize]));
            }
            Tensor::new(vec![n, n], data).expect("n×n")
        })
    }

    /// One Gumbel variate per node, keyed by identity.
    pub fn node_gumbel(&mut self, ids: &[u64]) -> Result<Tensor> {
        let root = self.root.derive("node-gumbel", self.step);
        self.draw(&[ids.len()], || Tensor::vector(ids.iter().map(|&id| root.stream(id).gumbel()).collect()))
    }

    /// `[N×dim]` standard normal noise, row `i` keyed by `ids[i]`.
    pub fn node_gaussian(&mut self, ids: &[u64], dim: usize) -> Result<Tensor> {
        let root = self.root.derive("degree-gaussian", self.step);
        self.draw(&[ids.len(), dim], || {
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                let mut s = root.stream(id);
                data.extend((0..dim).map(|_| s.gaussian()));
            }
            Tensor::new(vec![ids.len(), dim], data).expect("n×dim")
        })
    }

    fn draw(&mut self, shape: &[usize], generate: impl FnOnce() -> Tensor) -> Result<Tensor> {
        match &mut self.replay {
            Some(r) if !r.recording => {
                let Some(t) = r.draws.get(r.cursor) else {
                    return Err(Error::NoiseReplay(format!(
                        "replay exhausted after {} draws; evaluations differ in structure",
                        r.draws.len()
                    )));
                };
                if t.shape() != shape {
                    return Err(Error::NoiseReplay(format!(
                        "draw {} recorded with shape {:?}, requested {:?}",
                        r.cursor,
                        t.shape(),
                        shape
                    )));
                }
                r.cursor += 1;
                Ok(t.clone())
            }
            Some(r) => {
                let t = generate();
                r.draws.push(t.clone());
                Ok(t)
            }
            None => Ok(generate()),
        }
    }

    /// Starts recording draws. Only one level of freezing is allowed.
    pub fn freeze(&mut self) -> Result<FrozenNoise<'_>> {
        if self.replay.is_some() {
            return Err(Error::NoiseReplay("noise is already frozen".into()));
        }
        self.replay = Some(Replay {
            draws: Vec::new(),
            cursor: 0,
            recording: true,
        });
        Ok(FrozenNoise { source: self })
    }
}

/// Guard returned by [`NoiseSource::freeze`]; unfreezes on drop.
pub struct FrozenNoise<'a> {
    source: &'a mut NoiseSource,
}

impl FrozenNoise<'_> {
    /// Ends recording (if still recording) and restarts replay from the
    /// first recorded draw.
    pub fn rewind(&mut self) {
        if let Some(r) = &mut self.source.replay {
            r.recording = false;
            r.cursor = 0;
        }
    }

    pub fn recorded(&self) -> usize {
        self.source.replay.as_ref().map_or(0, |r| r.draws.len())
    }
}

impl Deref for FrozenNoise<'_> {
    type Target = NoiseSource;

    fn deref(&self) -> &NoiseSource {
        self.source
    }
}

impl DerefMut for FrozenNoise<'_> {
    fn deref_mut(&mut self) -> &mut NoiseSource {
        self.source
    }
}

impl Drop for FrozenNoise<'_> {
    fn drop(&mut self) {
        self.source.replay = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn gumbel_mean_is_euler_gamma() {
        let mut s = RngState::new(11).stream(0);
        let t = gumbel_noise(&mut s, &[1_000_000]);
        assert!((t.mean() - EULER_GAMMA).abs() < 0.01, "mean {}", t.mean());
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngState::new(12).stream(0);
        let t = gaussian_noise(&mut s, &[1_000_000]);
        let m = t.mean();
        let var = t.std().powi(2);
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn fixed_seed_reproduces() {
        let a = gumbel_noise(&mut RngState::new(5).stream(3), &[10]);
        let b = gumbel_noise(&mut RngState::new(5).stream(3), &[10]);
        assert_eq!(a, b);
        let c = gumbel_noise(&mut RngState::new(5).stream(4), &[10]);
        assert_ne!(a, c);
        let g1 = gaussian_noise(&mut RngState::new(5).stream(3), &[3, 4]);
        let g2 = gaussian_noise(&mut RngState::new(5).stream(3), &[12]);
        assert_eq!(g1.shape(), &[3, 4]);
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn derived_streams_differ_by_label_and_index() {
        let r = RngState::new(1);
        assert_ne!(r.derive("a", 0), r.derive("b", 0));
        assert_ne!(r.derive("a", 0), r.derive("a", 1));
        assert_eq!(r.derive("a", 7), RngState::new(1).derive("a", 7));
    }

    #[test]
    fn never_infinite() {
        let mut s = RngState::new(13).stream(0);
        for _ in 0..10_000_000 {
            assert!(s.gumbel().is_finite());
        }
    }

    #[test]
    fn gumbel_passes_kolmogorov_smirnov() {
        let n = 100_000;
        let mut s = RngState::new(14).stream(0);
        let mut x: Vec<f64> = (0..n).map(|_| s.gumbel()).collect();
        x.sort_by(f64::total_cmp);
        let cdf = |v: f64| (-(-v).exp()).exp();
        let mut d: f64 = 0.0;
        for (i, &v) in x.iter().enumerate() {
            let f = cdf(v);
            d = d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // Asymptotic critical value at α = 0.001: sqrt(-ln(α/2) / 2) / sqrt(n).
        let crit = (-(0.001f64 / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt();
        assert!(d < crit, "D = {d}, critical {crit}");
    }

    #[test]
    fn edge_noise_keyed_by_identity() {
        let mut src = NoiseSource::from_seed(3);
        let full = src.edge_gumbel(&[0, 1, 2, 3]).unwrap();
        let sub = src.edge_gumbel(&[3, 1]).unwrap();
        assert_eq!(sub.at(0, 0), full.at(3, 3));
        assert_eq!(sub.at(0, 1), full.at(3, 1));
        assert_eq!(sub.at(1, 0), full.at(1, 3));
        src.set_step(1);
        assert_ne!(src.edge_gumbel(&[0, 1, 2, 3]).unwrap(), full);

        let g = src.node_gaussian(&[0, 1, 2], 4).unwrap();
        let g2 = src.node_gaussian(&[2], 4).unwrap();
        assert_eq!(g.row(2), g2.row(0));
    }

    #[test]
    fn freeze_replays_and_rejects_nesting() {
        let mut src = NoiseSource::from_seed(9);
        let mut frozen = src.freeze().unwrap();
        let a = frozen.edge_gumbel(&[0, 1, 2]).unwrap();
        let b = frozen.node_gaussian(&[0, 1, 2], 2).unwrap();
        assert_eq!(frozen.recorded(), 2);
        // Replay ignores the step: the recorded draws come back verbatim.
        frozen.set_step(99);
        frozen.rewind();
        assert_eq!(frozen.edge_gumbel(&[0, 1, 2]).unwrap(), a);
        assert_eq!(frozen.node_gaussian(&[0, 1, 2], 2).unwrap(), b);
        assert!(matches!(frozen.edge_gumbel(&[0, 1, 2]), Err(Error::NoiseReplay(_))));
        frozen.rewind();
        assert!(matches!(frozen.node_gaussian(&[0, 1, 2], 2), Err(Error::NoiseReplay(_))));
        assert!(matches!(frozen.freeze(), Err(Error::NoiseReplay(_))));
        drop(frozen);
        assert!(!src.is_frozen());
        assert!(src.freeze().is_ok());
    }
}
