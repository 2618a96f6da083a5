//! Patch tokens: a mini-PointNet embedding per patch plus sinusoidal
//! positional encodings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{norm, patchify, sub, PatchSet, Point3, PointCloud};
use crate::losses::PatchTargets;
use crate::nn::{Linear, Mlp};

/// Widths of the two point-wise MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerWidths {
    /// Hidden and output width of the first MLP.
    pub first: [usize; 2],
    /// Hidden width of the second MLP (its input is twice `first[1]`).
    pub second_hidden: usize,
}

impl Default for TokenizerWidths {
    fn default() -> Self {
        Self { first: [64, 128], second_hidden: 256 }
    }
}

/// Mini-PointNet: MLP, max-pool, concatenate the pooled feature back onto
/// every point, MLP, max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedder {
    pub first: Mlp,
    pub second: Mlp,
    pub feature_dim: usize,
    pub dim: usize,
}

impl PatchEmbedder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        widths: TokenizerWidths,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let [h1, h2] = widths.first;
        let first = Mlp::new(store, &format!("{name}.first"), &[feature_dim, h1, h2], rng);
        let second = Mlp::new(store, &format!("{name}.second"), &[2 * h2, widths.second_hidden, dim], rng);
        Self { first, second, feature_dim, dim }
    }

    /// `features` is `[patches * k, feature_dim]`; returns `[patches, dim]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, features: Var, k: usize) -> Result<Var> {
        let (_, f) = g.value(features).dims2()?;
        if f != self.feature_dim {
            return Err(invalid(format!("patch features have width {f}, tokenizer expects {}", self.feature_dim)));
        }
        let local = self.first.forward(g, store, features)?;
        let pooled = g.group_max(local, k)?;
        let spread = g.repeat_rows(pooled, k)?;
        let joined = g.concat_cols(&[local, spread])?;
        let h = self.second.forward(g, store, joined)?;
        g.group_max(h, k)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        p
    }
}

/// Sinusoidal encoding of 3-D coordinates, `dim / 3` channels per axis.
///
/// Each axis block holds `dim / 6` sines followed by the matching cosines,
/// with wavelengths spaced geometrically from 2 to 2·10⁴.
pub fn positional_encoding(points: &[Point3], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 6 != 0 {
        return Err(Error::Config(format!("token width {dim} must be a positive multiple of 6")));
    }
    let freqs = dim / 6;
    let omegas: Vec<f64> = (0..freqs)
        .map(|f| {
            let exponent = if freqs > 1 { 4.0 * f as f64 / (freqs - 1) as f64 } else { 0.0 };
            std::f64::consts::TAU / (2.0 * 10f64.powf(exponent))
        })
        .collect();
    let mut out = Vec::with_capacity(points.len() * dim);
    for p in points {
        for &c in p {
            out.extend(omegas.iter().map(|w| (w * c).sin()));
            out.extend(omegas.iter().map(|w| (w * c).cos()));
        }
    }
    Tensor::matrix(points.len(), dim, out)
}

/// Inputs to the relative-direction encoding of a Morton-ordered centroid
/// list: the first centroid itself, then unit steps between neighbours
/// (zero for coincident neighbours).
pub fn relative_directions(sorted: &[Point3]) -> Vec<Point3> {
    let mut out = Vec::with_capacity(sorted.len());
    if let Some(&first) = sorted.first() {
        out.push(first);
    }
    for w in sorted.windows(2) {
        let d = sub(w[1], w[0]);
        let n = norm(d);
        out.push(if n > 0.0 { [d[0] / n, d[1] / n, d[2] / n] } else { [0.0; 3] });
    }
    out
}

/// Learned projection of the sinusoidal relative-direction features.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeDirectionEncoder {
    pub proj: Linear,
    pub dim: usize,
}

impl RelativeDirectionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng), dim }
    }

    /// `[n, dim]` encodings for each sequence of sorted centroids, stacked.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, sequences: &[&[Point3]]) -> Result<Var> {
        let dirs: Vec<Point3> = sequences.iter().flat_map(|s| relative_directions(s)).collect();
        let phi = g.constant(positional_encoding(&dirs, self.dim)?);
        self.proj.forward(g, store, phi)
    }
}

/// Morton-ordered patches for a batch of clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub patches: Vec<PatchSet>,
    pub k: usize,
    pub feature_dim: usize,
}

impl PatchBatch {
    /// Patchifies each cloud with its own FPS seed.
    pub fn from_clouds(clouds: &[&PointCloud], n: usize, k: usize, seeds: &[u64]) -> Result<Self> {
        if clouds.is_empty() {
            return Err(invalid("empty batch"));
        }
        if seeds.len() != clouds.len() {
            return Err(invalid("one seed per cloud required"));
        }
        let patches = clouds
            .iter()
            .zip(seeds)
            .map(|(c, &s)| patchify(c, n, k, s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_patches(patches)
    }

    pub fn from_patches(patches: Vec<PatchSet>) -> Result<Self> {
        let first = patches.first().ok_or_else(|| invalid("empty batch"))?;
        let (k, feature_dim) = (first.k, first.feature_dim());
        if patches.iter().any(|p| p.k != k || p.feature_dim() != feature_dim) {
            return Err(invalid("patch sets in a batch must share k and feature width"));
        }
        if patches.iter().any(|p| p.num_patches() == 0) {
            return Err(invalid("a cloud produced no patches"));
        }
        Ok(Self { patches, k, feature_dim })
    }

    pub fn batch_size(&self) -> usize {
        self.patches.len()
    }

    pub fn n_real(&self) -> Vec<usize> {
        self.patches.iter().map(PatchSet::num_patches).collect()
    }

    pub fn max_real(&self) -> usize {
        self.n_real().into_iter().max().unwrap_or(0)
    }

    pub fn total_patches(&self) -> usize {
        self.n_real().iter().sum()
    }

    /// `[total_patches * k, feature_dim]` point features.
    pub fn features(&self) -> Tensor {
        let data: Vec<f64> = self.patches.iter().flat_map(|p| p.features()).collect();
        Tensor::matrix(self.total_patches() * self.k, self.feature_dim, data).expect("consistent sizes")
    }

    /// Ground truth for reconstruction, in the same patch order.
    pub fn targets(&self) -> PatchTargets {
        PatchTargets {
            positions: self.patches.iter().flat_map(|p| p.positions.iter().copied()).collect(),
            colors: (self.feature_dim == 6)
                .then(|| self.patches.iter().flat_map(|p| p.colors.iter().flatten().copied()).collect()),
            k: self.k,
        }
    }

    pub fn centroids(&self) -> Vec<&[Point3]> {
        self.patches.iter().map(|p| p.centroids.as_slice()).collect()
    }
}

/// Padded token sequences for a batch.
///
/// Row `b * seq_len + i` is token `i` of sequence `b`; rows with
/// `i >= n_real[b]` are padding and carry the learned padding embedding.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    /// Unpadded real tokens, `[total_patches, dim]`.
    pub real: Var,
    pub seq_len: usize,
    pub n_real: Vec<usize>,
    /// Morton-ordered centroids per sequence.
    pub centroids: Vec<Vec<Point3>>,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.n_real.len()
    }

    pub fn is_padding(&self, b: usize, i: usize) -> bool {
        i >= self.n_real[b]
    }

    /// Centroids per row of `tokens`, `(0, 0, 0)` for padding.
    pub fn padded_centroids(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.batch_size() * self.seq_len);
        for c in &self.centroids {
            out.extend_from_slice(c);
            out.extend(std::iter::repeat_n([0.0; 3], self.seq_len - c.len()));
        }
        out
    }
}

/// Patch embedder plus the learned padding token.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub embedder: PatchEmbedder,
    pub padding: ParamId,
}

impl Tokenizer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        widths: TokenizerWidths,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let embedder = PatchEmbedder::new(store, "tokenizer", feature_dim, widths, dim, rng);
        let padding = store.add("tokenizer.padding", Tensor::zeros(vec![1, dim]));
        Self { embedder, padding }
    }

    /// Embeds every patch and packs the tokens, padding each sequence to the
    /// longest one plus `extra_padding` slots.
    pub fn tokenize(&self, g: &mut Graph, store: &ParamStore, batch: &PatchBatch, extra_padding: usize) -> Result<TokenBatch> {
        let features = g.constant(batch.features());
        let real = self.embedder.embed(g, store, features, batch.k)?;
        self.pack(g, store, real, batch, extra_padding)
    }

    /// Packs precomputed real tokens (`[total_patches, dim]`).
    pub fn pack(&self, g: &mut Graph, store: &ParamStore, real: Var, batch: &PatchBatch, extra_padding: usize) -> Result<TokenBatch> {
        let n_real = batch.n_real();
        let total: usize = n_real.iter().sum();
        if g.value(real).dims2()?.0 != total {
            return Err(invalid("real token count does not match the batch"));
        }
        let seq_len = batch.max_real() + extra_padding;
        let pad = g.param(store, self.padding);
        let pool = g.concat_rows(&[real, pad])?;
        let mut index = Vec::with_capacity(n_real.len() * seq_len);
        let mut offset = 0;
        for &n in &n_real {
            index.extend(offset..offset + n);
            index.extend(std::iter::repeat_n(total, seq_len - n));
            offset += n;
        }
        let tokens = g.gather_rows(pool, &index)?;
        Ok(TokenBatch {
            tokens,
            real,
            seq_len,
            n_real,
            centroids: batch.patches.iter().map(|p| p.centroids.clone()).collect(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.embedder.params();
        p.push(self.padding);
        p
    }
}
