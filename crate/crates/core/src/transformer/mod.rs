//! Shared transformer encoder with an unmasked RL mode and a masked
//! reconstruction mode, plus the reconstruction decoder, sequence pooling
//! and state fusion.
//!
//! In reconstruction mode each sequence gets a start-of-sequence slot at
//! position 0 and inputs are shifted right by one: position `p` carries the
//! previous token (the start token for `p = 1`) plus the relative direction
//! to patch `p`, and its output predicts patch `p`.

mod block;
mod mask;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use block::{Block, Stack};
pub use mask::{build_decoder_mask, build_encoder_mask, hidden_columns, AttentionMask};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::{aux_loss_graph, AuxBreakdown};
use crate::nn::Linear;
use crate::tokenizer::{positional_encoding, PatchBatch, RelativeDirectionEncoder, TokenBatch, Tokenizer, TokenizerWidths};

/// Model hyperparameters shared by tokenizer, encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Patches per cloud (`n`).
    pub patches: usize,
    /// Points per patch (`k`).
    pub patch_size: usize,
    /// Token width (`D`).
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub decoder_layers: usize,
    pub ff_mult: usize,
    /// Fraction of eligible tokens hidden during reconstruction.
    pub mask_ratio: f64,
    /// Leading fraction of tokens never hidden.
    pub prefix_fraction: f64,
    /// Feed RGB alongside xyz.
    pub color: bool,
    pub tokenizer: TokenizerWidths,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patches: 32,
            patch_size: 32,
            dim: 96,
            heads: 4,
            layers: 3,
            decoder_layers: 1,
            ff_mult: 4,
            mask_ratio: 0.3,
            prefix_fraction: 0.15,
            color: false,
            tokenizer: TokenizerWidths::default(),
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        if self.color { 6 } else { 3 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patches == 0 || self.patch_size == 0 {
            return bad("patches and patch_size must be positive".into());
        }
        if self.dim == 0 || self.dim % 6 != 0 {
            return bad(format!("dim {} must be a positive multiple of 6", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return bad("layers and ff_mult must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.prefix_fraction) {
            return bad("mask_ratio and prefix_fraction must lie in [0, 1]".into());
        }
        let [a, b] = self.tokenizer.first;
        if a == 0 || b == 0 || self.tokenizer.second_hidden == 0 {
            return bad("tokenizer widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Rl,
    Reconstruction,
}

/// Encoder result. `tokens` has `seq_len` rows per sequence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub tokens: Var,
    pub pooled: Option<Var>,
    /// Pooling weights `[batch, seq_len]`, present in RL mode.
    pub weights: Option<Var>,
    pub seq_len: usize,
    pub n_real: Vec<usize>,
    pub mode: EncodeMode,
}

impl EncoderOutput {
    pub fn is_padding(&self, b: usize, i: usize) -> bool {
        match self.mode {
            EncodeMode::Rl => i >= self.n_real[b],
            EncodeMode::Reconstruction => i > self.n_real[b],
        }
    }
}

/// Attention-weighted sum of tokens with one learned logit per token.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePool {
    pub score: Linear,
}

impl SequencePool {
    /// Returns `([batch, dim] pooled, [batch, seq] weights)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, n_real: &[usize]) -> Result<(Var, Var)> {
        let batch = n_real.len();
        let (rows, dim) = g.value(tokens).dims2()?;
        if batch == 0 || rows % batch != 0 {
            return Err(invalid("pool: token rows not divisible by batch"));
        }
        let seq = rows / batch;
        if n_real.iter().any(|&n| n == 0 || n > seq) {
            return Err(invalid("pool: every sequence needs between 1 and seq_len real tokens"));
        }
        let keep: Rc<[bool]> = n_real.iter().flat_map(|&n| (0..seq).map(move |i| i < n)).collect();
        let logits = self.score.forward(g, store, tokens)?;
        let logits = g.reshape(logits, vec![batch, seq])?;
        let weights = g.masked_softmax(logits, keep)?;
        let w3 = g.reshape(weights, vec![batch, 1, seq])?;
        let t3 = g.reshape(tokens, vec![batch, seq, dim])?;
        let pooled = g.bmm(w3, t3)?;
        Ok((g.reshape(pooled, vec![batch, dim])?, weights))
    }
}

/// Projects the low-dimensional state to the token width and appends it.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFusion {
    pub proj: Linear,
}

impl StateFusion {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: Var, state: Option<Var>) -> Result<Var> {
        match state {
            None => Ok(pooled),
            Some(s) => {
                let p = self.proj.forward(g, store, s)?;
                g.concat_cols(&[pooled, p])
            }
        }
    }
}

/// Tokenizer, encoder, pooling, state fusion and reconstruction decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPatchEncoder {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub encoder: Stack,
    pub pool: SequencePool,
    pub fusion: Option<StateFusion>,
    pub sos: ParamId,
    pub encoder_rel: RelativeDirectionEncoder,
    pub decoder: Stack,
    pub decoder_rel: RelativeDirectionEncoder,
    pub head: Linear,
}

impl PointPatchEncoder {
    /// `state_dim = 0` disables state fusion.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, state_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.dim;
        let tokenizer = Tokenizer::new(store, c.feature_dim(), c.tokenizer, d, rng);
        let encoder = Stack::new(store, "encoder", c.layers, d, c.heads, c.ff_mult, rng);
        let pool = SequencePool { score: Linear::new(store, "pool.score", d, 1, rng) };
        let fusion = (state_dim > 0).then(|| StateFusion { proj: Linear::new(store, "fusion.proj", state_dim, d, rng) });
        let sos = store.add("sos", Tensor::zeros(vec![1, d]));
        let encoder_rel = RelativeDirectionEncoder::new(store, "encoder_rel", d, rng);
        let decoder = Stack::new(store, "decoder", c.decoder_layers, d, c.heads, c.ff_mult, rng);
        let decoder_rel = RelativeDirectionEncoder::new(store, "decoder_rel", d, rng);
        let head = Linear::new(store, "head", d, c.patch_size * c.feature_dim(), rng);
        Ok(Self { config: c.clone(), tokenizer, encoder, pool, fusion, sos, encoder_rel, decoder, decoder_rel, head })
    }

    /// Width of the fused embedding.
    pub fn embedding_dim(&self) -> usize {
        self.config.dim * if self.fusion.is_some() { 2 } else { 1 }
    }

    /// Parameters trained through the critic (and the reconstruction loss).
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut p = self.tokenizer.params();
        p.extend(self.encoder.params());
        p.extend(self.pool.score.params());
        if let Some(f) = &self.fusion {
            p.extend(f.proj.params());
        }
        p.push(self.sos);
        p.extend(self.encoder_rel.proj.params());
        p
    }

    /// Parameters used only for reconstruction.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut p = self.decoder.params();
        p.extend(self.decoder_rel.proj.params());
        p.extend(self.head.params());
        p
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder_params();
        p.extend(self.decoder_params());
        p
    }

    /// Runs the encoder stack. Reconstruction mode needs one decoder mask
    /// per sequence of size `seq_len + 1`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &TokenBatch,
        mode: EncodeMode,
        masks: Option<&[AttentionMask]>,
    ) -> Result<EncoderOutput> {
        let batch = tokens.batch_size();
        match mode {
            EncodeMode::Rl => {
                let seq = tokens.seq_len;
                let pe = g.constant(positional_encoding(&tokens.padded_centroids(), self.config.dim)?);
                let x = g.add(tokens.tokens, pe)?;
                let mask: Rc<[bool]> = tokens
                    .n_real
                    .iter()
                    .flat_map(|&n| build_encoder_mask(n, seq - n).as_slice().to_vec())
                    .collect();
                let out = self.encoder.forward(g, store, x, batch, &mask)?;
                let (pooled, weights) = self.pool.forward(g, store, out, &tokens.n_real)?;
                Ok(EncoderOutput {
                    tokens: out,
                    pooled: Some(pooled),
                    weights: Some(weights),
                    seq_len: seq,
                    n_real: tokens.n_real.clone(),
                    mode,
                })
            }
            EncodeMode::Reconstruction => {
                let masks = masks.ok_or_else(|| invalid("reconstruction mode requires decoder masks"))?;
                let mask = stack_masks(masks, tokens)?;
                let seq = tokens.seq_len + 1;
                let content = self.shifted_content(g, store, tokens)?;
                let rel = self.relative(g, store, &self.encoder_rel, tokens)?;
                let x = g.add(content, rel)?;
                let out = self.encoder.forward(g, store, x, batch, &mask)?;
                Ok(EncoderOutput { tokens: out, pooled: None, weights: None, seq_len: seq, n_real: tokens.n_real.clone(), mode })
            }
        }
    }

    /// Decodes a reconstruction-mode encoding into patch predictions
    /// `[total_patches * k, feature_dim]` in centroid-relative coordinates.
    pub fn decode_and_predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: &EncoderOutput,
        tokens: &TokenBatch,
        masks: &[AttentionMask],
    ) -> Result<Var> {
        if encoded.mode != EncodeMode::Reconstruction {
            return Err(invalid("decoding needs a reconstruction-mode encoding"));
        }
        let mask = stack_masks(masks, tokens)?;
        let rel = self.relative(g, store, &self.decoder_rel, tokens)?;
        let y = g.add(encoded.tokens, rel)?;
        let y = self.decoder.forward(g, store, y, tokens.batch_size(), &mask)?;
        let seq = encoded.seq_len;
        let rows: Vec<usize> =
            encoded.n_real.iter().enumerate().flat_map(|(b, &n)| (1..=n).map(move |p| b * seq + p)).collect();
        let real = g.gather_rows(y, &rows)?;
        let pred = self.head.forward(g, store, real)?;
        let f = self.config.feature_dim();
        g.reshape(pred, vec![rows.len() * self.config.patch_size, f])
    }

    /// Tokenize, encode without masking, pool and fuse the state.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &PatchBatch, state: Option<Var>) -> Result<Var> {
        let tokens = self.tokenizer.tokenize(g, store, batch, 0)?;
        self.embed_tokens(g, store, &tokens, state)
    }

    /// [`Self::embed`] on already tokenized input.
    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenBatch, state: Option<Var>) -> Result<Var> {
        let out = self.encode(g, store, tokens, EncodeMode::Rl, None)?;
        let pooled = out.pooled.expect("rl mode pools");
        match (&self.fusion, state) {
            (Some(f), s) => f.forward(g, store, pooled, s),
            (None, None) => Ok(pooled),
            (None, Some(_)) => Err(invalid("model was built without state fusion")),
        }
    }

    /// One decoder mask per sequence, seeded from `rng`.
    pub fn sample_masks<R: Rng + ?Sized>(&self, n_real: &[usize], seq_len: usize, rng: &mut R) -> Result<Vec<AttentionMask>> {
        n_real
            .iter()
            .map(|&n| build_decoder_mask(n, seq_len - n, self.config.mask_ratio, self.config.prefix_fraction, rng.random()))
            .collect()
    }

    /// Masked reconstruction of every patch; returns the predictions.
    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenBatch, masks: &[AttentionMask]) -> Result<Var> {
        let out = self.encode(g, store, tokens, EncodeMode::Reconstruction, Some(masks))?;
        self.decode_and_predict(g, store, &out, tokens, masks)
    }

    /// Chamfer (plus color when enabled) reconstruction loss with freshly
    /// sampled masks. `tokens` must come from `batch`.
    pub fn reconstruction_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &TokenBatch,
        batch: &PatchBatch,
        rng: &mut R,
    ) -> Result<(Var, AuxBreakdown)> {
        let masks = self.sample_masks(&tokens.n_real, tokens.seq_len, rng)?;
        let pred = self.reconstruct(g, store, tokens, &masks)?;
        let color = self.config.color.then_some(1.0);
        aux_loss_graph(g, pred, self.config.patch_size, &batch.targets(), color)
    }

    fn shifted_content(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenBatch) -> Result<Var> {
        let total: usize = tokens.n_real.iter().sum();
        let sos = g.param(store, self.sos);
        let pad = g.param(store, self.tokenizer.padding);
        let pool = g.concat_rows(&[tokens.real, sos, pad])?;
        let seq = tokens.seq_len + 1;
        let mut index = Vec::with_capacity(tokens.batch_size() * seq);
        let mut offset = 0;
        for &n in &tokens.n_real {
            index.extend((0..seq).map(|p| match p {
                0 | 1 => total,
                p if p <= n => offset + p - 2,
                _ => total + 1,
            }));
            offset += n;
        }
        g.gather_rows(pool, &index)
    }

    fn relative(&self, g: &mut Graph, store: &ParamStore, enc: &RelativeDirectionEncoder, tokens: &TokenBatch) -> Result<Var> {
        let seqs: Vec<&[_]> = tokens.centroids.iter().map(Vec::as_slice).collect();
        let rel = enc.encode(g, store, &seqs)?;
        let total = g.value(rel).dims2()?.0;
        let zero = g.constant(Tensor::zeros(vec![1, self.config.dim]));
        let pool = g.concat_rows(&[rel, zero])?;
        let seq = tokens.seq_len + 1;
        let mut index = Vec::with_capacity(tokens.batch_size() * seq);
        let mut offset = 0;
        for &n in &tokens.n_real {
            index.extend((0..seq).map(|p| if (1..=n).contains(&p) { offset + p - 1 } else { total }));
            offset += n;
        }
        g.gather_rows(pool, &index)
    }
}

fn stack_masks(masks: &[AttentionMask], tokens: &TokenBatch) -> Result<Rc<[bool]>> {
    if masks.len() != tokens.batch_size() {
        return Err(invalid(format!("{} masks for {} sequences", masks.len(), tokens.batch_size())));
    }
    if masks.iter().any(|m| m.size() != tokens.seq_len + 1) {
        return Err(invalid(format!("decoder masks must be {0}×{0}", tokens.seq_len + 1)));
    }
    Ok(masks.iter().flat_map(|m| m.as_slice().iter().copied()).collect())
}
