//! Attention-mask properties, causality of the reconstruction path, and
//! inertness of padding tokens.

use pprl::autodiff::{Graph, ParamStore, Tensor};
use pprl::geometry::{patchify, PointCloud};
use pprl::losses::aux_loss_graph;
use pprl::rng::{seeded, StdRng};
use pprl::tokenizer::{PatchBatch, TokenizerWidths};
use pprl::transformer::{build_decoder_mask, hidden_columns, AttentionMask, EncodeMode, EncoderConfig, PointPatchEncoder};
use rand::Rng;

use super::Outcome;

pub const CAUSAL_TOLERANCE: f64 = 1e-6;
pub const PADDING_TOLERANCE: f64 = 1e-6;

fn tiny_config(color: bool) -> EncoderConfig {
    EncoderConfig {
        patches: 12,
        patch_size: 4,
        dim: 12,
        heads: 2,
        layers: 2,
        decoder_layers: 1,
        color,
        tokenizer: TokenizerWidths { first: [8, 8], second_hidden: 8 },
        ..EncoderConfig::default()
    }
}

fn random_cloud(rng: &mut StdRng, m: usize, color: bool) -> PointCloud {
    let pts = (0..m).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
    if color {
        let cols = (0..m).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..1.0))).collect();
        PointCloud::with_colors(pts, cols).unwrap()
    } else {
        PointCloud::new(pts)
    }
}

/// A batch of 1-3 clouds with different patch counts, so padding occurs.
fn random_batch(rng: &mut StdRng, color: bool) -> PatchBatch {
    let b = rng.random_range(1..=3);
    let patches = (0..b)
        .map(|_| {
            let cloud = random_cloud(rng, 40, color);
            patchify(&cloud, rng.random_range(1..=12), 4, rng.random()).unwrap()
        })
        .collect();
    PatchBatch::from_patches(patches).unwrap()
}

/// Model with every parameter (including SOS and padding) randomized.
fn random_model(rng: &mut StdRng, color: bool) -> (PointPatchEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let model = PointPatchEncoder::new(&mut store, &tiny_config(color), 0, rng).unwrap();
    for id in [model.sos, model.tokenizer.padding] {
        let len = store.get(id).len();
        *store.get_mut(id) = Tensor::matrix(1, len, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    }
    (model, store)
}

/// Structural checks on one decoder mask; returns a description of the
/// first violation.
pub fn check_mask_structure(n_real: usize, n_pad: usize, m: f64, prefix: f64, seed: u64) -> Option<String> {
    let mask = build_decoder_mask(n_real, n_pad, m, prefix, seed).unwrap();
    let hidden = hidden_columns(n_real, m, prefix, seed).unwrap();
    let n_prefix = ((prefix * n_real as f64).ceil() as usize).min(n_real);
    let eligible = n_real - n_prefix;
    let expected = (m * eligible as f64).round() as usize;
    if hidden.len() != expected {
        return Some(format!("hidden {} of {eligible}, expected {expected}", hidden.len()));
    }
    if hidden.iter().any(|&c| c <= n_prefix || c > n_real) {
        return Some("hidden column outside the eligible range".into());
    }
    let size = n_real + n_pad + 1;
    if mask.size() != size {
        return Some("wrong mask size".into());
    }
    for i in 0..size {
        for j in 0..size {
            let v = mask.visible(i, j);
            let real = i <= n_real && j <= n_real;
            if !real && v {
                return Some(format!("padding entry ({i}, {j}) visible"));
            }
            if !real {
                continue;
            }
            if j == 0 && !v {
                return Some(format!("row {i} cannot see the start token"));
            }
            if j > 0 && j + 1 == i && !v {
                return Some(format!("row {i} cannot see its predecessor"));
            }
            if j >= i && j > 0 && v {
                return Some(format!("row {i} sees future column {j}"));
            }
            if j > 0 && j + 1 < i && v == hidden.contains(&j) {
                return Some(format!("column {j} visibility disagrees with the hidden set"));
            }
        }
    }
    None
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Perturbs token contents from patch `cut` on and centroids after `cut` in
/// sequence `b`; predictions for patches `0..=cut` must not move.
fn causality_violation(rng: &mut StdRng, color: bool, m: f64, prefix: f64) -> f64 {
    let (model, store) = random_model(rng, color);
    let batch = random_batch(rng, color);
    let n_real = batch.n_real();
    let seq = batch.max_real();
    let masks: Vec<AttentionMask> =
        n_real.iter().map(|&n| build_decoder_mask(n, seq - n, m, prefix, rng.random()).unwrap()).collect();
    let b = rng.random_range(0..n_real.len());
    let cut = rng.random_range(0..n_real[b]);
    let offset: usize = n_real[..b].iter().sum();

    let predict = |batch: &PatchBatch, bump: Option<&Tensor>| -> Vec<f64> {
        let mut g = Graph::new();
        let tokens = model.tokenizer.tokenize(&mut g, &store, batch, 0).unwrap();
        let tokens = match bump {
            Some(t) => {
                let c = g.constant(t.clone());
                let real = g.add(tokens.real, c).unwrap();
                model.tokenizer.pack(&mut g, &store, real, batch, 0).unwrap()
            }
            None => tokens,
        };
        let pred = model.reconstruct(&mut g, &store, &tokens, &masks).unwrap();
        g.value(pred).data().to_vec()
    };
    let base = predict(&batch, None);

    let mut moved = batch.clone();
    for c in moved.patches[b].centroids.iter_mut().skip(cut + 1) {
        for a in c.iter_mut() {
            *a += rng.random_range(-0.5..0.5);
        }
    }
    let dim = model.config.dim;
    let total = batch.total_patches();
    let mut bump = vec![0.0; total * dim];
    for row in offset + cut..offset + n_real[b] {
        for v in &mut bump[row * dim..(row + 1) * dim] {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let bump = Tensor::matrix(total, dim, bump).unwrap();
    let after = predict(&moved, Some(&bump));

    let width = model.config.patch_size * model.config.feature_dim();
    let keep = (offset * width)..((offset + cut + 1) * width);
    max_abs_diff(&base[keep.clone()], &after[keep])
}

/// Largest gradient entry reaching the padding embedding from a combined
/// reconstruction and pooling objective.
fn padding_gradient(rng: &mut StdRng, color: bool, m: f64, prefix: f64) -> f64 {
    let (model, store) = random_model(rng, color);
    let batch = random_batch(rng, color);
    let extra = rng.random_range(0..=4);
    let mut g = Graph::new();
    let tokens = model.tokenizer.tokenize(&mut g, &store, &batch, extra).unwrap();
    let masks: Vec<AttentionMask> = tokens
        .n_real
        .iter()
        .map(|&n| build_decoder_mask(n, tokens.seq_len - n, m, prefix, rng.random()).unwrap())
        .collect();
    let pred = model.reconstruct(&mut g, &store, &tokens, &masks).unwrap();
    let (aux, _) = aux_loss_graph(&mut g, pred, model.config.patch_size, &batch.targets(), color.then_some(1.0)).unwrap();
    let rl = model.encode(&mut g, &store, &tokens, EncodeMode::Rl, None).unwrap();
    let pooled = rl.pooled.unwrap();
    let s = g.sum(pooled);
    let loss = g.add(aux, s).unwrap();
    let grads = g.backward(loss).unwrap();
    grads.max_abs([model.tokenizer.padding])
}

/// Mask structure, causality and padding inertness over `configs` draws.
pub fn run(configs: usize, seed: u64) -> Outcome {
    let mut rng = seeded(seed);
    let mut failures = Vec::new();
    let mut worst_causal = 0.0f64;
    let mut worst_pad_grad = 0.0f64;
    for case in 0..configs {
        let m = rng.random_range(0.0..=1.0);
        let prefix = rng.random_range(0.0..=1.0);
        let n_real = rng.random_range(1..=64);
        let n_pad = rng.random_range(0..=16);
        if let Some(err) = check_mask_structure(n_real, n_pad, m, prefix, rng.random()) {
            failures.push(format!("config {case} (n={n_real}, m={m:.3}, prefix={prefix:.3}): {err}"));
        }
        let color = rng.random_bool(0.5);
        let c = causality_violation(&mut rng, color, m, prefix);
        worst_causal = worst_causal.max(c);
        if !(c <= CAUSAL_TOLERANCE) {
            failures.push(format!("config {case}: future perturbation moved a prediction by {c:.2e}"));
        }
        let pg = padding_gradient(&mut rng, color, m, prefix);
        worst_pad_grad = worst_pad_grad.max(pg);
        if pg != 0.0 {
            failures.push(format!("config {case}: padding embedding gradient {pg:.2e}"));
        }
    }
    Outcome::from_failures(
        format!("{configs} configurations, max future-perturbation change {worst_causal:.1e}, max padding gradient {worst_pad_grad:.1e}"),
        failures,
    )
}

/// Appending 1-16 padding slots leaves real encoder outputs and the pooled
/// embedding unchanged.
pub fn run_padding_invariance(configs: usize, seed: u64) -> Outcome {
    let mut rng = seeded(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for case in 0..configs {
        let color = rng.random_bool(0.5);
        let (model, store) = random_model(&mut rng, color);
        let batch = random_batch(&mut rng, color);
        let extra = rng.random_range(1..=16);
        let run = |pad: usize| {
            let mut g = Graph::new();
            let tokens = model.tokenizer.tokenize(&mut g, &store, &batch, pad).unwrap();
            let out = model.encode(&mut g, &store, &tokens, EncodeMode::Rl, None).unwrap();
            let dim = model.config.dim;
            let data = g.value(out.tokens).data();
            let mut real = Vec::new();
            for (b, &n) in tokens.n_real.iter().enumerate() {
                real.extend_from_slice(&data[b * tokens.seq_len * dim..(b * tokens.seq_len + n) * dim]);
            }
            (real, g.value(out.pooled.unwrap()).data().to_vec())
        };
        let (tok0, pool0) = run(0);
        let (tok1, pool1) = run(extra);
        let d = max_abs_diff(&tok0, &tok1).max(max_abs_diff(&pool0, &pool1));
        worst = worst.max(d);
        if !(d < PADDING_TOLERANCE) {
            failures.push(format!("config {case}: {extra} extra padding changed outputs by {d:.2e}"));
        }
    }
    Outcome::from_failures(format!("{configs} configurations, up to 16 extra padding tokens, max change {worst:.1e}"), failures)
}
