use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, ParamStore};
use crate::envs::{Env, EnvConfig, Task};
use crate::error::{invalid, Result};
use crate::geometry::{format_cloud, patchify, read_cloud, PointCloud};
use crate::losses::{chamfer, color_loss, PatchPair, PatchPoints};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::PatchBatch;
use crate::transformer::{AttentionMask, EncoderConfig, PointPatchEncoder};

use super::train::load_run_checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchReport {
    pub index: usize,
    pub chamfer: f64,
    pub color: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub patches: Vec<PatchReport>,
    pub mean_chamfer: f64,
    pub mean_color: Option<f64>,
}

/// Predicted and ground-truth patches of one batch, per patch.
fn patch_pairs(pred: &[f64], batch: &PatchBatch) -> Vec<PatchPair> {
    let (k, f) = (batch.k, batch.feature_dim);
    let targets = batch.targets();
    (0..batch.total_patches())
        .map(|i| {
            let rows = &pred[i * k * f..(i + 1) * k * f];
            let predicted = PatchPoints {
                positions: rows.chunks_exact(f).map(|r| [r[0], r[1], r[2]]).collect(),
                colors: (f == 6).then(|| rows.chunks_exact(f).map(|r| [r[3], r[4], r[5]]).collect()),
            };
            let ground_truth = PatchPoints {
                positions: targets.positions[i * k..(i + 1) * k].to_vec(),
                colors: targets.colors.as_ref().map(|c| c[i * k..(i + 1) * k].to_vec()),
            };
            PatchPair { predicted, ground_truth }
        })
        .collect()
}

/// Runs masked reconstruction with fixed masks and returns the raw
/// predictions (`[patches * k, F]`, row-major).
pub fn predict(model: &PointPatchEncoder, store: &ParamStore, batch: &PatchBatch, masks: &[AttentionMask]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let tokens = model.tokenizer.tokenize(&mut g, store, batch, 0)?;
    let pred = model.reconstruct(&mut g, store, &tokens, masks)?;
    Ok(g.value(pred).data().to_vec())
}

/// Mean per-patch Chamfer distance under the given masks.
pub fn mean_chamfer(model: &PointPatchEncoder, store: &ParamStore, batch: &PatchBatch, masks: &[AttentionMask]) -> Result<f64> {
    let pred = predict(model, store, batch, masks)?;
    let pairs = patch_pairs(&pred, batch);
    let total = pairs.iter().map(chamfer).sum::<Result<f64>>()?;
    Ok(total / pairs.len() as f64)
}

/// Reconstructs one cloud and reports per-patch losses alongside the
/// predicted and ground-truth patches in cloud coordinates.
pub fn reconstruct_cloud(
    model: &PointPatchEncoder,
    store: &ParamStore,
    cloud: &PointCloud,
    seed: u64,
) -> Result<(ReconstructionReport, PointCloud, PointCloud)> {
    let c = &model.config;
    if cloud.feature_dim() != c.feature_dim() {
        return Err(invalid(format!(
            "cloud has {} features per point, model expects {}",
            cloud.feature_dim(),
            c.feature_dim()
        )));
    }
    let mut rng = seeded(seed);
    let batch = PatchBatch::from_patches(vec![patchify(cloud, c.patches, c.patch_size, rng.random())?])?;
    let masks = model.sample_masks(&batch.n_real(), batch.max_real(), &mut rng)?;
    let pred = predict(model, store, &batch, &masks)?;
    let pairs = patch_pairs(&pred, &batch);
    let mut patches = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let color = if c.color { Some(color_loss(p)?) } else { None };
        patches.push(PatchReport { index: i, chamfer: chamfer(p)?, color });
    }
    let n = patches.len() as f64;
    let mean_chamfer = patches.iter().map(|p| p.chamfer).sum::<f64>() / n;
    let mean_color = c.color.then(|| patches.iter().filter_map(|p| p.color).sum::<f64>() / n);

    let centroids = &batch.patches[0].centroids;
    let absolute = |pick: &dyn Fn(&PatchPair) -> &PatchPoints| -> Result<PointCloud> {
        let mut pos = Vec::new();
        let mut col = Vec::new();
        for (pair, ctr) in pairs.iter().zip(centroids) {
            let pts = pick(pair);
            pos.extend(pts.positions.iter().map(|p| [p[0] + ctr[0], p[1] + ctr[1], p[2] + ctr[2]]));
            if let Some(cs) = &pts.colors {
                col.extend(cs.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))));
            }
        }
        if c.color {
            PointCloud::with_colors(pos, col)
        } else {
            Ok(PointCloud::new(pos))
        }
    };
    let predicted = absolute(&|p| &p.predicted)?;
    let truth = absolute(&|p| &p.ground_truth)?;
    Ok((ReconstructionReport { patches, mean_chamfer, mean_color }, predicted, truth))
}

/// Loads a checkpoint and a cloud file, writes `predicted.txt` and
/// `ground_truth.txt` into `out_dir`.
pub fn reconstruct_file(checkpoint: &Path, cloud_path: &Path, out_dir: &Path, seed: u64) -> Result<ReconstructionReport> {
    let (agent, _, _) = load_run_checkpoint(checkpoint)?;
    let cloud = read_cloud(cloud_path)?;
    let (report, predicted, truth) = reconstruct_cloud(&agent.model, &agent.store, &cloud, seed)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("predicted.txt"), format_cloud(&predicted, Some("predicted patches")))?;
    fs::write(out_dir.join("ground_truth.txt"), format_cloud(&truth, Some("ground-truth patches")))?;
    Ok(report)
}

/// Reconstruction-only training on a fixed set of rendered scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconTrainConfig {
    pub encoder: EncoderConfig,
    pub task: Task,
    pub shapes: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate the fixed-mask Chamfer every this many steps.
    pub eval_every: usize,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            task: Task::PointReach,
            shapes: 32,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            eval_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconCurve {
    pub initial: f64,
    pub last: f64,
    /// `(step, mean Chamfer)` pairs.
    pub history: Vec<(usize, f64)>,
}

/// Renders `shapes` scenes and patchifies them with fixed seeds.
pub fn fixed_shapes(cfg: &ReconTrainConfig) -> Result<Vec<PatchBatch>> {
    let env = EnvConfig::for_task(cfg.task);
    let c = &cfg.encoder;
    (0..cfg.shapes as u64)
        .map(|i| {
            let (_, obs) = Env::reset(env.clone(), derive_seed(cfg.seed, i))?;
            PatchBatch::from_patches(vec![patchify(&obs.cloud, c.patches, c.patch_size, i)?])
        })
        .collect()
}

/// Trains tokenizer, encoder and decoder on the reconstruction loss alone.
pub fn train_reconstruction(cfg: &ReconTrainConfig) -> Result<(PointPatchEncoder, ParamStore, ReconCurve)> {
    cfg.encoder.validate()?;
    if cfg.encoder.color != cfg.task.has_color() {
        return Err(invalid("encoder color flag must match the task"));
    }
    if cfg.shapes == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(invalid("shapes, batch_size and eval_every must be positive"));
    }
    let mut rng = seeded(cfg.seed);
    let mut store = ParamStore::new();
    let model = PointPatchEncoder::new(&mut store, &cfg.encoder, 0, &mut rng)?;
    let mut optim = Adam::new(AdamConfig::with_lr(cfg.lr), model.params(), &store);
    let shapes = fixed_shapes(cfg)?;
    let all = PatchBatch::from_patches(shapes.iter().map(|b| b.patches[0].clone()).collect())?;
    let eval_masks = model.sample_masks(&all.n_real(), all.max_real(), &mut seeded(derive_seed(cfg.seed, 7)))?;

    let mut history = vec![(0, mean_chamfer(&model, &store, &all, &eval_masks)?)];
    for step in 1..=cfg.steps {
        let picks: Vec<_> = (0..cfg.batch_size).map(|_| shapes[rng.random_range(0..shapes.len())].patches[0].clone()).collect();
        let batch = PatchBatch::from_patches(picks)?;
        let mut g = Graph::new();
        let tokens = model.tokenizer.tokenize(&mut g, &store, &batch, 0)?;
        let (loss, _) = model.reconstruction_loss(&mut g, &store, &tokens, &batch, &mut rng)?;
        let grads = g.backward(loss)?;
        optim.step(&mut store, &grads);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            history.push((step, mean_chamfer(&model, &store, &all, &eval_masks)?));
        }
    }
    let curve = ReconCurve { initial: history[0].1, last: history.last().expect("nonempty").1, history };
    Ok((model, store, curve))
}
