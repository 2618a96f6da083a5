//! Run configuration, training loop, evaluation, reconstruction reports and
//! kernel benchmarks.
//!
//! A run directory holds `manifest.json`, `metrics.csv`, `summary.json` and
//! `checkpoints/latest.ckpt`. `metrics.csv` has one row per finished
//! training episode (`kind = episode`) and one per evaluation
//! (`kind = eval`); see [`METRICS_HEADER`] for the columns.

mod bench;
mod config;
mod eval;
mod metrics;
mod recon;
mod train;

pub use bench::{bench, bench_csv, BenchRow, Kernel, BENCH_REPEATS};
pub use config::RunConfig;
pub use eval::{
    bootstrap_ci, evaluate, run_episode, summarize, AgentPolicy, EpisodeResult, EvalSummary, OraclePolicy, Policy,
    RandomPolicy, BOOTSTRAP_RESAMPLES,
};
pub use metrics::{LossAccumulator, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use recon::{
    fixed_shapes, mean_chamfer, predict, reconstruct_cloud, reconstruct_file, train_reconstruction, PatchReport,
    ReconCurve, ReconTrainConfig, ReconstructionReport,
};
pub use train::{
    checkpoint_dir, decode_extra, encode_extra, latest_checkpoint, load_run_checkpoint, train, EvalRecord,
    TrainSummary, TrainerState,
};

/// Sizes the global worker pool; call before any parallel work.
pub fn init_threads(threads: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| crate::Error::InvalidState(e.to_string()))
}
