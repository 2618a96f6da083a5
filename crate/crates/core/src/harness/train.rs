use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::eval::{evaluate, AgentPolicy, EvalSummary};
use super::metrics::{LossAccumulator, MetricsRow, MetricsWriter};
use crate::envs::{Env, EnvState, Observation, Viewpoint};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{derive_seed, seeded, RngState, StdRng};
use crate::sac::{load_checkpoint, save_checkpoint, Agent, ByteReader, ByteWriter, ReplayBuffer, Transition};

const EPISODE_TAG: u64 = 0x6570_6973;
const EXPLORE_TAG: u64 = 0x6578_706c;
const EXTRA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub evals: Vec<EvalRecord>,
    pub final_eval: Option<EvalRecord>,
    /// First evaluation step whose success rate reached 0.8.
    pub steps_to_80: Option<u64>,
    pub elapsed_secs: f64,
}

/// Everything besides the agent needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub step: u64,
    pub episode: u64,
    pub env: Env,
    pub obs: Observation,
    pub episode_return: f64,
    pub buffer: ReplayBuffer,
    pub update_debt: f64,
    pub explore_rng: StdRng,
    pub losses: LossAccumulator,
    pub evals: Vec<EvalRecord>,
}

fn write_cloud(w: &mut ByteWriter, c: &PointCloud) {
    w.f64s(&c.positions.iter().flatten().copied().collect::<Vec<_>>());
    w.bool(c.colors.is_some());
    if let Some(col) = &c.colors {
        w.f64s(&col.iter().flatten().copied().collect::<Vec<_>>());
    }
}

fn read_cloud(r: &mut ByteReader) -> Result<PointCloud> {
    let pts = |v: Vec<f64>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let positions = pts(r.f64s()?);
    let colors = if r.bool()? { Some(pts(r.f64s()?)) } else { None };
    let c = PointCloud { positions, colors };
    c.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(c)
}

fn write_point(w: &mut ByteWriter, p: [f64; 3]) {
    p.iter().for_each(|&x| w.f64(x));
}

fn read_point(r: &mut ByteReader) -> Result<[f64; 3]> {
    Ok([r.f64()?, r.f64()?, r.f64()?])
}

fn write_summary(w: &mut ByteWriter, s: &EvalSummary) {
    w.usize(s.episodes);
    for x in [s.success_rate, s.success_ci[0], s.success_ci[1], s.mean_return, s.return_ci[0], s.return_ci[1], s.mean_length] {
        w.f64(x);
    }
}

fn read_summary(r: &mut ByteReader) -> Result<EvalSummary> {
    let episodes = r.usize()?;
    let mut f = [0.0; 7];
    for x in &mut f {
        *x = r.f64()?;
    }
    Ok(EvalSummary {
        episodes,
        success_rate: f[0],
        success_ci: [f[1], f[2]],
        mean_return: f[3],
        return_ci: [f[4], f[5]],
        mean_length: f[6],
    })
}

impl TrainerState {
    fn write(&self, w: &mut ByteWriter) {
        w.u64(self.step);
        w.u64(self.episode);
        let s = &self.env.state;
        write_point(w, s.agent_pos);
        write_point(w, s.target_pos);
        w.bool(s.distractor_pos.is_some());
        if let Some(q) = s.distractor_pos {
            write_point(w, q);
        }
        w.usize(s.step_count);
        w.f64(s.viewpoint.yaw);
        write_point(w, s.viewpoint.shift);
        w.bool(s.done);
        w.bool(s.truncated);
        w.rng(&RngState::capture(&self.env.rng));
        write_cloud(w, &self.obs.cloud);
        w.f64s(&self.obs.state);
        w.f64(self.episode_return);
        self.buffer.write(w);
        w.f64(self.update_debt);
        w.rng(&RngState::capture(&self.explore_rng));
        let l = &self.losses;
        w.u64(l.count);
        for x in [l.critic, l.actor, l.alpha, l.aux, l.q] {
            w.f64(x);
        }
        w.usize(self.evals.len());
        for e in &self.evals {
            w.u64(e.step);
            write_summary(w, &e.summary);
        }
    }

    fn read(r: &mut ByteReader, config: &RunConfig) -> Result<Self> {
        let step = r.u64()?;
        let episode = r.u64()?;
        let agent_pos = read_point(r)?;
        let target_pos = read_point(r)?;
        let distractor_pos = if r.bool()? { Some(read_point(r)?) } else { None };
        let step_count = r.usize()?;
        let viewpoint = Viewpoint { yaw: r.f64()?, shift: read_point(r)? };
        let (done, truncated) = (r.bool()?, r.bool()?);
        let env_rng = r.rng()?.restore();
        let state = EnvState { agent_pos, target_pos, distractor_pos, step_count, viewpoint, done, truncated };
        let env = Env { config: config.env.clone(), state, rng: env_rng };
        let obs = Observation { cloud: read_cloud(r)?, state: r.f64s()? };
        let episode_return = r.f64()?;
        let buffer = ReplayBuffer::read(r)?;
        let update_debt = r.f64()?;
        let explore_rng = r.rng()?.restore();
        let count = r.u64()?;
        let mut f = [0.0; 5];
        for x in &mut f {
            *x = r.f64()?;
        }
        let losses = LossAccumulator { count, critic: f[0], actor: f[1], alpha: f[2], aux: f[3], q: f[4] };
        let n = r.usize()?;
        let evals = (0..n)
            .map(|_| Ok(EvalRecord { step: r.u64()?, summary: read_summary(r)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { step, episode, env, obs, episode_return, buffer, update_debt, explore_rng, losses, evals })
    }
}

/// Extra checkpoint payload: the run config, optionally followed by the
/// trainer state.
pub fn encode_extra(config: &RunConfig, trainer: Option<&TrainerState>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(EXTRA_VERSION);
    w.str(&config.to_toml());
    w.bool(trainer.is_some());
    if let Some(t) = trainer {
        t.write(&mut w);
    }
    w.buf
}

pub fn decode_extra(data: &[u8]) -> Result<(RunConfig, Option<TrainerState>)> {
    let mut r = ByteReader::new(data);
    if r.u32()? != EXTRA_VERSION {
        return Err(Error::Checkpoint("unsupported run-state version".into()));
    }
    let config = RunConfig::from_toml(r.str()?)?;
    let trainer = if r.bool()? { Some(TrainerState::read(&mut r, &config)?) } else { None };
    if !r.is_done() {
        return Err(Error::Checkpoint("trailing run-state bytes".into()));
    }
    Ok((config, trainer))
}

/// Loads an agent plus the run config stored alongside it.
pub fn load_run_checkpoint(path: &Path) -> Result<(Agent, RunConfig, Option<TrainerState>)> {
    let (agent, extra) = load_checkpoint(path)?;
    let extra = extra.ok_or_else(|| Error::Checkpoint(format!("{} has no run config", path.display())))?;
    let (config, trainer) = decode_extra(&extra)?;
    if config.agent_spec() != agent.spec {
        return Err(Error::Checkpoint("stored run config does not match the agent".into()));
    }
    Ok((agent, config, trainer))
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn latest_checkpoint(out: &Path) -> PathBuf {
    checkpoint_dir(out).join("latest.ckpt")
}

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    seed: u64,
    resumed_from: Option<String>,
    config: &'a RunConfig,
    config_toml: String,
}

/// Runs (or resumes) a training run, writing metrics, summary, manifest and
/// checkpoints under the configured output directory.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let started = Instant::now();
    let out = config.output_dir.clone();
    fs::create_dir_all(checkpoint_dir(&out))?;
    let metrics_path = out.join("metrics.csv");

    let (mut agent, mut st, mut metrics) = match resume {
        Some(path) => {
            let (agent, stored, trainer) = load_run_checkpoint(path)?;
            if stored.agent_spec() != config.agent_spec() || stored.env != config.env || stored.seed != config.seed {
                return Err(Error::Config("resume checkpoint was produced by a different config".into()));
            }
            let st = trainer.ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state".into()))?;
            let metrics = MetricsWriter::resume(&metrics_path, st.step)?;
            (agent, st, metrics)
        }
        None => {
            let agent = Agent::new(config.agent_spec(), config.seed)?;
            let (env, obs) = Env::reset(config.env.clone(), derive_seed(config.seed ^ EPISODE_TAG, 0))?;
            let st = TrainerState {
                step: 0,
                episode: 0,
                env,
                obs,
                episode_return: 0.0,
                buffer: ReplayBuffer::new(config.sac.replay_capacity)?,
                update_debt: 0.0,
                explore_rng: seeded(derive_seed(config.seed, EXPLORE_TAG)),
                losses: LossAccumulator::default(),
                evals: Vec::new(),
            };
            (agent, st, MetricsWriter::create(&metrics_path)?)
        }
    };

    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        resumed_from: resume.map(|p| p.display().to_string()),
        config,
        config_toml: config.to_toml(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;

    while st.step < config.total_steps {
        let action: Vec<f64> = if st.step < config.random_steps {
            (0..config.env.action_dim()).map(|_| st.explore_rng.random_range(-1.0..=1.0)).collect()
        } else {
            agent.act(&st.obs.cloud, &st.obs.state, false, &mut st.explore_rng)?
        };
        let outcome = st.env.step(&action)?;
        st.buffer.push(&Transition {
            obs: std::mem::replace(&mut st.obs.cloud, PointCloud::new(Vec::new())),
            state: st.obs.state.clone(),
            action,
            reward: outcome.reward,
            done: outcome.done,
            next_obs: outcome.obs.cloud.clone(),
            next_state: outcome.obs.state.clone(),
        })?;
        st.obs = outcome.obs;
        st.episode_return += outcome.reward;
        st.step += 1;

        st.update_debt += config.sac.replay_ratio;
        while st.update_debt >= 1.0 {
            st.update_debt -= 1.0;
            let m = agent.update(&st.buffer)?;
            st.losses.add(&m);
        }

        if outcome.done || outcome.truncated {
            st.episode += 1;
            metrics.write(&MetricsRow::Episode {
                step: st.step,
                episode: st.episode,
                ret: st.episode_return,
                success: outcome.success,
                length: st.env.state.step_count,
                losses: &st.losses,
                aux: config.aux,
            })?;
            st.losses = LossAccumulator::default();
            st.episode_return = 0.0;
            let (env, obs) = Env::reset(config.env.clone(), derive_seed(config.seed ^ EPISODE_TAG, st.episode))?;
            st.env = env;
            st.obs = obs;
        }

        if st.step % config.eval_interval == 0 || st.step == config.total_steps {
            run_eval(config, &agent, &mut st, &mut metrics)?;
        }
    }

    let summary = TrainSummary {
        steps: st.step,
        episodes: st.episode,
        updates: agent.updates,
        final_eval: st.evals.last().cloned(),
        steps_to_80: st.evals.iter().find(|e| e.summary.success_rate >= 0.8).map(|e| e.step),
        evals: st.evals.clone(),
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn run_eval(config: &RunConfig, agent: &Agent, st: &mut TrainerState, metrics: &mut MetricsWriter) -> Result<()> {
    let summary = evaluate(&AgentPolicy(agent), &config.env, config.eval_episodes, config.seed)?;
    metrics.write(&MetricsRow::Eval {
        step: st.step,
        episode: st.episode,
        ret: summary.mean_return,
        success_rate: summary.success_rate,
        length: summary.mean_length,
    })?;
    st.evals.push(EvalRecord { step: st.step, summary });
    let extra = encode_extra(config, Some(st));
    let dir = checkpoint_dir(&config.output_dir);
    save_checkpoint(&latest_checkpoint(&config.output_dir), agent, Some(&extra))?;
    if config.keep_checkpoints {
        fs::copy(latest_checkpoint(&config.output_dir), dir.join(format!("step_{}.ckpt", st.step)))?;
    }
    Ok(())
}
