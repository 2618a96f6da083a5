//! Soft Actor-Critic on top of the patch encoder.
//!
//! The encoder is trained by the critic loss and, when enabled, the
//! reconstruction loss; the actor only sees detached embeddings. Target
//! critics track the live critics by Polyak averaging. Next observations are
//! encoded with the live encoder without gradient.

mod bytes;
mod checkpoint;
mod networks;
mod replay;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use bytes::{ByteReader, ByteWriter};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use networks::{squashed_log_prob, Actor, Critic, PolicySample, LOG_STD_MAX, LOG_STD_MIN};
pub use replay::{ReplayBuffer, Transition};

use crate::autodiff::{adam_step, Adam, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{patchify, PointCloud};
use crate::losses::AuxBreakdown;
use crate::rng::{seeded, StdRng};
use crate::tokenizer::{PatchBatch, TokenBatch};
use crate::transformer::{EncoderConfig, PointPatchEncoder};

/// SAC hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub actor_lr: Option<f64>,
    pub alpha_init: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Gradient updates per environment step; fractional values skip steps.
    pub replay_ratio: f64,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            tau: 0.005,
            lr: 1e-4,
            actor_lr: None,
            alpha_init: 0.1,
            lr_alpha: 1e-4,
            batch_size: 64,
            replay_capacity: 100_000,
            replay_ratio: 1.0,
            target_entropy: None,
            hidden: 256,
            hidden_layers: 3,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lr > 0.0) || !(self.lr_alpha > 0.0) || self.actor_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.alpha_init > 0.0) {
            return bad("alpha_init must be positive");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.hidden == 0 {
            return bad("batch_size, replay_capacity and hidden must be positive");
        }
        if !(self.replay_ratio > 0.0) {
            return bad("replay_ratio must be positive");
        }
        Ok(())
    }
}

/// Everything needed to rebuild an agent's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub encoder: EncoderConfig,
    pub sac: AgentConfig,
    pub aux: bool,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Scalars reported by one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateMetrics {
    /// True when the buffer held fewer than `batch_size` transitions.
    pub skipped: bool,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub q_mean: f64,
    pub log_prob_mean: f64,
    pub aux_loss: Option<f64>,
    pub chamfer: Option<f64>,
    pub color: Option<f64>,
}

/// Tokenizer-ready batch of transitions.
#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub obs: PatchBatch,
    pub next_obs: PatchBatch,
    pub state: Option<Tensor>,
    pub next_state: Option<Tensor>,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Loss nodes of one update, all scalars except `log_prob` (`[B, 1]`).
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub critic: Var,
    pub actor: Var,
    pub aux: Option<Var>,
    pub aux_parts: Option<AuxBreakdown>,
    pub log_prob: Var,
    pub q1: Var,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub spec: AgentSpec,
    pub store: ParamStore,
    /// Copy of `store`; only critic entries are ever read or updated.
    pub target: ParamStore,
    pub model: PointPatchEncoder,
    pub actor: Actor,
    pub critics: [Critic; 2],
    pub log_alpha: ParamId,
    /// Encoder, decoder and critics.
    pub optim: Adam,
    pub actor_optim: Adam,
    pub alpha_state: AdamState,
    pub alpha_step: u64,
    pub rng: StdRng,
    pub updates: u64,
}

impl Agent {
    pub fn new(spec: AgentSpec, seed: u64) -> Result<Self> {
        spec.encoder.validate()?;
        spec.sac.validate()?;
        if spec.action_dim == 0 {
            return Err(Error::Config("action_dim must be positive".into()));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let model = PointPatchEncoder::new(&mut store, &spec.encoder, spec.state_dim, &mut rng)?;
        let e = model.embedding_dim();
        let (h, l, a) = (spec.sac.hidden, spec.sac.hidden_layers, spec.action_dim);
        let actor = Actor::new(&mut store, e, h, l, a, &mut rng);
        let critics = [
            Critic::new(&mut store, "critic1", e + a, h, l, &mut rng),
            Critic::new(&mut store, "critic2", e + a, h, l, &mut rng),
        ];
        let log_alpha = store.add("log_alpha", Tensor::new(vec![1], vec![spec.sac.alpha_init.ln()])?);
        let mut main = model.params();
        main.extend(critics.iter().flat_map(Critic::params));
        let optim = Adam::new(AdamConfig::with_lr(spec.sac.lr), main, &store);
        let actor_lr = spec.sac.actor_lr.unwrap_or(spec.sac.lr);
        let actor_optim = Adam::new(AdamConfig::with_lr(actor_lr), actor.params(), &store);
        let target = store.clone();
        Ok(Self {
            spec,
            store,
            target,
            model,
            actor,
            critics,
            log_alpha,
            optim,
            actor_optim,
            alpha_state: AdamState::zeros(1),
            alpha_step: 0,
            rng,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.store.get(self.log_alpha).data()[0].exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.spec.sac.target_entropy.unwrap_or(-(self.spec.action_dim as f64))
    }

    pub fn critic_params(&self) -> Vec<ParamId> {
        self.critics.iter().flat_map(Critic::params).collect()
    }

    /// Policy action for one observation. FPS start points and exploration
    /// noise come from `rng`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &PointCloud, state: &[f64], deterministic: bool, rng: &mut R) -> Result<Vec<f64>> {
        let c = &self.spec.encoder;
        let batch = PatchBatch::from_patches(vec![patchify(obs, c.patches, c.patch_size, rng.random())?])?;
        let mut g = Graph::new();
        let state = self.state_var(&mut g, state, 1)?;
        let emb = self.model.embed(&mut g, &self.store, &batch, state)?;
        let eps = self.actor.noise(1, rng);
        let s = self.actor.forward(&mut g, &self.store, emb, &eps)?;
        let out = if deterministic { s.mean_action } else { s.action };
        Ok(g.value(out).data().to_vec())
    }

    fn state_var(&self, g: &mut Graph, flat: &[f64], rows: usize) -> Result<Option<Var>> {
        let d = self.spec.state_dim;
        if d == 0 {
            return Ok(None);
        }
        if flat.len() != rows * d {
            return Err(invalid(format!("expected {} state values, got {}", rows * d, flat.len())));
        }
        Ok(Some(g.constant(Tensor::matrix(rows, d, flat.to_vec())?)))
    }

    /// Patchifies sampled transitions, drawing FPS start points from the
    /// agent's stream.
    pub fn prepare_batch(&mut self, transitions: &[Transition]) -> Result<SampledBatch> {
        if transitions.is_empty() {
            return Err(invalid("empty batch"));
        }
        let c = self.spec.encoder.clone();
        let d = self.spec.state_dim;
        let mut obs = Vec::with_capacity(transitions.len());
        let mut next = Vec::with_capacity(transitions.len());
        for t in transitions {
            obs.push(patchify(&t.obs, c.patches, c.patch_size, self.rng.random())?);
            next.push(patchify(&t.next_obs, c.patches, c.patch_size, self.rng.random())?);
        }
        let b = transitions.len();
        let gather = |f: &dyn Fn(&Transition) -> &[f64], w: usize| -> Result<Tensor> {
            let data: Vec<f64> = transitions.iter().flat_map(|t| f(t).iter().copied()).collect();
            if data.len() != b * w {
                return Err(invalid("transition vector has the wrong length"));
            }
            Tensor::matrix(b, w, data)
        };
        let state = (d > 0).then(|| gather(&|t| &t.state, d)).transpose()?;
        let next_state = (d > 0).then(|| gather(&|t| &t.next_state, d)).transpose()?;
        Ok(SampledBatch {
            obs: PatchBatch::from_patches(obs)?,
            next_obs: PatchBatch::from_patches(next)?,
            state,
            next_state,
            actions: gather(&|t| &t.action, self.spec.action_dim)?,
            rewards: transitions.iter().map(|t| t.reward).collect(),
            dones: transitions.iter().map(|t| t.done).collect(),
        })
    }

    /// Bootstrapped targets `r + γ (1 - done) (min Q' - α log π)` for given
    /// policy noise.
    pub fn critic_target_with(&self, batch: &SampledBatch, eps: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let state = batch.next_state.clone().map(|s| g.constant(s));
        let emb = self.model.embed(&mut g, &self.store, &batch.next_obs, state)?;
        let emb = g.detach(emb);
        let s = self.actor.forward(&mut g, &self.store, emb, eps)?;
        let q1 = self.critics[0].forward(&mut g, &self.target, emb, s.action)?;
        let q2 = self.critics[1].forward(&mut g, &self.target, emb, s.action)?;
        let alpha = self.alpha();
        let gamma = self.spec.sac.gamma;
        let (q1, q2, lp) = (g.value(q1).data(), g.value(q2).data(), g.value(s.log_prob).data());
        Ok((0..batch.len())
            .map(|i| {
                if batch.dones[i] {
                    batch.rewards[i]
                } else {
                    batch.rewards[i] + gamma * (q1[i].min(q2[i]) - alpha * lp[i])
                }
            })
            .collect())
    }

    pub fn critic_target(&mut self, batch: &SampledBatch) -> Result<Vec<f64>> {
        let eps = self.actor.noise(batch.len(), &mut self.rng);
        self.critic_target_with(batch, &eps)
    }

    /// Builds all losses of one update into `g`.
    pub fn losses(&mut self, g: &mut Graph, batch: &SampledBatch, y: &[f64]) -> Result<LossTerms> {
        let b = batch.len();
        let tokens: TokenBatch = self.model.tokenizer.tokenize(g, &self.store, &batch.obs, 0)?;
        let state = batch.state.clone().map(|s| g.constant(s));
        let emb = self.model.embed_tokens(g, &self.store, &tokens, state)?;
        let actions = g.constant(batch.actions.clone());
        let target = g.constant(Tensor::matrix(b, 1, y.to_vec())?);
        let mut critic = None;
        let mut q1 = None;
        for c in &self.critics {
            let q = c.forward(g, &self.store, emb, actions)?;
            q1.get_or_insert(q);
            let d = g.sub(q, target)?;
            let d = g.square(d);
            let m = g.mean(d);
            critic = Some(match critic {
                None => m,
                Some(acc) => g.add(acc, m)?,
            });
        }
        let critic = critic.expect("two critics");

        let (aux, aux_parts) = if self.spec.aux {
            let (l, parts) = self.model.reconstruction_loss(g, &self.store, &tokens, &batch.obs, &mut self.rng)?;
            (Some(l), Some(parts))
        } else {
            (None, None)
        };

        let detached = g.detach(emb);
        let eps = self.actor.noise(b, &mut self.rng);
        let s = self.actor.forward(g, &self.store, detached, &eps)?;
        let qa = self.critics[0].forward(g, &self.store, detached, s.action)?;
        let qb = self.critics[1].forward(g, &self.store, detached, s.action)?;
        let qmin = g.minimum(qa, qb)?;
        let scaled = g.scale(s.log_prob, self.alpha());
        let diff = g.sub(scaled, qmin)?;
        let actor = g.mean(diff);
        Ok(LossTerms { critic, actor, aux, aux_parts, log_prob: s.log_prob, q1: q1.expect("two critics") })
    }

    /// One SAC update from uniformly sampled transitions.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<UpdateMetrics> {
        let bs = self.spec.sac.batch_size;
        if buffer.len() < bs {
            return Ok(UpdateMetrics { skipped: true, alpha: self.alpha(), ..UpdateMetrics::default() });
        }
        let idx = buffer.sample_indices(bs, &mut self.rng)?;
        let transitions: Vec<Transition> = idx.into_iter().map(|i| buffer.get(i)).collect();
        let batch = self.prepare_batch(&transitions)?;
        self.update_on(&batch)
    }

    /// One SAC update on a prepared batch.
    pub fn update_on(&mut self, batch: &SampledBatch) -> Result<UpdateMetrics> {
        let y = self.critic_target(batch)?;
        let mut g = Graph::new();
        let terms = self.losses(&mut g, batch, &y)?;
        let total = match terms.aux {
            Some(a) => g.add(terms.critic, a)?,
            None => terms.critic,
        };
        let grads = g.backward(total)?;
        let actor_grads = g.backward(terms.actor)?;
        self.optim.step(&mut self.store, &grads);
        self.actor_optim.step(&mut self.store, &actor_grads);

        let alpha = self.alpha();
        let lp = g.value(terms.log_prob).data();
        let lp_mean = lp.iter().sum::<f64>() / lp.len() as f64;
        let shifted = lp_mean + self.target_entropy();
        self.alpha_step += 1;
        let cfg = AdamConfig::with_lr(self.spec.sac.lr_alpha);
        let log_alpha = self.store.get_mut(self.log_alpha).data_mut();
        adam_step(log_alpha, &[-alpha * shifted], &mut self.alpha_state, self.alpha_step, &cfg);

        self.soft_update(self.spec.sac.tau);
        self.updates += 1;

        let value = |v: Var| g.value(v).item();
        let q = g.value(terms.q1).data();
        let aux = terms.aux.map(value);
        Ok(UpdateMetrics {
            skipped: false,
            critic_loss: value(terms.critic),
            actor_loss: value(terms.actor),
            alpha_loss: -alpha * shifted,
            alpha: self.alpha(),
            q_mean: q.iter().sum::<f64>() / q.len() as f64,
            log_prob_mean: lp_mean,
            aux_loss: aux,
            chamfer: terms.aux_parts.map(|p| p.chamfer),
            color: terms.aux_parts.filter(|_| self.spec.encoder.color).map(|p| p.color),
        })
    }

    /// `θ' ← (1 - τ) θ' + τ θ` on critic parameters.
    pub fn soft_update(&mut self, tau: f64) {
        for id in self.critic_params() {
            let live = self.store.get(id).data();
            for (t, &l) in self.target.get_mut(id).data_mut().iter_mut().zip(live) {
                *t = (1.0 - tau) * *t + tau * l;
            }
        }
    }
}
