use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::nn::Mlp;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

fn dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(std::iter::repeat_n(hidden, layers));
    d.push(output);
    d
}

/// Tanh-squashed Gaussian policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub net: Mlp,
    pub action_dim: usize,
}

/// Graph nodes for a batch of policy samples.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    /// `[B, A]` squashed actions.
    pub action: Var,
    /// `[B, 1]` log densities of `action`.
    pub log_prob: Var,
    /// `[B, A]` `tanh(mean)`.
    pub mean_action: Var,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        layers: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self { net: Mlp::new(store, "actor", &dims(input, hidden, layers, 2 * action_dim), rng), action_dim }
    }

    /// Standard normal noise for a batch.
    pub fn noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor {
        let data = (0..rows * self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::matrix(rows, self.action_dim, data).expect("sized")
    }

    /// Reparameterized sample `tanh(mean + std * eps)` with its log-density.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, emb: Var, eps: &Tensor) -> Result<PolicySample> {
        let a = self.action_dim;
        let out = self.net.forward(g, store, emb)?;
        let mean = g.slice_cols(out, 0, a)?;
        let raw = g.slice_cols(out, a, 2 * a)?;
        // log_std = min + (max - min) * (tanh(raw) + 1) / 2
        let t = g.tanh(raw);
        let t = g.add_scalar(t, 1.0);
        let t = g.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
        let log_std = g.add_scalar(t, LOG_STD_MIN);
        let std = g.exp(log_std);
        let noise = g.constant(eps.clone());
        let spread = g.mul(std, noise)?;
        let u = g.add(mean, spread)?;
        let action = g.tanh(u);

        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let m2u = g.scale(u, -2.0);
        let sp = g.softplus(m2u);
        let neg_u = g.neg(u);
        let c = g.sub(neg_u, sp)?;
        let c = g.add_scalar(c, std::f64::consts::LN_2);
        let jac = g.scale(c, 2.0);
        let per = g.add(log_std, jac)?;
        let per = g.sum_cols(per)?;
        let per = g.neg(per);
        let rows = eps.shape()[0];
        let base: Vec<f64> = (0..rows)
            .map(|r| eps.row(r).iter().map(|e| -0.5 * e * e - HALF_LN_TAU).sum())
            .collect();
        let base = g.constant(Tensor::matrix(rows, 1, base)?);
        let log_prob = g.add(per, base)?;
        let mean_action = g.tanh(mean);
        Ok(PolicySample { action, log_prob, mean_action })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }
}

/// Log-density of `tanh(u)` when `u ~ N(mean, exp(log_std)^2)`, one dimension.
pub fn squashed_log_prob(mean: f64, log_std: f64, u: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    let sp = (-2.0 * u).exp().ln_1p().max(-2.0 * u);
    -0.5 * z * z - log_std - HALF_LN_TAU - 2.0 * (std::f64::consts::LN_2 - u - sp)
}

/// Q-network over `[embedding, action]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self { net: Mlp::new(store, name, &dims(input, hidden, layers, 1), rng) }
    }

    /// `[B, 1]` values.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, emb: Var, action: Var) -> Result<Var> {
        let x = g.concat_cols(&[emb, action])?;
        self.net.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }
}
