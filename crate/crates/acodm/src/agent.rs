//! The DDPG mixing agent: actor, critic, target copies, replay buffer, and
//! the update rules that train them.
//!
//! Both networks share one trunk shape: fully connected layers with layer
//! norm and ReLU between them, a softmax head on the actor (so actions live
//! on the simplex) and an identity head on the critic. Exploration noise is
//! Gaussian and injected on the pre-softmax logits, which keeps every noisy
//! action a valid mixture.
//!
//! The environment-side reward is a per-domain vector while the TD machinery
//! wants a scalar, so the critic defaults to a scalar head trained on the
//! summed reward (the total-alignment return); a per-domain head is available
//! for ablation.

use crate::corpus::DomainWeights;
use crate::lm_env::AgentState;
use crate::reward::RunningStat;
use crate::tensor::{adam_step, AdamState, ParamSet, Tape, Tensor, ValueId};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

/// How the vector reward enters the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticHead {
    /// Scalar critic trained on the summed reward.
    Scalar,
    /// One output per domain with per-dimension TD targets.
    PerDomain,
}

/// Which reward the orchestrator stores in replay tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayReward {
    /// The smoothed, importance-weighted moving average.
    Smoothed,
    /// The raw alignment scores of the step.
    Raw,
}

/// Agent hyperparameters. All exposed in the run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden_width: usize,
    /// Total number of linear layers (the output layer included).
    pub depth: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Replay minibatch size N.
    pub minibatch: usize,
    pub capacity: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Actor/critic learning-rate schedule (cosine from start to end).
    pub lr_start: f64,
    pub lr_end: f64,
    pub grad_clip: f64,
    /// Soft bound on actor logits: they pass through `c * tanh(x / c)`
    /// before noise and softmax. Keeps extreme mixtures expressible while
    /// the softmax gradient never vanishes. Zero disables the bound.
    pub logit_clamp: f64,
    pub critic_head: CriticHead,
    pub standardize_rewards: bool,
    pub replay_reward: ReplayReward,
    /// Regression steps run by `warmup_fit`.
    pub warmup_fit_steps: usize,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("agent depth must be >= 2".into()));
        }
        if self.hidden_width == 0 || self.minibatch == 0 || self.capacity == 0 {
            return Err(Error::Config(
                "hidden_width, minibatch, capacity must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            depth: 6,
            gamma: 0.99,
            tau: 0.005,
            minibatch: 256,
            capacity: 30_000,
            noise_start: 1.0,
            noise_end: 0.1,
            lr_start: 0.01,
            lr_end: 0.001,
            grad_clip: 1.0,
            logit_clamp: 3.0,
            critic_head: CriticHead::Scalar,
            standardize_rewards: true,
            replay_reward: ReplayReward::Smoothed,
            warmup_fit_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Softmax,
    Identity,
}

/// A fully connected trunk: `depth - 1` hidden layers of layer norm + ReLU,
/// then a linear output with the head activation.
#[derive(Debug, Clone)]
pub struct MlpNet {
    params: ParamSet,
    in_dim: usize,
    out_dim: usize,
    width: usize,
    depth: usize,
    head: Head,
    logit_clamp: f64,
}

impl MlpNet {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        width: usize,
        depth: usize,
        head: Head,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth < 2 || in_dim == 0 || out_dim == 0 || width == 0 {
            return Err(Error::Config(format!(
                "bad net dims: in {in_dim}, out {out_dim}, width {width}, depth {depth}"
            )));
        }
        let mut params = ParamSet::new();
        let normal = |std: f64, n: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("valid normal");
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        for l in 0..depth - 1 {
            let fan_in = if l == 0 { in_dim } else { width };
            params.add(
                &format!("l{l}_w"),
                Tensor::new(
                    vec![fan_in, width],
                    normal(1.0 / (fan_in as f64).sqrt(), fan_in * width, rng),
                )?,
            )?;
            params.add(&format!("l{l}_b"), Tensor::zeros(vec![width]))?;
            params.add(
                &format!("l{l}_ln_g"),
                Tensor::new(vec![width], vec![1.0; width])?,
            )?;
            params.add(&format!("l{l}_ln_b"), Tensor::zeros(vec![width]))?;
        }
        // small output init: near-uniform softmax / near-zero value at start
        params.add(
            "out_w",
            Tensor::new(vec![width, out_dim], normal(0.01, width * out_dim, rng))?,
        )?;
        params.add("out_b", Tensor::zeros(vec![out_dim]))?;
        Ok(Self {
            params,
            in_dim,
            out_dim,
            width,
            depth,
            head,
            logit_clamp: 0.0,
        })
    }

    /// Bounds the pre-head output through `c * tanh(x / c)`. Zero disables.
    pub fn with_logit_clamp(mut self, c: f64) -> Self {
        self.logit_clamp = c;
        self
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Records the forward pass on the tape from an existing input node.
    /// Returns the head output and the parameter leaves in registration order.
    pub fn forward(&self, tape: &mut Tape, input: ValueId) -> Result<(ValueId, Vec<ValueId>)> {
        let (out, leaves) = self.forward_logits(tape, input)?;
        let out = match self.head {
            Head::Softmax => tape.softmax_rows(out)?,
            Head::Identity => out,
        };
        Ok((out, leaves))
    }

    /// The trunk without the head activation.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        input: ValueId,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let mut leaves = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            leaves.push(tape.leaf_tensor(p.value()));
        }
        let leaf = |name: &str| leaves[self.params.index_of(name).expect("registered")];
        let mut x = input;
        for l in 0..self.depth - 1 {
            let z = tape.matmul(x, leaf(&format!("l{l}_w")))?;
            let z = tape.add_row(z, leaf(&format!("l{l}_b")))?;
            let z = tape.layer_norm(
                z,
                leaf(&format!("l{l}_ln_g")),
                leaf(&format!("l{l}_ln_b")),
            )?;
            x = tape.relu(z);
        }
        let out = tape.matmul(x, leaf("out_w"))?;
        let out = tape.add_row(out, leaf("out_b"))?;
        let out = if self.logit_clamp > 0.0 {
            tape.soft_clamp(out, self.logit_clamp)?
        } else {
            out
        };
        Ok((out, leaves))
    }

    /// Value-only forward over a row-major matrix of inputs.
    pub fn forward_value(&self, rows: &[f64], n_rows: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let input = tape.leaf(vec![n_rows, self.in_dim], rows.to_vec())?;
        let (out, _) = self.forward(&mut tape, input)?;
        Ok(tape.data(out).to_vec())
    }

    /// Accumulates tape gradients of this net's leaves into its parameters.
    fn pull_grads(&mut self, tape: &Tape, leaves: &[ValueId]) -> Result<()> {
        for (idx, leaf) in leaves.iter().enumerate() {
            let g = tape.grad_or_zeros(*leaf);
            self.params.at_mut(idx).accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in logits.iter_mut() {
        *v /= denom;
    }
}

/// One replay tuple (s, a, r, s').
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: AgentState,
    pub action: DomainWeights,
    /// Per-domain reward vector (length 1 for scalar-reward environments).
    pub reward: Vec<f64>,
    pub state_next: AgentState,
}

/// Bounded FIFO of transitions with its own sampling rng.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    rng: rand::rngs::StdRng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
            rng: rand::rngs::StdRng::seed_from_u64(seed),
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample of `n` distinct transitions; the whole buffer in
    /// insertion order when it holds `n` or fewer.
    pub fn sample(&mut self, n: usize) -> Vec<Transition> {
        if self.items.len() <= n {
            return self.items.iter().cloned().collect();
        }
        let picks = rand::seq::index::sample(&mut self.rng, self.items.len(), n);
        picks.iter().map(|i| self.items[i].clone()).collect()
    }
}

/// Elementwise soft update `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(online: &ParamSet, target: &mut ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    if online.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "parameter sets differ: {} vs {}",
            online.len(),
            target.len()
        )));
    }
    for idx in 0..online.len() {
        let src = online.at(idx).value().data().to_vec();
        let dst = target.at_mut(idx).value_mut();
        if dst.numel() != src.len() {
            return Err(Error::ShapeMismatch {
                op: "soft_update",
                lhs: vec![src.len()],
                rhs: vec![dst.numel()],
            });
        }
        for (d, s) in dst.data_mut().iter_mut().zip(&src) {
            *d = tau * s + (1.0 - tau) * *d;
        }
    }
    Ok(())
}

/// Anything that can evaluate Q(s, a) on a tape. The real critic network
/// implements this; tests can plug in analytic critics.
pub trait CriticValue {
    /// `state` is [N, s_dim] and `action` is [N, k]; the result must be
    /// [N, head_dim].
    fn q_on_tape(&self, tape: &mut Tape, state: ValueId, action: ValueId) -> Result<ValueId>;
}

impl CriticValue for MlpNet {
    fn q_on_tape(&self, tape: &mut Tape, state: ValueId, action: ValueId) -> Result<ValueId> {
        let sa = tape.concat_cols(state, action)?;
        let (q, _) = self.forward(tape, sa)?;
        Ok(q)
    }
}

fn features_matrix<'a>(states: impl Iterator<Item = &'a AgentState>) -> (Vec<f64>, usize) {
    let mut rows = Vec::new();
    let mut n = 0;
    for s in states {
        rows.extend(s.to_features());
        n += 1;
    }
    (rows, n)
}

fn actions_matrix(batch: &[Transition]) -> Vec<f64> {
    let mut rows = Vec::new();
    for t in batch {
        rows.extend_from_slice(t.action.as_slice());
    }
    rows
}

/// The DDPG agent: online and target networks plus their optimizers.
pub struct DdpgAgent {
    cfg: AgentConfig,
    k: usize,
    state_dim: usize,
    actor: MlpNet,
    critic: MlpNet,
    target_actor: MlpNet,
    target_critic: MlpNet,
    actor_opt: AdamState,
    critic_opt: AdamState,
    reward_stat: RunningStat,
    rng: rand::rngs::StdRng,
    clip_events: u64,
}

impl DdpgAgent {
    pub fn new(k: usize, state_dim: usize, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if k == 0 || state_dim == 0 {
            return Err(Error::Config("k and state_dim must be positive".into()));
        }
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let head_dim = match cfg.critic_head {
            CriticHead::Scalar => 1,
            CriticHead::PerDomain => k,
        };
        let actor = MlpNet::new(
            state_dim,
            k,
            cfg.hidden_width,
            cfg.depth,
            Head::Softmax,
            &mut rng,
        )?
        .with_logit_clamp(cfg.logit_clamp);
        let critic = MlpNet::new(
            state_dim + k,
            head_dim,
            cfg.hidden_width,
            cfg.depth,
            Head::Identity,
            &mut rng,
        )?;
        let target_actor = actor.clone();
        let target_critic = critic.clone();
        let actor_opt = AdamState::new(actor.params());
        let critic_opt = AdamState::new(critic.params());
        Ok(Self {
            cfg,
            k,
            state_dim,
            actor,
            critic,
            target_actor,
            target_critic,
            actor_opt,
            critic_opt,
            reward_stat: RunningStat::new(),
            rng,
            clip_events: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn actor(&self) -> &MlpNet {
        &self.actor
    }

    pub fn target_actor(&self) -> &MlpNet {
        &self.target_actor
    }

    pub fn critic(&self) -> &MlpNet {
        &self.critic
    }

    pub fn clip_events(&self) -> u64 {
        self.clip_events
    }

    fn head_dim(&self) -> usize {
        match self.cfg.critic_head {
            CriticHead::Scalar => 1,
            CriticHead::PerDomain => self.k,
        }
    }

    /// Reduces a reward vector to the critic's head dimension.
    pub fn reduce_reward(&self, reward: &[f64]) -> Vec<f64> {
        match self.cfg.critic_head {
            CriticHead::Scalar => vec![reward.iter().sum()],
            CriticHead::PerDomain => reward.to_vec(),
        }
    }

    /// Feeds a stored reward into the running standardization statistics.
    pub fn observe_reward(&mut self, reward: &[f64]) {
        if self.cfg.standardize_rewards {
            for v in self.reduce_reward(reward) {
                self.reward_stat.observe(v);
            }
        }
    }

    fn transform_reward(&self, reward: &[f64]) -> Vec<f64> {
        let reduced = self.reduce_reward(reward);
        if self.cfg.standardize_rewards {
            reduced
                .into_iter()
                .map(|v| self.reward_stat.standardize(v))
                .collect()
        } else {
            reduced
        }
    }

    /// Deterministic policy with pre-softmax Gaussian exploration noise.
    /// A zero noise scale draws nothing from the rng.
    pub fn act(&mut self, state: &AgentState, noise_scale: f64) -> Result<DomainWeights> {
        if !state.is_finite() {
            return Err(Error::InvalidArgument("non-finite state".into()));
        }
        let feats = state.to_features();
        if feats.len() != self.state_dim {
            return Err(Error::InvalidArgument(format!(
                "state dim {} does not match agent dim {}",
                feats.len(),
                self.state_dim
            )));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(vec![1, self.state_dim], feats)?;
        // trunk without the softmax head: noise lands on the logits
        let (out, _) = self.actor.forward_logits(&mut tape, input)?;
        let mut logits = tape.data(out).to_vec();
        if noise_scale > 0.0 {
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            for v in logits.iter_mut() {
                *v += noise_scale * normal.sample(&mut self.rng);
            }
        }
        softmax_in_place(&mut logits);
        DomainWeights::new(logits)
    }

    /// TD targets from the target networks:
    /// `y_j = r_j + gamma * Q_target(s'_j, mu_target(s'_j))`.
    /// Returns a flattened [N, head_dim] matrix.
    pub fn td_targets(&self, batch: &[Transition]) -> Result<Vec<f64>> {
        let hd = self.head_dim();
        let (next_feats, n) = features_matrix(batch.iter().map(|t| &t.state_next));
        let mut tape = Tape::new();
        let s_next = tape.leaf(vec![n, self.state_dim], next_feats)?;
        let (a_next, _) = self.target_actor.forward(&mut tape, s_next)?;
        let q_next = self.target_critic.q_on_tape(&mut tape, s_next, a_next)?;
        let qd = tape.data(q_next);
        let mut y = Vec::with_capacity(n * hd);
        for (j, t) in batch.iter().enumerate() {
            let r = self.transform_reward(&t.reward);
            if r.len() != hd {
                return Err(Error::InvalidArgument(format!(
                    "reward dim {} does not match critic head {hd}",
                    r.len()
                )));
            }
            for d in 0..hd {
                y.push(r[d] + self.cfg.gamma * qd[j * hd + d]);
            }
        }
        Ok(y)
    }

    /// One Adam step on the critic's MSE against the TD targets.
    /// Returns the pre-step loss.
    pub fn critic_update(
        &mut self,
        batch: &[Transition],
        targets: &[f64],
        lr: f64,
    ) -> Result<f64> {
        let hd = self.head_dim();
        let (feats, n) = features_matrix(batch.iter().map(|t| &t.state));
        if targets.len() != n * hd {
            return Err(Error::InvalidArgument(format!(
                "{} targets for a [{n}, {hd}] prediction",
                targets.len()
            )));
        }
        let actions = actions_matrix(batch);
        let mut tape = Tape::new();
        let s = tape.leaf(vec![n, self.state_dim], feats)?;
        let a = tape.leaf(vec![n, self.k], actions)?;
        let sa = tape.concat_cols(s, a)?;
        let (pred, leaves) = self.critic.forward(&mut tape, sa)?;
        let y = tape.leaf(vec![n, hd], targets.to_vec())?;
        let diff = tape.sub(pred, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite critic loss {loss_val}"
            )));
        }
        tape.backward(loss)?;
        self.critic.pull_grads(&tape, &leaves)?;
        if self.critic.params.clip_grad_norm(self.cfg.grad_clip)? > self.cfg.grad_clip {
            self.clip_events += 1;
        }
        adam_step(&mut self.critic.params, &mut self.critic_opt, lr)?;
        self.critic.params.clear_grads();
        Ok(loss_val)
    }

    /// One ascent step on the actor through the frozen critic. Returns the
    /// mean Q value before the step.
    pub fn actor_update(&mut self, batch: &[Transition], lr: f64) -> Result<f64> {
        let Self {
            actor,
            critic,
            actor_opt,
            cfg,
            state_dim,
            clip_events,
            ..
        } = self;
        run_actor_update(
            actor,
            actor_opt,
            critic,
            batch,
            *state_dim,
            lr,
            cfg.grad_clip,
            clip_events,
        )
    }

    /// Actor step against an arbitrary critic function (used by tests with
    /// analytic critics).
    pub fn actor_update_with<C: CriticValue>(
        &mut self,
        batch: &[Transition],
        critic: &C,
        lr: f64,
    ) -> Result<f64> {
        let Self {
            actor,
            actor_opt,
            cfg,
            state_dim,
            clip_events,
            ..
        } = self;
        run_actor_update(
            actor,
            actor_opt,
            critic,
            batch,
            *state_dim,
            lr,
            cfg.grad_clip,
            clip_events,
        )
    }

    /// Blends both online networks into their targets with the configured tau.
    pub fn soft_update_targets(&mut self) -> Result<()> {
        soft_update(
            &self.actor.params,
            &mut self.target_actor.params,
            self.cfg.tau,
        )?;
        soft_update(
            &self.critic.params,
            &mut self.target_critic.params,
            self.cfg.tau,
        )
    }

    /// Pre-fits the agent on warmup transitions: the actor regresses onto the
    /// logged (noisy base) weights, the critic onto `(1 + gamma) * r`.
    pub fn warmup_fit(
        &mut self,
        buffer: &mut ReplayBuffer,
        base_weights: &DomainWeights,
    ) -> Result<()> {
        if buffer.is_empty() {
            return Err(Error::InvalidArgument(
                "warmup_fit on an empty replay buffer".into(),
            ));
        }
        if base_weights.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "base weights have {} entries for k = {}",
                base_weights.len(),
                self.k
            )));
        }
        let lr = self.cfg.lr_start;
        for _ in 0..self.cfg.warmup_fit_steps {
            let batch = buffer.sample(self.cfg.minibatch);

            // actor: MSE between the simplex output and the logged action
            {
                let (feats, n) = features_matrix(batch.iter().map(|t| &t.state));
                let labels = actions_matrix(&batch);
                let mut tape = Tape::new();
                let s = tape.leaf(vec![n, self.state_dim], feats)?;
                let (pred, leaves) = self.actor.forward(&mut tape, s)?;
                let y = tape.leaf(vec![n, self.k], labels)?;
                let diff = tape.sub(pred, y)?;
                let sq = tape.mul(diff, diff)?;
                let loss = tape.mean(sq);
                tape.backward(loss)?;
                self.actor.pull_grads(&tape, &leaves)?;
                if self.actor.params.clip_grad_norm(self.cfg.grad_clip)? > self.cfg.grad_clip {
                    self.clip_events += 1;
                }
                adam_step(&mut self.actor.params, &mut self.actor_opt, lr)?;
                self.actor.params.clear_grads();
            }

            // critic: MSE against (1 + gamma) * r
            {
                let hd = self.head_dim();
                let mut labels = Vec::with_capacity(batch.len() * hd);
                for t in &batch {
                    for v in self.transform_reward(&t.reward) {
                        labels.push((1.0 + self.cfg.gamma) * v);
                    }
                }
                self.critic_update(&batch, &labels, lr)?;
            }
        }
        // targets start from the fitted nets
        soft_update(&self.actor.params, &mut self.target_actor.params, 1.0)?;
        soft_update(&self.critic.params, &mut self.target_critic.params, 1.0)?;
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn run_actor_update<C: CriticValue>(
    actor: &mut MlpNet,
    actor_opt: &mut AdamState,
    critic: &C,
    batch: &[Transition],
    state_dim: usize,
    lr: f64,
    grad_clip: f64,
    clip_events: &mut u64,
) -> Result<f64> {
    let (feats, n) = features_matrix(batch.iter().map(|t| &t.state));
    let mut tape = Tape::new();
    let s = tape.leaf(vec![n, state_dim], feats)?;
    let (a, actor_leaves) = actor.forward(&mut tape, s)?;
    let q = critic.q_on_tape(&mut tape, s, a)?;
    let obj = tape.mean(q);
    let obj_val = tape.scalar(obj);
    if !obj_val.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite actor objective {obj_val}"
        )));
    }
    // ascend the critic value: minimize its negation
    let loss = tape.scale(obj, -1.0);
    tape.backward(loss)?;
    actor.pull_grads(&tape, &actor_leaves)?;
    if actor.params.clip_grad_norm(grad_clip)? > grad_clip {
        *clip_events += 1;
    }
    adam_step(&mut actor.params, actor_opt, lr)?;
    actor.params.clear_grads();
    Ok(obj_val)
}

// ── Actor/critic checkpoints ─────────────────────────────────────────────
//
// Layout: magic "ACN1" | u32: kind (0 actor, 1 critic), k, m, width, depth,
// in_dim, out_dim, head (0 softmax, 1 identity) | params f64 little-endian
// in flat_view order.

const NET_MAGIC: &[u8; 4] = b"ACN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Actor,
    Critic,
}

pub fn save_net(net: &MlpNet, kind: NetKind, k: usize, m: usize, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(NET_MAGIC);
    let fields = [
        match kind {
            NetKind::Actor => 0usize,
            NetKind::Critic => 1,
        },
        k,
        m,
        net.width,
        net.depth,
        net.in_dim,
        net.out_dim,
        match net.head {
            Head::Softmax => 0,
            Head::Identity => 1,
        },
    ];
    for v in fields {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&net.logit_clamp.to_le_bytes());
    for v in net.params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<(MlpNet, NetKind, usize, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != NET_MAGIC {
        return Err(Error::Format("bad network magic".into()));
    }
    let mut off = 4usize;
    let take_u32 = |off: &mut usize| -> Result<usize> {
        if *off + 4 > bytes.len() {
            return Err(Error::Format("network file truncated".into()));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v as usize)
    };
    let kind = match take_u32(&mut off)? {
        0 => NetKind::Actor,
        1 => NetKind::Critic,
        other => return Err(Error::Format(format!("unknown net kind {other}"))),
    };
    let k = take_u32(&mut off)?;
    let m = take_u32(&mut off)?;
    let width = take_u32(&mut off)?;
    let depth = take_u32(&mut off)?;
    let in_dim = take_u32(&mut off)?;
    let out_dim = take_u32(&mut off)?;
    let head = match take_u32(&mut off)? {
        0 => Head::Softmax,
        1 => Head::Identity,
        other => return Err(Error::Format(format!("unknown head tag {other}"))),
    };
    if off + 8 > bytes.len() {
        return Err(Error::Format("network file truncated".into()));
    }
    let logit_clamp = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    off += 8;
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    let mut net =
        MlpNet::new(in_dim, out_dim, width, depth, head, &mut rng)?.with_logit_clamp(logit_clamp);
    let flat_len = net.params.flat_len();
    if bytes.len() != off + flat_len * 8 {
        return Err(Error::Format(format!(
            "network payload is {} bytes, expected {}",
            bytes.len(),
            off + flat_len * 8
        )));
    }
    let mut flat = Vec::with_capacity(flat_len);
    for i in 0..flat_len {
        let s = off + i * 8;
        flat.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
    }
    net.params.unflatten(&flat)?;
    Ok((net, kind, k, m))
}
