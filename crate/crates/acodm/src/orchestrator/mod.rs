//! End-to-end experiment runs: warmup, the main mixing loop, proxy-to-target
//! transfer, metrics, and overhead accounting.
//!
//! Every mode drives the same environment loop and differs only in how the
//! next domain weights are chosen and which learning machinery runs:
//!
//! - `static`: a fixed mixture for all `T` steps.
//! - `exp3`: the bandit baseline, updated from per-domain losses.
//! - `ac-odm`: warmup with noisy base weights, agent pre-fit by regression,
//!   then the full DDPG loop choosing weights every step.
//! - `ac-odm-transfer`: stage one trains the agent against the proxy model;
//!   stage two trains the target model with the frozen actor choosing
//!   weights from the target's own state, no agent updates and no reward
//!   computation.
//!
//! Random streams are split by purpose (corpus, environment, warmup noise,
//! agent, replay buffer) so ablations that disable one consumer leave the
//! others' draws unchanged.

pub mod metrics;
pub mod report;

pub use metrics::{MetricsRow, RunMeta, Timings};

use crate::agent::{save_net, AgentConfig, DdpgAgent, MlpNet, NetKind, ReplayBuffer, ReplayReward, Transition};
use crate::baselines::{Exp3Config, Exp3State, StaticPolicy};
use crate::corpus::{generate, CorpusSpec, DomainCorpus, DomainWeights};
use crate::lm_env::{lr_schedule, AgentState, LmEnv, TinyLMConfig};
use crate::reward::{alignment, SmoothedReward};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Which policy drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "ac-odm")]
    AcOdm,
    #[serde(rename = "ac-odm-transfer", alias = "transfer")]
    Transfer,
    #[serde(rename = "exp3")]
    Exp3,
    #[serde(rename = "static")]
    Static,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::AcOdm => "ac-odm",
            Mode::Transfer => "ac-odm-transfer",
            Mode::Exp3 => "exp3",
            Mode::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ac-odm" => Ok(Mode::AcOdm),
            "transfer" | "ac-odm-transfer" => Ok(Mode::Transfer),
            "exp3" => Ok(Mode::Exp3),
            "static" => Ok(Mode::Static),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected ac-odm, transfer, exp3, static)"
            ))),
        }
    }
}

/// Step counts, batch sizing, and the model learning-rate schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Total environment steps T (warmup included).
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub explore_frac: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub log_interval: usize,
    pub eval_interval: usize,
}

/// Reward shaping knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Moving-average coefficient for the smoothed reward.
    pub xi: f64,
}

/// The full experiment description. Mirrors the JSON config file
/// field-for-field; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub proxy_model: TinyLMConfig,
    pub target_model: TinyLMConfig,
    pub agent: AgentConfig,
    pub reward: RewardConfig,
    pub schedule: Schedule,
    pub exp3: Exp3Config,
    pub mode: Mode,
    /// Mixture for static mode; uniform when absent. Also the warmup base.
    pub static_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.proxy_model.validate()?;
        self.target_model.validate()?;
        self.agent.validate()?;
        if self.schedule.warmup_steps >= self.schedule.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < steps {}",
                self.schedule.warmup_steps, self.schedule.steps
            )));
        }
        if !(0.0..=0.5).contains(&self.schedule.explore_frac) {
            return Err(Error::Config(format!(
                "explore_frac {} outside [0, 0.5]",
                self.schedule.explore_frac
            )));
        }
        if self.schedule.log_interval == 0 || self.schedule.eval_interval == 0 {
            return Err(Error::Config("log/eval intervals must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.reward.xi) {
            return Err(Error::Config(format!(
                "xi {} outside [0, 1)",
                self.reward.xi
            )));
        }
        if let Some(w) = &self.static_weights {
            if w.len() != self.corpus.k {
                return Err(Error::Config(format!(
                    "static_weights has {} entries for k = {}",
                    w.len(),
                    self.corpus.k
                )));
            }
            DomainWeights::new(w.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Base weights for the warmup phase and static mode.
    pub fn base_weights(&self) -> DomainWeights {
        match &self.static_weights {
            Some(w) => DomainWeights::new(w.clone()).expect("validated"),
            None => DomainWeights::uniform(self.corpus.k),
        }
    }

    /// The desk-scale default experiment: eight domains with a hub-overlap
    /// corpus, a four-block target model, and a quarter-size proxy.
    pub fn desk_default() -> Self {
        Self {
            corpus: CorpusSpec {
                k: 8,
                vocab_size: 64,
                seq_len: 64,
                docs_per_domain: 1200,
                concentration: crate::corpus::concentration_ladder(8, 0.1, 1.2),
                overlap: crate::corpus::hub_overlap(8, 0.8, 0.1),
                seed: 1,
            },
            proxy_model: TinyLMConfig {
                vocab_size: 64,
                embed_dim: 8,
                n_layers: 2,
                hidden_dim: 40,
                seq_len: 64,
                context_len: 8,
                reward_layer_indices: vec![1],
                state_layer_indices: vec![0, 1],
                optimizer: crate::lm_env::OptimizerKind::Adam,
                train_positions_per_doc: 8,
            },
            target_model: TinyLMConfig {
                vocab_size: 64,
                embed_dim: 16,
                n_layers: 4,
                hidden_dim: 80,
                seq_len: 64,
                context_len: 8,
                reward_layer_indices: vec![2, 3],
                state_layer_indices: vec![0, 2],
                optimizer: crate::lm_env::OptimizerKind::Adam,
                train_positions_per_doc: 8,
            },
            agent: AgentConfig::default(),
            reward: RewardConfig { xi: 0.9 },
            schedule: Schedule {
                steps: 3000,
                warmup_steps: 60,
                batch_size: 256,
                explore_frac: 0.1,
                lr_min: 3e-4,
                lr_max: 3e-3,
                log_interval: 10,
                eval_interval: 50,
            },
            exp3: Exp3Config::default(),
            mode: Mode::AcOdm,
            static_weights: None,
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

// Seed salts for the independent random streams.
const SALT_ENV: u64 = 0x9e37_79b9_7f4a_7c15;
const SALT_WARMUP: u64 = 0xa076_1d64_78bd_642f;
const SALT_AGENT: u64 = 0xe703_7ed1_a0b4_28db;
const SALT_BUFFER: u64 = 0x8ebc_6af0_9c88_c6e3;

/// How a single run chooses its weights; used directly by tests, mapped from
/// [`Mode`] by [`run_with_config`].
pub enum RunVariant {
    Static(StaticPolicy),
    Exp3(Exp3State),
    AcOdm {
        agent_updates: bool,
    },
    /// A fixed actor choosing weights from the live state.
    FrozenActor {
        actor: Box<MlpNet>,
        with_warmup: bool,
        compute_alignment: bool,
    },
}

impl RunVariant {
    fn label(&self, cfg: &RunConfig) -> String {
        match self {
            RunVariant::Static(_) => "static".into(),
            RunVariant::Exp3(_) => "exp3".into(),
            RunVariant::AcOdm { .. } => cfg.mode.as_str().to_string(),
            RunVariant::FrozenActor { .. } => match cfg.mode {
                Mode::Transfer => "ac-odm-transfer".into(),
                _ => "frozen-actor".into(),
            },
        }
    }

    fn has_warmup(&self) -> bool {
        match self {
            RunVariant::AcOdm { .. } => true,
            RunVariant::FrozenActor { with_warmup, .. } => *with_warmup,
            _ => false,
        }
    }

    fn computes_alignment(&self) -> bool {
        match self {
            RunVariant::FrozenActor {
                compute_alignment, ..
            } => *compute_alignment,
            _ => true,
        }
    }
}

/// Everything a single run produces.
pub struct RunOutput {
    pub meta: RunMeta,
    pub rows: Vec<MetricsRow>,
    pub timings: Timings,
    pub metrics_path: PathBuf,
    pub overhead_path: PathBuf,
    pub actor_path: Option<PathBuf>,
    /// Final target-network actor (the algorithm's return value).
    pub final_actor: Option<MlpNet>,
    /// Online actor right after the warmup regression, for ablations.
    pub post_warmup_actor: Option<MlpNet>,
    pub final_mean_val_loss: f64,
    pub grad_clip_events: u64,
}

/// Outputs of a full `run_with_config` invocation. Transfer mode fills both
/// fields; every other mode only `primary`.
pub struct RunOutputs {
    pub primary: RunOutput,
    pub proxy: Option<RunOutput>,
}

/// Dispatches a validated config to its mode's runner.
pub fn run_with_config(cfg: &RunConfig, corpus: Option<Arc<DomainCorpus>>) -> Result<RunOutputs> {
    cfg.validate()?;
    let corpus = match corpus {
        Some(c) => c,
        None => Arc::new(generate(&cfg.corpus)?),
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    match cfg.mode {
        Mode::Static => {
            let policy = StaticPolicy::new(cfg.base_weights());
            let out = run_single(
                cfg,
                &cfg.target_model,
                corpus,
                RunVariant::Static(policy),
                "metrics.csv",
            )?;
            Ok(RunOutputs {
                primary: out,
                proxy: None,
            })
        }
        Mode::Exp3 => {
            let state = Exp3State::new(cfg.corpus.k, cfg.exp3)?;
            let out = run_single(
                cfg,
                &cfg.target_model,
                corpus,
                RunVariant::Exp3(state),
                "metrics.csv",
            )?;
            Ok(RunOutputs {
                primary: out,
                proxy: None,
            })
        }
        Mode::AcOdm => {
            let out = run_single(
                cfg,
                &cfg.target_model,
                corpus,
                RunVariant::AcOdm {
                    agent_updates: true,
                },
                "metrics.csv",
            )?;
            Ok(RunOutputs {
                primary: out,
                proxy: None,
            })
        }
        Mode::Transfer => run_transfer(cfg, corpus, None),
    }
}

/// Two-stage transfer: train the policy against the proxy model, then train
/// the target model under the frozen actor. An existing actor checkpoint
/// skips stage one.
pub fn run_transfer(
    cfg: &RunConfig,
    corpus: Arc<DomainCorpus>,
    actor_checkpoint: Option<&Path>,
) -> Result<RunOutputs> {
    let m_proxy = cfg.proxy_model.state_layer_indices.len();
    let m_target = cfg.target_model.state_layer_indices.len();
    if m_proxy != m_target {
        return Err(Error::Config(format!(
            "proxy and target state dimensions differ (m = {m_proxy} vs {m_target}); \
             state_layer_indices must produce equal m for the actor to transfer"
        )));
    }

    let (actor, proxy_out) = match actor_checkpoint {
        Some(path) => {
            let (net, kind, k, _m) = crate::agent::load_net(path)?;
            if kind != NetKind::Actor {
                return Err(Error::Config(format!(
                    "{} is not an actor checkpoint",
                    path.display()
                )));
            }
            if k != cfg.corpus.k {
                return Err(Error::Config(format!(
                    "actor checkpoint was trained for k = {k}, corpus has {}",
                    cfg.corpus.k
                )));
            }
            (net, None)
        }
        None => {
            let proxy_out = run_single(
                cfg,
                &cfg.proxy_model,
                corpus.clone(),
                RunVariant::AcOdm {
                    agent_updates: true,
                },
                "metrics_proxy.csv",
            )?;
            let actor = proxy_out
                .final_actor
                .clone()
                .ok_or_else(|| Error::Config("proxy stage produced no actor".into()))?;
            (actor, Some(proxy_out))
        }
    };

    let expected_dim = cfg.target_model.state_dim(cfg.corpus.k);
    if actor.in_dim() != expected_dim {
        return Err(Error::Config(format!(
            "actor expects state dim {}, target environment produces {expected_dim}; \
             state_layer_indices must produce equal m",
            actor.in_dim()
        )));
    }

    let target_out = run_single(
        cfg,
        &cfg.target_model,
        corpus,
        RunVariant::FrozenActor {
            actor: Box::new(actor),
            with_warmup: false,
            compute_alignment: false,
        },
        "metrics.csv",
    )?;
    Ok(RunOutputs {
        primary: target_out,
        proxy: proxy_out,
    })
}

fn noise_scale(cfg: &AgentConfig, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.noise_start;
    }
    let frac = t as f64 / (total - 1) as f64;
    cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac
}

/// Clamps noisy warmup weights onto the simplex: negative entries go to a
/// small floor, then the vector is renormalized.
fn project_noisy_weights(raw: &[f64]) -> DomainWeights {
    let floored: Vec<f64> = raw.iter().map(|&v| v.max(1e-4)).collect();
    DomainWeights::normalized(floored).expect("floored weights normalize")
}

/// Runs one environment loop with the given variant and writes its metrics
/// and overhead files. This is the common engine behind every mode.
pub fn run_single(
    cfg: &RunConfig,
    model_cfg: &TinyLMConfig,
    corpus: Arc<DomainCorpus>,
    mut variant: RunVariant,
    metrics_name: &str,
) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let k = cfg.corpus.k;
    let total_steps = cfg.schedule.steps;
    let warmup_steps = if variant.has_warmup() {
        cfg.schedule.warmup_steps
    } else {
        0
    };
    let label = variant.label(cfg);
    let corpus_hash = corpus.content_hash();

    let wall_start = Instant::now();
    let mut timings = Timings::default();

    let mut env = LmEnv::reset(
        model_cfg,
        corpus,
        total_steps,
        cfg.schedule.explore_frac,
        cfg.seed ^ SALT_ENV,
    )?;
    let mut warmup_rng = rand::rngs::StdRng::seed_from_u64(cfg.seed ^ SALT_WARMUP);
    let warmup_noise = Normal::new(0.0, 0.02).expect("valid normal");

    // agent machinery exists only for the ac-odm variant
    let (mut agent, mut buffer) = match &variant {
        RunVariant::AcOdm { .. } => {
            let state_dim = model_cfg.state_dim(k);
            let agent = DdpgAgent::new(k, state_dim, cfg.agent.clone(), cfg.seed ^ SALT_AGENT)?;
            let buffer = ReplayBuffer::new(cfg.agent.capacity, cfg.seed ^ SALT_BUFFER)?;
            (Some(agent), Some(buffer))
        }
        _ => (None, None),
    };

    let base_weights = cfg.base_weights();
    let mut smoothed = SmoothedReward::new(k, cfg.reward.xi)?;
    let mut prev_alpha: Option<DomainWeights> = None;
    let mut post_warmup_actor: Option<MlpNet> = None;

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut last_val: Vec<f64>;
    let mut state: AgentState = env.state().clone();

    // helper: mean of a vector
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    // step-0 row: the untouched model under the nominal starting mixture
    {
        let t0 = Instant::now();
        last_val = env.validation_losses();
        timings.validation_s += t0.elapsed().as_secs_f64();
        let alpha0 = match &variant {
            RunVariant::Static(p) => p.weights().clone(),
            RunVariant::Exp3(s) => s.policy(),
            _ => base_weights.clone(),
        };
        rows.push(MetricsRow {
            step: 0,
            alpha: alpha0.as_slice().to_vec(),
            train_loss: vec![0.0; k],
            val_loss: last_val.clone(),
            val_ppl: last_val.iter().map(|l| l.exp()).collect(),
            mean_val_loss: mean(&last_val),
            mean_val_ppl: mean(&last_val.iter().map(|l| l.exp()).collect::<Vec<_>>()),
            reward: vec![0.0; k],
        });
    }

    let metrics_path = cfg.output_dir.join(metrics_name);
    let overhead_name = metrics_name.replace("metrics", "overhead");
    let overhead_path = cfg.output_dir.join(&overhead_name);
    let meta = RunMeta {
        mode: label.clone(),
        seed: cfg.seed,
        steps: total_steps,
        k,
        corpus_hash: corpus_hash.clone(),
    };

    // the main loop; on divergence, flush partial metrics before returning
    let loop_result = (|| -> Result<()> {
        for t in 0..total_steps {
            let lr_t = lr_schedule(t, total_steps, cfg.schedule.warmup_steps, cfg.schedule.lr_min, cfg.schedule.lr_max)?;

            // choose the mixture
            let tp = Instant::now();
            let alpha = if t < warmup_steps {
                let raw: Vec<f64> = base_weights
                    .as_slice()
                    .iter()
                    .map(|&w| w + warmup_noise.sample(&mut warmup_rng))
                    .collect();
                project_noisy_weights(&raw)
            } else {
                match &mut variant {
                    RunVariant::Static(p) => p.weights().clone(),
                    RunVariant::Exp3(s) => s.policy(),
                    RunVariant::AcOdm { .. } => {
                        let scale = noise_scale(&cfg.agent, t, total_steps);
                        agent.as_mut().expect("ac-odm has an agent").act(&state, scale)?
                    }
                    RunVariant::FrozenActor { actor, .. } => {
                        let mut logits = actor.forward_value(&state.to_features(), 1)?;
                        // frozen actors carry a softmax head: already weights
                        DomainWeights::new(std::mem::take(&mut logits))?
                    }
                }
            };
            timings.policy_s += tp.elapsed().as_secs_f64();

            // environment transition
            let te = Instant::now();
            let out = env.step(&alpha, cfg.schedule.batch_size, lr_t)?;
            timings.env_s += te.elapsed().as_secs_f64();

            // reward
            let ta = Instant::now();
            let reward_vec = if variant.computes_alignment() {
                let scores = alignment(&out.per_domain_selected_grads)?;
                let denom_alpha = prev_alpha.as_ref().unwrap_or(&alpha);
                smoothed.update(&scores, denom_alpha)?;
                match cfg.agent.replay_reward {
                    ReplayReward::Smoothed => smoothed.r_hat.clone(),
                    ReplayReward::Raw => scores.w.clone(),
                }
            } else {
                vec![0.0; k]
            };
            timings.alignment_s += ta.elapsed().as_secs_f64();

            // learning machinery
            let tu = Instant::now();
            match &mut variant {
                RunVariant::Exp3(s) => {
                    s.update(&out.per_domain_losses, &alpha, &out.realized_counts)?;
                }
                RunVariant::AcOdm { agent_updates } => {
                    let agent = agent.as_mut().expect("ac-odm has an agent");
                    let buffer = buffer.as_mut().expect("ac-odm has a buffer");
                    agent.observe_reward(&reward_vec);
                    buffer.push(Transition {
                        state: state.clone(),
                        action: alpha.clone(),
                        reward: reward_vec.clone(),
                        state_next: out.state_next.clone(),
                    });
                    if t + 1 == warmup_steps {
                        agent.warmup_fit(buffer, &base_weights)?;
                        post_warmup_actor = Some(agent.actor().clone());
                    }
                    if *agent_updates && t >= warmup_steps {
                        let lr_ac = lr_schedule(
                            t,
                            total_steps,
                            0,
                            cfg.agent.lr_end,
                            cfg.agent.lr_start,
                        )?;
                        let batch = buffer.sample(cfg.agent.minibatch);
                        let targets = agent.td_targets(&batch)?;
                        agent.critic_update(&batch, &targets, lr_ac)?;
                        agent.actor_update(&batch, lr_ac)?;
                        agent.soft_update_targets()?;
                    }
                }
                _ => {}
            }
            timings.agent_update_s += tu.elapsed().as_secs_f64();

            prev_alpha = Some(alpha.clone());
            state = out.state_next.clone();

            // validation + logging
            if (t + 1) % cfg.schedule.eval_interval == 0 {
                let tv = Instant::now();
                last_val = env.validation_losses();
                timings.validation_s += tv.elapsed().as_secs_f64();
            }
            if (t + 1) % cfg.schedule.log_interval == 0 {
                let ppl: Vec<f64> = last_val.iter().map(|l| l.exp()).collect();
                rows.push(MetricsRow {
                    step: t + 1,
                    alpha: alpha.as_slice().to_vec(),
                    train_loss: out.per_domain_losses.clone(),
                    val_loss: last_val.clone(),
                    val_ppl: ppl.clone(),
                    mean_val_loss: mean(&last_val),
                    mean_val_ppl: mean(&ppl),
                    reward: reward_vec.clone(),
                });
            }
        }
        Ok(())
    })();

    timings.total_s = wall_start.elapsed().as_secs_f64();

    // flush metrics even when the loop aborted, then propagate the error
    metrics::write_metrics(&metrics_path, &meta, &rows)?;
    metrics::write_overhead(&overhead_path, &timings)?;
    loop_result?;

    // the algorithm returns the target-network actor
    let (final_actor, actor_path) = match (&variant, &agent) {
        (RunVariant::AcOdm { .. }, Some(agent)) => {
            let net = agent.target_actor().clone();
            let m = model_cfg.state_layer_indices.len();
            let path = cfg.output_dir.join(metrics_name.replace("metrics", "actor").replace(".csv", ".ckpt"));
            save_net(&net, NetKind::Actor, k, m, &path)?;
            (Some(net), Some(path))
        }
        _ => (None, None),
    };

    let final_mean_val_loss = rows
        .last()
        .map(|r| r.mean_val_loss)
        .unwrap_or(f64::INFINITY);
    let grad_clip_events = agent.as_ref().map(|a| a.clip_events()).unwrap_or(0);

    Ok(RunOutput {
        meta,
        rows,
        timings,
        metrics_path,
        overhead_path,
        actor_path,
        final_actor,
        post_warmup_actor,
        final_mean_val_loss,
        grad_clip_events,
    })
}

/// Builds an actor whose output is exactly the uniform mixture, for
/// equivalence checks between frozen-actor and static runs.
pub fn uniform_actor(state_dim: usize, k: usize, width: usize, depth: usize) -> Result<MlpNet> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    let mut net = MlpNet::new(state_dim, k, width, depth, crate::agent::Head::Softmax, &mut rng)?;
    for idx in 0..net.params().len() {
        let p = net.params_mut().at_mut(idx);
        let zeros = vec![0.0; p.value().numel()];
        p.value_mut().data_mut().copy_from_slice(&zeros);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run_config(dir: &str) -> RunConfig {
        let mut cfg = RunConfig::desk_default();
        cfg.corpus = CorpusSpec {
            k: 3,
            vocab_size: 32,
            seq_len: 16,
            docs_per_domain: 60,
            concentration: vec![0.5; 3],
            overlap: crate::corpus::hub_overlap(3, 0.8, 0.1),
            seed: 5,
        };
        cfg.proxy_model = TinyLMConfig {
            vocab_size: 32,
            embed_dim: 4,
            n_layers: 2,
            hidden_dim: 12,
            seq_len: 16,
            context_len: 4,
            reward_layer_indices: vec![1],
            state_layer_indices: vec![0],
            optimizer: crate::lm_env::OptimizerKind::Adam,
            train_positions_per_doc: 2,
        };
        cfg.target_model = TinyLMConfig {
            vocab_size: 32,
            embed_dim: 6,
            n_layers: 3,
            hidden_dim: 16,
            seq_len: 16,
            context_len: 4,
            reward_layer_indices: vec![2],
            state_layer_indices: vec![1],
            optimizer: crate::lm_env::OptimizerKind::Adam,
            train_positions_per_doc: 2,
        };
        cfg.agent.hidden_width = 8;
        cfg.agent.depth = 3;
        cfg.agent.minibatch = 16;
        cfg.agent.capacity = 512;
        cfg.agent.warmup_fit_steps = 20;
        cfg.schedule = Schedule {
            steps: 40,
            warmup_steps: 8,
            batch_size: 24,
            explore_frac: 0.1,
            lr_min: 1e-4,
            lr_max: 1e-3,
            log_interval: 10,
            eval_interval: 20,
        };
        cfg.seed = 11;
        cfg.output_dir = std::env::temp_dir().join(dir);
        cfg
    }

    #[test]
    fn metrics_row_count_matches_schedule() {
        let mut cfg = tiny_run_config("acodm_orch_rows");
        cfg.mode = Mode::Static;
        let out = run_with_config(&cfg, None).unwrap();
        // steps / log_interval data rows plus the step-0 row
        assert_eq!(out.primary.rows.len(), 40 / 10 + 1);
        assert_eq!(out.primary.rows[0].step, 0);
        assert_eq!(out.primary.rows.last().unwrap().step, 40);
    }

    #[test]
    fn identical_seeds_give_identical_metrics_files() {
        for mode in [Mode::Static, Mode::Exp3, Mode::AcOdm] {
            let mut cfg = tiny_run_config("acodm_orch_det_a");
            cfg.mode = mode;
            let a = run_with_config(&cfg, None).unwrap();
            let bytes_a = std::fs::read(&a.primary.metrics_path).unwrap();
            cfg.output_dir = std::env::temp_dir().join("acodm_orch_det_b");
            let b = run_with_config(&cfg, None).unwrap();
            let bytes_b = std::fs::read(&b.primary.metrics_path).unwrap();
            assert_eq!(bytes_a, bytes_b, "mode {:?} not deterministic", mode);
        }
    }

    #[test]
    fn every_logged_alpha_is_on_the_simplex() {
        for mode in [Mode::Static, Mode::Exp3, Mode::AcOdm] {
            let mut cfg = tiny_run_config("acodm_orch_simplex");
            cfg.mode = mode;
            let out = run_with_config(&cfg, None).unwrap();
            for row in &out.primary.rows {
                let sum: f64 = row.alpha.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "mode {mode:?} step {}", row.step);
                assert!(row.alpha.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn static_mode_alpha_never_varies() {
        let mut cfg = tiny_run_config("acodm_orch_static");
        cfg.mode = Mode::Static;
        cfg.static_weights = Some(vec![0.5, 0.25, 0.25]);
        let out = run_with_config(&cfg, None).unwrap();
        for row in &out.primary.rows {
            assert_eq!(row.alpha, vec![0.5, 0.25, 0.25]);
        }
    }

    #[test]
    fn warmup_fills_buffer_and_noisy_weights_follow_base() {
        // zero-variance noise keeps alpha at the base weights: covered by
        // project_noisy_weights directly
        let base = [0.5, 0.3, 0.2];
        let w = project_noisy_weights(&base);
        for (a, b) in w.as_slice().iter().zip(&base) {
            assert!((a - b).abs() <= 1e-12);
        }
        // negative entries are clamped then renormalized
        let w = project_noisy_weights(&[-0.05, 0.6, 0.45]);
        assert!(w.as_slice()[0] > 0.0);
        let sum: f64 = w.as_slice().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn transfer_rejects_mismatched_state_dims() {
        let mut cfg = tiny_run_config("acodm_orch_mismatch");
        cfg.mode = Mode::Transfer;
        cfg.proxy_model.state_layer_indices = vec![0, 1];
        // target keeps m = 1: transfer must fail with the remediation hint
        let msg = match run_with_config(&cfg, None) {
            Err(e) => format!("{e}"),
            Ok(_) => panic!("mismatched state dims must be rejected"),
        };
        assert!(msg.contains("state_layer_indices"), "{msg}");
    }

    #[test]
    fn frozen_uniform_actor_reproduces_static_uniform_run() {
        let base = tiny_run_config("acodm_orch_equiv_static");
        let corpus = Arc::new(generate(&base.corpus).unwrap());

        let mut cfg_static = base.clone();
        cfg_static.mode = Mode::Static;
        cfg_static.static_weights = None;
        let static_out = run_single(
            &cfg_static,
            &cfg_static.target_model.clone(),
            corpus.clone(),
            RunVariant::Static(StaticPolicy::uniform(3)),
            "metrics.csv",
        )
        .unwrap();

        let mut cfg_frozen = base.clone();
        cfg_frozen.output_dir = std::env::temp_dir().join("acodm_orch_equiv_frozen");
        let state_dim = cfg_frozen.target_model.state_dim(3);
        let actor = uniform_actor(state_dim, 3, 8, 3).unwrap();
        let frozen_out = run_single(
            &cfg_frozen,
            &cfg_frozen.target_model.clone(),
            corpus,
            RunVariant::FrozenActor {
                actor: Box::new(actor),
                with_warmup: false,
                compute_alignment: true,
            },
            "metrics.csv",
        )
        .unwrap();

        assert_eq!(static_out.rows.len(), frozen_out.rows.len());
        for (a, b) in static_out.rows.iter().zip(&frozen_out.rows) {
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_loss, b.val_loss);
            assert_eq!(a.reward, b.reward);
        }
    }

    #[test]
    fn frozen_agent_run_equals_frozen_actor_run() {
        // ac-odm with updates disabled and zero noise must match a frozen
        // run of its own post-warmup actor, bit for bit
        let mut cfg = tiny_run_config("acodm_orch_ablation_a");
        cfg.agent.noise_start = 0.0;
        cfg.agent.noise_end = 0.0;
        let corpus = Arc::new(generate(&cfg.corpus).unwrap());
        let run_a = run_single(
            &cfg,
            &cfg.target_model.clone(),
            corpus.clone(),
            RunVariant::AcOdm {
                agent_updates: false,
            },
            "metrics.csv",
        )
        .unwrap();
        let actor = run_a.post_warmup_actor.clone().expect("warmup ran");

        let mut cfg_b = cfg.clone();
        cfg_b.output_dir = std::env::temp_dir().join("acodm_orch_ablation_b");
        let run_b = run_single(
            &cfg_b,
            &cfg_b.target_model.clone(),
            corpus,
            RunVariant::FrozenActor {
                actor: Box::new(actor),
                with_warmup: true,
                compute_alignment: true,
            },
            "metrics.csv",
        )
        .unwrap();

        let bytes_a = std::fs::read(&run_a.metrics_path).unwrap();
        let bytes_b = std::fs::read(&run_b.metrics_path).unwrap();
        // the files differ only in the mode tag on the comment line
        let body = |b: &[u8]| {
            let s = String::from_utf8(b.to_vec()).unwrap();
            s.lines().skip(1).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(body(&bytes_a), body(&bytes_b));
    }

    #[test]
    fn transfer_stage_two_keeps_actor_frozen() {
        let mut cfg = tiny_run_config("acodm_orch_transfer");
        cfg.mode = Mode::Transfer;
        cfg.proxy_model.state_layer_indices = vec![0];
        cfg.target_model.state_layer_indices = vec![1];
        let out = run_with_config(&cfg, None).unwrap();
        let proxy = out.proxy.expect("transfer has a proxy stage");
        assert!(proxy.final_actor.is_some());
        // stage 2 never computes rewards
        for row in &out.primary.rows {
            assert!(row.reward.iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.primary.meta.mode, "ac-odm-transfer");
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_keys() {
        let cfg = RunConfig::desk_default();
        let json = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();

        let mut broken: serde_json::Value = serde_json::from_str(&json).unwrap();
        broken["surprise_knob"] = serde_json::json!(1);
        let res: std::result::Result<RunConfig, _> =
            serde_json::from_value(broken);
        assert!(res.is_err(), "unknown keys must be rejected");
    }
}
