//! The training environment: a tiny autoregressive LM whose per-domain
//! losses, selected-layer gradients, and weight norms feed the mixing agent.
//!
//! The model is an n-gram MLP: the previous `context_len` tokens are
//! embedded, flattened, and pushed through `n_layers` blocks of
//! dense -> layer norm -> ReLU, then a linear head over the vocabulary.
//! The mixing mechanism never looks inside the architecture, it only needs
//! per-domain losses and gradient slices, so an MLP keeps the environment
//! honest at desk scale.
//!
//! One environment step samples a batch under the current domain weights,
//! computes each domain's mean loss and gradient, applies the
//! weight-rescaled update `theta <- theta - lr * sum_i alpha_i * grad_i`,
//! and reports the observation the agent sees next.

use crate::corpus::{sample_batch, Batch, DomainCorpus, DomainWeights, SeqScorer};
use crate::tensor::{adam_step, sgd_step, AdamState, ParamSet, Tape, Tensor, ValueId};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Architecture and observation wiring for the tiny LM.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyLMConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Number of dense->layernorm->relu blocks.
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// Must match the corpus sequence length.
    pub seq_len: usize,
    /// Tokens of context per prediction.
    pub context_len: usize,
    /// Blocks whose dense weight matrices enter the alignment reward.
    pub reward_layer_indices: Vec<usize>,
    /// Blocks whose weight L2 norms enter the agent state.
    pub state_layer_indices: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Positions scored per sampled document during training; the domain
    /// loss is the mean cross-entropy over all scored positions.
    pub train_positions_per_doc: usize,
}

impl TinyLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "embed_dim, hidden_dim, n_layers must be positive".into(),
            ));
        }
        if self.context_len == 0 || self.context_len >= self.seq_len {
            return Err(Error::Config(format!(
                "context_len {} must be in [1, seq_len)",
                self.context_len
            )));
        }
        if self.train_positions_per_doc == 0 {
            return Err(Error::Config(
                "train_positions_per_doc must be positive".into(),
            ));
        }
        if self.reward_layer_indices.is_empty() {
            return Err(Error::Config("at least one reward layer required".into()));
        }
        for &idx in self
            .reward_layer_indices
            .iter()
            .chain(&self.state_layer_indices)
        {
            if idx >= self.n_layers {
                return Err(Error::Config(format!(
                    "layer index {idx} out of range for {} blocks",
                    self.n_layers
                )));
            }
        }
        Ok(())
    }

    /// State dimension: 3k + 2m + 1.
    pub fn state_dim(&self, k: usize) -> usize {
        3 * k + 2 * self.state_layer_indices.len() + 1
    }
}

/// The agent's observation of the training environment.
///
/// Feature order is frozen: normalized per-domain counts, normalized step,
/// per-domain losses, per-domain loss deltas, selected-layer weight norms,
/// selected-layer weight-delta norms.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub counts_norm: Vec<f64>,
    pub t_norm: f64,
    pub losses: Vec<f64>,
    pub delta_losses: Vec<f64>,
    pub layer_norms: Vec<f64>,
    pub delta_layer_norms: Vec<f64>,
}

impl AgentState {
    pub fn dim(&self) -> usize {
        3 * self.counts_norm.len() + 2 * self.layer_norms.len() + 1
    }

    pub fn to_features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.dim());
        f.extend_from_slice(&self.counts_norm);
        f.push(self.t_norm);
        f.extend_from_slice(&self.losses);
        f.extend_from_slice(&self.delta_losses);
        f.extend_from_slice(&self.layer_norms);
        f.extend_from_slice(&self.delta_layer_norms);
        f
    }

    pub fn zeros(k: usize, m: usize) -> Self {
        Self {
            counts_norm: vec![0.0; k],
            t_norm: 0.0,
            losses: vec![0.0; k],
            delta_losses: vec![0.0; k],
            layer_norms: vec![0.0; m],
            delta_layer_norms: vec![0.0; m],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_features().iter().all(|v| v.is_finite())
    }
}

/// What one environment step hands back to the orchestrator.
#[derive(Debug, Clone)]
pub struct EnvStepOutput {
    pub state_next: AgentState,
    pub per_domain_losses: Vec<f64>,
    /// Flattened gradients of the reward-layer weight matrices, one slice per
    /// domain, all of identical length. Domains with no samples get zeros.
    pub per_domain_selected_grads: Vec<Vec<f64>>,
    pub realized_counts: Vec<usize>,
}

/// The tiny LM itself: a parameter set plus forward-pass builders.
#[derive(Debug, Clone)]
pub struct TinyLM {
    cfg: TinyLMConfig,
    params: ParamSet,
}

fn block_w_name(l: usize) -> String {
    format!("block{l}_w")
}

impl TinyLM {
    pub fn new(cfg: TinyLMConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let normal = |std: f64, n: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("valid normal");
            (0..n).map(|_| dist.sample(rng)).collect()
        };

        let v = cfg.vocab_size;
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let in_dim = cfg.context_len * d;

        params.add("embed", Tensor::new(vec![v, d], normal(0.5, v * d, rng))?)?;
        for l in 0..cfg.n_layers {
            let fan_in = if l == 0 { in_dim } else { h };
            params.add(
                &block_w_name(l),
                Tensor::new(
                    vec![fan_in, h],
                    normal(1.0 / (fan_in as f64).sqrt(), fan_in * h, rng),
                )?,
            )?;
            params.add(&format!("block{l}_b"), Tensor::zeros(vec![h]))?;
            params.add(
                &format!("block{l}_ln_g"),
                Tensor::new(vec![h], vec![1.0; h])?,
            )?;
            params.add(&format!("block{l}_ln_b"), Tensor::zeros(vec![h]))?;
        }
        // small head init keeps the untrained predictive distribution near uniform
        params.add(
            "head_w",
            Tensor::new(vec![h, v], normal(0.02, h * v, rng))?,
        )?;
        params.add("head_b", Tensor::zeros(vec![v]))?;

        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &TinyLMConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Builds logits for a batch of contexts (`batch * context_len` token
    /// ids, row-major). Returns the logits node and the tape leaf of every
    /// parameter, in registration order.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        contexts: &[u32],
        batch: usize,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let c = self.cfg.context_len;
        if contexts.len() != batch * c {
            return Err(Error::InvalidArgument(format!(
                "expected {} context tokens, got {}",
                batch * c,
                contexts.len()
            )));
        }
        let mut leaves = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            leaves.push(tape.leaf_tensor(p.value()));
        }
        let leaf = |name: &str| leaves[self.params.index_of(name).expect("registered")];

        let emb = tape.embed(leaf("embed"), contexts)?;
        let mut x = tape.reshape(emb, vec![batch, c * self.cfg.embed_dim])?;
        for l in 0..self.cfg.n_layers {
            let z = tape.matmul(x, leaf(&block_w_name(l)))?;
            let z = tape.add_row(z, leaf(&format!("block{l}_b")))?;
            let z = tape.layer_norm(
                z,
                leaf(&format!("block{l}_ln_g")),
                leaf(&format!("block{l}_ln_b")),
            )?;
            x = tape.relu(z);
        }
        let logits = tape.matmul(x, leaf("head_w"))?;
        let logits = tape.add_row(logits, leaf("head_b"))?;
        Ok((logits, leaves))
    }

    /// Mean cross-entropy over a batch of (context, target) examples.
    pub fn loss_on_examples(
        &self,
        tape: &mut Tape,
        contexts: &[u32],
        targets: &[usize],
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let (logits, leaves) = self.forward_logits(tape, contexts, targets.len())?;
        let loss = tape.mean_cross_entropy(logits, targets)?;
        Ok((loss, leaves))
    }

    /// Flattened length of one reward-layer gradient slice.
    pub fn reward_slice_len(&self) -> usize {
        self.cfg
            .reward_layer_indices
            .iter()
            .map(|&l| self.params.get(&block_w_name(l)).unwrap().value().numel())
            .sum()
    }

    /// L2 norms of the state-layer weight matrices.
    pub fn state_layer_norms(&self) -> Vec<f64> {
        self.cfg
            .state_layer_indices
            .iter()
            .map(|&l| self.params.get(&block_w_name(l)).unwrap().value().l2_norm())
            .collect()
    }

    fn state_layer_weights(&self) -> Vec<Vec<f64>> {
        self.cfg
            .state_layer_indices
            .iter()
            .map(|&l| {
                self.params
                    .get(&block_w_name(l))
                    .unwrap()
                    .value()
                    .data()
                    .to_vec()
            })
            .collect()
    }
}

impl SeqScorer for TinyLM {
    /// Mean token-level cross-entropy over every predictable position of
    /// every document (positions `context_len..seq_len`).
    fn mean_token_xent(&self, docs: &[Vec<u32>]) -> f64 {
        let c = self.cfg.context_len;
        let mut contexts: Vec<u32> = Vec::new();
        let mut targets: Vec<usize> = Vec::new();
        let mut total_loss = 0.0;
        let mut total_count = 0usize;
        let chunk_rows = 4096;

        let mut flush = |contexts: &mut Vec<u32>, targets: &mut Vec<usize>| {
            if targets.is_empty() {
                return;
            }
            let mut tape = Tape::new();
            let (loss, _) = self
                .loss_on_examples(&mut tape, contexts, targets)
                .expect("validated shapes");
            total_loss += tape.scalar(loss) * targets.len() as f64;
            total_count += targets.len();
            contexts.clear();
            targets.clear();
        };

        for doc in docs {
            for p in c..doc.len() {
                contexts.extend_from_slice(&doc[p - c..p]);
                targets.push(doc[p] as usize);
                if targets.len() >= chunk_rows {
                    flush(&mut contexts, &mut targets);
                }
            }
        }
        flush(&mut contexts, &mut targets);
        if total_count == 0 {
            return 0.0;
        }
        total_loss / total_count as f64
    }
}

/// Learning-rate schedule: linear warmup from `lr_min` to `lr_max` over
/// `warmup_steps`, then cosine decay back to `lr_min` at `total_steps`.
pub fn lr_schedule(
    t: usize,
    total_steps: usize,
    warmup_steps: usize,
    lr_min: f64,
    lr_max: f64,
) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
        )));
    }
    if t > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} beyond total_steps {total_steps}"
        )));
    }
    if t < warmup_steps {
        let frac = t as f64 / warmup_steps as f64;
        return Ok(lr_min + (lr_max - lr_min) * frac);
    }
    let frac = (t - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_min + (lr_max - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// The RL environment: tiny LM + corpus + per-step bookkeeping.
pub struct LmEnv {
    model: TinyLM,
    corpus: Arc<DomainCorpus>,
    opt: Option<AdamState>,
    rng: rand::rngs::StdRng,
    t: usize,
    total_steps: usize,
    explore_frac: f64,
    counts: Vec<u64>,
    losses: Vec<f64>,
    prev_state_weights: Vec<Vec<f64>>,
    state: AgentState,
}

impl LmEnv {
    /// Initializes the model, zeroes counters, and returns the initial state
    /// (delta fields zero, losses zero, step zero).
    pub fn reset(
        cfg: &TinyLMConfig,
        corpus: Arc<DomainCorpus>,
        total_steps: usize,
        explore_frac: f64,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size != corpus.vocab_size {
            return Err(Error::Config(format!(
                "model vocab {} does not match corpus vocab {}",
                cfg.vocab_size, corpus.vocab_size
            )));
        }
        if cfg.seq_len != corpus.seq_len {
            return Err(Error::Config(format!(
                "model seq_len {} does not match corpus seq_len {}",
                cfg.seq_len, corpus.seq_len
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let model = TinyLM::new(cfg.clone(), &mut rng)?;
        let opt = match cfg.optimizer {
            OptimizerKind::Adam => Some(AdamState::new(model.params())),
            OptimizerKind::Sgd => None,
        };
        let k = corpus.k;
        let m = cfg.state_layer_indices.len();
        let mut state = AgentState::zeros(k, m);
        state.layer_norms = model.state_layer_norms();
        let prev_state_weights = model.state_layer_weights();
        Ok(Self {
            model,
            corpus,
            opt,
            rng,
            t: 0,
            total_steps,
            explore_frac,
            counts: vec![0; k],
            losses: vec![0.0; k],
            prev_state_weights,
            state,
        })
    }

    pub fn k(&self) -> usize {
        self.corpus.k
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn model(&self) -> &TinyLM {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TinyLM {
        &mut self.model
    }

    pub fn corpus(&self) -> &DomainCorpus {
        &self.corpus
    }

    /// Per-domain validation losses of the current model.
    pub fn validation_losses(&self) -> Vec<f64> {
        crate::corpus::validation_loss_per_domain(&self.model, &self.corpus)
    }

    /// Samples a batch under `alpha` and advances the environment one step.
    pub fn step(
        &mut self,
        alpha: &DomainWeights,
        batch_size: usize,
        lr_t: f64,
    ) -> Result<EnvStepOutput> {
        let batch = sample_batch(
            &self.corpus,
            alpha,
            batch_size,
            self.explore_frac,
            &mut self.rng,
        )?;
        self.step_with_batch(&batch, alpha, lr_t)
    }

    /// Core update: per-domain losses and gradients on a given batch, then
    /// the alpha-weighted parameter update. Exposed so tests can pin the
    /// batch while checking the update algebra.
    pub fn step_with_batch(
        &mut self,
        batch: &Batch,
        alpha: &DomainWeights,
        lr_t: f64,
    ) -> Result<EnvStepOutput> {
        let k = self.corpus.k;
        if alpha.len() != k {
            return Err(Error::InvalidArgument(format!(
                "alpha has {} entries for {k} domains",
                alpha.len()
            )));
        }
        let c = self.model.cfg.context_len;
        let seq_len = self.corpus.seq_len;
        let slice_len = self.model.reward_slice_len();
        let a = alpha.as_slice();

        let mut losses = vec![0.0; k];
        let mut slices: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut update_accum = vec![0.0f64; self.model.params.flat_len()];

        for domain in 0..k {
            let idxs = &batch.per_domain[domain];
            if idxs.is_empty() {
                // carry the previous loss forward; contribute nothing
                losses[domain] = self.losses[domain];
                slices.push(vec![0.0; slice_len]);
                continue;
            }
            let docs = self.corpus.train_docs(domain);
            let ppd = self.model.cfg.train_positions_per_doc;
            let mut contexts = Vec::with_capacity(idxs.len() * ppd * c);
            let mut targets = Vec::with_capacity(idxs.len() * ppd);
            for &di in idxs {
                let doc = &docs[di];
                for _ in 0..ppd {
                    let p = self.rng.gen_range(c..seq_len);
                    contexts.extend_from_slice(&doc[p - c..p]);
                    targets.push(doc[p] as usize);
                }
            }

            let mut tape = Tape::new();
            let (loss, leaves) = self.model.loss_on_examples(&mut tape, &contexts, &targets)?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {loss_val} on domain {domain} at step {}",
                    self.t
                )));
            }
            losses[domain] = loss_val;
            tape.backward(loss)?;

            // alpha-weighted accumulation in flat_view order
            let weight = a[domain];
            if weight != 0.0 {
                let mut off = 0;
                for leaf in &leaves {
                    let g = tape.grad_or_zeros(*leaf);
                    for (dst, v) in update_accum[off..off + g.len()].iter_mut().zip(&g) {
                        *dst += weight * v;
                    }
                    off += g.len();
                }
            }

            let mut slice = Vec::with_capacity(slice_len);
            for &l in &self.model.cfg.reward_layer_indices {
                let pidx = self.model.params.index_of(&block_w_name(l)).unwrap();
                slice.extend_from_slice(&tape.grad_or_zeros(leaves[pidx]));
            }
            slices.push(slice);
        }

        // write the accumulated gradient and step the optimizer
        {
            let mut off = 0;
            let n_params = self.model.params.len();
            for pidx in 0..n_params {
                let n = self.model.params.at(pidx).value().numel();
                let g = update_accum[off..off + n].to_vec();
                self.model.params.at_mut(pidx).set_grad(g)?;
                off += n;
            }
        }
        match &mut self.opt {
            Some(adam) => adam_step(&mut self.model.params, adam, lr_t)?,
            None => sgd_step(&mut self.model.params, lr_t)?,
        }
        self.model.params.clear_grads();

        // bookkeeping for the next observation
        for (c_total, &got) in self.counts.iter_mut().zip(&batch.realized_counts) {
            *c_total += got as u64;
        }
        self.t += 1;
        let total: u64 = self.counts.iter().sum();
        let counts_norm: Vec<f64> = self
            .counts
            .iter()
            .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect();
        let new_weights = self.model.state_layer_weights();
        let layer_norms = self.model.state_layer_norms();
        let delta_layer_norms: Vec<f64> = new_weights
            .iter()
            .zip(&self.prev_state_weights)
            .map(|(now, before)| {
                now.iter()
                    .zip(before)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.prev_state_weights = new_weights;
        let delta_losses: Vec<f64> = losses
            .iter()
            .zip(&self.losses)
            .map(|(now, before)| now - before)
            .collect();
        self.losses = losses.clone();

        let state_next = AgentState {
            counts_norm,
            t_norm: self.t as f64 / self.total_steps as f64,
            losses: losses.clone(),
            delta_losses,
            layer_norms,
            delta_layer_norms,
        };
        if !state_next.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite state at step {}",
                self.t
            )));
        }
        self.state = state_next.clone();

        Ok(EnvStepOutput {
            state_next,
            per_domain_losses: losses,
            per_domain_selected_grads: slices,
            realized_counts: batch.realized_counts.clone(),
        })
    }

    /// Total samples drawn per domain so far (exact integers).
    pub fn sample_counts(&self) -> &[u64] {
        &self.counts
    }
}

// ── Model checkpoints ────────────────────────────────────────────────────
//
// Layout: magic "TLM1" | u32 header fields (vocab, embed, n_layers, hidden,
// seq_len, context_len, optimizer, reward-index count + indices, state-index
// count + indices) | parameters as f64 little-endian in flat_view order.

const MODEL_MAGIC: &[u8; 4] = b"TLM1";

pub fn save_model(model: &TinyLM, path: &Path) -> Result<()> {
    let cfg = &model.cfg;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    let push_u32 = |buf: &mut Vec<u8>, v: usize| {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    };
    push_u32(&mut buf, cfg.vocab_size);
    push_u32(&mut buf, cfg.embed_dim);
    push_u32(&mut buf, cfg.n_layers);
    push_u32(&mut buf, cfg.hidden_dim);
    push_u32(&mut buf, cfg.seq_len);
    push_u32(&mut buf, cfg.context_len);
    push_u32(&mut buf, cfg.train_positions_per_doc);
    push_u32(
        &mut buf,
        match cfg.optimizer {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
        },
    );
    push_u32(&mut buf, cfg.reward_layer_indices.len());
    for &i in &cfg.reward_layer_indices {
        push_u32(&mut buf, i);
    }
    push_u32(&mut buf, cfg.state_layer_indices.len());
    for &i in &cfg.state_layer_indices {
        push_u32(&mut buf, i);
    }
    for v in model.params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TinyLM> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let mut off = 4usize;
    let take_u32 = |off: &mut usize| -> Result<usize> {
        if *off + 4 > bytes.len() {
            return Err(Error::Format("model file truncated".into()));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v as usize)
    };
    let vocab_size = take_u32(&mut off)?;
    let embed_dim = take_u32(&mut off)?;
    let n_layers = take_u32(&mut off)?;
    let hidden_dim = take_u32(&mut off)?;
    let seq_len = take_u32(&mut off)?;
    let context_len = take_u32(&mut off)?;
    let train_positions_per_doc = take_u32(&mut off)?;
    let optimizer = match take_u32(&mut off)? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::Sgd,
        other => return Err(Error::Format(format!("unknown optimizer tag {other}"))),
    };
    let n_reward = take_u32(&mut off)?;
    let mut reward_layer_indices = Vec::with_capacity(n_reward);
    for _ in 0..n_reward {
        reward_layer_indices.push(take_u32(&mut off)?);
    }
    let n_state = take_u32(&mut off)?;
    let mut state_layer_indices = Vec::with_capacity(n_state);
    for _ in 0..n_state {
        state_layer_indices.push(take_u32(&mut off)?);
    }
    let cfg = TinyLMConfig {
        vocab_size,
        embed_dim,
        n_layers,
        hidden_dim,
        seq_len,
        context_len,
        reward_layer_indices,
        state_layer_indices,
        optimizer,
        train_positions_per_doc,
    };
    let mut seed_rng = rand::rngs::StdRng::seed_from_u64(0);
    let mut model = TinyLM::new(cfg, &mut seed_rng)?;
    let flat_len = model.params.flat_len();
    let expect = off + flat_len * 8;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "model payload is {} bytes, expected {}",
            bytes.len(),
            expect
        )));
    }
    let mut flat = Vec::with_capacity(flat_len);
    for i in 0..flat_len {
        let s = off + i * 8;
        flat.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
    }
    model.params.unflatten(&flat)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};

    fn test_corpus(k: usize, seed: u64) -> Arc<DomainCorpus> {
        let overlap = {
            let mut m = vec![vec![0.3; k]; k];
            for (i, row) in m.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            m
        };
        Arc::new(
            generate(&CorpusSpec {
                k,
                vocab_size: 16,
                seq_len: 12,
                docs_per_domain: 60,
                concentration: vec![0.5; k],
                overlap,
                seed,
            })
            .unwrap(),
        )
    }

    fn test_cfg() -> TinyLMConfig {
        TinyLMConfig {
            vocab_size: 16,
            embed_dim: 4,
            n_layers: 2,
            hidden_dim: 8,
            seq_len: 12,
            context_len: 3,
            reward_layer_indices: vec![1],
            state_layer_indices: vec![0, 1],
            optimizer: OptimizerKind::Adam,
            train_positions_per_doc: 1,
        }
    }

    #[test]
    fn reset_produces_zeroed_initial_state() {
        let corpus = test_corpus(3, 1);
        let env = LmEnv::reset(&test_cfg(), corpus, 100, 0.1, 7).unwrap();
        let s0 = env.state();
        assert_eq!(s0.t_norm, 0.0);
        assert!(s0.delta_losses.iter().all(|&v| v == 0.0));
        assert!(s0.delta_layer_norms.iter().all(|&v| v == 0.0));
        assert!(s0.losses.iter().all(|&v| v == 0.0));
        assert_eq!(s0.dim(), test_cfg().state_dim(3));
    }

    #[test]
    fn reset_is_deterministic() {
        let corpus = test_corpus(3, 1);
        let a = LmEnv::reset(&test_cfg(), corpus.clone(), 100, 0.1, 7).unwrap();
        let b = LmEnv::reset(&test_cfg(), corpus, 100, 0.1, 7).unwrap();
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn reset_rejects_vocab_mismatch() {
        let corpus = test_corpus(3, 1);
        let mut cfg = test_cfg();
        cfg.vocab_size = 32;
        assert!(LmEnv::reset(&cfg, corpus, 100, 0.1, 7).is_err());
    }

    #[test]
    fn t_norm_advances_by_one_over_total() {
        let corpus = test_corpus(3, 1);
        let mut env = LmEnv::reset(&test_cfg(), corpus, 50, 0.0, 7).unwrap();
        let alpha = DomainWeights::uniform(3);
        for expected_step in 1..=3usize {
            let out = env.step(&alpha, 12, 1e-3).unwrap();
            assert!((out.state_next.t_norm - expected_step as f64 / 50.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_weight_domain_contributes_nothing() {
        let corpus = test_corpus(3, 1);
        let mut env = LmEnv::reset(&test_cfg(), corpus, 50, 0.0, 7).unwrap();
        // one prior uniform step so domain 2 has a loss to carry forward
        env.step(&DomainWeights::uniform(3), 12, 1e-3).unwrap();
        let carried = env.state().losses[2];

        let alpha = DomainWeights::new(vec![0.5, 0.5, 0.0]).unwrap();
        let out = env.step(&alpha, 400, 1e-3).unwrap();
        assert_eq!(out.realized_counts[2], 0);
        assert!(out.per_domain_selected_grads[2].iter().all(|&v| v == 0.0));
        assert_eq!(out.per_domain_losses[2], carried);
        assert_eq!(out.state_next.delta_losses[2], 0.0);
    }

    #[test]
    fn uniform_alpha_step_equals_sgd_on_mean_of_domain_losses() {
        // theta - lr * sum_i (1/k) grad_i == theta - lr * grad(mean_i loss_i)
        let corpus = test_corpus(3, 2);
        let mut cfg = test_cfg();
        cfg.optimizer = OptimizerKind::Sgd;
        let mut env = LmEnv::reset(&cfg, corpus.clone(), 50, 0.0, 9).unwrap();
        let theta0 = env.model.params.flatten();

        let batch = Batch {
            per_domain: vec![vec![0, 1, 2, 3], vec![4, 5], vec![6, 7, 8]],
            realized_counts: vec![4, 2, 3],
        };
        // identical twin for the reference computation: same seed, so the
        // rng draws the same per-domain positions in the same order
        let mut ref_env = LmEnv::reset(&cfg, corpus.clone(), 50, 0.0, 9).unwrap();

        let lr = 0.05;
        env.step_with_batch(&batch, &DomainWeights::uniform(3), lr)
            .unwrap();
        let theta_env = env.model.params.flatten();

        // reference: one tape holding all three domain forwards, loss =
        // mean of the per-domain losses, a single backward pass
        let c = cfg.context_len;
        let mut tape = Tape::new();
        let mut losses = Vec::new();
        let mut all_leaves = Vec::new();
        for domain in 0..3 {
            let docs = corpus.train_docs(domain);
            let mut contexts = Vec::new();
            let mut targets = Vec::new();
            for &di in &batch.per_domain[domain] {
                let p = ref_env.rng.gen_range(c..corpus.seq_len);
                contexts.extend_from_slice(&docs[di][p - c..p]);
                targets.push(docs[di][p] as usize);
            }
            let (loss, leaves) = ref_env
                .model
                .loss_on_examples(&mut tape, &contexts, &targets)
                .unwrap();
            losses.push(loss);
            all_leaves.push(leaves);
        }
        let s01 = tape.add(losses[0], losses[1]).unwrap();
        let s012 = tape.add(s01, losses[2]).unwrap();
        let mean_loss = tape.scale(s012, 1.0 / 3.0);
        tape.backward(mean_loss).unwrap();

        // each forward has its own leaves; total grad per param is the sum
        let mut grad = vec![0.0; theta0.len()];
        for leaves in &all_leaves {
            let mut off = 0;
            for leaf in leaves {
                let g = tape.grad_or_zeros(*leaf);
                for (dst, v) in grad[off..off + g.len()].iter_mut().zip(&g) {
                    *dst += v;
                }
                off += g.len();
            }
        }
        for (i, (t0, g)) in theta0.iter().zip(&grad).enumerate() {
            let reference = t0 - lr * g;
            assert!(
                (reference - theta_env[i]).abs() <= 1e-10,
                "param {i}: env {} vs reference {reference}",
                theta_env[i]
            );
        }
    }

    #[test]
    fn same_seed_and_alpha_sequence_is_bitwise_deterministic() {
        let corpus = test_corpus(3, 3);
        let run = || {
            let mut env = LmEnv::reset(&test_cfg(), corpus.clone(), 30, 0.1, 21).unwrap();
            let mut trajectory = Vec::new();
            for t in 0..10 {
                let alpha = if t % 2 == 0 {
                    DomainWeights::uniform(3)
                } else {
                    DomainWeights::new(vec![0.6, 0.3, 0.1]).unwrap()
                };
                let out = env.step(&alpha, 12, 1e-3).unwrap();
                trajectory.extend(out.per_domain_losses);
            }
            (trajectory, env.model.params.flatten())
        };
        let (ta, pa) = run();
        let (tb, pb) = run();
        assert_eq!(ta, tb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn counts_account_for_every_sample() {
        let corpus = test_corpus(3, 4);
        let mut env = LmEnv::reset(&test_cfg(), corpus, 30, 0.1, 22).unwrap();
        for _ in 0..5 {
            env.step(&DomainWeights::uniform(3), 17, 1e-3).unwrap();
        }
        let total: u64 = env.sample_counts().iter().sum();
        assert_eq!(total, 5 * 17);
    }

    #[test]
    fn untrained_model_loss_is_near_log_vocab() {
        let corpus = test_corpus(2, 5);
        let env = LmEnv::reset(&test_cfg(), corpus, 30, 0.0, 23).unwrap();
        let losses = env.validation_losses();
        let ln_v = (16f64).ln();
        for (domain, l) in losses.iter().enumerate() {
            assert!(
                (l - ln_v).abs() < 0.05 * ln_v,
                "domain {domain}: loss {l} vs ln(V) {ln_v}"
            );
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        // ramp endpoint
        assert_eq!(lr_schedule(100, 1000, 100, 1e-5, 1e-3).unwrap(), 1e-3);
        // cosine endpoint
        let end = lr_schedule(1000, 1000, 100, 1e-5, 1e-3).unwrap();
        assert!((end - 1e-5).abs() <= 1e-18);
        // cosine midpoint: t = (warmup + total) / 2 gives the average
        let mid = lr_schedule(550, 1000, 100, 1e-5, 1e-3).unwrap();
        assert!((mid - (1e-5 + 1e-3) / 2.0).abs() <= 1e-12);
        // start of ramp
        assert_eq!(lr_schedule(0, 1000, 100, 1e-5, 1e-3).unwrap(), 1e-5);
        // degenerate warmup=0 starts at lr_max
        assert_eq!(lr_schedule(0, 1000, 0, 1e-5, 1e-3).unwrap(), 1e-3);
        // invalid warmup
        assert!(lr_schedule(0, 100, 100, 1e-5, 1e-3).is_err());
        assert!(lr_schedule(101, 100, 10, 1e-5, 1e-3).is_err());
    }

    #[test]
    fn model_checkpoint_round_trip_is_exact() {
        let corpus = test_corpus(3, 6);
        let mut env = LmEnv::reset(&test_cfg(), corpus, 30, 0.0, 31).unwrap();
        for _ in 0..3 {
            env.step(&DomainWeights::uniform(3), 12, 1e-3).unwrap();
        }
        let dir = std::env::temp_dir().join("acodm_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_model(env.model(), &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params.flatten(), env.model().params.flatten());
        assert_eq!(
            back.cfg.reward_layer_indices,
            env.model().cfg.reward_layer_indices
        );
    }

    #[test]
    fn state_dimension_is_constant_across_steps() {
        let corpus = test_corpus(3, 7);
        let mut env = LmEnv::reset(&test_cfg(), corpus, 30, 0.1, 33).unwrap();
        let dim0 = env.state().dim();
        for _ in 0..4 {
            let out = env.step(&DomainWeights::uniform(3), 12, 1e-3).unwrap();
            assert_eq!(out.state_next.dim(), dim0);
            assert_eq!(out.state_next.to_features().len(), dim0);
        }
    }
}
