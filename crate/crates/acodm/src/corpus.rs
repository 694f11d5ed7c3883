//! Synthetic multi-domain token corpora and mixture-weighted batch sampling.
//!
//! Each domain draws fixed-length token sequences from its own first-order
//! Markov transition table. A domain's table is a convex blend of one shared
//! "hub" table and a private table; the hub mass controls how much generative
//! structure domains have in common, which is what makes cross-domain
//! gradient alignment meaningful. Batches are sampled under the instance-wise
//! mixture induced by the domain weights, with an optional stratified
//! exploration quota split evenly across domains.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// A point on the k-simplex: per-domain sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainWeights(Vec<f64>);

pub const SIMPLEX_TOL: f64 = 1e-9;

impl DomainWeights {
    /// Validates nonnegativity and unit sum (to 1e-9).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and nonnegative: {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// Renormalizes a nonnegative vector onto the simplex.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize weights with sum {sum}"
            )));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(weights)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, idx: usize) -> Self {
        let mut w = vec![0.0; k];
        w[idx] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Description of a synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Number of domains (k >= 2).
    pub k: usize,
    pub vocab_size: usize,
    /// Tokens per document.
    pub seq_len: usize,
    /// Documents generated per domain; the last 10% become the validation split.
    pub docs_per_domain: usize,
    /// Symmetric k-by-k matrix in [0,1]; entry (i, j) is the fraction of
    /// generative structure domains i and j share. Diagonal must be 1.
    pub overlap: Vec<Vec<f64>>,
    /// Dirichlet concentration of each domain's private transition rows.
    /// Small values give peaked, low-entropy, quickly learnable domains;
    /// large values give flat, hard ones. One entry per domain.
    pub concentration: Vec<f64>,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!(
                "seq_len must be >= 2, got {}",
                self.seq_len
            )));
        }
        if self.docs_per_domain < 2 {
            return Err(Error::Config(
                "docs_per_domain must be >= 2 so both splits are nonempty".into(),
            ));
        }
        if self.concentration.len() != self.k
            || self.concentration.iter().any(|&c| !(c > 0.0) || !c.is_finite())
        {
            return Err(Error::Config(format!(
                "concentration must hold {} positive entries",
                self.k
            )));
        }
        if self.overlap.len() != self.k || self.overlap.iter().any(|row| row.len() != self.k) {
            return Err(Error::Config(format!("overlap must be {0}x{0}", self.k)));
        }
        for i in 0..self.k {
            if (self.overlap[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::Config("overlap diagonal must be 1".into()));
            }
            for j in 0..self.k {
                let v = self.overlap[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "overlap[{i}][{j}] = {v} outside [0, 1]"
                    )));
                }
                if (v - self.overlap[j][i]).abs() > 1e-12 {
                    return Err(Error::Config("overlap must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Hub mass for domain `i`: the mean of its off-diagonal overlap row.
    ///
    /// This maps the pairwise overlap matrix onto the single-hub blend model:
    /// identity overlap gives fully private domains, all-ones overlap gives
    /// one shared table, and a hub-shaped matrix concentrates shared mass on
    /// the hub domain.
    pub fn hub_mass(&self, i: usize) -> f64 {
        let mut sum = 0.0;
        for j in 0..self.k {
            if j != i {
                sum += self.overlap[i][j];
            }
        }
        sum / (self.k - 1) as f64
    }
}

/// Builds the hub-shaped overlap matrix: domain 0 shares `hub` with every
/// other domain, all remaining pairs share `others`.
pub fn hub_overlap(k: usize, hub: f64, others: f64) -> Vec<Vec<f64>> {
    let mut m = vec![vec![others; k]; k];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = hub;
        row[i] = 1.0;
    }
    for v in m[0].iter_mut().skip(1) {
        *v = hub;
    }
    m[0][0] = 1.0;
    m
}

/// Generated token data for all domains, already split into train/validation.
#[derive(Debug, Clone)]
pub struct DomainCorpus {
    pub k: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    train: Vec<Vec<Vec<u32>>>,
    validation: Vec<Vec<Vec<u32>>>,
}

impl DomainCorpus {
    pub fn train_docs(&self, domain: usize) -> &[Vec<u32>] {
        &self.train[domain]
    }

    pub fn validation_docs(&self, domain: usize) -> &[Vec<u32>] {
        &self.validation[domain]
    }

    /// Train-split size n_i.
    pub fn domain_size(&self, domain: usize) -> usize {
        self.train[domain].len()
    }

    /// Hex digest identifying the corpus contents; used to guard
    /// cross-run comparisons.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.k as u32).to_le_bytes());
        hasher.update((self.vocab_size as u32).to_le_bytes());
        hasher.update((self.seq_len as u32).to_le_bytes());
        for split in [&self.train, &self.validation] {
            for docs in split {
                hasher.update((docs.len() as u32).to_le_bytes());
                for doc in docs {
                    for &tok in doc {
                        hasher.update(tok.to_le_bytes());
                    }
                }
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ladder of per-domain concentrations from peaked (easy) to flat (hard),
/// geometric between the endpoints.
pub fn concentration_ladder(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let frac = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            lo * (hi / lo).powf(frac)
        })
        .collect()
}

/// Draws one row-stochastic transition table with Dirichlet(`alpha`) rows.
fn random_table(vocab: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma params");
    let mut table = vec![0.0; vocab * vocab];
    for r in 0..vocab {
        let row = &mut table[r * vocab..(r + 1) * vocab];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // floor keeps every transition possible, so cross-entropy stays finite
            *v = gamma.sample(rng) + 1e-4;
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    table
}

fn sample_from_row(row: &[f64], rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut cdf = 0.0;
    for (i, p) in row.iter().enumerate() {
        cdf += p;
        if u < cdf {
            return i as u32;
        }
    }
    (row.len() - 1) as u32
}

/// Generates a corpus from a spec. Pure function of the spec: the same spec
/// always yields bitwise-identical token data.
pub fn generate(spec: &CorpusSpec) -> Result<DomainCorpus> {
    spec.validate()?;
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);

    let hub = random_table(spec.vocab_size, 0.5, &mut rng);
    let mut train = Vec::with_capacity(spec.k);
    let mut validation = Vec::with_capacity(spec.k);
    // a tenth of the documents, capped so validation stays cheap to score
    // on corpora sized for single-pass training
    let n_val = (spec.docs_per_domain / 10).clamp(1, 120);
    let n_train = spec.docs_per_domain - n_val;

    for domain in 0..spec.k {
        let private = random_table(spec.vocab_size, spec.concentration[domain], &mut rng);
        let w = spec.hub_mass(domain);
        let table: Vec<f64> = hub
            .iter()
            .zip(&private)
            .map(|(h, p)| w * h + (1.0 - w) * p)
            .collect();

        let mut docs = Vec::with_capacity(spec.docs_per_domain);
        for _ in 0..spec.docs_per_domain {
            let mut doc = Vec::with_capacity(spec.seq_len);
            let mut tok = rng.gen_range(0..spec.vocab_size as u32);
            doc.push(tok);
            for _ in 1..spec.seq_len {
                let row =
                    &table[tok as usize * spec.vocab_size..(tok as usize + 1) * spec.vocab_size];
                tok = sample_from_row(row, &mut rng);
                doc.push(tok);
            }
            docs.push(doc);
        }
        // validation split: the last documents generated
        let val_docs = docs.split_off(n_train);
        train.push(docs);
        validation.push(val_docs);
    }

    Ok(DomainCorpus {
        k: spec.k,
        vocab_size: spec.vocab_size,
        seq_len: spec.seq_len,
        train,
        validation,
    })
}

/// One sampled batch: per-domain train-document indices.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Document indices into each domain's train split.
    pub per_domain: Vec<Vec<usize>>,
    /// Samples drawn from each domain, exploration included.
    pub realized_counts: Vec<usize>,
}

/// Samples a batch under the mixture distribution.
///
/// `floor(explore_frac * batch_size)` slots are split as evenly as possible
/// across all domains (leftover slots go to the lowest-indexed domains); the
/// remaining slots are assigned by a multinomial draw from `alpha`. Documents
/// are drawn uniformly with replacement within a domain.
pub fn sample_batch(
    corpus: &DomainCorpus,
    alpha: &DomainWeights,
    batch_size: usize,
    explore_frac: f64,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let k = corpus.k;
    if alpha.len() != k {
        return Err(Error::InvalidArgument(format!(
            "alpha has {} entries for {k} domains",
            alpha.len()
        )));
    }
    if !(0.0..=1.0).contains(&explore_frac) {
        return Err(Error::InvalidArgument(format!(
            "explore_frac {explore_frac} outside [0, 1]"
        )));
    }
    if explore_frac > 0.0 && batch_size < k {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} < k = {k} with exploration enabled"
        )));
    }
    for domain in 0..k {
        if corpus.train[domain].is_empty() {
            return Err(Error::InvalidArgument(format!(
                "domain {domain} has an empty train split"
            )));
        }
    }

    let explore_total = (explore_frac * batch_size as f64).floor() as usize;
    let base = explore_total / k;
    let remainder = explore_total % k;
    let mut counts = vec![0usize; k];
    for (domain, c) in counts.iter_mut().enumerate() {
        *c = base + usize::from(domain < remainder);
    }

    // multinomial draw for the non-exploration slots
    let a = alpha.as_slice();
    for _ in explore_total..batch_size {
        let u: f64 = rng.gen();
        let mut cdf = 0.0;
        let mut chosen = k - 1;
        for (domain, &w) in a.iter().enumerate() {
            cdf += w;
            if u < cdf {
                chosen = domain;
                break;
            }
        }
        counts[chosen] += 1;
    }

    let mut per_domain = Vec::with_capacity(k);
    for (domain, &count) in counts.iter().enumerate() {
        let n = corpus.train[domain].len();
        let idx: Vec<usize> = (0..count).map(|_| rng.gen_range(0..n)).collect();
        per_domain.push(idx);
    }

    Ok(Batch {
        per_domain,
        realized_counts: counts,
    })
}

/// Anything that can score token sequences with a mean per-token
/// cross-entropy. The tiny LM implements this.
pub trait SeqScorer {
    fn mean_token_xent(&self, docs: &[Vec<u32>]) -> f64;
}

/// Mean token-level cross-entropy per domain over the full validation split.
pub fn validation_loss_per_domain<S: SeqScorer>(scorer: &S, corpus: &DomainCorpus) -> Vec<f64> {
    (0..corpus.k)
        .map(|domain| scorer.mean_token_xent(&corpus.validation[domain]))
        .collect()
}

// ── Flat binary export/import ───────────────────────────────────────────
//
// Layout (all integers little-endian u32):
//   magic "MDC1" | k | vocab_size | seq_len |
//   per domain: n_train, n_val |
//   per domain: train tokens (n_train * seq_len u32), val tokens (n_val * seq_len u32)

const CORPUS_MAGIC: &[u8; 4] = b"MDC1";

pub fn export_corpus(corpus: &DomainCorpus, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    for v in [corpus.k, corpus.vocab_size, corpus.seq_len] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for domain in 0..corpus.k {
        buf.extend_from_slice(&(corpus.train[domain].len() as u32).to_le_bytes());
        buf.extend_from_slice(&(corpus.validation[domain].len() as u32).to_le_bytes());
    }
    for domain in 0..corpus.k {
        for split in [&corpus.train[domain], &corpus.validation[domain]] {
            for doc in split.iter() {
                for &tok in doc {
                    buf.extend_from_slice(&tok.to_le_bytes());
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn import_corpus(path: &Path) -> Result<DomainCorpus> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take_u32 = |off: &mut usize| -> Result<u32> {
        if *off + 4 > bytes.len() {
            return Err(Error::Format("corpus file truncated".into()));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    if bytes.len() < 4 || &bytes[..4] != CORPUS_MAGIC {
        return Err(Error::Format("bad corpus magic".into()));
    }
    off += 4;
    let k = take_u32(&mut off)? as usize;
    let vocab_size = take_u32(&mut off)? as usize;
    let seq_len = take_u32(&mut off)? as usize;
    if k < 2 || vocab_size < 2 || seq_len < 2 {
        return Err(Error::Format("corpus header out of range".into()));
    }
    let mut sizes = Vec::with_capacity(k);
    for _ in 0..k {
        let n_train = take_u32(&mut off)? as usize;
        let n_val = take_u32(&mut off)? as usize;
        sizes.push((n_train, n_val));
    }
    let mut train = Vec::with_capacity(k);
    let mut validation = Vec::with_capacity(k);
    for &(n_train, n_val) in &sizes {
        let read_docs = |n: usize, off: &mut usize| -> Result<Vec<Vec<u32>>> {
            let mut docs = Vec::with_capacity(n);
            for _ in 0..n {
                let mut doc = Vec::with_capacity(seq_len);
                for _ in 0..seq_len {
                    let tok = take_u32(off)?;
                    if tok as usize >= vocab_size {
                        return Err(Error::Format(format!(
                            "token {tok} exceeds vocab {vocab_size}"
                        )));
                    }
                    doc.push(tok);
                }
                docs.push(doc);
            }
            Ok(docs)
        };
        train.push(read_docs(n_train, &mut off)?);
        validation.push(read_docs(n_val, &mut off)?);
    }
    if off != bytes.len() {
        return Err(Error::Format("trailing bytes in corpus file".into()));
    }
    Ok(DomainCorpus {
        k,
        vocab_size,
        seq_len,
        train,
        validation,
    })
}
