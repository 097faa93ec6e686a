//! Token reconstruction from provider-visible projection inputs.
//!
//! The attacker sees the rows sent for one op (the tap), learns one centroid
//! per token from labelled training prompts and labels each attacked row by
//! its nearest centroid. Without masking the layer-0 inputs cluster by token;
//! with masking they should be indistinguishable from noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{OpId, ProjKind};
use crate::model::{GenerateOptions, ModelConfig, ModelWeights, TokenSeq};
use crate::prg::PrgKey;
use crate::protocol::{Enclave, EnclaveOptions, InProcessTransport, Provider};
use crate::ring::RingMatrix;
use crate::stats::binomial_interval;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CorpusKind {
    Uniform,
    /// Rank-frequency exponent.
    Zipf(f64),
}

/// Seeded synthetic prompts.
pub fn synthetic_corpus(kind: CorpusKind, prompts: usize, len: usize, vocab: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match kind {
        CorpusKind::Uniform => {
            (0..prompts).map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()).collect()
        }
        CorpusKind::Zipf(s) => {
            let weights: Vec<f64> = (1..=vocab).map(|r| (r as f64).powf(-s)).collect();
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            (0..prompts).map(|_| (0..len).map(|_| dist.sample(&mut rng) as u32).collect()).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub row: Vec<f64>,
    pub token: u32,
    pub prompt: usize,
    /// Position belongs to the generated response rather than the prompt.
    pub response: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackDataset {
    pub samples: Vec<Sample>,
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Split by prompt: prompts below `cut` train, the rest are attacked.
    pub fn split_by_prompt(&self, cut: usize) -> (AttackDataset, AttackDataset) {
        let (train, attack) = self.samples.iter().cloned().partition(|s| s.prompt < cut);
        (AttackDataset { samples: train }, AttackDataset { samples: attack })
    }

    pub fn filter(&self, response: bool) -> AttackDataset {
        AttackDataset { samples: self.samples.iter().filter(|s| s.response == response).cloned().collect() }
    }
}

/// Plain and wire views of the same positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Views {
    pub plain: AttackDataset,
    pub masked: AttackDataset,
}

/// Run each prompt through a tapped session and label every tapped row with
/// the token at its position.
pub fn collect_views(
    enclave: &Enclave,
    transport: &mut InProcessTransport,
    prompts: &[TokenSeq],
    tap: OpId,
    opts: GenerateOptions,
) -> Result<Views> {
    let mut views = Views::default();
    for (pi, prompt) in prompts.iter().enumerate() {
        let (response, records) = enclave.run_session_tapped(transport, prompt, opts, tap)?;
        transport.take_transcript();
        for rec in records {
            let labels: Vec<(u32, bool)> = if rec.step == 0 {
                prompt.iter().map(|&t| (t, false)).collect()
            } else {
                vec![(response[rec.step as usize - 1], true)]
            };
            if labels.len() != rec.plain.rows() {
                return Err(Error::LengthMismatch { expected: labels.len(), found: rec.plain.rows() });
            }
            for (r, &(token, response)) in labels.iter().enumerate() {
                let plain = rec.plain.dequantize_row(r);
                let masked = rec.masked.dequantize_row(r);
                views.plain.samples.push(Sample { row: plain, token, prompt: pi, response });
                views.masked.samples.push(Sample { row: masked, token, prompt: pi, response });
            }
        }
    }
    Ok(views)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    centroids: BTreeMap<u32, Vec<f64>>,
}

pub fn train_centroids(train: &AttackDataset) -> Result<CentroidModel> {
    let first = train.samples.first().ok_or(Error::EmptyInput)?;
    let width = first.row.len();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for s in &train.samples {
        if s.row.len() != width {
            return Err(Error::LengthMismatch { expected: width, found: s.row.len() });
        }
        let (sum, n) = sums.entry(s.token).or_insert_with(|| (vec![0.0; width], 0));
        for (a, b) in sum.iter_mut().zip(&s.row) {
            *a += b;
        }
        *n += 1;
    }
    let centroids = sums
        .into_iter()
        .map(|(t, (sum, n))| (t, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(CentroidModel { centroids })
}

impl CentroidModel {
    pub fn centroid(&self, token: u32) -> Option<&[f64]> {
        self.centroids.get(&token).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.centroids.keys().copied()
    }

    /// Fail with `EmptyClass` for the first token that has no centroid.
    pub fn require(&self, tokens: impl IntoIterator<Item = u32>) -> Result<()> {
        match tokens.into_iter().find(|t| !self.centroids.contains_key(t)) {
            Some(t) => Err(Error::EmptyClass(t)),
            None => Ok(()),
        }
    }

    /// Nearest centroid in Euclidean distance, lowest token id on ties.
    pub fn predict(&self, row: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, u32::MAX);
        for (&t, c) in &self.centroids {
            let d: f64 = c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, t);
            }
        }
        best.1
    }
}

/// Fraction of positions where the guess equals the truth.
pub fn tra(truth: &[u32], guess: &[u32]) -> Result<f64> {
    if truth.len() != guess.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), found: guess.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = truth.iter().zip(guess).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean cosine similarity between the embedding rows of true and guessed
/// tokens. A stand-in for sentence-level semantic similarity.
pub fn cosine_proxy(truth: &[u32], guess: &[u32], embedding: &RingMatrix) -> Result<f64> {
    if truth.len() != guess.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), found: guess.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let table = embedding.dequantize();
    let row = |t: u32| -> Result<&Vec<f64>> {
        table.get(t as usize).ok_or(Error::TokenOutOfRange { id: t, vocab: table.len() })
    };
    let mut total = 0.0;
    for (&a, &b) in truth.iter().zip(guess) {
        total += cosine(row(a)?, row(b)?);
    }
    Ok(total / truth.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub session_seed: u64,
    pub corpus_seed: u64,
    pub corpus: CorpusKind,
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_new: usize,
    pub train_fraction: f64,
    pub tap: OpId,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            model: ModelConfig::default(),
            model_seed: 1,
            session_seed: 2,
            corpus_seed: 3,
            corpus: CorpusKind::Uniform,
            prompts: 1600,
            prompt_len: 32,
            max_new: 4,
            train_fraction: 0.8,
            tap: OpId::new(0, ProjKind::Q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    /// Tapped op and position class, e.g. `Q0.prompt`.
    pub tap: String,
    pub masked: bool,
    /// Number of attacked positions.
    pub positions: usize,
    pub tra: f64,
    pub cosine_proxy: f64,
    pub chance_level: f64,
    /// 99% acceptance interval of TRA under pure guessing at chance level.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AttackRow {
    pub fn within_chance_interval(&self) -> bool {
        self.ci_low <= self.tra && self.tra <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    /// Self-classification accuracy on the unmasked training rows.
    pub unmasked_train_accuracy: f64,
}

impl AttackReport {
    pub fn row(&self, masked: bool, response: bool) -> Option<&AttackRow> {
        let suffix = if response { ".response" } else { ".prompt" };
        self.rows.iter().find(|r| r.masked == masked && r.tap.ends_with(suffix))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tap,masked,positions,tra,cosine_proxy,chance_level,ci_low,ci_high\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.tap, r.masked, r.positions, r.tra, r.cosine_proxy, r.chance_level, r.ci_low, r.ci_high
            );
        }
        out
    }

    /// Prompt-position clauses: unmasked TRA at least 0.9, masked TRA inside
    /// the chance interval, and a gap of at least 20x.
    pub fn passes(&self) -> bool {
        match (self.row(false, false), self.row(true, false)) {
            (Some(u), Some(m)) => {
                u.tra >= 0.9 && m.within_chance_interval() && (m.tra == 0.0 || u.tra / m.tra >= 20.0)
            }
            _ => false,
        }
    }
}

fn evaluate(
    model: &CentroidModel,
    attack: &AttackDataset,
    embedding: &RingMatrix,
    tap: String,
    masked: bool,
    vocab: usize,
) -> Result<AttackRow> {
    let truth: Vec<u32> = attack.samples.iter().map(|s| s.token).collect();
    let guess: Vec<u32> = attack.samples.iter().map(|s| model.predict(&s.row)).collect();
    let chance = 1.0 / vocab as f64;
    let (ci_low, ci_high) = binomial_interval(truth.len() as u64, chance, 0.99);
    Ok(AttackRow {
        tap,
        masked,
        positions: truth.len(),
        tra: tra(&truth, &guess)?,
        cosine_proxy: cosine_proxy(&truth, &guess, embedding)?,
        chance_level: chance,
        ci_low,
        ci_high,
    })
}

pub fn run_attack_eval(cfg: &AttackConfig) -> Result<AttackReport> {
    let weights = ModelWeights::random(cfg.model, cfg.model_seed)?;
    let provider = Provider::new(weights.projections.clone());
    let mut transport = InProcessTransport::new(provider);
    let mut enclave = Enclave::new(weights.structural.clone(), PrgKey::from_u64(cfg.session_seed), EnclaveOptions::default())?;
    enclave.setup(&mut transport)?;
    let prompts = synthetic_corpus(cfg.corpus, cfg.prompts, cfg.prompt_len, cfg.model.vocab, cfg.corpus_seed);
    let views = collect_views(&enclave, &mut transport, &prompts, cfg.tap, GenerateOptions::new(cfg.max_new))?;
    let cut = ((cfg.prompts as f64) * cfg.train_fraction).round() as usize;
    let embedding = weights.structural.embedding();

    let mut rows = Vec::new();
    let mut train_accuracy = 0.0;
    for (masked, data) in [(false, &views.plain), (true, &views.masked)] {
        let (train, attack) = data.split_by_prompt(cut);
        let model = train_centroids(&train)?;
        if !masked {
            let truth: Vec<u32> = train.samples.iter().map(|s| s.token).collect();
            let guess: Vec<u32> = train.samples.iter().map(|s| model.predict(&s.row)).collect();
            train_accuracy = tra(&truth, &guess)?;
        }
        let prompt_rows = attack.filter(false);
        model.require(prompt_rows.samples.iter().map(|s| s.token))?;
        rows.push(evaluate(&model, &prompt_rows, embedding, format!("{}.prompt", cfg.tap), masked, cfg.model.vocab)?);
        let response_rows = attack.filter(true);
        if !response_rows.is_empty() {
            rows.push(evaluate(&model, &response_rows, embedding, format!("{}.response", cfg.tap), masked, cfg.model.vocab)?);
        }
    }
    Ok(AttackReport { rows, unmasked_train_accuracy: train_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[(&[f64], u32)]) -> AttackDataset {
        AttackDataset {
            samples: rows
                .iter()
                .map(|(r, t)| Sample { row: r.to_vec(), token: *t, prompt: 0, response: false })
                .collect(),
        }
    }

    #[test]
    fn tra_examples() {
        assert_eq!(tra(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!((tra(&[1, 2, 3], &[1, 9, 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(tra(&[1], &[1, 2]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn centroids_and_prediction() {
        let m = train_centroids(&ds(&[(&[1.0, 0.0], 4), (&[0.0, 1.0], 2)])).unwrap();
        assert_eq!(m.centroid(4), Some(&[1.0, 0.0][..]));
        assert_eq!(m.predict(&[0.0, 1.0]), 2);
        // Equidistant: lower id wins.
        assert_eq!(m.predict(&[0.5, 0.5]), 2);
        let dup = train_centroids(&ds(&[(&[1.0, 0.0], 4), (&[1.0, 0.0], 4), (&[0.0, 1.0], 2)])).unwrap();
        assert_eq!(dup, m);
        assert!(matches!(m.require([2, 4, 7]), Err(Error::EmptyClass(7))));
    }

    #[test]
    fn prediction_matches_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let train = AttackDataset {
            samples: (0..200)
                .map(|i| Sample {
                    row: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    token: i % 13,
                    prompt: 0,
                    response: false,
                })
                .collect(),
        };
        let m = train_centroids(&train).unwrap();
        for _ in 0..500 {
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let brute = (0..13u32)
                .map(|t| {
                    let c = m.centroid(t).unwrap();
                    (c.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), t)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            assert_eq!(m.predict(&q), brute.1);
        }
    }

    #[test]
    fn cosine_proxy_examples() {
        let p = crate::ring::QuantParams::default();
        let table = RingMatrix::quantize(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]], p).unwrap();
        assert_eq!(cosine_proxy(&[0, 1], &[0, 1], &table).unwrap(), 1.0);
        assert_eq!(cosine_proxy(&[0], &[1], &table).unwrap(), 0.0);
        assert_eq!(cosine_proxy(&[0], &[2], &table).unwrap(), 1.0);
    }

    #[test]
    fn random_guessing_is_near_chance() {
        let n = 10_000;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..64)).collect();
        let guess: Vec<u32> = (0..n).map(|_| rng.random_range(0..64)).collect();
        let p = 1.0 / 64.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((tra(&truth, &guess).unwrap() - p).abs() <= 3.0 * sigma);
    }

    #[test]
    fn zipf_corpus_is_skewed_and_uniform_is_not() {
        let z = synthetic_corpus(CorpusKind::Zipf(1.2), 200, 16, 64, 1);
        let u = synthetic_corpus(CorpusKind::Uniform, 200, 16, 64, 1);
        let count = |c: &[TokenSeq], t: u32| c.iter().flatten().filter(|&&x| x == t).count();
        assert!(count(&z, 0) > 4 * count(&z, 63));
        assert!(u.iter().flatten().all(|&t| t < 64));
        assert_eq!(synthetic_corpus(CorpusKind::Uniform, 200, 16, 64, 1), u);
    }
}
