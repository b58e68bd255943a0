//! Calibration corpora and per-channel activation statistics.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_captured, forward_with, ActivationSink, Model};
use crate::numerics::{accumulate_sq, Matrix};

/// Sequences forwarded concurrently before their squares are folded in.
const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceTag {
    General,
    Task,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::General => "general",
            SourceTag::Task => "task",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub name: String,
    pub sequences: Vec<Vec<u32>>,
    pub source: SourceTag,
}

impl TokenCorpus {
    pub fn new(name: impl Into<String>, source: SourceTag, sequences: Vec<Vec<u32>>) -> Self {
        Self { name: name.into(), sequences, source }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn with_source(mut self, source: SourceTag) -> Self {
        self.source = source;
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sequences.is_empty() || self.total_tokens() == 0 {
            return Err(Error::input(format!("corpus {} is empty", self.name)));
        }
        if let Some(t) = self.sequences.iter().flatten().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::input(format!("corpus {} has token {t} >= vocab {vocab_size}", self.name)));
        }
        Ok(())
    }
}

/// Uniform sample of `n` sequences without replacement, in sampled order.
pub fn sample_corpus(full: &TokenCorpus, n: usize, seed: u64) -> Result<TokenCorpus> {
    if n == 0 {
        return Err(Error::input("sample size must be >= 1"));
    }
    if n > full.len() {
        return Err(Error::input(format!("cannot sample {n} of {} sequences", full.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, full.len(), n);
    let sequences = picked.iter().map(|i| full.sequences[i].clone()).collect();
    Ok(TokenCorpus { name: full.name.clone(), sequences, source: full.source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Balance {
    /// Same number of sequences in both calibration sets.
    #[default]
    Sequences,
    /// Additionally trim the longer set so both hold the same token count.
    Tokens,
}

impl FromStr for Balance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequences" => Ok(Balance::Sequences),
            "tokens" => Ok(Balance::Tokens),
            other => Err(Error::Spec(format!("unknown balance mode {other:?}"))),
        }
    }
}

impl fmt::Display for Balance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Balance::Sequences => "sequences",
            Balance::Tokens => "tokens",
        })
    }
}

/// Drops trailing tokens from whichever corpus has more, until the token
/// counts match. Sequences emptied by the trim are removed.
pub fn balance_by_tokens(a: &TokenCorpus, b: &TokenCorpus) -> (TokenCorpus, TokenCorpus) {
    let target = a.total_tokens().min(b.total_tokens());
    let trim = |c: &TokenCorpus| {
        let mut left = target;
        let sequences = c
            .sequences
            .iter()
            .map_while(|s| {
                if left == 0 {
                    return None;
                }
                let take = s.len().min(left);
                left -= take;
                Some(s[..take].to_vec())
            })
            .filter(|s| !s.is_empty())
            .collect();
        TokenCorpus { name: c.name.clone(), sequences, source: c.source }
    };
    (trim(a), trim(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    pub name: String,
    /// Per input channel: sum over token rows of the squared activation.
    pub sq_sums: Vec<f64>,
    /// Number of token rows `M` that produced the sums.
    pub token_count: u64,
}

impl LayerNorms {
    /// `(1/M) * sum`, the mean squared activation per channel.
    pub fn mean_sq(&self) -> Vec<f64> {
        let m = self.token_count as f64;
        self.sq_sums.iter().map(|s| s / m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationNorms {
    pub source: SourceTag,
    pub layers: Vec<LayerNorms>,
}

impl ActivationNorms {
    pub fn layer(&self, name: &str) -> Option<&LayerNorms> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Checks that the layers line up with the model's prunable layers.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        let expected: Vec<_> = model.prunable_layers().map(|l| (l.name.as_str(), l.weight.cols())).collect();
        let got: Vec<_> = self.layers.iter().map(|l| (l.name.as_str(), l.sq_sums.len())).collect();
        if expected != got {
            return Err(Error::shape(format!("norms {got:?} do not match prunable layers {expected:?}")));
        }
        Ok(())
    }

    fn empty(model: &Model, source: SourceTag) -> Self {
        let layers = model
            .prunable_layers()
            .map(|l| LayerNorms { name: l.name.clone(), sq_sums: vec![0.0; l.weight.cols()], token_count: 0 })
            .collect();
        Self { source, layers }
    }
}

/// Streaming accumulator: folds each recorded block into running sums.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    norms: ActivationNorms,
}

impl NormAccumulator {
    pub fn new(model: &Model, source: SourceTag) -> Self {
        Self { norms: ActivationNorms::empty(model, source) }
    }

    pub fn finish(self) -> ActivationNorms {
        self.norms
    }
}

impl ActivationSink for NormAccumulator {
    fn record(&mut self, slot: usize, layer: &str, inputs: &Matrix) -> Result<()> {
        let ln = self
            .norms
            .layers
            .get_mut(slot)
            .filter(|l| l.name == layer && l.sq_sums.len() == inputs.cols())
            .ok_or_else(|| Error::shape(format!("unexpected capture for {layer} in slot {slot}")))?;
        accumulate_sq(&mut ln.sq_sums, inputs);
        ln.token_count += inputs.rows() as u64;
        Ok(())
    }
}

/// Per-channel squared-norm sums for every prunable layer.
///
/// Sequences are forwarded in parallel batches; squares are folded in
/// sequence order on one thread, so the result equals `col_sq_norms` of the
/// concatenated capture bit for bit regardless of thread count.
pub fn collect_norms(model: &Model, corpus: &TokenCorpus) -> Result<ActivationNorms> {
    corpus.validate(model.spec().vocab_size)?;
    let mut acc = NormAccumulator::new(model, corpus.source);
    for batch in corpus.sequences.chunks(BATCH) {
        let captures =
            batch.par_iter().map(|seq| forward_captured(model, seq).map(|(_, c)| c)).collect::<Result<Vec<_>>>()?;
        for cap in &captures {
            if cap.rows() == 0 {
                continue;
            }
            for (slot, name) in cap.layer_names().enumerate() {
                acc.record(slot, name, &cap.layer(name).expect("layer listed by capture"))?;
            }
        }
    }
    Ok(acc.finish())
}

/// Single-threaded variant that never materialises the capture.
pub fn collect_norms_streaming(model: &Model, corpus: &TokenCorpus) -> Result<ActivationNorms> {
    corpus.validate(model.spec().vocab_size)?;
    let mut acc = NormAccumulator::new(model, corpus.source);
    for seq in &corpus.sequences {
        forward_with(model, seq, Some(&mut acc))?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_captured, Layer, ModelSpec, Nonlinearity};
    use rand::Rng;

    fn spec(vocab: usize, embed: usize, dims: &[usize], nl: Nonlinearity) -> ModelSpec {
        ModelSpec { vocab_size: vocab, embed_dim: embed, layer_dims: dims.to_vec(), nonlinearity: nl, seed: 9 }
    }

    fn random_corpus(seed: u64, vocab: u32, n: usize, source: SourceTag) -> TokenCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = (0..n).map(|_| (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..vocab)).collect()).collect();
        TokenCorpus::new(format!("c{seed}"), source, seqs)
    }

    /// RELU model whose weights are multiples of 1/8 in [-1, 1]; every
    /// activation and partial sum of squares is then exact in f64.
    fn dyadic_model() -> Model {
        let s = spec(10, 4, &[5, 3], Nonlinearity::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = s
            .layer_shapes()
            .into_iter()
            .map(|(name, r, c)| Layer {
                prunable: name.starts_with("fc"),
                weight: Matrix::from_fn(r, c, |_, _| rng.gen_range(-8i32..=8) as f32 / 8.0).unwrap(),
                name,
            })
            .collect();
        Model::from_layers(s, layers).unwrap()
    }

    #[test]
    fn single_token_norm_is_embedding_square() {
        let m = Model::init(spec(6, 3, &[4], Nonlinearity::Relu)).unwrap();
        let c = TokenCorpus::new("one", SourceTag::General, vec![vec![4]]);
        let n = collect_norms(&m, &c).unwrap();
        let e = m.embed().row(4);
        assert_eq!(n.layers[0].token_count, 1);
        for j in 0..3 {
            assert_eq!(n.layers[0].sq_sums[j], (e[j] as f64) * (e[j] as f64));
        }
    }

    #[test]
    fn duplicating_doubles_everything() {
        let m = dyadic_model();
        let c = random_corpus(2, 10, 20, SourceTag::Task);
        let mut dup = c.clone();
        dup.sequences.extend(c.sequences.clone());
        let a = collect_norms(&m, &c).unwrap();
        let b = collect_norms(&m, &dup).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(lb.token_count, 2 * la.token_count);
            for (x, y) in la.sq_sums.iter().zip(&lb.sq_sums) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn union_is_sum_of_parts() {
        let m = dyadic_model();
        let a = random_corpus(3, 10, 15, SourceTag::General);
        let b = random_corpus(4, 10, 9, SourceTag::General);
        let mut ab = a.clone();
        ab.sequences.extend(b.sequences.clone());
        let (na, nb, nab) =
            (collect_norms(&m, &a).unwrap(), collect_norms(&m, &b).unwrap(), collect_norms(&m, &ab).unwrap());
        for ((la, lb), lab) in na.layers.iter().zip(&nb.layers).zip(&nab.layers) {
            assert_eq!(la.token_count + lb.token_count, lab.token_count);
            for j in 0..la.sq_sums.len() {
                assert_eq!(la.sq_sums[j] + lb.sq_sums[j], lab.sq_sums[j]);
            }
        }
    }

    #[test]
    fn union_is_sum_of_parts_on_float_weights() {
        let m = Model::init(spec(30, 8, &[12, 6], Nonlinearity::GeluTanhApprox)).unwrap();
        let a = random_corpus(5, 30, 40, SourceTag::General);
        let b = random_corpus(6, 30, 40, SourceTag::General);
        let mut ab = a.clone();
        ab.sequences.extend(b.sequences.clone());
        let (na, nb, nab) =
            (collect_norms(&m, &a).unwrap(), collect_norms(&m, &b).unwrap(), collect_norms(&m, &ab).unwrap());
        for ((la, lb), lab) in na.layers.iter().zip(&nb.layers).zip(&nab.layers) {
            for j in 0..la.sq_sums.len() {
                let want = la.sq_sums[j] + lb.sq_sums[j];
                assert!((want - lab.sq_sums[j]).abs() <= 1e-12 * want.max(1e-300));
            }
        }
    }

    #[test]
    fn matches_concatenated_capture_exactly() {
        let m = Model::init(spec(50, 16, &[24, 12], Nonlinearity::GeluTanhApprox)).unwrap();
        let c = random_corpus(128, 50, 128, SourceTag::General);
        let norms = collect_norms(&m, &c).unwrap();
        let caps: Vec<_> = c.sequences.iter().map(|s| forward_captured(&m, s).unwrap().1).collect();
        for ln in &norms.layers {
            let parts: Vec<_> = caps.iter().map(|cap| cap.layer(&ln.name).unwrap()).collect();
            let stacked = Matrix::vstack(&parts).unwrap();
            assert_eq!(ln.token_count as usize, stacked.rows());
            let oracle = stacked.col_sq_norms().unwrap();
            for (a, b) in ln.sq_sums.iter().zip(&oracle) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(collect_norms_streaming(&m, &c).unwrap(), norms);
    }

    #[test]
    fn scaling_embedding_scales_norms_quadratically() {
        let m = Model::init(spec(20, 6, &[8, 5], Nonlinearity::Relu)).unwrap();
        let c = random_corpus(8, 20, 30, SourceTag::General);
        let scale = 1.7f32;
        let mut scaled = m.clone();
        scaled.set_weight("embed", m.embed().try_map(|v| v * scale).unwrap()).unwrap();
        let (a, b) = (collect_norms(&m, &c).unwrap(), collect_norms(&scaled, &c).unwrap());
        let c2 = (scale as f64).powi(2);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.sq_sums.iter().zip(&lb.sq_sums) {
                assert!((x * c2 - y).abs() <= 1e-6 * y.abs().max(1e-12), "{x} {y}");
            }
        }
    }

    #[test]
    fn thread_count_invariance() {
        let m = Model::init(spec(40, 12, &[16, 8], Nonlinearity::GeluTanhApprox)).unwrap();
        let c = random_corpus(21, 40, 100, SourceTag::Task);
        let run = |t| {
            rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| collect_norms(&m, &c).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn empty_and_invalid_corpora() {
        let m = Model::init(spec(5, 3, &[4], Nonlinearity::Relu)).unwrap();
        let empty = TokenCorpus::new("e", SourceTag::General, vec![]);
        assert!(matches!(collect_norms(&m, &empty), Err(Error::Input(_))));
        let blank = TokenCorpus::new("b", SourceTag::General, vec![vec![]]);
        assert!(matches!(collect_norms(&m, &blank), Err(Error::Input(_))));
        let oob = TokenCorpus::new("o", SourceTag::General, vec![vec![5]]);
        assert!(matches!(collect_norms(&m, &oob), Err(Error::Input(_))));
    }

    #[test]
    fn sampling() {
        let full = random_corpus(1, 100, 1000, SourceTag::General);
        let all = sample_corpus(&full, 1000, 3).unwrap();
        let mut a: Vec<_> = all.sequences.clone();
        let mut b: Vec<_> = full.sequences.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        assert!(sample_corpus(&full, 0, 3).is_err());
        assert!(sample_corpus(&full, 1001, 3).is_err());
        assert_eq!(sample_corpus(&full, 128, 7).unwrap(), sample_corpus(&full, 128, 7).unwrap());
        assert_ne!(sample_corpus(&full, 128, 7).unwrap(), sample_corpus(&full, 128, 8).unwrap());
    }

    #[test]
    fn token_balancing() {
        let a = TokenCorpus::new("a", SourceTag::General, vec![vec![1, 2, 3], vec![4, 5, 6]]);
        let b = TokenCorpus::new("b", SourceTag::Task, vec![vec![7], vec![8, 9, 9, 9]]);
        let (ta, tb) = balance_by_tokens(&a, &b);
        assert_eq!(ta.total_tokens(), 5);
        assert_eq!(tb, b);
        assert_eq!(ta.sequences, vec![vec![1, 2, 3], vec![4, 5]]);
    }
}
