//! Synthetic general/task corpus pairs with a planted channel structure.
//!
//! The vocabulary has three equal token groups: shared, general-only and
//! task-only. The embedding channels are split the same way, with a fraction
//! `overlap` of them shared. A token of group X is nonzero exactly on the
//! channels of group X, with magnitudes uniform in `[0.5, 1.5)` and random
//! sign. Both corpora come from one Markov chain: at every position the next
//! token is drawn from the shared group with probability `overlap`, else from
//! the corpus' own exclusive group, and within a group each token has a
//! peaked preference over successors. At `overlap = 1` both corpora follow
//! the same distribution; at `overlap = 0` they touch disjoint channels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{SourceTag, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Nonlinearity, EMBED};
use crate::numerics::Matrix;
use crate::seed::sub_seed;
use crate::taskaware::ChannelGroup;

/// Mean of `v^2` for `v` uniform in `[0.5, 1.5)`.
const MEAN_SQ_MAGNITUDE: f64 = 13.0 / 12.0;
/// Successor preference weights within a group.
const SUCCESSOR_WEIGHTS: [f64; 3] = [0.75, 0.2, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairShape {
    pub tokens_per_group: usize,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub valid_sequences: usize,
    pub eval_sequences: usize,
}

impl Default for PairShape {
    fn default() -> Self {
        Self { tokens_per_group: 16, seq_len: 16, train_sequences: 400, valid_sequences: 100, eval_sequences: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskPair {
    pub seed: u64,
    pub overlap_fraction: f64,
    pub shape: PairShape,
    pub general_train: TokenCorpus,
    pub task_train: TokenCorpus,
    pub general_valid: TokenCorpus,
    pub task_valid: TokenCorpus,
    pub general_eval: TokenCorpus,
    pub task_eval: TokenCorpus,
    /// Group of every embedding channel.
    pub planted: Vec<ChannelGroup>,
    /// `vocab x channels` embedding realising the planted map.
    pub embedding: Matrix,
    /// Expected RMS gap on an exclusive channel between its own corpus and
    /// the other one.
    pub planted_gap: f64,
}

impl SyntheticTaskPair {
    pub fn vocab_size(&self) -> usize {
        3 * self.shape.tokens_per_group
    }

    pub fn channels(&self) -> usize {
        self.planted.len()
    }

    /// Union of both training corpora, general first.
    pub fn combined_train(&self) -> TokenCorpus {
        let mut seqs = self.general_train.sequences.clone();
        seqs.extend(self.task_train.sequences.iter().cloned());
        TokenCorpus::new("combined-train", SourceTag::General, seqs)
    }

    /// A freshly initialised model carrying the planted embedding.
    pub fn planted_model(&self, layer_dims: &[usize], nonlinearity: Nonlinearity, seed: u64) -> Result<Model> {
        let spec = ModelSpec {
            vocab_size: self.vocab_size(),
            embed_dim: self.channels(),
            layer_dims: layer_dims.to_vec(),
            nonlinearity,
            seed,
        };
        let mut model = Model::init(spec)?;
        model.set_weight(EMBED, self.embedding.clone())?;
        Ok(model)
    }
}

pub fn generate_task_pair(seed: u64, overlap_fraction: f64, channels: usize) -> Result<SyntheticTaskPair> {
    generate_task_pair_with(seed, overlap_fraction, channels, &PairShape::default())
}

pub fn generate_task_pair_with(
    seed: u64,
    overlap_fraction: f64,
    channels: usize,
    shape: &PairShape,
) -> Result<SyntheticTaskPair> {
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(Error::Precondition(format!("overlap_fraction must lie in [0, 1], got {overlap_fraction}")));
    }
    if channels == 0 || shape.tokens_per_group < SUCCESSOR_WEIGHTS.len() || shape.seq_len < 2 {
        return Err(Error::Precondition("need channels >= 1, tokens_per_group >= 3, seq_len >= 2".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "synthetic-channels"));
    let n_shared = (overlap_fraction * channels as f64).round() as usize;
    let rest = channels - n_shared;
    let n_general = rest.div_ceil(2);
    let mut planted: Vec<ChannelGroup> = std::iter::repeat_n(ChannelGroup::Shared, n_shared)
        .chain(std::iter::repeat_n(ChannelGroup::GeneralOnly, n_general))
        .chain(std::iter::repeat_n(ChannelGroup::TaskOnly, rest - n_general))
        .collect();
    planted.shuffle(&mut rng);

    let per = shape.tokens_per_group;
    let groups = [ChannelGroup::Shared, ChannelGroup::GeneralOnly, ChannelGroup::TaskOnly];
    let token_group = |t: usize| groups[t / per];
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "synthetic-embedding"));
    let embedding = Matrix::from_fn(3 * per, channels, |t, j| {
        if planted[j] == token_group(t) {
            let v: f32 = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        } else {
            0.0
        }
    })?;

    // successors[t][g] = preferred next tokens of t inside group g.
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "synthetic-chain"));
    let successors: Vec<[Vec<usize>; 3]> = (0..3 * per)
        .map(|_| {
            std::array::from_fn(|g| {
                let mut idx: Vec<usize> = (g * per..(g + 1) * per).collect();
                idx.shuffle(&mut rng);
                idx.truncate(SUCCESSOR_WEIGHTS.len());
                idx
            })
        })
        .collect();

    let sample = |rng: &mut ChaCha8Rng, own: usize, n: usize, source: SourceTag, name: &str| {
        let pick_group = |rng: &mut ChaCha8Rng| if rng.gen_bool(overlap_fraction) { 0 } else { own };
        let seqs = (0..n)
            .map(|_| {
                let g = pick_group(rng);
                let mut t = g * per + rng.gen_range(0..per);
                let mut seq = vec![t as u32];
                for _ in 1..shape.seq_len {
                    let g = pick_group(rng);
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut k = SUCCESSOR_WEIGHTS.len() - 1;
                    for (i, w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    t = successors[t][g][k];
                    seq.push(t as u32);
                }
                seq
            })
            .collect();
        TokenCorpus::new(name, source, seqs)
    };

    let corpus = |split: &str, own: usize, n: usize, source: SourceTag| {
        let name = format!("{}-{split}", if own == 1 { "general" } else { "task" });
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("synthetic-{name}")));
        sample(&mut rng, own, n, source, &name)
    };

    Ok(SyntheticTaskPair {
        seed,
        overlap_fraction,
        shape: shape.clone(),
        general_train: corpus("train", 1, shape.train_sequences, SourceTag::General),
        task_train: corpus("train", 2, shape.train_sequences, SourceTag::Task),
        general_valid: corpus("valid", 1, shape.valid_sequences, SourceTag::General),
        task_valid: corpus("valid", 2, shape.valid_sequences, SourceTag::Task),
        general_eval: corpus("eval", 1, shape.eval_sequences, SourceTag::General),
        task_eval: corpus("eval", 2, shape.eval_sequences, SourceTag::Task),
        planted,
        embedding,
        planted_gap: ((1.0 - overlap_fraction) * MEAN_SQ_MAGNITUDE).sqrt(),
    })
}
