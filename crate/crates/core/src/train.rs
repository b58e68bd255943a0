//! Plain minibatch SGD on next-token cross-entropy, in f64.
//!
//! Parameters are copied out of the f32 model, trained in f64 and rounded
//! back once at the end. The same loss/gradient code backs the finite
//! difference check in the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::TokenCorpus;
use crate::error::{Error, Result};
use crate::model::{Layer, Model, ModelSpec, Nonlinearity};
use crate::numerics::Matrix;
use crate::seed::sub_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_embedding: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.1, batch_size: 64, train_embedding: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean cross-entropy over every next-token pair of the training corpus.
    pub final_loss: f64,
    /// Mean gradient L2 norm over the last tenth of the steps.
    pub final_grad_norm: f64,
    /// Minibatch loss every `steps / 20` steps.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Every `(token, next token)` pair in corpus order.
pub fn next_token_pairs(corpus: &TokenCorpus) -> Vec<(u32, u32)> {
    corpus.sequences.iter().flat_map(|s| s.windows(2).map(|w| (w[0], w[1]))).collect()
}

fn act(nl: Nonlinearity, x: f64) -> f64 {
    match nl {
        Nonlinearity::Relu => x.max(0.0),
        Nonlinearity::GeluTanhApprox => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

fn act_grad(nl: Nonlinearity, x: f64) -> f64 {
    match nl {
        Nonlinearity::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::GeluTanhApprox => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let th = (c * (x + 0.044715 * x * x * x)).tanh();
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x)
        }
    }
}

/// Flat f64 parameter vector: embedding, hidden layers, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    shapes: Vec<(String, usize, usize, bool)>,
    offsets: Vec<usize>,
    data: Vec<f64>,
    nonlinearity: Nonlinearity,
    spec: ModelSpec,
}

impl Params {
    pub fn from_model(model: &Model) -> Self {
        let mut shapes = Vec::new();
        let mut offsets = Vec::new();
        let mut data = Vec::new();
        for l in model.layers() {
            offsets.push(data.len());
            shapes.push((l.name.clone(), l.weight.rows(), l.weight.cols(), l.prunable));
            data.extend(l.weight.data().iter().map(|&v| v as f64));
        }
        Self { shapes, offsets, data, nonlinearity: model.spec().nonlinearity, spec: model.spec().clone() }
    }

    pub fn to_model(&self) -> Result<Model> {
        let layers = self
            .shapes
            .iter()
            .zip(&self.offsets)
            .map(|((name, r, c, prunable), &off)| {
                let w = self.data[off..off + r * c].iter().map(|&v| v as f32).collect();
                Ok(Layer { name: name.clone(), weight: Matrix::new(*r, *c, w)?, prunable: *prunable })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_layers(self.spec.clone(), layers)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Length of the embedding block at the start of the flat vector.
    pub fn embedding_len(&self) -> usize {
        self.shapes[0].1 * self.shapes[0].2
    }

    fn block(&self, k: usize) -> (&[f64], usize, usize) {
        let (_, r, c, _) = self.shapes[k];
        let off = self.offsets[k];
        (&self.data[off..off + r * c], r, c)
    }

    /// Mean cross-entropy over `pairs`.
    pub fn loss(&self, pairs: &[(u32, u32)]) -> f64 {
        self.loss_and_grad_impl(pairs, false).0
    }

    /// Mean cross-entropy over `pairs` and its gradient in the flat layout.
    pub fn loss_and_grad(&self, pairs: &[(u32, u32)]) -> (f64, Vec<f64>) {
        self.loss_and_grad_impl(pairs, true)
    }

    fn loss_and_grad_impl(&self, pairs: &[(u32, u32)], want_grad: bool) -> (f64, Vec<f64>) {
        let b = pairs.len();
        let nl = self.nonlinearity;
        let n_linear = self.shapes.len() - 1;
        let (embed, _, d) = self.block(0);

        // inputs[k] feeds linear layer k; pre[k] is its pre-activation output.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_linear);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_linear);
        let mut h: Vec<f64> =
            pairs.iter().flat_map(|&(x, _)| embed[x as usize * d..(x as usize + 1) * d].iter().copied()).collect();
        let mut width = d;
        for k in 0..n_linear {
            let (w, rows, cols) = self.block(k + 1);
            debug_assert_eq!(cols, width);
            let mut z = vec![0.0; b * rows];
            for s in 0..b {
                let hs = &h[s * cols..(s + 1) * cols];
                for i in 0..rows {
                    let wi = &w[i * cols..(i + 1) * cols];
                    z[s * rows + i] = wi.iter().zip(hs).map(|(a, c)| a * c).sum();
                }
            }
            let next = if k + 1 < n_linear { z.iter().map(|&v| act(nl, v)).collect() } else { z.clone() };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
            width = rows;
        }

        let vocab = width;
        let logits = &h;
        let mut loss = 0.0;
        let mut dz = vec![0.0; b * vocab];
        for (s, &(_, y)) in pairs.iter().enumerate() {
            let row = &logits[s * vocab..(s + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[y as usize];
            if want_grad {
                for v in 0..vocab {
                    dz[s * vocab + v] = (row[v] - lse).exp() / b as f64;
                }
                dz[s * vocab + y as usize] -= 1.0 / b as f64;
            }
        }
        loss /= b as f64;
        if !want_grad {
            return (loss, Vec::new());
        }

        let mut grad = vec![0.0; self.data.len()];
        for k in (0..n_linear).rev() {
            let (w, rows, cols) = self.block(k + 1);
            let off = self.offsets[k + 1];
            let x = &inputs[k];
            for s in 0..b {
                for i in 0..rows {
                    let g = dz[s * rows + i];
                    if g == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[off + i * cols..off + (i + 1) * cols];
                    for (gj, &xj) in gw.iter_mut().zip(&x[s * cols..(s + 1) * cols]) {
                        *gj += g * xj;
                    }
                }
            }
            let mut dh = vec![0.0; b * cols];
            for s in 0..b {
                for i in 0..rows {
                    let g = dz[s * rows + i];
                    if g == 0.0 {
                        continue;
                    }
                    for (dj, &wj) in dh[s * cols..(s + 1) * cols].iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                        *dj += g * wj;
                    }
                }
            }
            if k > 0 {
                let z = &pre[k - 1];
                dz = dh.iter().zip(z).map(|(&g, &zv)| g * act_grad(nl, zv)).collect();
            } else {
                for (s, &(x, _)) in pairs.iter().enumerate() {
                    let row = &mut grad[x as usize * d..(x as usize + 1) * d];
                    for (gj, &v) in row.iter_mut().zip(&dh[s * d..(s + 1) * d]) {
                        *gj += v;
                    }
                }
            }
        }
        (loss, grad)
    }
}

/// Seeded init followed by [`train_model`].
pub fn train_toy_model(spec: ModelSpec, corpus: &TokenCorpus, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let model = Model::init(spec)?;
    train_model(&model, corpus, cfg)
}

pub fn train_model(model: &Model, corpus: &TokenCorpus, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if cfg.steps == 0 {
        return Err(Error::Precondition("steps must be >= 1".into()));
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::Precondition("lr must be > 0 and batch_size >= 1".into()));
    }
    corpus.validate(model.spec().vocab_size)?;
    let pairs = next_token_pairs(corpus);
    if pairs.is_empty() {
        return Err(Error::input("corpus has no next-token pairs"));
    }

    let mut params = Params::from_model(model);
    let frozen = if cfg.train_embedding { 0 } else { params.embedding_len() };
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "train-batches"));
    let full_batch = pairs.len() <= cfg.batch_size;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let tail = (cfg.steps / 10).max(1);
    let every = (cfg.steps / 20).max(1);
    let mut grad_norm_sum = 0.0;
    let mut curve = Vec::new();

    for step in 0..cfg.steps {
        let (loss, grad) = if full_batch {
            params.loss_and_grad(&pairs)
        } else {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| pairs[rng.gen_range(0..pairs.len())]));
            params.loss_and_grad(&batch)
        };
        let gnorm = grad[frozen..].iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !gnorm.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if step % every == 0 {
            curve.push((step, loss));
        }
        if step + tail >= cfg.steps {
            grad_norm_sum += gnorm;
        }
        for (p, g) in params.values_mut()[frozen..].iter_mut().zip(&grad[frozen..]) {
            *p -= cfg.lr * g;
        }
    }

    let trained = params.to_model().map_err(|_| Error::Diverged { step: cfg.steps, loss: f64::NAN })?;
    let final_loss = Params::from_model(&trained).loss(&pairs);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: cfg.steps, loss: final_loss });
    }
    Ok((
        trained,
        TrainReport { steps: cfg.steps, final_loss, final_grad_norm: grad_norm_sum / tail as f64, loss_curve: curve },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::SourceTag;

    fn spec(vocab: usize, d: usize, dims: &[usize], nl: Nonlinearity, seed: u64) -> ModelSpec {
        ModelSpec { vocab_size: vocab, embed_dim: d, layer_dims: dims.to_vec(), nonlinearity: nl, seed }
    }

    fn finite_difference_check(nl: Nonlinearity) -> f64 {
        let model = Model::init(spec(4, 4, &[4], nl, 21)).unwrap();
        let mut params = Params::from_model(&model);
        let pairs = [(0u32, 1u32), (1, 3), (2, 2), (3, 0), (1, 1)];
        let (_, grad) = params.loss_and_grad(&pairs);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for p in 0..params.len() {
            let orig = params.values()[p];
            params.values_mut()[p] = orig + h;
            let up = params.loss(&pairs);
            params.values_mut()[p] = orig - h;
            let down = params.loss(&pairs);
            params.values_mut()[p] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[p].abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((grad[p] - numeric).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(finite_difference_check(Nonlinearity::GeluTanhApprox) < 1e-4);
    }

    #[test]
    fn zero_steps_rejected() {
        let c = TokenCorpus::new("c", SourceTag::General, vec![vec![1, 2, 3]]);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert!(matches!(
            train_toy_model(spec(4, 3, &[3], Nonlinearity::Relu, 1), &c, &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn constant_corpus_is_learned() {
        let c = TokenCorpus::new("c", SourceTag::General, vec![vec![3; 40]; 4]);
        let cfg = TrainConfig { steps: 500, lr: 0.5, batch_size: 32, ..TrainConfig::default() };
        let (_, report) = train_toy_model(spec(6, 4, &[8], Nonlinearity::Relu, 2), &c, &cfg).unwrap();
        assert!(report.final_loss < 0.05, "{report:?}");
    }

    #[test]
    fn rerun_is_exact() {
        let c = TokenCorpus::new(
            "c",
            SourceTag::General,
            (0..20).map(|i| (0..10).map(|j| ((i * 7 + j * 3) % 11) as u32).collect()).collect(),
        );
        let cfg = TrainConfig { steps: 200, lr: 0.2, batch_size: 16, ..TrainConfig::default() };
        let s = spec(11, 6, &[8], Nonlinearity::GeluTanhApprox, 5);
        let (m1, r1) = train_toy_model(s.clone(), &c, &cfg).unwrap();
        let (m2, r2) = train_toy_model(s, &c, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn divergence_reports_step() {
        let c = TokenCorpus::new(
            "c",
            SourceTag::General,
            (0..20).map(|i| (0..10).map(|j| ((i + j * 5) % 7) as u32).collect()).collect(),
        );
        let cfg = TrainConfig { steps: 200, lr: 1e200, batch_size: 8, ..TrainConfig::default() };
        let err = train_toy_model(spec(7, 4, &[6], Nonlinearity::Relu, 3), &c, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn frozen_embedding_stays_put() {
        let c = TokenCorpus::new("c", SourceTag::General, vec![vec![0, 1, 2, 3, 4, 0, 1]]);
        let model = Model::init(spec(5, 3, &[4], Nonlinearity::Relu, 8)).unwrap();
        let cfg = TrainConfig { steps: 50, lr: 0.1, batch_size: 4, train_embedding: false, seed: 1 };
        let (trained, _) = train_model(&model, &c, &cfg).unwrap();
        assert_eq!(trained.embed(), model.embed());
        assert_ne!(trained.layer("fc0"), model.layer("fc0"));
    }

    #[test]
    fn round_trip_through_params() {
        let model = Model::init(spec(5, 3, &[4, 2], Nonlinearity::Relu, 8)).unwrap();
        assert_eq!(Params::from_model(&model).to_model().unwrap(), model);
    }
}
