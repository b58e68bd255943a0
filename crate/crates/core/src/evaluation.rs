//! Language-model metrics, the brute-force pruning-loss oracle, and the
//! baseline vs task-aware comparison experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{balance_by_tokens, collect_norms, sample_corpus, Balance, SourceTag, TokenCorpus};
use crate::error::{Error, Result};
use crate::masking::{make_mask, sparsity_report, PruneMask, SparsityReport, SparsitySpec};
use crate::model::{apply_mask, forward, Model};
use crate::numerics::Matrix;
use crate::scoring::wanda_scores;
use crate::seed::sub_seed;
use crate::synthetic::SyntheticTaskPair;
use crate::taskaware::{
    delta_scores, fuse_with_config, ChannelPartition, DeltaScores, GroupFractions, TaskAwareConfig,
};

/// Alpha grid used when none is given.
pub const DEFAULT_ALPHA_GRID: [f64; 7] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmMetrics {
    /// Mean next-token cross-entropy (nats).
    pub loss: f64,
    pub perplexity: f64,
    /// Fraction of positions whose argmax logit is the next token.
    pub accuracy: f64,
    pub predictions: usize,
}

pub fn lm_metrics(model: &Model, corpus: &TokenCorpus) -> Result<LmMetrics> {
    corpus.validate(model.spec().vocab_size)?;
    let per_seq = corpus
        .sequences
        .par_iter()
        .map(|seq| {
            if seq.len() < 2 {
                return Ok((0.0, 0usize, 0usize));
            }
            let logits = forward(model, &seq[..seq.len() - 1])?;
            let mut nll = 0.0f64;
            let mut correct = 0;
            for (r, &target) in seq[1..].iter().enumerate() {
                let row = logits.row(r);
                let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                nll += max + sum.ln() - row[target as usize] as f64;
                let argmax = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                correct += (argmax == target as usize) as usize;
            }
            Ok((nll, correct, seq.len() - 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nll, correct, n) = per_seq.iter().fold((0.0, 0, 0), |(a, b, c), &(x, y, z)| (a + x, b + y, c + z));
    if n == 0 {
        return Err(Error::input(format!("corpus {} has no next-token pairs", corpus.name)));
    }
    let loss = nll / n as f64;
    Ok(LmMetrics { loss, perplexity: loss.exp(), accuracy: correct as f64 / n as f64, predictions: n })
}

/// `exp` of the mean next-token cross-entropy.
pub fn perplexity(model: &Model, corpus: &TokenCorpus) -> Result<f64> {
    Ok(lm_metrics(model, corpus)?.perplexity)
}

/// Loss increase from zeroing `layer[i][j]`, measured by re-running the
/// layer: `(1/M) * sum_m ||y'_m - y_m||^2` where `y = W x` over the rows of
/// `activations`.
pub fn exact_delta_loss_oracle(layer: &Matrix, activations: &Matrix, i: usize, j: usize) -> Result<f64> {
    if i >= layer.rows() || j >= layer.cols() {
        return Err(Error::input(format!("({i}, {j}) outside {:?} layer", layer.shape())));
    }
    if activations.cols() != layer.cols() || activations.rows() == 0 {
        return Err(Error::shape("activations do not match the layer input"));
    }
    let w = layer.to_f64();
    let mut pruned = w.clone();
    pruned.set(i, j, 0.0);
    let x = activations.to_f64();
    let outputs = |w: &Matrix<f64>, m: usize| -> Vec<f64> {
        (0..w.rows()).map(|r| (0..w.cols()).map(|c| w.get(r, c) * x.get(m, c)).sum()).collect()
    };
    let mut total = 0.0;
    for m in 0..x.rows() {
        let before = outputs(&w, m);
        let after = outputs(&pruned, m);
        total += before.iter().zip(&after).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / x.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroupFractions {
    pub layer: String,
    pub alpha: f64,
    #[serde(flatten)]
    pub fractions: GroupFractions,
}

pub fn group_fractions(p: &ChannelPartition) -> Vec<LayerGroupFractions> {
    p.layers
        .iter()
        .map(|l| LayerGroupFractions { layer: l.name.clone(), alpha: l.alpha, fractions: l.fractions() })
        .collect()
}

/// Channels of every layer ordered by descending `Delta_j` (index breaks ties).
pub fn sorted_deltas(d: &DeltaScores) -> Vec<(String, Vec<(usize, f64)>)> {
    d.layers
        .iter()
        .map(|(name, ds)| {
            let mut v: Vec<(usize, f64)> = ds.iter().copied().enumerate().collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            (name.clone(), v)
        })
        .collect()
}

/// CSV of `(layer_index, layer, shared, general_only, task_only)`.
pub fn layer_distribution_csv(p: &ChannelPartition) -> String {
    let mut out = String::from("layer_index,layer,shared,general_only,task_only\n");
    for (k, l) in p.layers.iter().enumerate() {
        let f = l.fractions();
        let _ = writeln!(out, "{k},{},{},{},{}", l.name, f.shared, f.general_only, f.task_only);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub perplexity_general: f64,
    pub perplexity_task: f64,
    pub task_loss: f64,
    /// Next-token accuracy on the task split, standing in for
    /// multiple-choice accuracy.
    pub task_accuracy: f64,
    pub sparsity: SparsityReport,
    pub spec: SparsitySpec,
    pub alpha: Option<f64>,
    pub alpha_factors: Vec<(String, f64)>,
    pub group_fractions: Vec<LayerGroupFractions>,
    pub seeds: BTreeMap<String, u64>,
    pub calibration_recipe: String,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        method: &str,
        model: &Model,
        mask: &PruneMask,
        general_eval: &TokenCorpus,
        task_eval: &TokenCorpus,
        partition: Option<&ChannelPartition>,
        alpha_factors: Vec<(String, f64)>,
        seeds: BTreeMap<String, u64>,
        calibration_recipe: String,
    ) -> Result<Self> {
        let g = lm_metrics(model, general_eval)?;
        let t = lm_metrics(model, task_eval)?;
        Ok(Self {
            method: method.to_string(),
            perplexity_general: g.perplexity,
            perplexity_task: t.perplexity,
            task_loss: t.loss,
            task_accuracy: t.accuracy,
            sparsity: sparsity_report(mask),
            spec: *mask.spec(),
            alpha: partition.map(|p| p.alpha),
            alpha_factors,
            group_fractions: partition.map(group_fractions).unwrap_or_default(),
            seeds,
            calibration_recipe,
        })
    }

    pub fn csv_header() -> &'static str {
        "method,alpha,sparsity,perplexity_general,perplexity_task,task_loss,task_accuracy"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.alpha.map(|a| a.to_string()).unwrap_or_default(),
            self.sparsity.fraction,
            self.perplexity_general,
            self.perplexity_task,
            self.task_loss,
            self.task_accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Sequences sampled from each training corpus for calibration.
    pub calib_samples: usize,
    pub balance: Balance,
    pub seed: u64,
    /// Threshold settings; `alpha` is replaced by each grid value.
    pub task_aware: TaskAwareConfig,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { calib_samples: 128, balance: Balance::Sequences, seed: 0, task_aware: TaskAwareConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub alpha: Option<f64>,
    pub sparsity: f64,
    pub perplexity_general: f64,
    pub perplexity_task: f64,
    pub task_loss: f64,
    pub task_accuracy: f64,
    /// Task loss on the validation split, used to pick alpha.
    pub task_valid_loss: f64,
    pub group_fractions: Vec<LayerGroupFractions>,
    /// Mask behind the row; `None` for the dense model.
    #[serde(skip)]
    pub mask: Option<PruneMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub spec: SparsitySpec,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    /// Grid value with the lowest task validation loss (first wins ties).
    pub selected_alpha: f64,
    pub alpha_factors: Vec<(String, f64)>,
}

impl ComparisonTable {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn task_aware_rows(&self) -> impl Iterator<Item = &ComparisonRow> {
        self.rows.iter().filter(|r| r.method == "task-aware")
    }

    pub fn selected(&self) -> &ComparisonRow {
        self.task_aware_rows().find(|r| r.alpha == Some(self.selected_alpha)).expect("selected alpha has a row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,alpha,sparsity,perplexity_general,perplexity_task,task_loss,task_accuracy,task_valid_loss\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.method,
                r.alpha.map(|a| a.to_string()).unwrap_or_default(),
                r.sparsity,
                r.perplexity_general,
                r.perplexity_task,
                r.task_loss,
                r.task_accuracy,
                r.task_valid_loss
            );
        }
        out
    }
}

fn row_for(
    method: &str,
    alpha: Option<f64>,
    model: &Model,
    sparsity: f64,
    pair: &Splits<'_>,
    partition: Option<&ChannelPartition>,
) -> Result<ComparisonRow> {
    let g = lm_metrics(model, pair.general_eval)?;
    let t = lm_metrics(model, pair.task_eval)?;
    let v = lm_metrics(model, pair.task_valid)?;
    Ok(ComparisonRow {
        method: method.to_string(),
        alpha,
        sparsity,
        perplexity_general: g.perplexity,
        perplexity_task: t.perplexity,
        task_loss: t.loss,
        task_accuracy: t.accuracy,
        task_valid_loss: v.loss,
        group_fractions: partition.map(group_fractions).unwrap_or_default(),
        mask: None,
    })
}

fn pruned_row(
    method: &str,
    alpha: Option<f64>,
    model: &Model,
    mask: &PruneMask,
    pair: &Splits<'_>,
    partition: Option<&ChannelPartition>,
) -> Result<ComparisonRow> {
    let row = row_for(method, alpha, &apply_mask(model, mask)?, sparsity_report(mask).fraction, pair, partition)?;
    Ok(ComparisonRow { mask: Some(mask.clone()), ..row })
}

/// Corpora driving one comparison: calibration sources plus held-out splits.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub general_train: &'a TokenCorpus,
    pub task_train: &'a TokenCorpus,
    pub general_eval: &'a TokenCorpus,
    pub task_eval: &'a TokenCorpus,
    /// Split used to select alpha; disjoint from `task_eval` when possible.
    pub task_valid: &'a TokenCorpus,
}

impl<'a> From<&'a SyntheticTaskPair> for Splits<'a> {
    fn from(p: &'a SyntheticTaskPair) -> Self {
        Self {
            general_train: &p.general_train,
            task_train: &p.task_train,
            general_eval: &p.general_eval,
            task_eval: &p.task_eval,
            task_valid: &p.task_valid,
        }
    }
}

/// Calibration samples of both sources. Both draw from the same sub-seed, so
/// identical corpora give identical samples.
pub fn calibration_samples(
    general: &TokenCorpus,
    task: &TokenCorpus,
    opts: &CompareOptions,
) -> Result<(TokenCorpus, TokenCorpus)> {
    let calib_seed = sub_seed(opts.seed, "calibration-sample");
    let g = sample_corpus(general, opts.calib_samples, calib_seed)?.with_source(SourceTag::General);
    let t = sample_corpus(task, opts.calib_samples, calib_seed)?.with_source(SourceTag::Task);
    Ok(match opts.balance {
        Balance::Sequences => (g, t),
        Balance::Tokens => balance_by_tokens(&g, &t),
    })
}

/// Dense model, general-only baseline, and task-aware pruning at every alpha
/// of the grid, all evaluated on the pair's held-out splits.
pub fn compare_methods(
    pair: &SyntheticTaskPair,
    model: &Model,
    spec: &SparsitySpec,
    alpha_grid: &[f64],
    opts: &CompareOptions,
) -> Result<ComparisonTable> {
    compare_on(&Splits::from(pair), model, spec, alpha_grid, opts)
}

pub fn compare_on(
    pair: &Splits<'_>,
    model: &Model,
    spec: &SparsitySpec,
    alpha_grid: &[f64],
    opts: &CompareOptions,
) -> Result<ComparisonTable> {
    spec.validate()?;
    if alpha_grid.is_empty() {
        return Err(Error::Precondition("alpha grid is empty".into()));
    }
    let (general, task) = calibration_samples(pair.general_train, pair.task_train, opts)?;
    let g = collect_norms(model, &general)?;
    let t = collect_norms(model, &task)?;
    let cfg = &opts.task_aware;
    let sg = wanda_scores(model, &g, cfg.mean_normalize)?;
    let st = wanda_scores(model, &t, cfg.mean_normalize)?;
    let deltas = delta_scores(&g, &t, cfg.norm_mode)?;

    let dense = row_for("dense", None, model, 0.0, pair, None)?;
    let baseline = pruned_row("wanda", None, model, &make_mask(&sg, spec)?, pair, None)?;

    let mut factors = Vec::new();
    let aware = alpha_grid
        .iter()
        .map(|&alpha| {
            let (partition, fused, f) = fuse_with_config(&sg, &st, &deltas, &cfg.clone().with_alpha(alpha))?;
            let row = pruned_row("task-aware", Some(alpha), model, &make_mask(&fused, spec)?, pair, Some(&partition))?;
            Ok((row, f))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = vec![dense, baseline];
    let mut selected = (f64::INFINITY, alpha_grid[0]);
    for (row, f) in aware {
        if row.task_valid_loss < selected.0 {
            selected = (row.task_valid_loss, row.alpha.unwrap());
        }
        factors = f;
        rows.push(row);
    }
    Ok(ComparisonTable { spec: *spec, seed: opts.seed, rows, selected_alpha: selected.1, alpha_factors: factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, ModelSpec, Nonlinearity};
    use crate::scoring::layer_scores;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(vocab: usize, d: usize, dims: &[usize]) -> ModelSpec {
        ModelSpec {
            vocab_size: vocab,
            embed_dim: d,
            layer_dims: dims.to_vec(),
            nonlinearity: Nonlinearity::Relu,
            seed: 4,
        }
    }

    /// log-sum-exp cross-entropy written out per position, no shared code.
    fn ce_oracle(model: &Model, corpus: &TokenCorpus) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for seq in &corpus.sequences {
            for w in seq.windows(2) {
                let logits = forward(model, &w[..1]).unwrap();
                let row: Vec<f64> = logits.row(0).iter().map(|&v| v as f64).collect();
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[w[1] as usize];
                n += 1;
            }
        }
        (total / n as f64).exp()
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let s = spec(13, 3, &[4]);
        let layers = s
            .layer_shapes()
            .into_iter()
            .map(|(name, r, c)| Layer { prunable: name.starts_with("fc"), weight: Matrix::zeros(r, c), name })
            .collect();
        let m = Model::from_layers(s, layers).unwrap();
        let c = TokenCorpus::new("c", SourceTag::General, vec![vec![1, 5, 12, 0, 3]]);
        assert!((perplexity(&m, &c).unwrap() - 13.0).abs() < 1e-9);
    }

    #[test]
    fn memorised_constant_corpus() {
        // embed row 2 = e0, fc0 = I, out maps channel 0 to a huge logit on token 2.
        let s = spec(4, 2, &[2]);
        let mut embed = Matrix::zeros(4, 2);
        embed.set(2, 0, 1.0);
        let mut out = Matrix::zeros(4, 2);
        out.set(2, 0, 20.0);
        let layers = vec![
            Layer { name: "embed".into(), weight: embed, prunable: false },
            Layer { name: "fc0".into(), weight: Matrix::identity(2), prunable: true },
            Layer { name: "out".into(), weight: out, prunable: false },
        ];
        let m = Model::from_layers(s, layers).unwrap();
        let c = TokenCorpus::new("c", SourceTag::General, vec![vec![2; 50]]);
        let ppl = perplexity(&m, &c).unwrap();
        assert!((ppl - 1.0).abs() < 1e-3, "{ppl}");
        assert_eq!(lm_metrics(&m, &c).unwrap().accuracy, 1.0);
    }

    #[test]
    fn perplexity_matches_lse_oracle() {
        let m = Model::init(spec(17, 6, &[9, 7])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs = (0..10).map(|_| (0..rng.gen_range(2..9)).map(|_| rng.gen_range(0..17)).collect()).collect();
        let c = TokenCorpus::new("c", SourceTag::Task, seqs);
        let got = perplexity(&m, &c).unwrap();
        let want = ce_oracle(&m, &c);
        assert!((got - want).abs() <= 1e-6 * want, "{got} {want}");
    }

    #[test]
    fn empty_corpus_rejected() {
        let m = Model::init(spec(5, 3, &[4])).unwrap();
        let c = TokenCorpus::new("c", SourceTag::General, vec![]);
        assert!(matches!(perplexity(&m, &c), Err(Error::Input(_))));
        let single = TokenCorpus::new("c", SourceTag::General, vec![vec![1]]);
        assert!(matches!(perplexity(&m, &single), Err(Error::Input(_))));
    }

    #[test]
    fn oracle_small_cases() {
        let w = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(exact_delta_loss_oracle(&w, &x, 0, 0).unwrap(), 36.0);
        let w0 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let x2 = Matrix::from_rows(&[vec![3.0, 1.0], vec![-2.0, 4.0]]).unwrap();
        assert_eq!(exact_delta_loss_oracle(&w0, &x2, 0, 0).unwrap(), 0.0);
        assert!(exact_delta_loss_oracle(&w0, &x2, 1, 0).is_err());
        assert!(exact_delta_loss_oracle(&w0, &x2, 0, 2).is_err());
    }

    #[test]
    fn oracle_equals_score_on_seeded_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::random_uniform(8, 8, 1.0, &mut rng);
        let x = Matrix::random_uniform(32, 8, 2.0, &mut rng);
        let m = x.rows() as f64;
        let a: Vec<f64> = x.col_sq_norms().unwrap().iter().map(|s| s / m).collect();
        let scores = layer_scores(&w, &a).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dl = exact_delta_loss_oracle(&w, &x, i, j).unwrap();
                let s = scores.get(i, j);
                assert!((dl - s).abs() <= 1e-6 * s.abs().max(1e-300), "({i},{j}) {dl} {s}");
            }
        }
    }

    #[test]
    fn sorted_deltas_descending() {
        let d = DeltaScores {
            norm_mode: crate::taskaware::NormMode::Rms,
            layers: vec![("fc0".into(), vec![0.5, -1.0, 2.0, 0.5])],
        };
        let s = sorted_deltas(&d);
        assert_eq!(s[0].1, vec![(2, 2.0), (0, 0.5), (3, 0.5), (1, -1.0)]);
    }
}
