//! Dual-source channel partitioning and score fusion.
//!
//! For every prunable layer the general and task activation norms of each
//! input channel are compared. A channel whose general norm exceeds its task
//! norm by more than `alpha` is general-only, one that falls short by more
//! than `alpha` is task-only, everything else (boundary included) is shared.
//! Shared columns score `s^G + s^T`; exclusive columns keep the score of
//! their own source.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{ActivationNorms, SourceTag};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;
use crate::scoring::{wanda_scores, Provenance, ScoreTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormMode {
    /// `sqrt(sum)`: plain L2 norm of the channel over all calibration rows.
    RawL2,
    /// `sqrt(sum / M)`: root mean square, comparable across token counts.
    #[default]
    Rms,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "raw_l2" | "raw" => Ok(NormMode::RawL2),
            "rms" => Ok(NormMode::Rms),
            other => Err(Error::Spec(format!("unknown norm mode {other:?}"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::RawL2 => "raw-l2",
            NormMode::Rms => "rms",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelGroup {
    Shared,
    GeneralOnly,
    TaskOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaScores {
    pub norm_mode: NormMode,
    pub layers: Vec<(String, Vec<f64>)>,
}

impl DeltaScores {
    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub name: String,
    /// Threshold actually applied to this layer.
    pub alpha: f64,
    pub labels: Vec<ChannelGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupFractions {
    pub shared: f64,
    pub general_only: f64,
    pub task_only: f64,
}

impl LayerPartition {
    pub fn count(&self, group: ChannelGroup) -> usize {
        self.labels.iter().filter(|&&g| g == group).count()
    }

    pub fn fractions(&self) -> GroupFractions {
        let n = self.labels.len().max(1) as f64;
        GroupFractions {
            shared: self.count(ChannelGroup::Shared) as f64 / n,
            general_only: self.count(ChannelGroup::GeneralOnly) as f64 / n,
            task_only: self.count(ChannelGroup::TaskOnly) as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPartition {
    /// Global threshold before any per-layer scaling or override.
    pub alpha: f64,
    pub norm_mode: NormMode,
    pub layers: Vec<LayerPartition>,
}

impl ChannelPartition {
    pub fn layer(&self, name: &str) -> Option<&LayerPartition> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Every channel of every scored layer marked shared.
    pub fn all_shared(scores: &ScoreTensor, norm_mode: NormMode) -> Self {
        let layers = scores
            .layers()
            .iter()
            .map(|(name, s)| LayerPartition {
                name: name.clone(),
                alpha: f64::INFINITY,
                labels: vec![ChannelGroup::Shared; s.cols()],
            })
            .collect();
        Self { alpha: f64::INFINITY, norm_mode, layers }
    }
}

fn channel_norm(sum: f64, tokens: u64, mode: NormMode) -> f64 {
    match mode {
        NormMode::RawL2 => sum.sqrt(),
        NormMode::Rms => (sum / tokens as f64).sqrt(),
    }
}

/// `Delta_j = ||x_j^G|| - ||x_j^T||` per channel.
pub fn delta_scores(g: &ActivationNorms, t: &ActivationNorms, mode: NormMode) -> Result<DeltaScores> {
    if g.source != SourceTag::General || t.source != SourceTag::Task {
        return Err(Error::Partition(format!("expected (general, task) norms, got ({}, {})", g.source, t.source)));
    }
    if g.layers.len() != t.layers.len() {
        return Err(Error::Partition("norms cover different layer sets".into()));
    }
    let layers = g
        .layers
        .iter()
        .zip(&t.layers)
        .map(|(lg, lt)| {
            if lg.name != lt.name || lg.sq_sums.len() != lt.sq_sums.len() {
                return Err(Error::Partition(format!(
                    "layer mismatch: {} ({}) vs {} ({})",
                    lg.name,
                    lg.sq_sums.len(),
                    lt.name,
                    lt.sq_sums.len()
                )));
            }
            if lg.token_count == 0 || lt.token_count == 0 {
                return Err(Error::Partition(format!("no calibration tokens for {}", lg.name)));
            }
            let d = lg
                .sq_sums
                .iter()
                .zip(&lt.sq_sums)
                .map(|(&a, &b)| channel_norm(a, lg.token_count, mode) - channel_norm(b, lt.token_count, mode))
                .collect();
            Ok((lg.name.clone(), d))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaScores { norm_mode: mode, layers })
}

#[inline]
pub fn classify(delta: f64, alpha: f64) -> ChannelGroup {
    if delta > alpha {
        ChannelGroup::GeneralOnly
    } else if delta < -alpha {
        ChannelGroup::TaskOnly
    } else {
        ChannelGroup::Shared
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("alpha must be >= 0, got {alpha}")))
    }
}

pub fn partition_channels(d: &DeltaScores, alpha: f64) -> Result<ChannelPartition> {
    partition_channels_per_layer(d, alpha, &BTreeMap::new())
}

/// Like [`partition_channels`] but with per-layer thresholds overriding the
/// global one.
pub fn partition_channels_per_layer(
    d: &DeltaScores,
    alpha: f64,
    overrides: &BTreeMap<String, f64>,
) -> Result<ChannelPartition> {
    check_alpha(alpha)?;
    let layers = d
        .layers
        .iter()
        .map(|(name, deltas)| {
            let a = overrides.get(name).copied().unwrap_or(alpha);
            check_alpha(a)?;
            Ok(LayerPartition {
                name: name.clone(),
                alpha: a,
                labels: deltas.iter().map(|&x| classify(x, a)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelPartition { alpha, norm_mode: d.norm_mode, layers })
}

pub fn fuse_scores(sg: &ScoreTensor, st: &ScoreTensor, p: &ChannelPartition) -> Result<ScoreTensor> {
    if sg.provenance() != Provenance::General || st.provenance() != Provenance::Task {
        return Err(Error::Fusion(format!(
            "expected (General, Task) scores, got ({:?}, {:?})",
            sg.provenance(),
            st.provenance()
        )));
    }
    if sg.layers().len() != st.layers().len() || sg.layers().len() != p.layers.len() {
        return Err(Error::Fusion("score tensors and partition cover different layers".into()));
    }
    let layers = sg
        .layers()
        .iter()
        .zip(st.layers())
        .zip(&p.layers)
        .map(|(((name, g), (tname, t)), lp)| {
            if name != tname || name != &lp.name || g.shape() != t.shape() || lp.labels.len() != g.cols() {
                return Err(Error::Fusion(format!("layer {name} does not line up across inputs")));
            }
            let fused = Matrix::from_fn(g.rows(), g.cols(), |i, j| match lp.labels[j] {
                ChannelGroup::Shared => g.get(i, j) + t.get(i, j),
                ChannelGroup::GeneralOnly => g.get(i, j),
                ChannelGroup::TaskOnly => t.get(i, j),
            })
            .map_err(|_| Error::Fusion(format!("non-finite fused score in {name}")))?;
            Ok((name.clone(), fused))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTensor::from_layers(Provenance::Mixed, layers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlphaScale {
    /// `alpha` is compared to `Delta_j` as given.
    #[default]
    Absolute,
    /// Per layer, `alpha` is multiplied by the median `|Delta_j|` of that layer.
    LayerMedian,
}

impl FromStr for AlphaScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "absolute" => Ok(AlphaScale::Absolute),
            "layer-median" => Ok(AlphaScale::LayerMedian),
            other => Err(Error::Spec(format!("unknown alpha scale {other:?}"))),
        }
    }
}

impl fmt::Display for AlphaScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaScale::Absolute => "absolute",
            AlphaScale::LayerMedian => "layer-median",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAwareConfig {
    pub alpha: f64,
    pub norm_mode: NormMode,
    pub alpha_scale: AlphaScale,
    pub mean_normalize: bool,
    /// Absolute per-layer thresholds; win over `alpha` and `alpha_scale`.
    pub layer_alpha: BTreeMap<String, f64>,
}

impl Default for TaskAwareConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            norm_mode: NormMode::Rms,
            alpha_scale: AlphaScale::Absolute,
            mean_normalize: true,
            layer_alpha: BTreeMap::new(),
        }
    }
}

impl TaskAwareConfig {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
}

#[derive(Debug, Clone)]
pub struct TaskAwareScores {
    pub general: ScoreTensor,
    pub task: ScoreTensor,
    pub deltas: DeltaScores,
    pub partition: ChannelPartition,
    pub scores: ScoreTensor,
    /// Per-layer multiplier applied to `alpha` (1.0 unless rescaled).
    pub alpha_factors: Vec<(String, f64)>,
}

fn median_abs(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-layer alpha multipliers under `scale`.
pub fn alpha_factors(d: &DeltaScores, scale: AlphaScale) -> Vec<(String, f64)> {
    d.layers
        .iter()
        .map(|(name, deltas)| {
            let f = match scale {
                AlphaScale::Absolute => 1.0,
                AlphaScale::LayerMedian => median_abs(deltas),
            };
            (name.clone(), f)
        })
        .collect()
}

/// Per-layer multipliers applied to alpha, in layer order.
pub type AlphaFactors = Vec<(String, f64)>;

/// Partition and fuse, starting from precomputed per-source scores.
pub fn fuse_with_config(
    general: &ScoreTensor,
    task: &ScoreTensor,
    deltas: &DeltaScores,
    cfg: &TaskAwareConfig,
) -> Result<(ChannelPartition, ScoreTensor, AlphaFactors)> {
    check_alpha(cfg.alpha)?;
    let factors = alpha_factors(deltas, cfg.alpha_scale);
    let mut per_layer: BTreeMap<String, f64> = factors.iter().map(|(n, f)| (n.clone(), cfg.alpha * f)).collect();
    for (name, a) in &cfg.layer_alpha {
        per_layer.insert(name.clone(), *a);
    }
    let partition = partition_channels_per_layer(deltas, cfg.alpha, &per_layer)?;
    let fused = fuse_scores(general, task, &partition)?;
    Ok((partition, fused, factors))
}

/// The full task-aware scoring path from two sets of activation norms.
pub fn task_aware_scores(
    model: &Model,
    g: &ActivationNorms,
    t: &ActivationNorms,
    cfg: &TaskAwareConfig,
) -> Result<TaskAwareScores> {
    let general = wanda_scores(model, g, cfg.mean_normalize)?;
    let task = wanda_scores(model, t, cfg.mean_normalize)?;
    let deltas = delta_scores(g, t, cfg.norm_mode)?;
    let (partition, scores, alpha_factors) = fuse_with_config(&general, &task, &deltas, cfg)?;
    Ok(TaskAwareScores { general, task, deltas, partition, scores, alpha_factors })
}
