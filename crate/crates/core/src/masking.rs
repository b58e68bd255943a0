//! Score tensors to prune masks.
//!
//! Unstructured masks prune the `floor(r * n)` lowest scores inside each
//! scope unit (a row, a layer, or every prunable weight). N:M masks keep the
//! `n` highest scores of every aligned block of `m` consecutive inputs in a
//! row. Ties always go to the smaller `(layer, row, column)` index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scoring::ScoreTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scope {
    Row,
    #[default]
    Layer,
    Global,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "row" => Ok(Scope::Row),
            "layer" => Ok(Scope::Layer),
            "global" => Ok(Scope::Global),
            other => Err(Error::Spec(format!("unknown scope {other:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Row => "row",
            Scope::Layer => "layer",
            Scope::Global => "global",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SparsitySpec {
    Unstructured {
        ratio: f64,
        scope: Scope,
    },
    #[serde(rename = "NM")]
    NM {
        n: usize,
        m: usize,
    },
}

impl SparsitySpec {
    pub fn unstructured(ratio: f64, scope: Scope) -> Result<Self> {
        let s = SparsitySpec::Unstructured { ratio, scope };
        s.validate()?;
        Ok(s)
    }

    pub fn n_m(n: usize, m: usize) -> Result<Self> {
        let s = SparsitySpec::NM { n, m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsitySpec::Unstructured { ratio, .. } if !(ratio > 0.0 && ratio < 1.0) => {
                Err(Error::Spec(format!("ratio must lie in (0, 1), got {ratio}")))
            }
            SparsitySpec::NM { n, m } if !(0 < n && n < m) => {
                Err(Error::Spec(format!("N:M needs 0 < n < m, got {n}:{m}")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `"0.5"` (unstructured, with the given scope) or `"2:4"`.
    pub fn parse(text: &str, scope: Scope) -> Result<Self> {
        let text = text.trim();
        if let Some((n, m)) = text.split_once(':') {
            let parse =
                |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Spec(format!("bad N:M pattern {text:?}")));
            Self::n_m(parse(n)?, parse(m)?)
        } else {
            let ratio = text.parse::<f64>().map_err(|_| Error::Spec(format!("bad sparsity {text:?}")))?;
            Self::unstructured(ratio, scope)
        }
    }

    /// Nominal pruned fraction: `r`, or `(m - n) / m`.
    pub fn target_sparsity(&self) -> f64 {
        match *self {
            SparsitySpec::Unstructured { ratio, .. } => ratio,
            SparsitySpec::NM { n, m } => (m - n) as f64 / m as f64,
        }
    }
}

impl fmt::Display for SparsitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsitySpec::Unstructured { ratio, scope } => write!(f, "{ratio} ({scope})"),
            SparsitySpec::NM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

/// `floor(ratio * n)`.
pub fn pruned_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).floor() as usize
}

/// Pruned count for a ragged N:M tail of `len < m` entries.
pub fn ragged_pruned(n: usize, m: usize, len: usize) -> usize {
    (m - n) * len / m
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub name: String,
    /// `true` = pruned.
    pub bits: Matrix<bool>,
    pub pruned: usize,
}

impl LayerMask {
    pub fn new(name: &str, bits: Matrix<bool>) -> Self {
        let pruned = bits.data().iter().filter(|&&b| b).count();
        Self { name: name.to_string(), bits, pruned }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    spec: SparsitySpec,
    layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn from_layers(spec: SparsitySpec, layers: Vec<LayerMask>) -> Self {
        Self { spec, layers }
    }

    pub fn spec(&self) -> &SparsitySpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(|l| l.pruned).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.bits.len()).sum()
    }
}

/// Ascending score, then ascending index.
#[inline]
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Indices (into `scores`) of the `k` lowest entries under [`rank`].
fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank((scores[a], a), (scores[b], b)));
        idx.truncate(k);
    }
    idx
}

pub fn make_mask(scores: &ScoreTensor, spec: &SparsitySpec) -> Result<PruneMask> {
    spec.validate()?;
    for (name, s) in scores.layers() {
        if s.data().iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Mask(format!("layer {name} has negative scores")));
        }
    }
    let layers = match *spec {
        SparsitySpec::Unstructured { ratio, scope: Scope::Row } => scores
            .layers()
            .par_iter()
            .map(|(name, s)| {
                let mut bits = vec![false; s.len()];
                let k = pruned_count(ratio, s.cols());
                for i in 0..s.rows() {
                    for j in lowest_k(s.row(i), k) {
                        bits[i * s.cols() + j] = true;
                    }
                }
                layer_mask(name, s, bits)
            })
            .collect::<Result<Vec<_>>>()?,
        SparsitySpec::Unstructured { ratio, scope: Scope::Layer } => scores
            .layers()
            .par_iter()
            .map(|(name, s)| {
                let mut bits = vec![false; s.len()];
                for k in lowest_k(s.data(), pruned_count(ratio, s.len())) {
                    bits[k] = true;
                }
                layer_mask(name, s, bits)
            })
            .collect::<Result<Vec<_>>>()?,
        SparsitySpec::Unstructured { ratio, scope: Scope::Global } => global_mask(scores, ratio)?,
        SparsitySpec::NM { n, m } => scores
            .layers()
            .par_iter()
            .map(|(name, s)| {
                let mut bits = vec![false; s.len()];
                for i in 0..s.rows() {
                    let row = s.row(i);
                    for (b, block) in row.chunks(m).enumerate() {
                        let prune = if block.len() == m { m - n } else { ragged_pruned(n, m, block.len()) };
                        for j in lowest_k(block, prune) {
                            bits[i * s.cols() + b * m + j] = true;
                        }
                    }
                }
                layer_mask(name, s, bits)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(PruneMask { spec: *spec, layers })
}

fn layer_mask(name: &str, s: &Matrix<f64>, bits: Vec<bool>) -> Result<LayerMask> {
    Ok(LayerMask::new(name, Matrix::new(s.rows(), s.cols(), bits)?))
}

fn global_mask(scores: &ScoreTensor, ratio: f64) -> Result<Vec<LayerMask>> {
    // Concatenating layers in order makes the flat position encode
    // (layer, row, column) lexicographically.
    let flat: Vec<f64> = scores.layers().iter().flat_map(|(_, s)| s.data().iter().copied()).collect();
    let mut pruned = vec![false; flat.len()];
    for k in lowest_k(&flat, pruned_count(ratio, flat.len())) {
        pruned[k] = true;
    }
    let mut offset = 0;
    scores
        .layers()
        .iter()
        .map(|(name, s)| {
            let bits = pruned[offset..offset + s.len()].to_vec();
            offset += s.len();
            layer_mask(name, s, bits)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub pruned: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub pruned: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn sparsity_report(mask: &PruneMask) -> SparsityReport {
    let frac = |p: usize, t: usize| if t == 0 { 0.0 } else { p as f64 / t as f64 };
    let layers: Vec<LayerSparsity> = mask
        .layers()
        .iter()
        .map(|l| LayerSparsity {
            name: l.name.clone(),
            pruned: l.pruned,
            total: l.bits.len(),
            fraction: frac(l.pruned, l.bits.len()),
        })
        .collect();
    let pruned = layers.iter().map(|l| l.pruned).sum();
    let total = layers.iter().map(|l| l.total).sum();
    SparsityReport { layers, pruned, total, fraction: frac(pruned, total) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Provenance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(layers: Vec<(&str, Matrix<f64>)>) -> ScoreTensor {
        ScoreTensor::from_layers(Provenance::Mixed, layers.into_iter().map(|(n, m)| (n.to_string(), m)).collect())
    }

    fn random_scores(seed: u64, shapes: &[(usize, usize)], levels: u32) -> ScoreTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(k, &(r, c))| {
                let m = Matrix::from_fn(r, c, |_, _| rng.gen_range(0..levels) as f64 * 0.5).unwrap();
                (format!("fc{k}"), m)
            })
            .collect();
        ScoreTensor::from_layers(Provenance::Mixed, layers)
    }

    /// Full sort of `(score, layer, flat)` triples, independent of `lowest_k`.
    fn sort_oracle(scores: &ScoreTensor, ratio: f64, scope: Scope) -> Vec<Vec<bool>> {
        let mut out: Vec<Vec<bool>> = scores.layers().iter().map(|(_, s)| vec![false; s.len()]).collect();
        let mut units: Vec<Vec<(f64, usize, usize)>> = Vec::new();
        for (l, (_, s)) in scores.layers().iter().enumerate() {
            match scope {
                Scope::Row => {
                    for i in 0..s.rows() {
                        units.push((0..s.cols()).map(|j| (s.get(i, j), l, i * s.cols() + j)).collect());
                    }
                }
                Scope::Layer => units.push(s.data().iter().enumerate().map(|(k, &v)| (v, l, k)).collect()),
                Scope::Global => {
                    if units.is_empty() {
                        units.push(Vec::new());
                    }
                    units[0].extend(s.data().iter().enumerate().map(|(k, &v)| (v, l, k)));
                }
            }
        }
        for mut unit in units {
            let k = (ratio * unit.len() as f64).floor() as usize;
            unit.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for &(_, l, idx) in &unit[..k] {
                out[l][idx] = true;
            }
        }
        out
    }

    #[test]
    fn bottom_half_of_layer() {
        let s = tensor(vec![("fc0", Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())]);
        let mask = make_mask(&s, &SparsitySpec::unstructured(0.5, Scope::Layer).unwrap()).unwrap();
        assert_eq!(mask.layers()[0].bits.data(), &[true, true, false, false]);
    }

    #[test]
    fn two_four_single_block() {
        let s = tensor(vec![("fc0", Matrix::from_rows(&[vec![5.0, 1.0, 4.0, 2.0]]).unwrap())]);
        let mask = make_mask(&s, &SparsitySpec::n_m(2, 4).unwrap()).unwrap();
        assert_eq!(mask.layers()[0].bits.data(), &[false, true, false, true]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = tensor(vec![
            ("fc0", Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap()),
            ("fc1", Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()),
        ]);
        let global = make_mask(&s, &SparsitySpec::unstructured(0.5, Scope::Global).unwrap()).unwrap();
        assert_eq!(global.layers()[0].bits.data(), &[true, true, true, false]);
        assert_eq!(global.layers()[1].bits.data(), &[false, false]);
        let row = make_mask(&s, &SparsitySpec::unstructured(0.5, Scope::Row).unwrap()).unwrap();
        assert_eq!(row.layers()[0].bits.data(), &[true, false, true, false]);
    }

    #[test]
    fn standard_ratios_match_full_sort_oracle() {
        let scores = random_scores(17, &[(64, 64), (64, 64), (32, 64)], 40);
        for ratio in [0.5, 0.75, 0.9] {
            for scope in [Scope::Row, Scope::Layer, Scope::Global] {
                let mask = make_mask(&scores, &SparsitySpec::unstructured(ratio, scope).unwrap()).unwrap();
                let oracle = sort_oracle(&scores, ratio, scope);
                for (lm, o) in mask.layers().iter().zip(&oracle) {
                    assert_eq!(lm.bits.data(), o.as_slice(), "{ratio} {scope}");
                }
                match scope {
                    Scope::Row => {
                        for lm in mask.layers() {
                            for i in 0..lm.bits.rows() {
                                let c = lm.bits.row(i).iter().filter(|&&b| b).count();
                                assert_eq!(c, pruned_count(ratio, lm.bits.cols()));
                            }
                        }
                    }
                    Scope::Layer => {
                        for lm in mask.layers() {
                            assert_eq!(lm.pruned, pruned_count(ratio, lm.bits.len()));
                        }
                    }
                    Scope::Global => assert_eq!(mask.total_pruned(), pruned_count(ratio, mask.total_weights())),
                }
            }
        }
    }

    #[test]
    fn ragged_n_m_tail() {
        // 6 columns under 2:4: one full block (2 pruned) + tail of 2 (1 pruned).
        let s = tensor(vec![("fc0", Matrix::from_rows(&[vec![4.0, 3.0, 2.0, 1.0, 9.0, 8.0]]).unwrap())]);
        let mask = make_mask(&s, &SparsitySpec::n_m(2, 4).unwrap()).unwrap();
        assert_eq!(mask.layers()[0].bits.data(), &[false, false, true, true, false, true]);
        assert_eq!(ragged_pruned(4, 8, 3), 1);
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(SparsitySpec::parse("2:4", Scope::Row).unwrap(), SparsitySpec::NM { n: 2, m: 4 });
        assert_eq!(
            SparsitySpec::parse("0.75", Scope::Global).unwrap(),
            SparsitySpec::Unstructured { ratio: 0.75, scope: Scope::Global }
        );
        for bad in ["3:2", "0:4", "4:4", "0", "1", "1.5", "abc", "2:x"] {
            assert!(matches!(SparsitySpec::parse(bad, Scope::Layer), Err(Error::Spec(_))), "{bad}");
        }
        assert_eq!(SparsitySpec::n_m(4, 8).unwrap().target_sparsity(), 0.5);
    }

    #[test]
    fn negative_scores_rejected() {
        let s = tensor(vec![("fc0", Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap())]);
        assert!(make_mask(&s, &SparsitySpec::unstructured(0.5, Scope::Layer).unwrap()).is_err());
    }

    #[test]
    fn report_examples() {
        let empty =
            PruneMask::from_layers(SparsitySpec::n_m(2, 4).unwrap(), vec![LayerMask::new("fc0", Matrix::zeros(3, 8))]);
        let r = sparsity_report(&empty);
        assert_eq!(r.fraction, 0.0);
        assert!(r.layers.iter().all(|l| l.fraction == 0.0));

        let scores = random_scores(4, &[(16, 32), (8, 16)], 1000);
        for spec in [SparsitySpec::n_m(2, 4).unwrap(), SparsitySpec::n_m(4, 8).unwrap()] {
            let r = sparsity_report(&make_mask(&scores, &spec).unwrap());
            assert_eq!(r.fraction, 0.5);
            assert!(r.layers.iter().all(|l| l.fraction == 0.5));
        }

        let mask = make_mask(&scores, &SparsitySpec::unstructured(0.75, Scope::Global).unwrap()).unwrap();
        let r = sparsity_report(&mask);
        let recount: usize = mask.layers().iter().map(|l| l.bits.data().iter().filter(|&&b| b).count()).sum();
        assert_eq!(r.pruned, recount);
        assert_eq!(r.pruned, pruned_count(0.75, 16 * 32 + 8 * 16));
        assert_eq!(r.layers.iter().map(|l| l.pruned).sum::<usize>(), r.pruned);
    }

    proptest! {
        #[test]
        fn n_m_blocks_hold_exactly(seed in 0u64..500, rows in 1usize..5, cols in 1usize..30, pat in 0usize..3) {
            let (n, m) = [(2, 4), (4, 8), (1, 3)][pat];
            let scores = random_scores(seed, &[(rows, cols)], 7);
            let mask = make_mask(&scores, &SparsitySpec::n_m(n, m).unwrap()).unwrap();
            let bits = &mask.layers()[0].bits;
            for i in 0..rows {
                for block in bits.row(i).chunks(m) {
                    let pruned = block.iter().filter(|&&b| b).count();
                    let want = if block.len() == m { m - n } else { ragged_pruned(n, m, block.len()) };
                    prop_assert_eq!(pruned, want);
                }
            }
        }

        #[test]
        fn monotone_transform_keeps_mask(seed in 0u64..500, scope in 0usize..3, ratio in 0.05f64..0.95) {
            let scope = [Scope::Row, Scope::Layer, Scope::Global][scope];
            let scores = random_scores(seed, &[(6, 9), (5, 6)], 5);
            let spec = SparsitySpec::unstructured(ratio, scope).unwrap();
            let transformed = ScoreTensor::from_layers(
                Provenance::Mixed,
                scores.layers().iter().map(|(n, s)| (n.clone(), s.try_map(|v| (v * 3.0 + 1.0).sqrt()).unwrap())).collect(),
            );
            prop_assert_eq!(make_mask(&scores, &spec).unwrap(), make_mask(&transformed, &spec).unwrap());
        }

        #[test]
        fn row_scope_close_to_layer_cardinality(seed in 0u64..500, ratio in 0.05f64..0.95, rows in 1usize..10, cols in 1usize..20) {
            let scores = random_scores(seed, &[(rows, cols)], 9);
            let row = make_mask(&scores, &SparsitySpec::unstructured(ratio, Scope::Row).unwrap()).unwrap();
            let layer = make_mask(&scores, &SparsitySpec::unstructured(ratio, Scope::Layer).unwrap()).unwrap();
            let diff = row.total_pruned() as i64 - layer.total_pruned() as i64;
            prop_assert!(diff.unsigned_abs() as usize <= rows);
        }
    }
}
