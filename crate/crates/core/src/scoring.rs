//! Activation-weighted importance scores: `S_ij = A_j * W_ij^2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{ActivationNorms, LayerNorms, SourceTag};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    General,
    Task,
    Mixed,
}

impl From<SourceTag> for Provenance {
    fn from(tag: SourceTag) -> Self {
        match tag {
            SourceTag::General => Provenance::General,
            SourceTag::Task => Provenance::Task,
        }
    }
}

/// One nonnegative score matrix per prunable layer, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    provenance: Provenance,
    layers: Vec<(String, Matrix<f64>)>,
}

impl ScoreTensor {
    pub fn from_layers(provenance: Provenance, layers: Vec<(String, Matrix<f64>)>) -> Self {
        Self { provenance, layers }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn layers(&self) -> &[(String, Matrix<f64>)] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Matrix<f64>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// Per-channel activation statistic `A_j`: the mean square when
/// `mean_normalize` is set, otherwise the raw sum of squares.
pub fn channel_strength(norms: &LayerNorms, mean_normalize: bool) -> Vec<f64> {
    if mean_normalize {
        norms.mean_sq()
    } else {
        norms.sq_sums.clone()
    }
}

pub fn layer_scores(weight: &Matrix, strength: &[f64]) -> Result<Matrix<f64>> {
    if weight.cols() != strength.len() {
        return Err(Error::Score(format!(
            "weight has {} input channels, statistics have {}",
            weight.cols(),
            strength.len()
        )));
    }
    Matrix::from_fn(weight.rows(), weight.cols(), |i, j| {
        let w = weight.get(i, j) as f64;
        strength[j] * w * w
    })
    .map_err(|_| Error::Score("non-finite score".into()))
}

pub fn wanda_scores(model: &Model, norms: &ActivationNorms, mean_normalize: bool) -> Result<ScoreTensor> {
    norms.check_against(model).map_err(|e| Error::Score(e.to_string()))?;
    let layers = model
        .prunable_layers()
        .zip(&norms.layers)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(layer, ln)| {
            if ln.token_count == 0 {
                return Err(Error::Score(format!("no calibration tokens for {}", ln.name)));
            }
            Ok((layer.name.clone(), layer_scores(&layer.weight, &channel_strength(ln, mean_normalize))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTensor { provenance: norms.source.into(), layers })
}

/// The unsquared form `sqrt(A_j) * |W_ij|`. It orders weights exactly like
/// [`wanda_scores`] and exists to check that.
pub fn magnitude_norm_scores(model: &Model, norms: &ActivationNorms, mean_normalize: bool) -> Result<ScoreTensor> {
    norms.check_against(model).map_err(|e| Error::Score(e.to_string()))?;
    let layers = model
        .prunable_layers()
        .zip(&norms.layers)
        .map(|(layer, ln)| {
            let strength: Vec<f64> = channel_strength(ln, mean_normalize).into_iter().map(f64::sqrt).collect();
            let m = Matrix::from_fn(layer.weight.rows(), layer.weight.cols(), |i, j| {
                strength[j] * (layer.weight.get(i, j) as f64).abs()
            })?;
            Ok((layer.name.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTensor { provenance: norms.source.into(), layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{collect_norms, TokenCorpus};
    use crate::masking::{make_mask, Scope, SparsitySpec};
    use crate::model::{Layer, ModelSpec, Nonlinearity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_layer(w: Matrix, sums: Vec<f64>, m: u64) -> (Model, ActivationNorms) {
        let spec = ModelSpec {
            vocab_size: 2,
            embed_dim: w.cols(),
            layer_dims: vec![w.rows()],
            nonlinearity: Nonlinearity::Relu,
            seed: 0,
        };
        let layers = vec![
            Layer { name: "embed".into(), weight: Matrix::zeros(2, w.cols()), prunable: false },
            Layer { name: "out".into(), weight: Matrix::zeros(2, w.rows()), prunable: false },
        ];
        let mut layers = layers;
        layers.insert(1, Layer { name: "fc0".into(), weight: w, prunable: true });
        let model = Model::from_layers(spec, layers).unwrap();
        let norms = ActivationNorms {
            source: SourceTag::General,
            layers: vec![LayerNorms { name: "fc0".into(), sq_sums: sums, token_count: m }],
        };
        (model, norms)
    }

    #[test]
    fn hand_computed_scores() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let (model, norms) = one_layer(w, vec![1.0, 4.0, 9.0], 1);
        let s = wanda_scores(&model, &norms, true).unwrap();
        assert_eq!(s.provenance(), Provenance::General);
        assert_eq!(s.layer("fc0").unwrap().data(), &[1.0, 16.0, 81.0, 16.0, 100.0, 324.0]);
    }

    #[test]
    fn zero_weight_and_dead_channel() {
        let w = Matrix::from_rows(&[vec![0.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let (model, norms) = one_layer(w, vec![7.0, 0.0, 9.0], 3);
        let s = wanda_scores(&model, &norms, true).unwrap();
        let s = s.layer("fc0").unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 1), 0.0);
        assert!(s.get(1, 0) > 0.0);
    }

    #[test]
    fn mean_normalize_divides_by_token_count() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let (model, norms) = one_layer(w, vec![8.0, 4.0], 4);
        let mean = wanda_scores(&model, &norms, true).unwrap();
        let raw = wanda_scores(&model, &norms, false).unwrap();
        assert_eq!(mean.layer("fc0").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(raw.layer("fc0").unwrap().data(), &[8.0, 16.0]);
    }

    #[test]
    fn shape_mismatch() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (model, mut norms) = one_layer(w, vec![1.0, 1.0], 1);
        norms.layers[0].sq_sums.push(1.0);
        assert!(matches!(wanda_scores(&model, &norms, true), Err(Error::Score(_))));
    }

    fn seeded(seed: u64) -> (Model, ActivationNorms) {
        let spec = ModelSpec {
            vocab_size: 40,
            embed_dim: 16,
            layer_dims: vec![24, 16],
            nonlinearity: Nonlinearity::GeluTanhApprox,
            seed,
        };
        let model = Model::init(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = (0..20).map(|_| (0..8).map(|_| rng.gen_range(0..40)).collect()).collect();
        let norms = collect_norms(&model, &TokenCorpus::new("c", SourceTag::General, seqs)).unwrap();
        (model, norms)
    }

    proptest! {
        #[test]
        fn squared_and_linear_forms_give_identical_masks(seed in 0u64..200, r in 0usize..3, scope in 0usize..3) {
            let (model, norms) = seeded(seed);
            let spec = SparsitySpec::unstructured([0.5, 0.75, 0.9][r], [Scope::Row, Scope::Layer, Scope::Global][scope]).unwrap();
            let sq = make_mask(&wanda_scores(&model, &norms, true).unwrap(), &spec).unwrap();
            let lin = make_mask(&magnitude_norm_scores(&model, &norms, true).unwrap(), &spec).unwrap();
            prop_assert_eq!(sq, lin);
        }

        #[test]
        fn mean_normalize_does_not_change_layer_masks(seed in 0u64..200, r in 0usize..3) {
            let (model, norms) = seeded(seed);
            let spec = SparsitySpec::unstructured([0.5, 0.75, 0.9][r], Scope::Layer).unwrap();
            let a = make_mask(&wanda_scores(&model, &norms, true).unwrap(), &spec).unwrap();
            let b = make_mask(&wanda_scores(&model, &norms, false).unwrap(), &spec).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn monotone_in_weight_magnitude(a in 0.0f32..10.0, b in 0.0f32..10.0, act in 0.0f64..5.0) {
            let w = Matrix::from_rows(&[vec![a], vec![-b]]).unwrap();
            let s = layer_scores(&w, &[act]).unwrap();
            if a < b { prop_assert!(s.get(0, 0) <= s.get(1, 0)); }
            if a > b { prop_assert!(s.get(0, 0) >= s.get(1, 0)); }
        }
    }
}
