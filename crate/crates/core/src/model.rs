//! Feed-forward token model: embedding, a stack of fully-connected layers
//! with a pointwise nonlinearity, and an output projection.
//!
//! Each position is predicted from its own token only, so a sequence of `n`
//! tokens yields `n` rows of logits. Fully-connected weights are stored
//! `(out x in)`; the embedding is stored `(vocab x embed_dim)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PruneMask;
use crate::numerics::Matrix;
use crate::seed::sub_seed;

pub const EMBED: &str = "embed";
pub const OUT: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Nonlinearity {
    Relu,
    GeluTanhApprox,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::GeluTanhApprox => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Nonlinearity::Relu),
            "gelu" | "gelu_tanh_approx" | "gelu-tanh" => Ok(Nonlinearity::GeluTanhApprox),
            other => Err(Error::Spec(format!("unknown nonlinearity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layer_dims: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return Err(Error::Precondition("vocab_size and embed_dim must be >= 1".into()));
        }
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Precondition("layer_dims must be nonempty with all dims >= 1".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes = vec![(EMBED.to_string(), self.vocab_size, self.embed_dim)];
        let mut prev = self.embed_dim;
        for (k, &d) in self.layer_dims.iter().enumerate() {
            shapes.push((format!("fc{k}"), d, prev));
            prev = d;
        }
        shapes.push((OUT.to_string(), self.vocab_size, prev));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight: Matrix,
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Seeded init: embedding uniform in `[-1, 1)`, every other layer uniform
    /// in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`. Hidden layers are prunable.
    pub fn init(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "model-init"));
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let bound = if name == EMBED { 1.0 } else { 1.0 / (cols as f32).sqrt() };
                Layer {
                    prunable: name != EMBED && name != OUT,
                    weight: Matrix::random_uniform(rows, cols, bound, &mut rng),
                    name,
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Builds a model from explicit layers, checking names and shapes.
    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::shape(format!("expected {} layers, got {}", shapes.len(), layers.len())));
        }
        for ((name, rows, cols), layer) in shapes.iter().zip(&layers) {
            if &layer.name != name || layer.weight.shape() != (*rows, *cols) {
                return Err(Error::shape(format!(
                    "layer {} {:?} does not match expected {name} ({rows}, {cols})",
                    layer.name,
                    layer.weight.shape()
                )));
            }
        }
        if layers[0].prunable {
            return Err(Error::Precondition("the embedding cannot be prunable".into()));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn embed(&self) -> &Matrix {
        &self.layers[0].weight
    }

    /// Fully-connected layers in execution order, the output projection last.
    pub fn linear_layers(&self) -> &[Layer] {
        &self.layers[1..]
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.prunable)
    }

    pub fn set_prunable(&mut self, name: &str, prunable: bool) -> Result<()> {
        if name == EMBED && prunable {
            return Err(Error::Precondition("the embedding input is one-hot and cannot be pruned".into()));
        }
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::input(format!("no layer named {name}")))?;
        layer.prunable = prunable;
        Ok(())
    }

    /// Replaces a layer's weights, keeping its shape.
    pub fn set_weight(&mut self, name: &str, weight: Matrix) -> Result<()> {
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::input(format!("no layer named {name}")))?;
        if layer.weight.shape() != weight.shape() {
            return Err(Error::shape(format!(
                "layer {name} is {:?}, replacement is {:?}",
                layer.weight.shape(),
                weight.shape()
            )));
        }
        layer.weight = weight;
        Ok(())
    }

    pub fn num_prunable_weights(&self) -> usize {
        self.prunable_layers().map(|l| l.weight.len()).sum()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            Some(t) => Err(Error::input(format!("token {t} out of range for vocab {}", self.spec.vocab_size))),
            None => Ok(()),
        }
    }
}

/// Receives the input rows of every prunable layer during a forward pass.
pub trait ActivationSink {
    /// `slot` is the layer's position among the prunable layers.
    fn record(&mut self, slot: usize, layer: &str, inputs: &Matrix) -> Result<()>;
}

/// Raw captured inputs for every prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    layers: Vec<(String, usize, Vec<f32>)>,
    rows: usize,
}

impl ActivationCapture {
    pub fn new(model: &Model) -> Self {
        let layers = model.prunable_layers().map(|l| (l.name.clone(), l.weight.cols(), Vec::new())).collect();
        Self { layers, rows: 0 }
    }

    /// Number of token rows captured per layer.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn layer(&self, name: &str) -> Option<Matrix> {
        self.layers.iter().find(|(n, _, _)| n == name).map(|(_, cols, data)| {
            Matrix::new(data.len() / cols, *cols, data.clone()).expect("capture rows are finite")
        })
    }
}

impl ActivationSink for ActivationCapture {
    fn record(&mut self, slot: usize, layer: &str, inputs: &Matrix) -> Result<()> {
        let (name, cols, data) =
            self.layers.get_mut(slot).ok_or_else(|| Error::shape(format!("capture has no slot {slot}")))?;
        if name != layer || *cols != inputs.cols() {
            return Err(Error::shape(format!("capture slot {slot} is {name}, got {layer}")));
        }
        data.extend_from_slice(inputs.data());
        if slot == 0 {
            self.rows += inputs.rows();
        }
        Ok(())
    }
}

/// Forward pass without capture.
pub fn forward(model: &Model, tokens: &[u32]) -> Result<Matrix> {
    forward_with(model, tokens, None)
}

/// Forward pass that also returns the inputs of every prunable layer.
pub fn forward_captured(model: &Model, tokens: &[u32]) -> Result<(Matrix, ActivationCapture)> {
    let mut capture = ActivationCapture::new(model);
    let logits = forward_with(model, tokens, Some(&mut capture))?;
    Ok((logits, capture))
}

pub fn forward_with(model: &Model, tokens: &[u32], mut sink: Option<&mut dyn ActivationSink>) -> Result<Matrix> {
    model.check_tokens(tokens)?;
    let embed = model.embed();
    let d = embed.cols();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(embed.row(t as usize));
    }
    let mut h = Matrix::new(tokens.len(), d, data)?;

    let linear = model.linear_layers();
    let act = model.spec().nonlinearity;
    let mut slot = 0;
    for (k, layer) in linear.iter().enumerate() {
        if layer.prunable {
            if let Some(s) = sink.as_deref_mut() {
                s.record(slot, &layer.name, &h)?;
            }
            slot += 1;
        }
        let z = h.matmul_transposed(&layer.weight)?;
        h = if k + 1 < linear.len() { z.try_map(|v| act.apply(v))? } else { z };
    }
    Ok(h)
}

/// Zeroes every masked weight. Unmasked weights are copied bit for bit.
pub fn apply_mask(model: &Model, mask: &PruneMask) -> Result<Model> {
    let mut out = model.clone();
    for lm in mask.layers() {
        let layer = out
            .layers
            .iter_mut()
            .find(|l| l.name == lm.name)
            .ok_or_else(|| Error::Mask(format!("mask names unknown layer {}", lm.name)))?;
        if !layer.prunable {
            return Err(Error::Mask(format!("layer {} is not prunable", lm.name)));
        }
        if layer.weight.shape() != lm.bits.shape() {
            return Err(Error::Mask(format!(
                "mask for {} is {:?}, layer is {:?}",
                lm.name,
                lm.bits.shape(),
                layer.weight.shape()
            )));
        }
        let data =
            layer.weight.data().iter().zip(lm.bits.data()).map(|(&w, &pruned)| if pruned { 0.0 } else { w }).collect();
        layer.weight = Matrix::new(lm.bits.rows(), lm.bits.cols(), data)?;
    }
    Ok(out)
}
