//! Per-Gaussian MLP autoencoder mapping D-dimensional features to
//! three-channel latents in `(0, 1)³` and back.
//!
//! Hidden layers use leaky ReLU (slope 0.01); the encoder output goes through
//! a sigmoid so a latent is a legal RGB payload; the decoder output is linear.
//! Parameters are generic over `f32` (storage, training) and `f64` (gradient
//! checks and the sparsification loop).

mod train;

pub use train::{loss_and_grad, sample_pairs, train, LossParts, TrainConfig, TrainOutcome};

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use num_traits::NumCast;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 3;
pub const DEFAULT_HIDDEN: [usize; 4] = [128, 64, 32, 16];
const LEAKY_SLOPE: f64 = 0.01;
pub const CFAE_MAGIC: &[u8; 4] = b"CFAE";
pub const CFAE_VERSION: u32 = 1;

#[inline]
pub(crate) fn cst<T: NdFloat>(v: f64) -> T {
    <T as NumCast>::from(v).expect("representable constant")
}

/// Dense layer computing `x · Wᵀ + b`; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: NdFloat> Layer<T> {
    fn zeros_like(&self) -> Self {
        Layer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    fn cast<U: NdFloat>(&self) -> Layer<U> {
        Layer {
            weight: self.weight.mapv(|v| cst::<U>(v.to_f64().unwrap())),
            bias: self.bias.mapv(|v| cst::<U>(v.to_f64().unwrap())),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Leaky,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply<T: NdFloat>(self, x: &mut Array2<T>) {
        match self {
            Activation::Leaky => x.mapv_inplace(|v| {
                if v > T::zero() {
                    v
                } else {
                    v * cst(LEAKY_SLOPE)
                }
            }),
            Activation::Sigmoid => x.mapv_inplace(|v| T::one() / (T::one() + (-v).exp())),
            Activation::Linear => {}
        }
    }

    /// Multiplies `grad` by the activation derivative, given the activation output.
    fn backprop<T: NdFloat>(self, grad: &mut Array2<T>, output: &Array2<T>) {
        match self {
            Activation::Leaky => ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
                if o <= T::zero() {
                    *g *= cst(LEAKY_SLOPE);
                }
            }),
            Activation::Sigmoid => ndarray::Zip::from(grad)
                .and(output)
                .for_each(|g, &o| *g = *g * o * (T::one() - o)),
            Activation::Linear => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T = f32> {
    pub encoder: Vec<Layer<T>>,
    pub decoder: Vec<Layer<T>>,
}

/// Activations of a forward pass, kept for back-propagation.
pub(crate) struct Trace<T> {
    /// Input followed by every layer output.
    pub acts: Vec<Array2<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Array2<T> {
        self.acts.last().expect("trace has input")
    }
}

impl<T: NdFloat> Autoencoder<T> {
    /// Encoder `dim → hidden… → 3`, decoder the mirror image. Weights use a
    /// uniform fan-in initialization seeded by `seed`.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if hidden.iter().any(|&h| h == 0 || h == LATENT_DIM) {
            return Err(Error::Config(format!(
                "hidden widths must be positive and differ from the latent width {LATENT_DIM}: {hidden:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(LATENT_DIM);
        let mut make = |inp: usize, out: usize| {
            let bound = (6.0 / inp as f64).sqrt() * 0.5;
            Layer {
                weight: Array2::from_shape_fn((out, inp), |_| cst(rng.random_range(-bound..bound))),
                bias: Array1::zeros(out),
            }
        };
        let encoder: Vec<Layer<T>> = widths.windows(2).map(|w| make(w[0], w[1])).collect();
        let decoder: Vec<Layer<T>> = widths
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| make(*w[0], *w[1]))
            .collect();
        Ok(Autoencoder { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].inputs()
    }

    pub fn cast<U: NdFloat>(&self) -> Autoencoder<U> {
        Autoencoder {
            encoder: self.encoder.iter().map(Layer::cast).collect(),
            decoder: self.decoder.iter().map(Layer::cast).collect(),
        }
    }

    pub fn to_f64(&self) -> Autoencoder<f64> {
        self.cast()
    }

    fn activation(layers: usize, l: usize, encoder: bool) -> Activation {
        if l + 1 < layers {
            Activation::Leaky
        } else if encoder {
            Activation::Sigmoid
        } else {
            Activation::Linear
        }
    }

    pub(crate) fn trace(layers: &[Layer<T>], input: Array2<T>, encoder: bool) -> Trace<T> {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(input);
        for (l, layer) in layers.iter().enumerate() {
            let mut out = layer.forward(&acts[l].view());
            Self::activation(layers.len(), l, encoder).apply(&mut out);
            acts.push(out);
        }
        Trace { acts }
    }

    /// Back-propagates `grad` (w.r.t. the trace output) through `layers`,
    /// adding parameter gradients into `grads` when given. Returns the
    /// gradient with respect to the trace input.
    pub(crate) fn backprop(
        layers: &[Layer<T>],
        trace: &Trace<T>,
        mut grad: Array2<T>,
        encoder: bool,
        mut grads: Option<&mut [Layer<T>]>,
    ) -> Array2<T> {
        for l in (0..layers.len()).rev() {
            Self::activation(layers.len(), l, encoder).backprop(&mut grad, &trace.acts[l + 1]);
            if let Some(g) = grads.as_deref_mut() {
                g[l].weight += &grad.t().dot(&trace.acts[l]);
                g[l].bias += &grad.sum_axis(Axis(0));
            }
            grad = grad.dot(&layers[l].weight);
        }
        grad
    }

    fn check_width(&self, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// Encodes a batch of features (`B × D`) to latents (`B × 3`).
    pub fn encode_batch(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_width(features.ncols(), self.input_dim())?;
        Ok(Self::trace(&self.encoder, features.to_owned(), true)
            .acts
            .pop()
            .unwrap())
    }

    /// Decodes a batch of latents (`B × 3`) to features (`B × D`).
    pub fn decode_batch(&self, latents: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_width(latents.ncols(), LATENT_DIM)?;
        Ok(Self::trace(&self.decoder, latents.to_owned(), false)
            .acts
            .pop()
            .unwrap())
    }

    pub fn encode(&self, feature: &[T]) -> Result<[T; LATENT_DIM]> {
        let view = ArrayView2::from_shape((1, feature.len()), feature).expect("row view");
        let z = self.encode_batch(view)?;
        Ok([z[[0, 0]], z[[0, 1]], z[[0, 2]]])
    }

    pub fn decode(&self, latent: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, latent.len()), latent).expect("row view");
        Ok(self.decode_batch(view)?.row(0).to_vec())
    }

    /// Decodes `latents` and returns `(decoded, ∂L/∂latents)` given
    /// `upstream(decoded) = ∂L/∂decoded`.
    pub fn decode_with_vjp(
        &self,
        latents: ArrayView2<T>,
        upstream: impl FnOnce(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.check_width(latents.ncols(), LATENT_DIM)?;
        let trace = Self::trace(&self.decoder, latents.to_owned(), false);
        let grad = upstream(trace.output());
        let grad_in = Self::backprop(&self.decoder, &trace, grad, false, None);
        let decoded = trace.acts.into_iter().last().unwrap();
        Ok((decoded, grad_in))
    }

    pub(crate) fn zero_grads(&self) -> (Vec<Layer<T>>, Vec<Layer<T>>) {
        (
            self.encoder.iter().map(Layer::zeros_like).collect(),
            self.decoder.iter().map(Layer::zeros_like).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

impl Autoencoder<f32> {
    /// Checkpoint layout: magic, `u32` version, `u32` D, then per layer
    /// (encoder first) `u32` rows, `u32` cols, row-major `f32` weights and
    /// `f32` biases. The encoder ends at the first layer with 3 rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CFAE_MAGIC);
        out.extend_from_slice(&CFAE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.extend_from_slice(&(layer.outputs() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.inputs() as u32).to_le_bytes());
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let slice = bytes
                .get(cursor..cursor + n)
                .ok_or_else(|| Error::Format("truncated CFAE checkpoint".into()))?;
            cursor += n;
            Ok(slice)
        };
        if take(4)? != CFAE_MAGIC {
            return Err(Error::Format("bad CFAE magic".into()));
        }
        let word = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = word(take(4)?);
        if version != CFAE_VERSION as usize {
            return Err(Error::Format(format!("unsupported CFAE version {version}")));
        }
        let dim = word(take(4)?);
        let mut layers = Vec::new();
        let mut expected_in = dim;
        let mut encoder_len = None;
        loop {
            let header = match take(8) {
                Ok(h) => h,
                Err(_) => break,
            };
            let (rows, cols) = (word(&header[..4]), word(&header[4..]));
            if cols != expected_in {
                return Err(Error::Format(format!(
                    "layer {} expects {cols} inputs, previous layer gives {expected_in}",
                    layers.len()
                )));
            }
            let count = rows
                .checked_mul(cols)
                .and_then(|v| v.checked_add(rows))
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| Error::Format("layer size overflows".into()))?;
            let body = take(count)?;
            let floats: Vec<f32> = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (w, b) = floats.split_at(rows * cols);
            layers.push(Layer {
                weight: Array2::from_shape_vec((rows, cols), w.to_vec()).expect("shape"),
                bias: Array1::from_vec(b.to_vec()),
            });
            if rows == LATENT_DIM && encoder_len.is_none() {
                encoder_len = Some(layers.len());
            }
            expected_in = rows;
        }
        let split =
            encoder_len.ok_or_else(|| Error::Format("checkpoint has no latent layer".into()))?;
        if expected_in != dim || split == layers.len() {
            return Err(Error::Format(
                "decoder does not map back to the feature dimension".into(),
            ));
        }
        let decoder = layers.split_off(split);
        let model = Autoencoder {
            encoder: layers,
            decoder,
        };
        if !model.all_finite() {
            return Err(Error::Format(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
