//! Encoder/decoder MLPs with hand-written reverse mode.
//!
//! Each network is a chain of dense layers with ReLU between them and a
//! linear output. Weights are stored `in × out` so a batch `X` (rows are
//! samples) maps to `X·W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::optim::{AdamW, Moments};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct DenseRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Serialize for Dense {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DenseRepr {
            weights: self.weights.outer_iter().map(|r| r.to_vec()).collect(),
            bias: self.bias.to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dense {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = DenseRepr::deserialize(d)?;
        let rows = repr.weights.len();
        let cols = repr.weights.first().map_or(0, Vec::len);
        if repr.weights.iter().any(|r| r.len() != cols) || repr.bias.len() != cols {
            return Err(serde::de::Error::custom("ragged dense layer"));
        }
        let flat: Vec<f64> = repr.weights.into_iter().flatten().collect();
        let weights =
            Array2::from_shape_vec((rows, cols), flat).map_err(serde::de::Error::custom)?;
        Ok(Dense {
            weights,
            bias: Array1::from(repr.bias),
        })
    }
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations saved by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every width from
    /// input to output.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Model("mlp layer shapes do not chain".into()));
            }
        }
        let finite = self
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Model("non-finite mlp weight".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (out, _) = self.forward_batch(batch)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = act.dot(&layer.weights) + &layer.bias;
            inputs.push(act);
            act = if l < last {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok((act, ForwardCache { inputs, pre }))
    }

    /// Reverse pass. Returns parameter gradients and `∂L/∂x`. The ReLU
    /// subgradient at 0 is 0.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<(MlpGrad, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "{} cached layers for a {}-layer network",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let rows = cache.inputs[0].nrows();
        if grad_out.nrows() != rows || grad_out.ncols() != self.output_dim() {
            return Err(Error::CacheMismatch(format!(
                "upstream gradient {}x{} does not match output {}x{}",
                grad_out.nrows(),
                grad_out.ncols(),
                rows,
                self.output_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut weights = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut bias = vec![Array1::zeros(0); self.layers.len()];
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                g.zip_mut_with(&cache.pre[l], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            weights[l] = cache.inputs[l].t().dot(&g);
            bias[l] = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[l].weights.t());
        }
        Ok((MlpGrad { weights, bias }, g))
    }
}

/// Encoder `m → … → d` and its mirrored decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl MlpParams {
    /// `hidden` lists encoder hidden widths; the decoder uses them reversed.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(latent_dim);
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        Self {
            encoder: Mlp::new(&enc, &mut rng),
            decoder: Mlp::new(&dec, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(z)
    }

    pub fn decode(&self, h_hat: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(h_hat)
    }
}

/// Squared Euclidean distance `‖z - ẑ‖²`.
pub fn recon_loss(z: &[f64], z_hat: &[f64]) -> f64 {
    z.iter().zip(z_hat).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Optimizer state mirroring an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct MlpMoments {
    weights: Vec<Moments>,
    bias: Vec<Moments>,
}

impl MlpMoments {
    pub fn new(mlp: &Mlp) -> Self {
        Self {
            weights: mlp
                .layers
                .iter()
                .map(|l| Moments::new(l.weights.len()))
                .collect(),
            bias: mlp
                .layers
                .iter()
                .map(|l| Moments::new(l.bias.len()))
                .collect(),
        }
    }

    /// Applies one AdamW step; weight decay touches weights only.
    pub fn step(&mut self, opt: &AdamW, mlp: &mut Mlp, grad: &MlpGrad) {
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            let gw = grad.weights[l].as_standard_layout();
            self.weights[l].step(
                opt,
                layer.weights.as_slice_mut().expect("standard layout"),
                gw.as_slice().expect("standard layout"),
                true,
            );
            self.bias[l].step(
                opt,
                layer.bias.as_slice_mut().expect("contiguous"),
                grad.bias[l].as_slice().expect("contiguous"),
                false,
            );
        }
    }
}
