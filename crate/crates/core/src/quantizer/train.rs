use std::collections::HashMap;

use log::{debug, info, warn};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{SidRow, MODEL_VERSION};
use super::kmeans::kmeans;
use super::{
    codebook_grads, restart_dead_codes_indexed, rq_assign, rq_loss, update_codebooks, Assignment,
    BatchAssignment, Codebook, CodebookStack, CodebookStep,
};
use crate::autoencoder::{recon_loss, MlpGrad, MlpMoments, MlpParams};
use crate::diagnostics::UsageStats;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::optim::{AdamW, Moments};
use crate::transform::{
    forward, grad_input, grad_params_with_stats, inverse, inverse_grads, nuq_grad, nuq_loss,
    ParamGrad, TransformKind, TransformParams, TransformSideInfo,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Gradient,
    Ema,
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" | "grad" => Ok(Self::Gradient),
            "ema" => Ok(Self::Ema),
            other => Err(Error::Config(format!("unknown update rule {other:?}"))),
        }
    }
}

/// Which consistency term the transform is regularized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuqVariant {
    /// `‖T⁻¹(T(h)) - h‖²`
    RoundTrip,
    /// `‖T⁻¹(d̂) - h‖²` with `d̂` the quantized transform output.
    Quantized,
}

impl std::str::FromStr for NuqVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round_trip" | "roundtrip" => Ok(Self::RoundTrip),
            "quantized" => Ok(Self::Quantized),
            other => Err(Error::Config(format!("unknown nuq variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub levels: usize,
    pub codebook_size: usize,
    /// Quantized dimension. Without the autoencoder this is the input dimension.
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate for the transform parameters; `None` uses `learning_rate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform_lr: Option<f64>,
    pub mu: f64,
    pub lambda_nuq: f64,
    pub nuq_variant: NuqVariant,
    pub update_rule: UpdateRule,
    pub ema_decay: f64,
    pub seed: u64,
    pub transform: TransformKind,
    pub per_dimension: bool,
    pub use_autoencoder: bool,
    pub hidden: Vec<usize>,
    /// Steps between dead-codeword checks; 0 disables restarts.
    pub dead_restart_interval: usize,
    pub kmeans_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            codebook_size: 256,
            latent_dim: 32,
            epochs: 20,
            batch_size: 1024,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            transform_lr: None,
            mu: 0.25,
            lambda_nuq: 0.1,
            nuq_variant: NuqVariant::RoundTrip,
            update_rule: UpdateRule::Gradient,
            ema_decay: 0.99,
            seed: 0,
            transform: TransformKind::Kumaraswamy,
            per_dimension: false,
            use_autoencoder: false,
            hidden: vec![512, 256],
            dead_restart_interval: 50,
            kmeans_iters: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.codebook_size < 2 {
            return fail(format!(
                "codebook_size must be at least 2, got {}",
                self.codebook_size
            ));
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if let Some(lr) = self.transform_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("transform_lr must be positive, got {lr}"));
            }
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return fail(format!("mu must be positive, got {}", self.mu));
        }
        if !(0.1..=1.0).contains(&self.lambda_nuq) {
            return fail(format!(
                "lambda_nuq must lie in [0.1, 1], got {}",
                self.lambda_nuq
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            ));
        }
        if self.kmeans_iters == 0 {
            return fail("kmeans_iters must be positive".into());
        }
        if self.use_autoencoder && (self.hidden.is_empty() || self.hidden.contains(&0)) {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-item `recon + rq + λ·nuq`.
    pub loss: f64,
    pub recon: f64,
    pub rq: f64,
    pub nuq: f64,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerModel {
    pub version: String,
    pub config: TrainConfig,
    pub input_dim: usize,
    pub transform: TransformParams,
    pub stack: CodebookStack,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpParams>,
    pub mu: f64,
    pub lambda_nuq: f64,
    #[serde(default)]
    pub history: Vec<EpochReport>,
}

/// Per-item forward state up to the quantizer.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub h: Vec<f64>,
    pub d: Vec<f64>,
    pub side: TransformSideInfo,
}

impl QuantizerModel {
    pub fn levels(&self) -> usize {
        self.stack.levels()
    }

    pub fn n_codes(&self) -> usize {
        self.stack.books.first().map_or(0, Codebook::n_codes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model version {:?}, expected {MODEL_VERSION:?}",
                self.version
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.mu > 0.0) || !(self.lambda_nuq >= 0.0) {
            return Err(Error::Model(
                "mu must be positive and lambda_nuq non-negative".into(),
            ));
        }
        self.stack.validate()?;
        self.transform.validate()?;
        let w = self.transform.width();
        if w != 1 && w != self.stack.dim {
            return Err(Error::Model(format!(
                "transform width {w} does not fit dimension {}",
                self.stack.dim
            )));
        }
        match &self.mlp {
            Some(mlp) => {
                mlp.encoder.validate()?;
                mlp.decoder.validate()?;
                if mlp.input_dim() != self.input_dim
                    || mlp.latent_dim() != self.stack.dim
                    || mlp.decoder.input_dim() != self.stack.dim
                    || mlp.decoder.output_dim() != self.input_dim
                {
                    return Err(Error::Model(
                        "autoencoder shapes do not match the codebooks".into(),
                    ));
                }
            }
            None if self.input_dim != self.stack.dim => {
                return Err(Error::Model(format!(
                    "input dimension {} differs from codebook dimension {}",
                    self.input_dim, self.stack.dim
                )));
            }
            None => {}
        }
        Ok(())
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// Encoder (if any), normalization and transform.
    pub fn encode(&self, z: &[f64]) -> Result<Encoded> {
        self.check_input(z)?;
        let h = match &self.mlp {
            Some(mlp) => mlp.encode(z)?,
            None => z.to_vec(),
        };
        let (d, side) = forward(&h, &self.transform)?;
        Ok(Encoded { h, d, side })
    }

    pub fn assign(&self, z: &[f64]) -> Result<Assignment> {
        rq_assign(&self.encode(z)?.d, &self.stack)
    }

    /// Full round trip `z → ẑ` through the quantizer.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        let enc = self.encode(z)?;
        let a = rq_assign(&enc.d, &self.stack)?;
        let h_hat = inverse(&a.d_hat, &enc.side, &self.transform)?;
        match &self.mlp {
            Some(mlp) => mlp.decode(&h_hat),
            None => Ok(h_hat),
        }
    }
}

/// Resolves the quantized dimension: without an autoencoder it is the input's.
fn effective_config(cfg: &TrainConfig, input_dim: usize) -> TrainConfig {
    let mut cfg = cfg.clone();
    if !cfg.use_autoencoder && cfg.latent_dim != input_dim {
        info!(
            "no autoencoder: quantizing the {input_dim}-dim input directly (latent_dim {} ignored)",
            cfg.latent_dim
        );
        cfg.latent_dim = input_dim;
    }
    cfg
}

fn transform_params(cfg: &TrainConfig) -> TransformParams {
    if cfg.per_dimension {
        TransformParams::per_dimension(cfg.transform, cfg.latent_dim)
    } else {
        TransformParams::new(cfg.transform)
    }
}

fn encode_all(rows: &[Vec<f64>], mlp: Option<&MlpParams>) -> Result<Vec<Vec<f64>>> {
    match mlp {
        None => Ok(rows.to_vec()),
        Some(mlp) => {
            let (out, _) = mlp.encoder.forward_batch(stack_rows(rows).view())?;
            Ok(out.outer_iter().map(|r| r.to_vec()).collect())
        }
    }
}

fn stack_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("rectangular rows")
}

/// Sequential residual k-means: level `k` is fit on the residuals left by
/// levels `1..k`. EMA counts start at the cluster sizes scaled to one batch.
fn init_codebooks(d: &[Vec<f64>], cfg: &TrainConfig) -> Result<CodebookStack> {
    let mut residual = d.to_vec();
    let mut books = Vec::with_capacity(cfg.levels);
    let per_batch = cfg.batch_size.min(d.len()) as f64 / d.len() as f64;
    for level in 1..=cfg.levels {
        let km = kmeans(
            &residual,
            cfg.codebook_size,
            cfg.kmeans_iters,
            cfg.seed.wrapping_add(level as u64),
        )?;
        let mut book = Codebook::from_rows(level, &km.centroids)?;
        for &c in &km.assignments {
            book.ema_counts[c] += per_batch;
        }
        for (r, &c) in residual.iter_mut().zip(&km.assignments) {
            for (x, e) in r.iter_mut().zip(&km.centroids[c]) {
                *x -= e;
            }
        }
        debug!(
            "level {level}: k-means distortion {:.6e} after {} iterations",
            km.distortion, km.iterations
        );
        books.push(book);
    }
    CodebookStack::new(books)
}

struct ItemForward {
    side: TransformSideInfo,
    assignment: Assignment,
    incoming: Vec<Vec<f64>>,
    h_hat: Vec<f64>,
}

struct ItemBackward {
    theta: ParamGrad,
    grad_h: Vec<f64>,
    rq: f64,
    nuq: f64,
}

struct Optimizers {
    opt: AdamW,
    transform_opt: AdamW,
    books: Vec<Moments>,
    transform: [Moments; 2],
    encoder: Option<MlpMoments>,
    decoder: Option<MlpMoments>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub recon: f64,
    pub rq: f64,
    pub nuq: f64,
}

/// Trains a quantizer on `data`.
///
/// Items are processed in shuffled mini-batches. Per-item work inside a batch
/// runs on the current rayon pool; its results are reduced in item order, so
/// the trained model does not depend on the thread count.
pub fn train(data: &EmbeddingSet, cfg: &TrainConfig) -> Result<QuantizerModel> {
    cfg.validate()?;
    if data.count() < cfg.codebook_size {
        return Err(Error::NotEnoughPoints {
            needed: cfg.codebook_size,
            available: data.count(),
        });
    }
    let cfg = effective_config(cfg, data.dim());
    let rows: Vec<Vec<f64>> = data.rows_f64().collect();
    let mut mlp = cfg
        .use_autoencoder
        .then(|| MlpParams::new(data.dim(), &cfg.hidden, cfg.latent_dim, cfg.seed));
    let mut params = transform_params(&cfg);

    let h0 = encode_all(&rows, mlp.as_ref())?;
    let d0: Vec<Vec<f64>> = h0
        .par_iter()
        .map(|h| forward(h, &params).map(|(d, _)| d))
        .collect::<Result<_>>()?;
    let mut stack = init_codebooks(&d0, &cfg)?;
    drop((h0, d0));

    let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let width = params.width();
    let mut optim = Optimizers {
        opt,
        transform_opt: AdamW::new(cfg.transform_lr.unwrap_or(cfg.learning_rate), 0.0),
        books: stack
            .books
            .iter()
            .map(|b| Moments::new(b.vectors.len()))
            .collect(),
        transform: [Moments::new(width), Moments::new(width)],
        encoder: mlp.as_ref().map(|m| MlpMoments::new(&m.encoder)),
        decoder: mlp.as_ref().map(|m| MlpMoments::new(&m.decoder)),
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut restart_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    restart_rng.set_stream(2);

    let n_codes = cfg.codebook_size;
    let mut window = vec![vec![0u64; n_codes]; cfg.levels];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = BatchLoss {
            recon: 0.0,
            rq: 0.0,
            nuq: 0.0,
        };
        let mut restarts = 0;
        for batch_idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&[f64]> = batch_idx.iter().map(|&i| rows[i].as_slice()).collect();
            let (loss, assigned) =
                train_step(&batch, &cfg, &mut stack, &mut params, &mut mlp, &mut optim).map_err(
                    |e| match e {
                        Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                            epoch,
                            step,
                            detail,
                        },
                        // The data was checked finite on load, so NaN here means the parameters diverged.
                        Error::NanInput => Error::NonFiniteLoss {
                            epoch,
                            step,
                            detail: "NaN in intermediate activations".into(),
                        },
                        other => other,
                    },
                )?;
            sums.recon += loss.recon;
            sums.rq += loss.rq;
            sums.nuq += loss.nuq;
            for a in &assigned {
                for (k, &c) in a.codes.iter().enumerate() {
                    window[k][c as usize] += 1;
                }
            }
            if cfg.dead_restart_interval > 0 && step.is_multiple_of(cfg.dead_restart_interval) {
                let usage = window
                    .iter()
                    .enumerate()
                    .map(|(k, counts)| UsageStats::from_counts(k, counts.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let pools: Vec<Vec<Vec<f64>>> = (0..cfg.levels)
                    .map(|k| assigned.iter().map(|a| a.incoming[k].clone()).collect())
                    .collect();
                let reset =
                    restart_dead_codes_indexed(&mut stack, &usage, &pools, &mut restart_rng);
                for &(k, c) in &reset {
                    optim.books[k].reset_range(c * stack.dim..(c + 1) * stack.dim);
                }
                if !reset.is_empty() {
                    debug!("step {step}: restarted {} dead codewords", reset.len());
                }
                restarts += reset.len();
                window
                    .iter_mut()
                    .for_each(|w| w.iter_mut().for_each(|c| *c = 0));
            }
        }
        let n = rows.len() as f64;
        let report = EpochReport {
            epoch,
            loss: (sums.recon + sums.rq + cfg.lambda_nuq * sums.nuq) / n,
            recon: sums.recon / n,
            rq: sums.rq / n,
            nuq: sums.nuq / n,
            restarts,
        };
        if !report.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!("epoch mean loss {}", report.loss),
            });
        }
        info!(
            "epoch {epoch}: loss {:.6e} (recon {:.6e}, rq {:.6e}, nuq {:.3e}), {} restarts",
            report.loss, report.recon, report.rq, report.nuq, report.restarts
        );
        if epoch <= 5 {
            if let Some(prev) = history.last().map(|r: &EpochReport| r.loss) {
                if report.loss > prev {
                    warn!(
                        "epoch {epoch}: mean loss rose from {prev:.6e} to {:.6e}",
                        report.loss
                    );
                }
            }
        }
        history.push(report);
    }

    let model = QuantizerModel {
        version: MODEL_VERSION.to_string(),
        mu: cfg.mu,
        lambda_nuq: cfg.lambda_nuq,
        input_dim: data.dim(),
        config: cfg,
        transform: params,
        stack,
        mlp,
        history,
    };
    model.validate()?;
    Ok(model)
}

fn non_finite(detail: impl Into<String>) -> Error {
    Error::NonFiniteLoss {
        epoch: 0,
        step: 0,
        detail: detail.into(),
    }
}

/// Loss sums and gradients of one mini-batch.
///
/// Gradients are of the batch mean of `recon + rq + λ·nuq`. Quantization is
/// bridged with the straight-through estimator; normalization stats are held
/// constant.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Sums over the batch, not means.
    pub loss: BatchLoss,
    pub transform: ParamGrad,
    /// Per level, flat like [`Codebook::vectors`].
    pub codebooks: Vec<Vec<f64>>,
    pub encoder: Option<MlpGrad>,
    pub decoder: Option<MlpGrad>,
    pub assigned: Vec<BatchAssignment>,
}

pub fn batch_gradients(
    batch: &[&[f64]],
    cfg: &TrainConfig,
    stack: &CodebookStack,
    params: &TransformParams,
    mlp: Option<&MlpParams>,
) -> Result<BatchGradients> {
    let b = batch.len() as f64;
    let z = stack_rows(&batch.iter().map(|r| r.to_vec()).collect::<Vec<_>>());

    let (h_mat, enc_cache) = match mlp {
        Some(m) => {
            let (h, c) = m.encoder.forward_batch(z.view())?;
            (h, Some(c))
        }
        None => (z.clone(), None),
    };
    let h_rows: Vec<&[f64]> = h_mat
        .as_slice()
        .expect("standard layout")
        .chunks_exact(h_mat.ncols())
        .collect();

    let stack_ref = stack;
    let params_ref = params;
    let fwd: Vec<ItemForward> = h_rows
        .par_iter()
        .map(|h| {
            let (d, side) = forward(h, params_ref)?;
            let assignment = rq_assign(&d, stack_ref)?;
            let incoming = assignment.incoming(&d);
            let h_hat = inverse(&assignment.d_hat, &side, params_ref)?;
            Ok(ItemForward {
                side,
                assignment,
                incoming,
                h_hat,
            })
        })
        .collect::<Result<_>>()?;

    // Reconstruction and its gradient at ĥ.
    let h_hat = stack_rows(&fwd.iter().map(|f| f.h_hat.clone()).collect::<Vec<_>>());
    let (z_hat, dec_cache) = match mlp {
        Some(m) => {
            let (out, c) = m.decoder.forward_batch(h_hat.view())?;
            (out, Some(c))
        }
        None => (h_hat.clone(), None),
    };
    let recon: f64 = z
        .outer_iter()
        .zip(z_hat.outer_iter())
        .map(|(a, b)| recon_loss(a.as_slice().unwrap(), b.as_slice().unwrap()))
        .sum();
    let grad_zhat = (&z_hat - &z) * (2.0 / b);
    let (dec_grad, grad_hhat) = match (mlp.as_ref(), dec_cache) {
        (Some(m), Some(cache)) => {
            let (g, gin) = m.decoder.backward(&cache, grad_zhat.view())?;
            (Some(g), gin)
        }
        _ => (None, grad_zhat),
    };

    let grad_hhat = grad_hhat.as_standard_layout();
    let g_rows: Vec<&[f64]> = grad_hhat
        .as_slice()
        .expect("standard layout")
        .chunks_exact(grad_hhat.ncols())
        .collect();
    let lambda = cfg.lambda_nuq;
    let mu = cfg.mu;
    let variant = cfg.nuq_variant;
    let bwd: Vec<ItemBackward> = fwd
        .par_iter()
        .zip(h_rows.par_iter())
        .zip(g_rows.par_iter())
        .map(|((f, h), g_hhat)| {
            let mut g_hhat = g_hhat.to_vec();
            let (nuq, extra_h) = match variant {
                NuqVariant::RoundTrip => (nuq_loss(h, params_ref)?, None),
                NuqVariant::Quantized => {
                    let diff: Vec<f64> = f.h_hat.iter().zip(h.iter()).map(|(a, b)| a - b).collect();
                    for (g, r) in g_hhat.iter_mut().zip(&diff) {
                        *g += lambda * 2.0 * r / b;
                    }
                    let v = diff.iter().map(|r| r * r).sum();
                    (v, Some(diff))
                }
            };
            let (g_dhat, mut theta) =
                inverse_grads(&f.assignment.d_hat, &f.side, &g_hhat, params_ref);
            let selected: Vec<&[f64]> = f
                .assignment
                .codes
                .codes
                .iter()
                .enumerate()
                .map(|(k, &c)| stack_ref.books[k].codeword(c as usize))
                .collect();
            let rq = rq_loss(&f.incoming, &selected, mu);
            // Straight-through: ∂L/∂d = ∂L/∂d̂ plus the commitment gradient.
            let g_d: Vec<f64> = g_dhat
                .iter()
                .zip(&rq.input_grad)
                .map(|(a, c)| a + c / b)
                .collect();
            theta.add_assign(&grad_params_with_stats(h, &f.side.stats, &g_d, params_ref)?);
            if variant == NuqVariant::RoundTrip && params_ref.kind != TransformKind::Identity {
                let mut g = nuq_grad(h, params_ref)?;
                g.scale(lambda / b);
                theta.add_assign(&g);
            }
            let mut grad_h = if f.side.degenerate {
                vec![0.0; h.len()]
            } else {
                grad_input(h, &f.side.stats, &g_d, params_ref)
            };
            if let Some(diff) = extra_h {
                for (g, r) in grad_h.iter_mut().zip(&diff) {
                    *g -= lambda * 2.0 * r / b;
                }
            }
            Ok(ItemBackward {
                theta,
                grad_h,
                rq: rq.value,
                nuq,
            })
        })
        .collect::<Result<_>>()?;

    let mut theta = ParamGrad::zeros(params_ref);
    let mut loss = BatchLoss {
        recon,
        rq: 0.0,
        nuq: 0.0,
    };
    for item in &bwd {
        theta.add_assign(&item.theta);
        loss.rq += item.rq;
        loss.nuq += item.nuq;
    }
    let total = loss.recon + loss.rq + lambda * loss.nuq;
    if !total.is_finite() {
        return Err(non_finite(format!(
            "batch loss {total} (recon {}, rq {}, nuq {})",
            loss.recon, loss.rq, loss.nuq
        )));
    }

    let assigned: Vec<BatchAssignment> = fwd
        .into_iter()
        .map(|f| BatchAssignment {
            codes: f.assignment.codes.codes,
            incoming: f.incoming,
        })
        .collect();

    let encoder = match (mlp, enc_cache) {
        (Some(m), Some(cache)) => {
            let dim = m.latent_dim();
            let grad_h: Vec<f64> = bwd.iter().flat_map(|i| i.grad_h.iter().copied()).collect();
            let grad_h = ArrayView2::from_shape((bwd.len(), dim), &grad_h).expect("batch × latent");
            Some(m.encoder.backward(&cache, grad_h)?.0)
        }
        _ => None,
    };
    let codebooks = codebook_grads(stack, &assigned)
        .into_iter()
        .map(|g| g.into_iter().map(|x| x / b).collect())
        .collect();
    Ok(BatchGradients {
        loss,
        transform: theta,
        codebooks,
        encoder,
        decoder: dec_grad,
        assigned,
    })
}

fn train_step(
    batch: &[&[f64]],
    cfg: &TrainConfig,
    stack: &mut CodebookStack,
    params: &mut TransformParams,
    mlp: &mut Option<MlpParams>,
    optim: &mut Optimizers,
) -> Result<(BatchLoss, Vec<BatchAssignment>)> {
    let grads = batch_gradients(batch, cfg, stack, params, mlp.as_ref())?;
    if let (Some(m), Some(eg), Some(dg)) = (mlp.as_mut(), &grads.encoder, &grads.decoder) {
        optim
            .encoder
            .as_mut()
            .unwrap()
            .step(&optim.opt, &mut m.encoder, eg);
        optim
            .decoder
            .as_mut()
            .unwrap()
            .step(&optim.opt, &mut m.decoder, dg);
    }
    let kind = params.kind;
    if let (Some([gp, gq]), Some([p, q])) =
        (grads.transform.trainable(kind), params.trainable_mut())
    {
        let [mp, mq] = &mut optim.transform;
        mp.step(&optim.transform_opt, p, gp, false);
        mq.step(&optim.transform_opt, q, gq, false);
    }
    let assigned = grads.assigned;
    match cfg.update_rule {
        UpdateRule::Gradient => {
            for ((book, g), m) in stack
                .books
                .iter_mut()
                .zip(&grads.codebooks)
                .zip(&mut optim.books)
            {
                m.step(&optim.opt, &mut book.vectors, g, false);
            }
            track_usage(stack, &assigned, cfg.ema_decay);
        }
        UpdateRule::Ema => update_codebooks(
            stack,
            &assigned,
            CodebookStep::Ema {
                decay: cfg.ema_decay,
            },
        ),
    }

    let finite = stack
        .books
        .iter()
        .all(|bk| bk.vectors.iter().all(|v| v.is_finite()))
        && params
            .log_a
            .iter()
            .chain(&params.log_b)
            .chain(&params.log_alpha)
            .chain(&params.x0)
            .all(|v| v.is_finite());
    if !finite {
        return Err(non_finite("parameters became non-finite after the update"));
    }
    Ok((grads.loss, assigned))
}

/// Running per-codeword usage under the gradient rule.
fn track_usage(stack: &mut CodebookStack, batch: &[BatchAssignment], decay: f64) {
    for (k, book) in stack.books.iter_mut().enumerate() {
        let mut counts = vec![0.0; book.n_codes()];
        for item in batch {
            counts[item.codes[k] as usize] += 1.0;
        }
        for (e, c) in book.ema_counts.iter_mut().zip(counts) {
            *e = decay * *e + (1.0 - decay) * c;
        }
    }
}

/// Assigns a semantic ID to every item. With `dedup`, items are numbered
/// `0, 1, 2, …` in input order within each group of identical code tuples.
pub fn quantize_set(
    data: &EmbeddingSet,
    model: &QuantizerModel,
    dedup: bool,
) -> Result<Vec<SidRow>> {
    if data.dim() != model.input_dim {
        return Err(Error::DimMismatch {
            expected: model.input_dim,
            actual: data.dim(),
        });
    }
    let codes: Vec<Vec<u32>> = (0..data.count())
        .into_par_iter()
        .map(|i| model.assign(&data.row_f64(i)).map(|a| a.codes.codes))
        .collect::<Result<_>>()?;
    let mut seen: HashMap<Vec<u32>, u32> = HashMap::new();
    Ok(data
        .ids()
        .iter()
        .zip(codes)
        .map(|(id, codes)| {
            let dedup_suffix = dedup.then(|| {
                let n = seen.entry(codes.clone()).or_insert(0);
                *n += 1;
                *n - 1
            });
            SidRow {
                item_id: id.clone(),
                sid: super::SemanticId {
                    codes,
                    dedup_suffix,
                },
            }
        })
        .collect())
}
