//! Learnable invertible maps between normalized embedding coordinates and
//! the quantization space.
//!
//! Every vector is first normalized onto `[0, 1]` with its own min/max, then
//! pushed through a monotone bijection of `[0, 1]`:
//!
//! * Kumaraswamy CDF `F(x) = 1 - (1 - x^a)^b`, inverse `(1 - (1 - y)^(1/b))^(1/a)`.
//! * Scaled logistic: the logistic sigmoid rescaled so the domain endpoints
//!   land exactly on 0 and 1, inverted by the matching scaled logit.
//!
//! Positive parameters (`a`, `b`, `alpha`) are stored as logarithms. Stats are
//! treated as constants when differentiating.

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_unit, vector_stats, VectorStats};
use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Kumaraswamy,
    ScaledLogistic,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Self::Identity),
            "ks" | "kumaraswamy" => Ok(Self::Kumaraswamy),
            "logistic" | "scaled_logistic" => Ok(Self::ScaledLogistic),
            other => Err(Error::Config(format!("unknown transform {other:?}"))),
        }
    }
}

/// Transform parameters. Each vector has length 1 (shared across dimensions)
/// or the embedding dimension (per-dimension mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    pub log_alpha: Vec<f64>,
    /// Logistic midpoint in normalized coordinates.
    pub x0: Vec<f64>,
    pub clamp_eps: f64,
}

impl TransformParams {
    /// Shared scalar parameters at the identity-like start
    /// (`a = b = alpha = 1`, `x0 = 0.5`).
    pub fn new(kind: TransformKind) -> Self {
        Self::with_width(kind, 1)
    }

    pub fn per_dimension(kind: TransformKind, dim: usize) -> Self {
        Self::with_width(kind, dim.max(1))
    }

    fn with_width(kind: TransformKind, n: usize) -> Self {
        Self {
            kind,
            log_a: vec![0.0; n],
            log_b: vec![0.0; n],
            log_alpha: vec![0.0; n],
            x0: vec![0.5; n],
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    pub fn kumaraswamy(a: f64, b: f64) -> Self {
        let mut p = Self::new(TransformKind::Kumaraswamy);
        p.log_a[0] = a.ln();
        p.log_b[0] = b.ln();
        p
    }

    pub fn scaled_logistic(alpha: f64, x0: f64) -> Self {
        let mut p = Self::new(TransformKind::ScaledLogistic);
        p.log_alpha[0] = alpha.ln();
        p.x0[0] = x0;
        p
    }

    pub fn identity() -> Self {
        Self::new(TransformKind::Identity)
    }

    /// Number of parameter slots per trainable vector.
    pub fn width(&self) -> usize {
        self.log_a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.log_a.len();
        if w == 0
            || [&self.log_b, &self.log_alpha, &self.x0]
                .iter()
                .any(|v| v.len() != w)
        {
            return Err(Error::Config(
                "transform parameter vectors must share a non-zero length".into(),
            ));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 0.01) {
            return Err(Error::Config(format!(
                "clamp_eps {} outside (0, 0.01]",
                self.clamp_eps
            )));
        }
        let all = self
            .log_a
            .iter()
            .chain(&self.log_b)
            .chain(&self.log_alpha)
            .chain(&self.x0);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite transform parameter".into()));
        }
        Ok(())
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let w = self.width();
        if w != 1 && w != dim {
            return Err(Error::DimMismatch {
                expected: w,
                actual: dim,
            });
        }
        Ok(())
    }

    #[inline]
    fn slot(&self, j: usize) -> usize {
        if self.log_a.len() == 1 {
            0
        } else {
            j
        }
    }

    pub fn a(&self, j: usize) -> f64 {
        self.log_a[self.slot(j)].exp()
    }

    pub fn b(&self, j: usize) -> f64 {
        self.log_b[self.slot(j)].exp()
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.log_alpha[self.slot(j)].exp()
    }

    pub fn midpoint(&self, j: usize) -> f64 {
        self.x0[self.slot(j)]
    }

    /// The two trainable vectors for this kind, in `ParamGrad::trainable` order.
    pub fn trainable_mut(&mut self) -> Option<[&mut Vec<f64>; 2]> {
        match self.kind {
            TransformKind::Identity => None,
            TransformKind::Kumaraswamy => Some([&mut self.log_a, &mut self.log_b]),
            TransformKind::ScaledLogistic => Some([&mut self.log_alpha, &mut self.x0]),
        }
    }

    /// Forward map of one normalized coordinate.
    pub fn apply_unit(&self, u: f64, j: usize) -> f64 {
        match self.kind {
            TransformKind::Identity => u,
            TransformKind::Kumaraswamy => ks_cdf_unchecked(u, self.a(j), self.b(j)),
            TransformKind::ScaledLogistic => {
                logistic_unit(u, self.alpha(j), self.midpoint(j), &VectorStats::UNIT)
            }
        }
    }

    /// Inverse map of one quantized coordinate. `y` is clamped to `[0, 1]`
    /// (to `[eps, 1 - eps]` for the logit).
    pub fn invert_unit(&self, y: f64, j: usize) -> f64 {
        let y = y.clamp(0.0, 1.0);
        match self.kind {
            TransformKind::Identity => y,
            TransformKind::Kumaraswamy => ks_quantile_unchecked(y, self.a(j), self.b(j)),
            TransformKind::ScaledLogistic => logit_unit(
                y,
                self.alpha(j),
                self.midpoint(j),
                &VectorStats::UNIT,
                self.clamp_eps,
            ),
        }
    }

    /// `dT/du`. Zero at the pinned endpoints `u ∈ {0, 1}`, which normalization
    /// maps to 0 and 1 regardless of the input.
    pub fn apply_unit_du(&self, u: f64, j: usize) -> f64 {
        if u <= 0.0 || u >= 1.0 {
            return 0.0;
        }
        match self.kind {
            TransformKind::Identity => 1.0,
            TransformKind::Kumaraswamy => {
                let (a, b) = (self.a(j), self.b(j));
                let ln_u = u.ln();
                let ln_q = (-(a * ln_u).exp()).ln_1p();
                a * b * ((a - 1.0) * ln_u + (b - 1.0) * ln_q).exp()
            }
            TransformKind::ScaledLogistic => {
                let (alpha, x0) = (self.alpha(j), self.midpoint(j));
                let lo = sigmoid(-alpha * x0);
                let hi = sigmoid(alpha * (1.0 - x0));
                let s = sigmoid(alpha * (u - x0));
                alpha * s * (1.0 - s) / (hi - lo)
            }
        }
    }

    /// `dT⁻¹/dy`, zero where the input clamp is active.
    pub fn invert_unit_dy(&self, y: f64, j: usize) -> f64 {
        if !(0.0..=1.0).contains(&y) {
            return 0.0;
        }
        let eps = self.clamp_eps;
        match self.kind {
            TransformKind::Identity => 1.0,
            TransformKind::Kumaraswamy => {
                let (a, b) = (self.a(j), self.b(j));
                let y = y.clamp(eps, 1.0 - eps);
                let ln_1my = (-y).ln_1p();
                let ln_w = (-(ln_1my / b).exp_m1()).ln();
                ((1.0 / a - 1.0) * ln_w + (1.0 / b - 1.0) * ln_1my).exp() / (a * b)
            }
            TransformKind::ScaledLogistic => {
                if y < eps || y > 1.0 - eps {
                    return 0.0;
                }
                let (alpha, x0) = (self.alpha(j), self.midpoint(j));
                let lo = sigmoid(-alpha * x0);
                let hi = sigmoid(alpha * (1.0 - x0));
                let s = (hi - lo) * y + lo;
                (hi - lo) / (alpha * s * (1.0 - s))
            }
        }
    }

    /// Derivatives of `T(u)` with respect to the two trainable slots.
    pub fn apply_unit_dparams(&self, u: f64, j: usize) -> [f64; 2] {
        match self.kind {
            TransformKind::Identity => [0.0, 0.0],
            TransformKind::Kumaraswamy => {
                if u <= 0.0 || u >= 1.0 {
                    return [0.0, 0.0];
                }
                let (a, b) = (self.a(j), self.b(j));
                let ln_u = u.ln();
                let p = (a * ln_u).exp();
                let ln_q = (-p).ln_1p();
                let q_bm1 = ((b - 1.0) * ln_q).exp();
                let d_log_a = a * b * q_bm1 * p * ln_u;
                let d_log_b = -b * (b * ln_q).exp() * ln_q;
                [d_log_a, d_log_b]
            }
            TransformKind::ScaledLogistic => {
                let (alpha, x0) = (self.alpha(j), self.midpoint(j));
                logistic_dparams(u, alpha, x0, &VectorStats::UNIT)
            }
        }
    }

    /// Derivatives of `T⁻¹(y)` (with clamping) with respect to the trainable slots.
    pub fn invert_unit_dparams(&self, y: f64, j: usize) -> [f64; 2] {
        let y = y.clamp(0.0, 1.0);
        match self.kind {
            TransformKind::Identity => [0.0, 0.0],
            TransformKind::Kumaraswamy => {
                if y <= 0.0 || y >= 1.0 {
                    return [0.0, 0.0];
                }
                let (a, b) = (self.a(j), self.b(j));
                let ln_1my = (-y).ln_1p();
                let s = (ln_1my / b).exp();
                let w = -(ln_1my / b).exp_m1();
                if w <= 0.0 {
                    return [0.0, 0.0];
                }
                let ln_w = w.ln();
                let g = (ln_w / a).exp();
                let d_log_a = -g * ln_w / a;
                let d_log_b = ((1.0 / a - 1.0) * ln_w).exp() * s * ln_1my / (a * b);
                [d_log_a, d_log_b]
            }
            TransformKind::ScaledLogistic => {
                let (alpha, x0) = (self.alpha(j), self.midpoint(j));
                logit_dparams(y, alpha, x0, &VectorStats::UNIT, self.clamp_eps)
            }
        }
    }
}

/// Gradient of some scalar with respect to the transform parameters. Vectors
/// that do not apply to the kind are empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGrad {
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    pub log_alpha: Vec<f64>,
    pub x0: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(params: &TransformParams) -> Self {
        let w = params.width();
        match params.kind {
            TransformKind::Identity => Self::default(),
            TransformKind::Kumaraswamy => Self {
                log_a: vec![0.0; w],
                log_b: vec![0.0; w],
                ..Self::default()
            },
            TransformKind::ScaledLogistic => Self {
                log_alpha: vec![0.0; w],
                x0: vec![0.0; w],
                ..Self::default()
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.log_a.is_empty()
            && self.log_b.is_empty()
            && self.log_alpha.is_empty()
            && self.x0.is_empty()
    }

    fn slots_mut(&mut self, kind: TransformKind) -> Option<[&mut Vec<f64>; 2]> {
        match kind {
            TransformKind::Identity => None,
            TransformKind::Kumaraswamy => Some([&mut self.log_a, &mut self.log_b]),
            TransformKind::ScaledLogistic => Some([&mut self.log_alpha, &mut self.x0]),
        }
    }

    /// The two populated vectors in `TransformParams::trainable_mut` order.
    pub fn trainable(&self, kind: TransformKind) -> Option<[&Vec<f64>; 2]> {
        match kind {
            TransformKind::Identity => None,
            TransformKind::Kumaraswamy => Some([&self.log_a, &self.log_b]),
            TransformKind::ScaledLogistic => Some([&self.log_alpha, &self.x0]),
        }
    }

    fn add(&mut self, kind: TransformKind, slot: usize, g: [f64; 2]) {
        if let Some([p, q]) = self.slots_mut(kind) {
            p[slot] += g[0];
            q[slot] += g[1];
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (dst, src) in [
            (&mut self.log_a, &other.log_a),
            (&mut self.log_b, &other.log_b),
            (&mut self.log_alpha, &other.log_alpha),
            (&mut self.x0, &other.x0),
        ] {
            if dst.is_empty() {
                dst.clone_from(src);
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in [
            &mut self.log_a,
            &mut self.log_b,
            &mut self.log_alpha,
            &mut self.x0,
        ] {
            v.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Per-vector data carried from `forward` to `inverse`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSideInfo {
    pub stats: VectorStats,
    pub degenerate: bool,
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(s: f64) -> f64 {
    s.ln() - (-s).ln_1p()
}

fn unit_domain(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain { value: v })
    }
}

fn ks_cdf_unchecked(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let p = if a == 1.0 { x } else { x.powf(a) };
    if b == 1.0 {
        return p;
    }
    -(b * (-p).ln_1p()).exp_m1()
}

fn ks_quantile_unchecked(y: f64, a: f64, b: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    let w = if b == 1.0 {
        y
    } else {
        -((-y).ln_1p() / b).exp_m1()
    };
    if w <= 0.0 {
        return 0.0;
    }
    if a == 1.0 {
        return w.min(1.0);
    }
    w.powf(1.0 / a).min(1.0)
}

/// Kumaraswamy CDF `1 - (1 - x^a)^b` on `[0, 1]`.
pub fn ks_cdf(x: f64, a: f64, b: f64) -> Result<f64> {
    unit_domain(x)?;
    Ok(ks_cdf_unchecked(x, a, b))
}

/// Kumaraswamy quantile `(1 - (1 - y)^(1/b))^(1/a)` on `[0, 1]`.
pub fn ks_quantile(y: f64, a: f64, b: f64) -> Result<f64> {
    unit_domain(y)?;
    Ok(ks_quantile_unchecked(y, a, b))
}

struct LogisticFrame {
    scale: f64,
    lo_t: f64,
    hi_t: f64,
}

impl LogisticFrame {
    fn new(alpha: f64, x0: f64, stats: &VectorStats) -> Self {
        let lo = stats.x_min / stats.delta;
        let hi = stats.x_max / stats.delta;
        Self {
            scale: stats.delta,
            lo_t: alpha * (lo - x0),
            hi_t: alpha * (hi - x0),
        }
    }
}

fn logistic_unit(x: f64, alpha: f64, x0: f64, stats: &VectorStats) -> f64 {
    if stats.is_degenerate() {
        return 0.5;
    }
    let x = x.clamp(stats.x_min, stats.x_max);
    let f = LogisticFrame::new(alpha, x0, stats);
    let lo = sigmoid(f.lo_t);
    let hi = sigmoid(f.hi_t);
    let s = sigmoid(alpha * (x / f.scale - x0));
    ((s - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn logit_unit(y: f64, alpha: f64, x0: f64, stats: &VectorStats, eps: f64) -> f64 {
    if stats.is_degenerate() {
        return stats.x_min;
    }
    let y = y.clamp(eps, 1.0 - eps);
    let f = LogisticFrame::new(alpha, x0, stats);
    let lo = sigmoid(f.lo_t);
    let hi = sigmoid(f.hi_t);
    let s = (hi - lo) * y + lo;
    (f.scale * (logit(s) / alpha + x0)).clamp(stats.x_min, stats.x_max)
}

fn logistic_dparams(x: f64, alpha: f64, x0: f64, stats: &VectorStats) -> [f64; 2] {
    if stats.is_degenerate() {
        return [0.0, 0.0];
    }
    let u = x.clamp(stats.x_min, stats.x_max) / stats.delta;
    let lo_u = stats.x_min / stats.delta;
    let hi_u = stats.x_max / stats.delta;
    let (s, l, h) = (
        sigmoid(alpha * (u - x0)),
        sigmoid(alpha * (lo_u - x0)),
        sigmoid(alpha * (hi_u - x0)),
    );
    let (ds, dl, dh) = (s * (1.0 - s), l * (1.0 - l), h * (1.0 - h));
    let span = h - l;
    let y = (s - l) / span;
    // d/dlog_alpha = alpha * d/dalpha
    let da = |d: f64, v: f64| alpha * d * (v - x0);
    let d_log_alpha = ((da(ds, u) - da(dl, lo_u)) - y * (da(dh, hi_u) - da(dl, lo_u))) / span;
    let dx = |d: f64| -alpha * d;
    let d_x0 = ((dx(ds) - dx(dl)) - y * (dx(dh) - dx(dl))) / span;
    [d_log_alpha, d_x0]
}

fn logit_dparams(y: f64, alpha: f64, x0: f64, stats: &VectorStats, eps: f64) -> [f64; 2] {
    if stats.is_degenerate() {
        return [0.0, 0.0];
    }
    let yc = y.clamp(eps, 1.0 - eps);
    let lo_u = stats.x_min / stats.delta;
    let hi_u = stats.x_max / stats.delta;
    let (l, h) = (sigmoid(alpha * (lo_u - x0)), sigmoid(alpha * (hi_u - x0)));
    let (dl, dh) = (l * (1.0 - l), h * (1.0 - h));
    let s = (h - l) * yc + l;
    let ls = logit(s);
    let inv_ds = 1.0 / (alpha * s * (1.0 - s));
    let ds_dloga =
        yc * (alpha * dh * (hi_u - x0) - alpha * dl * (lo_u - x0)) + alpha * dl * (lo_u - x0);
    let ds_dx0 = yc * (-alpha * dh + alpha * dl) - alpha * dl;
    let d_log_alpha = stats.delta * (ds_dloga * inv_ds - ls / alpha);
    let d_x0 = stats.delta * (ds_dx0 * inv_ds + 1.0);
    [d_log_alpha, d_x0]
}

/// Scaled logistic on `[x_min, x_max]`: `(σ(α(x/δ - x0)) - σ(α(x_min/δ - x0))) / Δ`
/// with `Δ` the same difference taken at `x_max`, so `x_min ↦ 0` and `x_max ↦ 1`.
/// Degenerate stats pass through as 0.5.
pub fn scaled_logistic(x: f64, alpha: f64, x0: f64, stats: &VectorStats) -> f64 {
    logistic_unit(x, alpha, x0, stats)
}

/// Inverse of [`scaled_logistic`]; `y` is clamped to `[eps, 1 - eps]` first.
pub fn scaled_logit(
    y: f64,
    alpha: f64,
    x0: f64,
    stats: &VectorStats,
    clamp_eps: f64,
) -> Result<f64> {
    unit_domain(y)?;
    Ok(logit_unit(y, alpha, x0, stats, clamp_eps))
}

/// Normalizes `h` with its own min/max and applies the transform.
pub fn forward(h: &[f64], params: &TransformParams) -> Result<(Vec<f64>, TransformSideInfo)> {
    let stats = vector_stats(h)?;
    forward_with_stats(h, &stats, params)
}

/// [`forward`] with caller-provided normalization stats (e.g. corpus-global).
pub fn forward_with_stats(
    h: &[f64],
    stats: &VectorStats,
    params: &TransformParams,
) -> Result<(Vec<f64>, TransformSideInfo)> {
    params.check_dim(h.len())?;
    let (u, degenerate) = normalize_unit(h, stats);
    let side = TransformSideInfo {
        stats: *stats,
        degenerate,
    };
    if degenerate || params.kind == TransformKind::Identity {
        return Ok((u, side));
    }
    let d = u
        .iter()
        .enumerate()
        .map(|(j, &x)| params.apply_unit(x, j))
        .collect();
    Ok((d, side))
}

/// Maps a (possibly quantized) transformed vector back to embedding space.
pub fn inverse(
    d_hat: &[f64],
    side: &TransformSideInfo,
    params: &TransformParams,
) -> Result<Vec<f64>> {
    params.check_dim(d_hat.len())?;
    if side.degenerate {
        return Ok(vec![side.stats.x_min; d_hat.len()]);
    }
    let st = &side.stats;
    Ok(d_hat
        .iter()
        .enumerate()
        .map(|(j, &y)| st.x_min + st.delta * params.invert_unit(y, j))
        .collect())
}

/// Row-wise [`inverse`]; every row needs its side info.
pub fn inverse_rows(
    rows: &[Vec<f64>],
    sides: &[TransformSideInfo],
    params: &TransformParams,
) -> Result<Vec<Vec<f64>>> {
    if sides.len() != rows.len() {
        return Err(Error::MissingSideInfo(format!(
            "{} rows but {} side records",
            rows.len(),
            sides.len()
        )));
    }
    rows.iter()
        .zip(sides)
        .map(|(r, s)| inverse(r, s, params))
        .collect()
}

/// Consistency loss `‖T⁻¹(T(h)) - h‖²`.
pub fn nuq_loss(h: &[f64], params: &TransformParams) -> Result<f64> {
    if params.kind == TransformKind::Identity {
        return Ok(0.0);
    }
    let (d, side) = forward(h, params)?;
    if side.degenerate {
        return Ok(0.0);
    }
    let back = inverse(&d, &side, params)?;
    Ok(back.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Gradient of [`nuq_loss`] with respect to the transform parameters.
pub fn nuq_grad(h: &[f64], params: &TransformParams) -> Result<ParamGrad> {
    let mut grad = ParamGrad::zeros(params);
    if params.kind == TransformKind::Identity {
        return Ok(grad);
    }
    let stats = vector_stats(h)?;
    let (u, degenerate) = normalize_unit(h, &stats);
    if degenerate {
        return Ok(grad);
    }
    for (j, (&uj, &hj)) in u.iter().zip(h).enumerate() {
        let y = params.apply_unit(uj, j);
        let back = stats.x_min + stats.delta * params.invert_unit(y, j);
        let rho = back - hj;
        if rho == 0.0 {
            continue;
        }
        let dinv = params.invert_unit_dparams(y, j);
        let dy = params.invert_unit_dy(y, j);
        let dfwd = params.apply_unit_dparams(uj, j);
        let k = 2.0 * rho * stats.delta;
        grad.add(
            params.kind,
            params.slot(j),
            [k * (dinv[0] + dy * dfwd[0]), k * (dinv[1] + dy * dfwd[1])],
        );
    }
    Ok(grad)
}

/// Contracts `∂T(h)/∂θ` with `upstream`. Stats are held constant.
pub fn grad_params(h: &[f64], upstream: &[f64], params: &TransformParams) -> Result<ParamGrad> {
    let stats = vector_stats(h)?;
    grad_params_with_stats(h, &stats, upstream, params)
}

pub fn grad_params_with_stats(
    h: &[f64],
    stats: &VectorStats,
    upstream: &[f64],
    params: &TransformParams,
) -> Result<ParamGrad> {
    if upstream.len() != h.len() {
        return Err(Error::DimMismatch {
            expected: h.len(),
            actual: upstream.len(),
        });
    }
    params.check_dim(h.len())?;
    let mut grad = ParamGrad::zeros(params);
    if params.kind == TransformKind::Identity {
        return Ok(grad);
    }
    let (u, degenerate) = normalize_unit(h, stats);
    if degenerate {
        return Ok(grad);
    }
    for (j, (&uj, &g)) in u.iter().zip(upstream).enumerate() {
        if g == 0.0 {
            continue;
        }
        let d = params.apply_unit_dparams(uj, j);
        grad.add(params.kind, params.slot(j), [g * d[0], g * d[1]]);
    }
    Ok(grad)
}

/// Contracts `∂T(h)/∂h` with `upstream`, holding stats constant.
pub fn grad_input(
    h: &[f64],
    stats: &VectorStats,
    upstream: &[f64],
    params: &TransformParams,
) -> Vec<f64> {
    let (u, degenerate) = normalize_unit(h, stats);
    if degenerate {
        return vec![0.0; h.len()];
    }
    u.iter()
        .zip(upstream)
        .enumerate()
        .map(|(j, (&uj, &g))| g * params.apply_unit_du(uj, j) / stats.delta)
        .collect()
}

/// Backpropagates `upstream = ∂L/∂ĥ` through [`inverse`], returning
/// `(∂L/∂d̂, ∂L/∂θ)` where `θ` enters through `T⁻¹` only.
pub fn inverse_grads(
    d_hat: &[f64],
    side: &TransformSideInfo,
    upstream: &[f64],
    params: &TransformParams,
) -> (Vec<f64>, ParamGrad) {
    let mut grad = ParamGrad::zeros(params);
    if side.degenerate {
        return (vec![0.0; d_hat.len()], grad);
    }
    let delta = side.stats.delta;
    let mut gd = Vec::with_capacity(d_hat.len());
    for (j, (&y, &g)) in d_hat.iter().zip(upstream).enumerate() {
        gd.push(g * delta * params.invert_unit_dy(y, j));
        if params.kind != TransformKind::Identity && g != 0.0 {
            let dp = params.invert_unit_dparams(y, j);
            grad.add(
                params.kind,
                params.slot(j),
                [g * delta * dp[0], g * delta * dp[1]],
            );
        }
    }
    (gd, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ks_cdf_examples() {
        assert_eq!(ks_cdf(0.7, 1.0, 1.0).unwrap(), 0.7);
        for (a, b) in [(0.3, 4.0), (2.0, 2.0), (5.0, 0.5)] {
            assert_eq!(ks_cdf(0.0, a, b).unwrap(), 0.0);
            assert_eq!(ks_cdf(1.0, a, b).unwrap(), 1.0);
        }
        assert_abs_diff_eq!(ks_cdf(0.5, 2.0, 2.0).unwrap(), 0.4375, epsilon = 1e-15);
        assert!(matches!(ks_cdf(1.2, 1.0, 1.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn ks_quantile_examples() {
        assert_abs_diff_eq!(ks_quantile(0.4375, 2.0, 2.0).unwrap(), 0.5, epsilon = 1e-15);
        for y in [0.0, 0.1, 0.33, 0.9, 1.0] {
            assert_abs_diff_eq!(ks_quantile(y, 1.0, 1.0).unwrap(), y, epsilon = 1e-15);
        }
        assert_eq!(ks_quantile(1.0, 3.0, 0.4).unwrap(), 1.0);
        assert!(ks_quantile(-0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn scaled_logistic_examples() {
        let st = VectorStats::new(-2.0, 3.0);
        assert_eq!(scaled_logistic(-2.0, 3.0, 0.1, &st), 0.0);
        assert_eq!(scaled_logistic(3.0, 3.0, 0.1, &st), 1.0);
        let unit = VectorStats::UNIT;
        assert_abs_diff_eq!(scaled_logistic(0.5, 1.0, 0.5, &unit), 0.5, epsilon = 1e-15);
        let steep = scaled_logistic(0.25, 4.0, 0.5, &unit);
        let flat = scaled_logistic(0.25, 1.0, 0.5, &unit);
        // (σ(-1) - σ(-2)) / (σ(2) - σ(-2)) and (σ(-0.25) - σ(-0.5)) / (σ(0.5) - σ(-0.5))
        assert_abs_diff_eq!(steep, 0.196_611_933_241_481_88, epsilon = 1e-12);
        assert_abs_diff_eq!(flat, 0.246_134_082_737_598_54, epsilon = 1e-12);
        assert!(steep > 0.0 && steep < 0.5 && steep < flat);
    }

    #[test]
    fn scaled_logit_examples() {
        let st = VectorStats::new(-1.0, 2.5);
        for x in [-0.9, 0.0, 1.3, 2.4] {
            let y = scaled_logistic(x, 2.0, 0.3, &st);
            assert_abs_diff_eq!(
                scaled_logit(y, 2.0, 0.3, &st, 1e-6).unwrap(),
                x,
                epsilon = 1e-8
            );
        }
        let unit = VectorStats::UNIT;
        assert_abs_diff_eq!(
            scaled_logit(0.5, 1.0, 0.5, &unit, 1e-6).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        let at_zero = scaled_logit(0.0, 5.0, 0.5, &st, 1e-6).unwrap();
        assert!(at_zero.is_finite() && at_zero > st.x_min && at_zero - st.x_min < 1e-3);
        assert!(scaled_logit(1.5, 1.0, 0.5, &unit, 1e-6).is_err());
    }

    #[test]
    fn forward_examples() {
        let (d, side) = forward(&[-1.0, 0.0, 3.0], &TransformParams::identity()).unwrap();
        assert_eq!(d, vec![0.0, 0.25, 1.0]);
        assert!(!side.degenerate);
        let (d, _) = forward(&[-1.0, 0.0, 3.0], &TransformParams::kumaraswamy(1.0, 1.0)).unwrap();
        assert_eq!(d, vec![0.0, 0.25, 1.0]);
        let (d, _) = forward(&[-1.0, 1.0, 3.0], &TransformParams::kumaraswamy(2.0, 2.0)).unwrap();
        assert_eq!(d[0], 0.0);
        assert_abs_diff_eq!(d[1], 0.4375, epsilon = 1e-15);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn inverse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TransformParams::kumaraswamy(2.7, 0.6);
        for _ in 0..200 {
            let h: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (d, side) = forward(&h, &p).unwrap();
            let back = inverse(&d, &side, &p).unwrap();
            for (x, y) in back.iter().zip(&h) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let side = TransformSideInfo {
            stats: VectorStats::new(-1.0, 3.0),
            degenerate: false,
        };
        let back = inverse(&[0.0, 0.25, 1.0], &side, &TransformParams::identity()).unwrap();
        assert_eq!(back, vec![-1.0, 0.0, 3.0]);
        // off-grid quantized values stay inside the span
        let p = TransformParams::scaled_logistic(4.0, 0.5);
        let back = inverse(&[1.25, -0.05, 0.5], &side, &p).unwrap();
        assert!(back
            .iter()
            .all(|v| v.is_finite() && (-1.0..=3.0).contains(v)));
    }

    #[test]
    fn inverse_rows_requires_side_info() {
        let p = TransformParams::identity();
        assert!(matches!(
            inverse_rows(&[vec![0.5]], &[], &p),
            Err(Error::MissingSideInfo(_))
        ));
    }

    #[test]
    fn nuq_loss_examples() {
        let h = [0.3, -1.2, 2.0, 0.7, 0.01];
        assert!(nuq_loss(&h, &TransformParams::kumaraswamy(3.0, 0.5)).unwrap() <= 1e-18);
        assert_eq!(nuq_loss(&h, &TransformParams::identity()).unwrap(), 0.0);
        // A steep logistic pushes the endpoints below clamp_eps.
        let p = TransformParams::scaled_logistic(60.0, 0.5);
        assert!(nuq_loss(&h, &p).unwrap() > 0.0);
    }

    #[test]
    fn degenerate_passthrough() {
        let p = TransformParams::kumaraswamy(2.0, 3.0);
        let (d, side) = forward(&[1.5; 4], &p).unwrap();
        assert!(side.degenerate);
        assert_eq!(d, vec![0.5; 4]);
        assert_eq!(inverse(&[0.9; 4], &side, &p).unwrap(), vec![1.5; 4]);
        assert_eq!(nuq_loss(&[1.5; 4], &p).unwrap(), 0.0);
    }

    #[test]
    fn grad_params_trivial_cases() {
        let h = [0.1, 0.5, 0.9];
        let g = grad_params(&h, &[0.0; 3], &TransformParams::kumaraswamy(1.5, 2.0)).unwrap();
        assert!(g.log_a.iter().chain(&g.log_b).all(|&v| v == 0.0));
        let g = grad_params(&h, &[1.0; 3], &TransformParams::identity()).unwrap();
        assert!(g.is_empty());
    }

    fn fd_forward(h: &[f64], up: &[f64], p: &TransformParams, slot: usize, which: usize) -> f64 {
        let step = 1e-5;
        let eval = |delta: f64| {
            let mut q = p.clone();
            q.trainable_mut().unwrap()[which][slot] += delta;
            let (d, _) = forward(h, &q).unwrap();
            d.iter().zip(up).map(|(a, b)| a * b).sum::<f64>()
        };
        (eval(step) - eval(-step)) / (2.0 * step)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        // a = b = 1, symmetric input
        let h = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let up = [0.3, -0.7, 1.1, 0.2, 0.4];
        let p = TransformParams::kumaraswamy(1.0, 1.0);
        let g = grad_params(&h, &up, &p).unwrap();
        assert!(rel_err(g.log_a[0], fd_forward(&h, &up, &p, 0, 0)) < 1e-4);
        assert!(rel_err(g.log_b[0], fd_forward(&h, &up, &p, 0, 1)) < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let h: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let up: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            for p in [
                TransformParams::kumaraswamy(
                    rng.random_range(0.3..5.0),
                    rng.random_range(0.3..5.0),
                ),
                TransformParams::scaled_logistic(
                    rng.random_range(0.3..5.0),
                    rng.random_range(0.0..1.0),
                ),
            ] {
                let g = grad_params(&h, &up, &p).unwrap();
                let [g0, g1] = g.trainable(p.kind).unwrap();
                assert!(rel_err(g0[0], fd_forward(&h, &up, &p, 0, 0)) < 1e-4);
                assert!(rel_err(g1[0], fd_forward(&h, &up, &p, 0, 1)) < 1e-4);
            }
        }
    }

    #[test]
    fn inverse_and_input_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let side = TransformSideInfo {
            stats: VectorStats::new(-1.5, 2.0),
            degenerate: false,
        };
        for _ in 0..50 {
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..0.99)).collect();
            let up: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            for p in [
                TransformParams::kumaraswamy(
                    rng.random_range(0.3..5.0),
                    rng.random_range(0.3..5.0),
                ),
                TransformParams::scaled_logistic(
                    rng.random_range(0.3..5.0),
                    rng.random_range(0.0..1.0),
                ),
            ] {
                let obj = |q: &TransformParams, yy: &[f64]| -> f64 {
                    inverse(yy, &side, q)
                        .unwrap()
                        .iter()
                        .zip(&up)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let (gy, gp) = inverse_grads(&y, &side, &up, &p);
                let step = 1e-6;
                for j in 0..y.len() {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[j] += step;
                    ym[j] -= step;
                    let fd = (obj(&p, &yp) - obj(&p, &ym)) / (2.0 * step);
                    assert!(
                        rel_err(gy[j], fd) < 1e-4,
                        "{:?} dy {} vs {}",
                        p.kind,
                        gy[j],
                        fd
                    );
                }
                let [g0, g1] = gp.trainable(p.kind).unwrap();
                for (which, g) in [(0, g0[0]), (1, g1[0])] {
                    let mut qp = p.clone();
                    let mut qm = p.clone();
                    qp.trainable_mut().unwrap()[which][0] += 1e-5;
                    qm.trainable_mut().unwrap()[which][0] -= 1e-5;
                    let fd = (obj(&qp, &y) - obj(&qm, &y)) / 2e-5;
                    assert!(
                        rel_err(g, fd) < 1e-4,
                        "{:?} slot {which}: {g} vs {fd}",
                        p.kind
                    );
                }

                let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let st = vector_stats(&h).unwrap();
                let gi = grad_input(&h, &st, &up, &p);
                for j in 0..h.len() {
                    let mut hp = h.clone();
                    let mut hm = h.clone();
                    hp[j] += 1e-6;
                    hm[j] -= 1e-6;
                    let f = |v: &[f64]| -> f64 {
                        forward_with_stats(v, &st, &p)
                            .unwrap()
                            .0
                            .iter()
                            .zip(&up)
                            .map(|(a, b)| a * b)
                            .sum()
                    };
                    let fd = (f(&hp) - f(&hm)) / 2e-6;
                    let (u, _) = normalize_unit(&h, &st);
                    if u[j] > 0.0 && u[j] < 1.0 {
                        let tol = 1e-4 * gi[j].abs().max(fd.abs()).max(1e-3);
                        assert!(
                            (gi[j] - fd).abs() < tol,
                            "{:?} u={} {} vs {}",
                            p.kind,
                            u[j],
                            gi[j],
                            fd
                        );
                    } else {
                        assert_eq!(gi[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn nuq_grad_matches_finite_differences() {
        let h = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let p = TransformParams::scaled_logistic(40.0, 0.45);
        let g = nuq_grad(&h, &p).unwrap();
        for which in 0..2 {
            let mut qp = p.clone();
            let mut qm = p.clone();
            qp.trainable_mut().unwrap()[which][0] += 1e-6;
            qm.trainable_mut().unwrap()[which][0] -= 1e-6;
            let fd = (nuq_loss(&h, &qp).unwrap() - nuq_loss(&h, &qm).unwrap()) / 2e-6;
            let got = g.trainable(p.kind).unwrap()[which][0];
            assert!(rel_err(got, fd) < 1e-3, "slot {which}: {got} vs {fd}");
        }
    }

    #[test]
    fn per_dimension_params() {
        let mut p = TransformParams::per_dimension(TransformKind::Kumaraswamy, 3);
        p.log_a = vec![0.0, 1.0_f64.ln(), 2.0_f64.ln()];
        p.log_b = vec![0.0, 0.0, 2.0_f64.ln()];
        let (d, _) = forward(
            &[0.0, 0.5, 0.5, 1.0],
            &TransformParams::kumaraswamy(2.0, 2.0),
        )
        .unwrap();
        assert_abs_diff_eq!(d[1], 0.4375, epsilon = 1e-15);
        let h = [0.0, 1.0, 0.5];
        assert!(forward(&[0.0, 1.0], &p).is_err());
        let (d, _) = forward(&h, &p).unwrap();
        assert_abs_diff_eq!(d[2], 0.4375, epsilon = 1e-15);
        let g = grad_params(&h, &[1.0, 1.0, 1.0], &p).unwrap();
        assert_eq!(g.log_a.len(), 3);
        assert_eq!(g.log_a[0], 0.0);
        assert!(g.log_a[2] != 0.0);
    }

    #[test]
    fn validate_rejects_bad_eps() {
        let mut p = TransformParams::identity();
        p.clamp_eps = 0.5;
        assert!(p.validate().is_err());
        p.clamp_eps = 1e-6;
        assert!(p.validate().is_ok());
    }
}
