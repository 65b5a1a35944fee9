//! Batch-normalization statistics machinery.
//!
//! Everything that touches BN statistics lives here: empirical batch
//! statistics, the running-statistics EMA, the linear statistics correction
//! with variance clipping, and the BN forward/backward kernels consumed by
//! the network engine.

use crate::error::{FlError, Result};
use crate::tensor::{Real, Tensor};

/// Convention for the running-statistics EMA.
///
/// `RunningOnRho` computes `rho * running + (1 - rho) * incoming`. The
/// alternative `IncomingOnRho` flips the two weights. A single constant
/// selects the convention so the other one is one edit away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaConvention {
    RunningOnRho,
    IncomingOnRho,
}

/// Active EMA convention: the momentum weighs the running value.
pub const EMA_CONVENTION: EmaConvention = EmaConvention::RunningOnRho;

/// Per-BN-layer mean/variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats<F: Real> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> LayerStats<F> {
    pub fn zeros(features: usize) -> Self {
        Self {
            mean: vec![F::zero(); features],
            var: vec![F::zero(); features],
        }
    }

    /// BN initialization: zero mean, unit variance.
    pub fn unit(features: usize) -> Self {
        Self {
            mean: vec![F::zero(); features],
            var: vec![F::one(); features],
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }
}

/// Ordered per-BN-layer statistics for one architecture.
///
/// One shape is shared by mini-batch, full-dataset, running, corrected
/// statistics, and statistics control variates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStatsVec<F: Real> {
    pub layers: Vec<LayerStats<F>>,
}

impl<F: Real> BnStatsVec<F> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| LayerStats::zeros(l.features()))
                .collect(),
        }
    }

    pub fn zeros(features_per_layer: &[usize]) -> Self {
        Self {
            layers: features_per_layer
                .iter()
                .map(|&f| LayerStats::zeros(f))
                .collect(),
        }
    }

    /// Zero mean / unit variance for every layer: the fresh-model state.
    pub fn unit(features_per_layer: &[usize]) -> Self {
        Self {
            layers: features_per_layer
                .iter()
                .map(|&f| LayerStats::unit(f))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of scalar statistics (means plus variances), the
    /// quantity written `|S|` in communication accounting.
    pub fn value_count(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.features()).sum()
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(FlError::Structure(format!(
                "statistics layer counts differ: {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.features() != b.features() {
                return Err(FlError::Structure(format!(
                    "statistics layer {} features differ: {} vs {}",
                    i,
                    a.features(),
                    b.features()
                )));
            }
        }
        Ok(())
    }

    /// Element-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: F) -> Result<Self> {
        self.check_congruent(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| LayerStats {
                mean: a
                    .mean
                    .iter()
                    .zip(&b.mean)
                    .map(|(&x, &y)| x + scale * y)
                    .collect(),
                var: a
                    .var
                    .iter()
                    .zip(&b.var)
                    .map(|(&x, &y)| x + scale * y)
                    .collect(),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, F::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, -F::one())
    }

    pub fn scaled(&self, scale: F) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerStats {
                    mean: l.mean.iter().map(|&x| x * scale).collect(),
                    var: l.var.iter().map(|&x| x * scale).collect(),
                })
                .collect(),
        }
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, other: &Self, scale: F) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.mean.iter_mut().zip(&b.mean) {
                *x += scale * y;
            }
            for (x, &y) in a.var.iter_mut().zip(&b.var) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// Largest absolute element-wise difference, in wide precision.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut worst = 0.0_f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (&x, &y) in a.mean.iter().zip(&b.mean) {
                worst = worst.max((x.wide() - y.wide()).abs());
            }
            for (&x, &y) in a.var.iter().zip(&b.var) {
                worst = worst.max((x.wide() - y.wide()).abs());
            }
        }
        worst
    }

    /// Squared Euclidean norm over all entries, in wide precision.
    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.mean.iter().map(|v| v.wide() * v.wide()).sum::<f64>()
                    + l.var.iter().map(|v| v.wide() * v.wide()).sum::<f64>()
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.mean.iter().all(|v| v.is_finite()) && l.var.iter().all(|v| v.is_finite()))
    }
}

/// Data layout of a pre-BN activation tensor.
#[derive(Debug, Clone, Copy)]
pub enum BnLayout {
    /// `[batch, features]`: statistics per feature over the batch.
    Dense,
    /// `[batch, channels, h, w]`: statistics per channel over batch and space.
    Spatial,
}

fn channel_geometry<F: Real>(input: &Tensor<F>, layout: BnLayout) -> Result<(usize, usize, usize)> {
    let shape = input.shape();
    match layout {
        BnLayout::Dense => {
            if shape.len() != 2 {
                return Err(FlError::Shape(format!(
                    "dense BN expects [batch, features], got {:?}",
                    shape
                )));
            }
            Ok((shape[0], shape[1], 1))
        }
        BnLayout::Spatial => {
            if shape.len() != 4 {
                return Err(FlError::Shape(format!(
                    "spatial BN expects [batch, ch, h, w], got {:?}",
                    shape
                )));
            }
            Ok((shape[0], shape[1], shape[2] * shape[3]))
        }
    }
}

/// Empirical per-channel mean and biased (1/m) variance of a batch.
///
/// `m` counts batch rows times spatial positions. Fails on batches with
/// fewer than two rows, where the variance carries no signal.
pub fn batch_stats<F: Real>(input: &Tensor<F>, layout: BnLayout) -> Result<LayerStats<F>> {
    let (batch, channels, spatial) = channel_geometry(input, layout)?;
    if batch < 2 {
        return Err(FlError::DegenerateBatch(format!(
            "batch statistics need >= 2 rows, got {}",
            batch
        )));
    }
    let m = F::from_usize(batch * spatial).unwrap();
    let data = input.data();
    let mut mean = vec![F::zero(); channels];
    let mut var = vec![F::zero(); channels];
    // Two-pass: exact mean first, then centered second moment.
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                mean[c] += data[base + s];
            }
        }
    }
    for v in mean.iter_mut() {
        *v = *v / m;
    }
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let d = data[base + s] - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v = *v / m;
    }
    Ok(LayerStats { mean, var })
}

/// One EMA step of the running statistics under [`EMA_CONVENTION`].
pub fn ema_update<F: Real>(
    running: &BnStatsVec<F>,
    incoming: &BnStatsVec<F>,
    rho: F,
) -> Result<BnStatsVec<F>> {
    if rho < F::zero() || rho > F::one() {
        return Err(FlError::Config(format!(
            "EMA momentum must lie in [0,1], got {}",
            rho
        )));
    }
    let (w_running, w_incoming) = match EMA_CONVENTION {
        EmaConvention::RunningOnRho => (rho, F::one() - rho),
        EmaConvention::IncomingOnRho => (F::one() - rho, rho),
    };
    running.scaled(w_running).add_scaled(incoming, w_incoming)
}

/// Linear statistics correction with variance clipping.
///
/// Returns `batch - k_local + k_global` with every variance component
/// replaced by `max(var_threshold, .)`. Means are never clipped. The
/// correction delta `k_global - k_local` is computed first so that equal
/// control variates cancel exactly, bit for bit.
pub fn correct_stats<F: Real>(
    batch: &BnStatsVec<F>,
    k_local: &BnStatsVec<F>,
    k_global: &BnStatsVec<F>,
    var_threshold: F,
) -> Result<BnStatsVec<F>> {
    let (stats, _) = correct_stats_masked(batch, k_local, k_global, var_threshold)?;
    Ok(stats)
}

/// As [`correct_stats`], also returning per-layer masks of the variance
/// components that were clipped (needed by the BN backward pass, where a
/// clipped variance stops the gradient flowing through it).
pub fn correct_stats_masked<F: Real>(
    batch: &BnStatsVec<F>,
    k_local: &BnStatsVec<F>,
    k_global: &BnStatsVec<F>,
    var_threshold: F,
) -> Result<(BnStatsVec<F>, Vec<Vec<bool>>)> {
    batch.check_congruent(k_local)?;
    batch.check_congruent(k_global)?;
    let delta = k_global.sub(k_local)?;
    let mut corrected = batch.add(&delta)?;
    let mut masks = Vec::with_capacity(corrected.layers.len());
    for layer in corrected.layers.iter_mut() {
        let mut mask = vec![false; layer.var.len()];
        for (j, v) in layer.var.iter_mut().enumerate() {
            if *v < var_threshold {
                *v = var_threshold;
                mask[j] = true;
            }
        }
        masks.push(mask);
    }
    Ok((corrected, masks))
}

/// How gradients treat the normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Statistics are functions of the batch: full three-term backward.
    BatchStats,
    /// Statistics are constants: affine chain rule only.
    Frozen,
}

/// Cache produced by [`bn_forward`], consumed by [`bn_backward`].
#[derive(Debug, Clone)]
pub struct BnCache<F: Real> {
    layout: BnLayout,
    mode: StatsMode,
    /// Normalized values `(y - mean_used) / sqrt(var_used + eps)`.
    normalized: Tensor<F>,
    /// Batch-centered values `(y - mean_batch) / sqrt(var_used + eps)`;
    /// equal to `normalized` when the used statistics are the batch ones.
    batch_centered: Tensor<F>,
    /// `1 / sqrt(var_used + eps)` per channel.
    inv_std: Vec<F>,
    /// Channels whose variance was clipped; their variance path is dead.
    var_clipped: Vec<bool>,
}

/// BN transform `alpha * (y - mean) / sqrt(var + eps) + beta`, broadcast
/// per channel.
///
/// `stats` are the statistics to normalize with; `batch_mean` supplies the
/// raw batch means when they differ from `stats.mean` (corrected-statistics
/// training), so the backward pass can center by the batch. `var_clipped`
/// marks variance components held at the clipping threshold.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward<F: Real>(
    input: &Tensor<F>,
    layout: BnLayout,
    stats: &LayerStats<F>,
    batch_mean: Option<&[F]>,
    var_clipped: Option<&[bool]>,
    alpha: &[F],
    beta: &[F],
    epsilon: F,
    mode: StatsMode,
) -> Result<(Tensor<F>, BnCache<F>)> {
    let (batch, channels, spatial) = channel_geometry(input, layout)?;
    if stats.features() != channels || alpha.len() != channels || beta.len() != channels {
        return Err(FlError::Structure(format!(
            "BN channel mismatch: input has {}, stats {}, alpha {}, beta {}",
            channels,
            stats.features(),
            alpha.len(),
            beta.len()
        )));
    }
    if epsilon <= F::zero() {
        return Err(FlError::Config("BN epsilon must be positive".into()));
    }
    let inv_std: Vec<F> = stats
        .var
        .iter()
        .map(|&v| F::one() / (v + epsilon).sqrt())
        .collect();

    let data = input.data();
    let mut normalized = vec![F::zero(); data.len()];
    let mut batch_centered = vec![F::zero(); data.len()];
    let mut out = vec![F::zero(); data.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            let mu = stats.mean[c];
            let mu_batch = batch_mean.map(|bm| bm[c]).unwrap_or(mu);
            for s in 0..spatial {
                let y = data[base + s];
                let u = (y - mu) * inv_std[c];
                normalized[base + s] = u;
                batch_centered[base + s] = (y - mu_batch) * inv_std[c];
                out[base + s] = alpha[c] * u + beta[c];
            }
        }
    }
    let shape = input.shape().to_vec();
    let cache = BnCache {
        layout,
        mode,
        normalized: Tensor::new(shape.clone(), normalized)?,
        batch_centered: Tensor::new(shape.clone(), batch_centered)?,
        inv_std,
        var_clipped: var_clipped
            .map(|m| m.to_vec())
            .unwrap_or_else(|| vec![false; channels]),
    };
    Ok((Tensor::new(shape, out)?, cache))
}

/// BN backward pass.
///
/// In `BatchStats` mode the mean and variance are treated as functions of
/// the batch (the full three-term backward); clipped variance channels drop
/// the variance term. In `Frozen` mode the statistics are constants.
pub fn bn_backward<F: Real>(
    upstream: &Tensor<F>,
    cache: &BnCache<F>,
    alpha: &[F],
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let (batch, channels, spatial) = channel_geometry(upstream, cache.layout)?;
    if cache.normalized.shape() != upstream.shape() {
        return Err(FlError::Structure(format!(
            "BN backward cache shape {:?} does not match upstream {:?}",
            cache.normalized.shape(),
            upstream.shape()
        )));
    }
    let m = F::from_usize(batch * spatial).unwrap();
    let up = upstream.data();
    let u = cache.normalized.data();
    let v = cache.batch_centered.data();

    let mut grad_alpha = vec![F::zero(); channels];
    let mut grad_beta = vec![F::zero(); channels];
    let mut sum_up = vec![F::zero(); channels];
    let mut sum_up_u = vec![F::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let g = up[base + s];
                grad_beta[c] += g;
                grad_alpha[c] += g * u[base + s];
                sum_up[c] += g;
                sum_up_u[c] += g * u[base + s];
            }
        }
    }

    let mut grad_in = vec![F::zero(); up.len()];
    match cache.mode {
        StatsMode::Frozen => {
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * spatial;
                    let a = alpha[c] * cache.inv_std[c];
                    for s in 0..spatial {
                        grad_in[base + s] = a * up[base + s];
                    }
                }
            }
        }
        StatsMode::BatchStats => {
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * spatial;
                    let a = alpha[c] * cache.inv_std[c];
                    let mean_up = sum_up[c] / m;
                    let mean_up_u = sum_up_u[c] / m;
                    let var_alive = !cache.var_clipped[c];
                    for s in 0..spatial {
                        let mut g = up[base + s] - mean_up;
                        if var_alive {
                            g = g - v[base + s] * mean_up_u;
                        }
                        grad_in[base + s] = a * g;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(upstream.shape().to_vec(), grad_in)?,
        grad_alpha,
        grad_beta,
    ))
}
