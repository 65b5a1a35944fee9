//! Minimal dense-tensor network engine with exact manual forward/backward.
//!
//! The engine supports linear, direct convolution, ReLU, 2x2 max-pooling,
//! and softmax cross-entropy; all batch-normalization statistics work is
//! delegated to [`crate::bn`]. Forward and backward are pure functions of
//! their inputs, so independent clients can run them concurrently.

pub mod ops;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

use crate::bn::{
    batch_stats, bn_backward, bn_forward, correct_stats_masked, BnCache, BnLayout, BnStatsVec,
    LayerStats, StatsMode,
};
use crate::error::{FlError, Result};
use crate::tensor::{Real, Tensor};

/// One layer of a reference architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, pad: usize },
    BatchNorm { features: usize, layout_spatial: bool },
    Relu,
    MaxPool2,
    Flatten,
}

/// A fixed layer stack with a per-sample input shape and a class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// MLP with a BN+ReLU block after every hidden linear layer.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut cur = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Linear { inputs: cur, outputs: h });
            layers.push(LayerSpec::BatchNorm { features: h, layout_spatial: false });
            layers.push(LayerSpec::Relu);
            cur = h;
        }
        layers.push(LayerSpec::Linear { inputs: cur, outputs: classes });
        Self { input_shape: vec![inputs], classes, layers }
    }

    /// Small CNN: `conv(3x3, pad 1) -> BN -> ReLU -> maxpool(2)` blocks,
    /// then a linear head. Spatial dims must be divisible by 2 per block.
    pub fn cnn(in_ch: usize, h: usize, w: usize, conv_channels: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let (mut ch, mut hh, mut ww) = (in_ch, h, w);
        for &oc in conv_channels {
            layers.push(LayerSpec::Conv { in_ch: ch, out_ch: oc, kernel: 3, pad: 1 });
            layers.push(LayerSpec::BatchNorm { features: oc, layout_spatial: true });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2);
            ch = oc;
            hh /= 2;
            ww /= 2;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear { inputs: ch * hh * ww, outputs: classes });
        Self { input_shape: vec![in_ch, h, w], classes, layers }
    }

    /// Feature counts of the BN layers in architecture order.
    pub fn bn_features(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { features, .. } => Some(*features),
                _ => None,
            })
            .collect()
    }

    /// Total trainable parameter count, `|W|` in communication accounting.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Linear { inputs, outputs } => inputs * outputs + outputs,
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    out_ch * in_ch * kernel * kernel + out_ch
                }
                LayerSpec::BatchNorm { features, .. } => 2 * features,
                _ => 0,
            })
            .sum()
    }

    /// Total statistics count, `|S|`: a mean and a variance per BN feature.
    pub fn stats_count(&self) -> usize {
        self.bn_features().iter().map(|f| 2 * f).sum()
    }

    /// Depth used by per-layer communication accounting: the number of
    /// weight-bearing feature layers (linear and convolutional).
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Linear { .. } | LayerSpec::Conv { .. }))
            .count()
    }

    /// Fresh running statistics: zero mean, unit variance per BN layer.
    pub fn initial_stats<F: Real>(&self) -> BnStatsVec<F> {
        BnStatsVec::unit(&self.bn_features())
    }

    pub fn zero_stats<F: Real>(&self) -> BnStatsVec<F> {
        BnStatsVec::zeros(&self.bn_features())
    }
}

/// Ordered, named parameter tensors of one architecture. The same structure
/// carries gradients and gradient control variates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub entries: Vec<(String, Tensor<F>)>,
}

/// Gradients share the parameter structure exactly.
pub type Gradient<F> = ModelParams<F>;

impl<F: Real> ModelParams<F> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros_like(t)))
                .collect(),
        }
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(FlError::Structure(format!(
                "parameter tensor counts differ: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(FlError::Structure(format!(
                    "parameter names differ: {} vs {}",
                    na, nb
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(FlError::Structure(format!(
                    "parameter {} shapes differ: {:?} vs {:?}",
                    na,
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn add_scaled(&self, other: &Self, scale: F) -> Result<Self> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.add_scaled(b, scale)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, F::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, -F::one())
    }

    pub fn scaled(&self, scale: F) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.scaled(scale)))
                .collect(),
        }
    }

    pub fn axpy(&mut self, other: &Self, scale: F) -> Result<()> {
        self.check_congruent(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(b, scale)?;
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.norm_sq()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn bit_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(&x, &y)| x == y || (x.is_nan() && y.is_nan()))
            })
    }
}

/// Uniform "fan-in" initialization: every weight and bias of a linear or
/// convolutional layer is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
/// BN scale starts at one and shift at zero.
pub fn init_params<F: Real>(arch: &Architecture, seed: u64) -> ModelParams<F> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (idx, layer) in arch.layers.iter().enumerate() {
        match layer {
            LayerSpec::Linear { inputs, outputs } => {
                let bound = F::of(1.0 / (*inputs as f64).sqrt());
                entries.push((
                    format!("l{idx}.weight"),
                    sample_tensor(&mut rng, vec![*outputs, *inputs], bound),
                ));
                entries.push((
                    format!("l{idx}.bias"),
                    sample_tensor(&mut rng, vec![*outputs], bound),
                ));
            }
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                let fan_in = in_ch * kernel * kernel;
                let bound = F::of(1.0 / (fan_in as f64).sqrt());
                entries.push((
                    format!("l{idx}.weight"),
                    sample_tensor(&mut rng, vec![*out_ch, *in_ch, *kernel, *kernel], bound),
                ));
                entries.push((
                    format!("l{idx}.bias"),
                    sample_tensor(&mut rng, vec![*out_ch], bound),
                ));
            }
            LayerSpec::BatchNorm { features, .. } => {
                entries.push((format!("l{idx}.alpha"), Tensor::filled(vec![*features], F::one())));
                entries.push((format!("l{idx}.beta"), Tensor::zeros(vec![*features])));
            }
            _ => {}
        }
    }
    ModelParams { entries }
}

fn sample_tensor<F: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: F) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::sample_uniform(rng, -bound, bound))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Names of the BN parameter tensors (`alpha`/`beta`), used by the local-BN
/// aggregation rules.
pub fn is_bn_param(name: &str) -> bool {
    name.ends_with(".alpha") || name.ends_with(".beta")
}

/// How BN layers resolve their normalization statistics during a forward
/// pass.
#[derive(Debug, Clone, Copy)]
pub enum BnApply<'a, F: Real> {
    /// Normalize with the empirical statistics of this batch.
    Train,
    /// Normalize with running statistics, held constant.
    Eval { running: &'a BnStatsVec<F> },
    /// Normalize with linearly corrected batch statistics
    /// (`batch - k_local + k_global`, variance clipped); gradients still
    /// flow through the batch statistics.
    TrainCorrected {
        k_local: &'a BnStatsVec<F>,
        k_global: &'a BnStatsVec<F>,
        var_threshold: F,
    },
    /// Normalize with the supplied statistics verbatim.
    TrainInjected {
        stats: &'a BnStatsVec<F>,
        flow: InjectedFlow,
    },
}

/// Gradient semantics of injected statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFlow {
    /// Injected statistics are constants (evaluation, frozen running
    /// statistics, full-dataset statistics).
    Frozen,
    /// Injected statistics stand in for batch statistics shifted by a
    /// constant; gradients flow through the batch statistics. Used to
    /// replay corrected-statistics steps exactly.
    ThroughBatch,
}

impl<F: Real> BnApply<'_, F> {
    fn computes_batch_stats(&self) -> bool {
        matches!(
            self,
            BnApply::Train
                | BnApply::TrainCorrected { .. }
                | BnApply::TrainInjected { flow: InjectedFlow::ThroughBatch, .. }
        )
    }
}

#[derive(Debug, Clone)]
enum LayerCache<F: Real> {
    Linear { input: Tensor<F> },
    Conv { input: Tensor<F> },
    Bn(BnCache<F>),
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
}

/// Activations recorded by [`forward`] for the matching [`backward`] call.
#[derive(Debug, Clone)]
pub struct ActivationsCache<F: Real> {
    layers: Vec<LayerCache<F>>,
    logits: Tensor<F>,
    batch_rows: usize,
    arch_fingerprint: usize,
}

impl<F: Real> ActivationsCache<F> {
    pub fn logits(&self) -> &Tensor<F> {
        &self.logits
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<F: Real> {
    pub logits: Tensor<F>,
    pub cache: ActivationsCache<F>,
    /// Raw empirical batch statistics per BN layer; present whenever the
    /// mode computes them, empty in eval / frozen-injected modes.
    pub raw_batch_stats: Option<BnStatsVec<F>>,
    /// Statistics actually used for normalization; equal to the raw ones in
    /// plain train mode, the corrected ones in corrected mode, empty in
    /// eval mode.
    pub used_stats: Option<BnStatsVec<F>>,
    /// Number of variance components held at the clipping threshold.
    pub clipped_components: usize,
}

/// Runs the batch through the architecture.
pub fn forward<F: Real>(
    arch: &Architecture,
    params: &ModelParams<F>,
    batch: &Tensor<F>,
    bn: BnApply<'_, F>,
    epsilon: F,
) -> Result<ForwardPass<F>> {
    let mut expect_shape = vec![batch.rows()];
    expect_shape.extend_from_slice(&arch.input_shape);
    if batch.shape() != expect_shape.as_slice() {
        return Err(FlError::Shape(format!(
            "batch shape {:?} does not match architecture input {:?}",
            batch.shape(),
            expect_shape
        )));
    }
    if bn.computes_batch_stats() && batch.rows() < 2 {
        return Err(FlError::DegenerateBatch(format!(
            "training forward needs a batch of >= 2 samples, got {}",
            batch.rows()
        )));
    }

    let mut cur = batch.clone();
    let mut caches = Vec::with_capacity(arch.layers.len());
    let mut raw_stats: Vec<LayerStats<F>> = Vec::new();
    let mut used_stats: Vec<LayerStats<F>> = Vec::new();
    let mut clipped = 0usize;
    let mut param_idx = 0usize;
    let mut bn_idx = 0usize;

    for layer in &arch.layers {
        match layer {
            LayerSpec::Linear { .. } => {
                let weight = &params.entries[param_idx].1;
                let bias = &params.entries[param_idx + 1].1;
                param_idx += 2;
                let out = ops::linear_forward(&cur, weight, bias)?;
                caches.push(LayerCache::Linear { input: cur });
                cur = out;
            }
            LayerSpec::Conv { pad, .. } => {
                let weight = &params.entries[param_idx].1;
                let bias = &params.entries[param_idx + 1].1;
                param_idx += 2;
                let out = ops::conv_forward(&cur, weight, bias, *pad)?;
                caches.push(LayerCache::Conv { input: cur });
                cur = out;
            }
            LayerSpec::BatchNorm { layout_spatial, .. } => {
                let alpha = params.entries[param_idx].1.data();
                let beta = params.entries[param_idx + 1].1.data();
                param_idx += 2;
                let layout = if *layout_spatial { BnLayout::Spatial } else { BnLayout::Dense };
                let (out, cache) = apply_bn(
                    &cur, layout, &bn, bn_idx, alpha, beta, epsilon, &mut raw_stats,
                    &mut used_stats, &mut clipped,
                )?;
                caches.push(LayerCache::Bn(cache));
                cur = out;
                bn_idx += 1;
            }
            LayerSpec::Relu => {
                let (out, mask) = ops::relu_forward(&cur);
                caches.push(LayerCache::Relu { mask });
                cur = out;
            }
            LayerSpec::MaxPool2 => {
                let in_shape = cur.shape().to_vec();
                let (out, argmax) = ops::maxpool2_forward(&cur)?;
                caches.push(LayerCache::MaxPool { argmax, in_shape });
                cur = out;
            }
            LayerSpec::Flatten => {
                let in_shape = cur.shape().to_vec();
                let n = in_shape[0];
                let rest: usize = in_shape[1..].iter().product();
                cur = cur.reshaped(vec![n, rest])?;
                caches.push(LayerCache::Flatten { in_shape });
            }
        }
    }
    if !cur.all_finite() {
        return Err(FlError::NonFinite("logits".into()));
    }

    let computes = bn.computes_batch_stats();
    let logits = cur.clone();
    Ok(ForwardPass {
        cache: ActivationsCache {
            layers: caches,
            logits: cur,
            batch_rows: batch.rows(),
            arch_fingerprint: params.entries.len(),
        },
        logits,
        raw_batch_stats: computes.then(|| BnStatsVec { layers: raw_stats }),
        used_stats: (!matches!(bn, BnApply::Eval { .. }))
            .then(|| BnStatsVec { layers: used_stats }),
        clipped_components: clipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_bn<F: Real>(
    cur: &Tensor<F>,
    layout: BnLayout,
    bn: &BnApply<'_, F>,
    bn_idx: usize,
    alpha: &[F],
    beta: &[F],
    epsilon: F,
    raw_stats: &mut Vec<LayerStats<F>>,
    used_stats: &mut Vec<LayerStats<F>>,
    clipped: &mut usize,
) -> Result<(Tensor<F>, BnCache<F>)> {
    match bn {
        BnApply::Train => {
            let raw = batch_stats(cur, layout)?;
            let (out, cache) = bn_forward(
                cur, layout, &raw, None, None, alpha, beta, epsilon, StatsMode::BatchStats,
            )?;
            raw_stats.push(raw.clone());
            used_stats.push(raw);
            Ok((out, cache))
        }
        BnApply::Eval { running } => {
            let stats = running.layers.get(bn_idx).ok_or_else(|| {
                FlError::Structure(format!("running statistics missing BN layer {}", bn_idx))
            })?;
            bn_forward(cur, layout, stats, None, None, alpha, beta, epsilon, StatsMode::Frozen)
        }
        BnApply::TrainCorrected { k_local, k_global, var_threshold } => {
            let raw = batch_stats(cur, layout)?;
            let raw_vec = BnStatsVec { layers: vec![raw.clone()] };
            let kl = BnStatsVec { layers: vec![k_local.layers[bn_idx].clone()] };
            let kg = BnStatsVec { layers: vec![k_global.layers[bn_idx].clone()] };
            let (corrected, masks) = correct_stats_masked(&raw_vec, &kl, &kg, *var_threshold)?;
            let stats = corrected.layers.into_iter().next().unwrap();
            let mask = masks.into_iter().next().unwrap();
            *clipped += mask.iter().filter(|&&c| c).count();
            let (out, cache) = bn_forward(
                cur,
                layout,
                &stats,
                Some(&raw.mean),
                Some(&mask),
                alpha,
                beta,
                epsilon,
                StatsMode::BatchStats,
            )?;
            raw_stats.push(raw);
            used_stats.push(stats);
            Ok((out, cache))
        }
        BnApply::TrainInjected { stats, flow } => {
            let layer_stats = stats.layers.get(bn_idx).ok_or_else(|| {
                FlError::Structure(format!("injected statistics missing BN layer {}", bn_idx))
            })?;
            match flow {
                InjectedFlow::Frozen => {
                    used_stats.push(layer_stats.clone());
                    bn_forward(
                        cur, layout, layer_stats, None, None, alpha, beta, epsilon,
                        StatsMode::Frozen,
                    )
                }
                InjectedFlow::ThroughBatch => {
                    let raw = batch_stats(cur, layout)?;
                    let (out, cache) = bn_forward(
                        cur,
                        layout,
                        layer_stats,
                        Some(&raw.mean),
                        None,
                        alpha,
                        beta,
                        epsilon,
                        StatsMode::BatchStats,
                    )?;
                    raw_stats.push(raw);
                    used_stats.push(layer_stats.clone());
                    Ok((out, cache))
                }
            }
        }
    }
}

/// Exact gradient of the mean cross-entropy over the batch with respect to
/// every parameter, propagating through batch statistics according to the
/// forward mode that produced the cache.
pub fn backward<F: Real>(
    arch: &Architecture,
    params: &ModelParams<F>,
    cache: &ActivationsCache<F>,
    targets: &[u32],
) -> Result<(Gradient<F>, F)> {
    if cache.arch_fingerprint != params.entries.len() || cache.layers.len() != arch.layers.len() {
        return Err(FlError::Structure(
            "activations cache does not match this model".into(),
        ));
    }
    if targets.len() != cache.batch_rows {
        return Err(FlError::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            cache.batch_rows
        )));
    }
    let (loss, mut upstream) = ops::cross_entropy(&cache.logits, targets)?;

    let mut grads: Vec<(String, Tensor<F>)> = params
        .entries
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros_like(t)))
        .collect();

    // Parameter cursor positioned one past the last parameter tensor.
    let mut param_idx = params.entries.len();
    for (layer, lcache) in arch.layers.iter().zip(&cache.layers).rev() {
        match (layer, lcache) {
            (LayerSpec::Linear { .. }, LayerCache::Linear { input }) => {
                param_idx -= 2;
                let weight = &params.entries[param_idx].1;
                let (gin, gw, gb) = ops::linear_backward(input, weight, &upstream)?;
                grads[param_idx].1 = gw;
                grads[param_idx + 1].1 = gb;
                upstream = gin;
            }
            (LayerSpec::Conv { pad, .. }, LayerCache::Conv { input }) => {
                param_idx -= 2;
                let weight = &params.entries[param_idx].1;
                let (gin, gw, gb) = ops::conv_backward(input, weight, &upstream, *pad)?;
                grads[param_idx].1 = gw;
                grads[param_idx + 1].1 = gb;
                upstream = gin;
            }
            (LayerSpec::BatchNorm { features, .. }, LayerCache::Bn(bn_cache)) => {
                param_idx -= 2;
                let alpha = params.entries[param_idx].1.data();
                let (gin, ga, gb) = bn_backward(&upstream, bn_cache, alpha)?;
                grads[param_idx].1 = Tensor::new(vec![*features], ga)?;
                grads[param_idx + 1].1 = Tensor::new(vec![*features], gb)?;
                upstream = gin;
            }
            (LayerSpec::Relu, LayerCache::Relu { mask }) => {
                upstream = ops::relu_backward(&upstream, mask);
            }
            (LayerSpec::MaxPool2, LayerCache::MaxPool { argmax, in_shape }) => {
                upstream = ops::maxpool2_backward(&upstream, argmax, in_shape);
            }
            (LayerSpec::Flatten, LayerCache::Flatten { in_shape }) => {
                upstream = upstream.reshaped(in_shape.clone())?;
            }
            _ => {
                return Err(FlError::Structure(
                    "cache layer kind does not match architecture".into(),
                ))
            }
        }
    }
    Ok((ModelParams { entries: grads }, loss))
}

/// One SGD step: `w - lr * (grad + correction)`.
///
/// The correction is the caller-supplied control-variate difference; an
/// all-zero correction yields plain SGD and perturbs nothing, bit for bit.
pub fn sgd_step<F: Real>(
    model: &ModelParams<F>,
    grad: &Gradient<F>,
    correction: &Gradient<F>,
    lr: F,
) -> Result<ModelParams<F>> {
    if lr <= F::zero() {
        return Err(FlError::Config(format!(
            "learning rate must be positive, got {}",
            lr
        )));
    }
    model.check_congruent(grad)?;
    model.check_congruent(correction)?;
    let entries = model
        .entries
        .iter()
        .zip(&grad.entries)
        .zip(&correction.entries)
        .map(|(((name, w), (_, g)), (_, c))| {
            let data = w
                .data()
                .iter()
                .zip(g.data())
                .zip(c.data())
                .map(|((&w, &g), &c)| w - lr * (g + c))
                .collect();
            Ok((name.clone(), Tensor::new(w.shape().to_vec(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { entries })
}

/// Pre-BN activations of BN layer `target_bn` for a batch, normalizing all
/// earlier BN layers with the supplied statistics held frozen. Used by the
/// streamed full-dataset statistics computation.
pub fn pre_bn_activations<F: Real>(
    arch: &Architecture,
    params: &ModelParams<F>,
    batch: &Tensor<F>,
    target_bn: usize,
    known_stats: &[LayerStats<F>],
    epsilon: F,
) -> Result<Tensor<F>> {
    let mut cur = batch.clone();
    let mut param_idx = 0usize;
    let mut bn_idx = 0usize;
    for layer in &arch.layers {
        match layer {
            LayerSpec::Linear { .. } => {
                let out = ops::linear_forward(&cur, &params.entries[param_idx].1, &params.entries[param_idx + 1].1)?;
                param_idx += 2;
                cur = out;
            }
            LayerSpec::Conv { pad, .. } => {
                let out = ops::conv_forward(&cur, &params.entries[param_idx].1, &params.entries[param_idx + 1].1, *pad)?;
                param_idx += 2;
                cur = out;
            }
            LayerSpec::BatchNorm { layout_spatial, .. } => {
                if bn_idx == target_bn {
                    return Ok(cur);
                }
                let stats = known_stats.get(bn_idx).ok_or_else(|| {
                    FlError::Structure(format!(
                        "streamed statistics need BN layer {} before {}",
                        bn_idx, target_bn
                    ))
                })?;
                let alpha = params.entries[param_idx].1.data();
                let beta = params.entries[param_idx + 1].1.data();
                param_idx += 2;
                let layout = if *layout_spatial { BnLayout::Spatial } else { BnLayout::Dense };
                let (out, _) = bn_forward(
                    &cur, layout, stats, None, None, alpha, beta, epsilon, StatsMode::Frozen,
                )?;
                cur = out;
                bn_idx += 1;
            }
            LayerSpec::Relu => {
                cur = ops::relu_forward(&cur).0;
            }
            LayerSpec::MaxPool2 => {
                cur = ops::maxpool2_forward(&cur)?.0;
            }
            LayerSpec::Flatten => {
                let n = cur.shape()[0];
                let rest: usize = cur.shape()[1..].iter().product();
                cur = cur.reshaped(vec![n, rest])?;
            }
        }
    }
    Err(FlError::Structure(format!(
        "architecture has no BN layer {}",
        target_bn
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shapes_and_counts() {
        let arch = Architecture::mlp(784, &[64, 64], 10);
        assert_eq!(arch.bn_features(), vec![64, 64]);
        assert_eq!(arch.stats_count(), 256);
        assert_eq!(
            arch.param_count(),
            784 * 64 + 64 + 2 * 64 + 64 * 64 + 64 + 2 * 64 + 64 * 10 + 10
        );
        assert_eq!(arch.depth(), 3);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = Architecture::mlp(6, &[4], 3);
        let a: ModelParams<f64> = init_params(&arch, 42);
        let b: ModelParams<f64> = init_params(&arch, 42);
        assert!(a.bit_equal(&b));
        let c: ModelParams<f64> = init_params(&arch, 43);
        assert!(!a.bit_equal(&c));
    }

    #[test]
    fn forward_rejects_bad_batch_shape() {
        let arch = Architecture::mlp(6, &[4], 3);
        let params: ModelParams<f64> = init_params(&arch, 1);
        let batch = Tensor::zeros(vec![4, 5]);
        assert!(forward(&arch, &params, &batch, BnApply::Train, 1e-5).is_err());
    }

    #[test]
    fn forward_rejects_single_sample_training() {
        let arch = Architecture::mlp(6, &[4], 3);
        let params: ModelParams<f64> = init_params(&arch, 1);
        let batch = Tensor::zeros(vec![1, 6]);
        assert!(matches!(
            forward(&arch, &params, &batch, BnApply::Train, 1e-5),
            Err(FlError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn constant_batch_bn_output_is_beta() {
        // With a constant batch every BN layer sees zero variance and emits
        // its shift parameter; betas are zero at init, so after ReLU the
        // hidden activations vanish and logits equal the head bias.
        let arch = Architecture::mlp(6, &[4], 3);
        let params: ModelParams<f64> = init_params(&arch, 7);
        let batch = Tensor::filled(vec![3, 6], 0.37);
        let pass = forward(&arch, &params, &batch, BnApply::Train, 1e-5).unwrap();
        let head_bias = &params.entries.last().unwrap().1;
        for r in 0..3 {
            for c in 0..3 {
                assert!((pass.logits.data()[r * 3 + c] - head_bias.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_final_layer_bias_gradient_is_softmax_minus_onehot() {
        let arch = Architecture {
            input_shape: vec![2],
            classes: 2,
            layers: vec![LayerSpec::Linear { inputs: 2, outputs: 2 }],
        };
        let params = ModelParams::<f64> {
            entries: vec![
                ("l0.weight".into(), Tensor::zeros(vec![2, 2])),
                ("l0.bias".into(), Tensor::zeros(vec![2])),
            ],
        };
        let batch = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let pass = forward(&arch, &params, &batch, BnApply::Train, 1e-5).unwrap();
        let (grad, _) = backward(&arch, &params, &pass.cache, &[0, 0]).unwrap();
        // softmax(0) = 0.5; mean over batch of (0.5 - onehot).
        let gb = &grad.entries[1].1;
        assert!((gb.data()[0] + 0.5).abs() < 1e-12);
        assert!((gb.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicating_batch_preserves_mean_gradient() {
        let arch = Architecture::mlp(5, &[4], 3);
        let params: ModelParams<f64> = init_params(&arch, 3);
        let mut vals = Vec::new();
        let mut x = 0.9_f64;
        for _ in 0..20 {
            x = (x * 53.7 + 0.11).sin();
            vals.push(x);
        }
        let batch = Tensor::new(vec![4, 5], vals.clone()).unwrap();
        let mut doubled = vals.clone();
        doubled.extend_from_slice(&vals);
        let batch2 = Tensor::new(vec![8, 5], doubled).unwrap();

        let p1 = forward(&arch, &params, &batch, BnApply::Train, 1e-5).unwrap();
        let (g1, l1) = backward(&arch, &params, &p1.cache, &[0, 1, 2, 0]).unwrap();
        let p2 = forward(&arch, &params, &batch2, BnApply::Train, 1e-5).unwrap();
        let (g2, l2) = backward(&arch, &params, &p2.cache, &[0, 1, 2, 0, 0, 1, 2, 0]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn sgd_step_hand_value() {
        let w = ModelParams::<f64> {
            entries: vec![("w".into(), Tensor::new(vec![1], vec![1.0]).unwrap())],
        };
        let g = ModelParams::<f64> {
            entries: vec![("w".into(), Tensor::new(vec![1], vec![0.5]).unwrap())],
        };
        let c = ModelParams::<f64> {
            entries: vec![("w".into(), Tensor::new(vec![1], vec![0.1]).unwrap())],
        };
        let out = sgd_step(&w, &g, &c, 0.2).unwrap();
        assert!((out.entries[0].1.data()[0] - 0.88).abs() < 1e-15);
    }

    #[test]
    fn sgd_cancellation_leaves_model_unchanged() {
        let arch = Architecture::mlp(3, &[2], 2);
        let w: ModelParams<f64> = init_params(&arch, 11);
        let g: ModelParams<f64> = init_params(&arch, 12);
        let c = g.scaled(-1.0);
        let out = sgd_step(&w, &g, &c, 0.7).unwrap();
        assert!(out.max_abs_diff(&w) < 1e-15);
    }

    #[test]
    fn sgd_rejects_incongruent_inputs() {
        let arch_a = Architecture::mlp(3, &[2], 2);
        let arch_b = Architecture::mlp(3, &[3], 2);
        let w: ModelParams<f64> = init_params(&arch_a, 1);
        let g: ModelParams<f64> = init_params(&arch_b, 1);
        let z = ModelParams::zeros_like(&w);
        assert!(sgd_step(&w, &g, &z, 0.1).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = Architecture::cnn(1, 4, 4, &[2], 3);
        let params: ModelParams<f64> = init_params(&arch, 5);
        let mut vals = Vec::new();
        let mut x = 0.1_f64;
        for _ in 0..2 * 16 {
            x = (x * 31.0 + 0.7).sin();
            vals.push(x);
        }
        let batch = Tensor::new(vec![2, 1, 4, 4], vals).unwrap();
        let a = forward(&arch, &params, &batch, BnApply::Train, 1e-5).unwrap();
        let b = forward(&arch, &params, &batch, BnApply::Train, 1e-5).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }
}
