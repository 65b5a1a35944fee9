//! The generic variance-reduction client update and its instantiations.
//!
//! One engine performs the E local steps; algorithms differ only in the
//! statistics correction applied before each gradient, in how the gradient
//! and statistics control variates are refreshed after the steps, and in
//! which BN components stay local at adoption time. FedAvg, SCAFFOLD,
//! BN-SCAFFOLD, FedTAN, FedBN, SiloBN, and FixBN (plus the SCAFFOLD
//! combinations) all come out of the same loop.

use std::fmt;
use std::str::FromStr;

use crate::bn::{ema_update, BnStatsVec, LayerStats};
use crate::data::{BatchStream, Dataset};
use crate::error::{FlError, Result};
use crate::nn::{
    backward, forward, pre_bn_activations, sgd_step, Architecture, BnApply, Gradient,
    InjectedFlow, ModelParams,
};
use crate::tensor::Real;

/// The algorithm family members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedAvg,
    ScaffoldI,
    ScaffoldII,
    BnScaffoldI,
    BnScaffoldII,
    FedTan,
    FedBn,
    SiloBn,
    FixBn,
    FixBnScaffold,
    FedBnScaffold,
    SiloBnScaffold,
}

impl Algorithm {
    pub const ALL: [Algorithm; 12] = [
        Algorithm::FedAvg,
        Algorithm::ScaffoldI,
        Algorithm::ScaffoldII,
        Algorithm::BnScaffoldI,
        Algorithm::BnScaffoldII,
        Algorithm::FedTan,
        Algorithm::FedBn,
        Algorithm::SiloBn,
        Algorithm::FixBn,
        Algorithm::FixBnScaffold,
        Algorithm::FedBnScaffold,
        Algorithm::SiloBnScaffold,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::ScaffoldI => "scaffold-i",
            Algorithm::ScaffoldII => "scaffold-ii",
            Algorithm::BnScaffoldI => "bn-scaffold-i",
            Algorithm::BnScaffoldII => "bn-scaffold-ii",
            Algorithm::FedTan => "fedtan",
            Algorithm::FedBn => "fedbn",
            Algorithm::SiloBn => "silobn",
            Algorithm::FixBn => "fixbn",
            Algorithm::FixBnScaffold => "fixbn+scaffold",
            Algorithm::FedBnScaffold => "fedbn+scaffold",
            Algorithm::SiloBnScaffold => "silobn+scaffold",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FlError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| FlError::Config(format!("unknown algorithm '{s}'")))
    }
}

/// How a control variate is refreshed at the end of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvOption {
    /// The control variate stays identically zero.
    Unused,
    /// Full-dataset evaluation at the round-start weights.
    One,
    /// Recursion over the E local steps, no extra computation.
    Two,
}

/// Statistics correction applied before each local gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsCorrection {
    /// Use the raw mini-batch statistics.
    Identity,
    /// Linear control-variate correction with variance clipping.
    Linear,
    /// Share the P-weighted first-step statistics across clients; later
    /// steps use local statistics.
    SharedFirstStep,
}

/// Which BN components a client keeps local when adopting the broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLocality {
    /// Adopt everything from the server.
    Global,
    /// Keep the running statistics local.
    RunningStats,
    /// Keep running statistics and the BN scale/shift parameters local.
    AllBn,
}

/// Algorithm choice plus the hyper-parameters the family needs.
#[derive(Debug, Clone)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    /// BN running-statistics momentum.
    pub rho: f64,
    /// Clipping floor for corrected variances.
    pub var_threshold: f64,
    /// Iteration after which running statistics freeze; required exactly
    /// for the FixBN variants.
    pub t_star: Option<u64>,
}

impl AlgorithmSpec {
    pub fn new(
        algorithm: Algorithm,
        rho: f64,
        var_threshold: f64,
        t_star: Option<u64>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(FlError::Config(format!("rho must lie in [0,1], got {rho}")));
        }
        if var_threshold < 0.0 {
            return Err(FlError::Config("var_threshold must be non-negative".into()));
        }
        let spec = Self { algorithm, rho, var_threshold, t_star };
        if spec.freezes_running_stats() != t_star.is_some() {
            return Err(FlError::Config(format!(
                "t_star is required exactly for the FixBN variants (algorithm {})",
                algorithm
            )));
        }
        if spec.k_option() == CvOption::Two && !(rho > 0.0 && rho < 1.0) {
            return Err(FlError::Config(format!(
                "statistics recursion needs rho strictly inside (0,1), got {rho}"
            )));
        }
        Ok(spec)
    }

    pub fn c_option(&self) -> CvOption {
        match self.algorithm {
            Algorithm::FedAvg | Algorithm::FedTan | Algorithm::FedBn | Algorithm::SiloBn
            | Algorithm::FixBn => CvOption::Unused,
            Algorithm::ScaffoldI | Algorithm::BnScaffoldI => CvOption::One,
            Algorithm::ScaffoldII
            | Algorithm::BnScaffoldII
            | Algorithm::FixBnScaffold
            | Algorithm::FedBnScaffold
            | Algorithm::SiloBnScaffold => CvOption::Two,
        }
    }

    pub fn k_option(&self) -> CvOption {
        match self.algorithm {
            Algorithm::BnScaffoldI => CvOption::One,
            Algorithm::BnScaffoldII => CvOption::Two,
            _ => CvOption::Unused,
        }
    }

    pub fn stats_correction(&self) -> StatsCorrection {
        match self.algorithm {
            Algorithm::BnScaffoldI | Algorithm::BnScaffoldII => StatsCorrection::Linear,
            Algorithm::FedTan => StatsCorrection::SharedFirstStep,
            _ => StatsCorrection::Identity,
        }
    }

    pub fn locality(&self) -> BnLocality {
        match self.algorithm {
            Algorithm::FedBn | Algorithm::FedBnScaffold => BnLocality::AllBn,
            Algorithm::SiloBn | Algorithm::SiloBnScaffold => BnLocality::RunningStats,
            _ => BnLocality::Global,
        }
    }

    pub fn freezes_running_stats(&self) -> bool {
        matches!(self.algorithm, Algorithm::FixBn | Algorithm::FixBnScaffold)
    }
}

/// Gradient-shaped and statistics-shaped control variates. Algorithms that
/// do not use a component keep it identically zero.
#[derive(Debug, Clone)]
pub struct ControlVariates<F: Real> {
    pub c: Gradient<F>,
    pub k: BnStatsVec<F>,
}

impl<F: Real> ControlVariates<F> {
    pub fn zeros(arch: &Architecture, params: &ModelParams<F>) -> Self {
        Self { c: ModelParams::zeros_like(params), k: arch.zero_stats() }
    }
}

/// A client's persistent state between rounds.
#[derive(Debug, Clone)]
pub struct ClientState<F: Real> {
    pub weights: ModelParams<F>,
    pub running_stats: BnStatsVec<F>,
    pub cv: ControlVariates<F>,
    /// Seed of this client's batch stream.
    pub rng_seed: u64,
    /// Index of this client's dataset in the run's dataset table.
    pub dataset_ref: usize,
    /// Batches drawn so far; epochs continue across rounds.
    pub batch_cursor: u64,
}

/// Immutable per-client execution context.
pub struct ClientEnv<'a, F: Real> {
    pub arch: &'a Architecture,
    pub dataset: &'a Dataset<F>,
    pub batch_size: usize,
    pub epsilon: F,
}

/// Broadcast state plus round parameters handed to every client.
pub struct RoundInput<'a, F: Real> {
    pub global_weights: &'a ModelParams<F>,
    pub global_stats: &'a BnStatsVec<F>,
    pub global_cv: &'a ControlVariates<F>,
    pub spec: &'a AlgorithmSpec,
    pub local_steps: usize,
    pub lr: F,
    /// Zero-based global round index; iteration `r * E + t` drives FixBN's
    /// freeze threshold.
    pub global_step: u64,
    /// Aggregated first-step statistics, present only for the shared-stats
    /// correction.
    pub shared_first_step: Option<&'a BnStatsVec<F>>,
}

/// Everything one local step produced, for the oracles.
#[derive(Debug, Clone)]
pub struct StepTrace<F: Real> {
    /// Raw mini-batch statistics (absent in frozen-statistics steps).
    pub raw_stats: Option<BnStatsVec<F>>,
    /// Statistics actually used for normalization.
    pub used_stats: BnStatsVec<F>,
    /// The stochastic gradient applied at this step.
    pub gradient: Gradient<F>,
    /// Running statistics after this step's EMA update.
    pub running_after: BnStatsVec<F>,
    pub loss: F,
    /// Variance components held at the clipping threshold this step.
    pub clipped: usize,
}

/// Record of one client round.
#[derive(Debug, Clone)]
pub struct RoundTrace<F: Real> {
    pub steps: Vec<StepTrace<F>>,
    pub weights_start: ModelParams<F>,
    pub weights_end: ModelParams<F>,
    pub running_start: BnStatsVec<F>,
    pub running_end: BnStatsVec<F>,
    pub lr: F,
}

impl<F: Real> RoundTrace<F> {
    /// The corrected statistics of each local step, in order.
    pub fn stats_trace(&self) -> Vec<&BnStatsVec<F>> {
        self.steps.iter().map(|s| &s.used_stats).collect()
    }

    pub fn total_clipped(&self) -> usize {
        self.steps.iter().map(|s| s.clipped).sum()
    }
}

/// Result of one client round.
pub struct ClientRoundOutput<F: Real> {
    pub state: ClientState<F>,
    pub trace: RoundTrace<F>,
    /// Mean training loss over the E local steps.
    pub mean_loss: f64,
    /// Gradient evaluations performed, counted in samples.
    pub gradients_computed: u64,
}

fn adopt_weights<F: Real>(
    global: &ModelParams<F>,
    own: &ModelParams<F>,
    locality: BnLocality,
) -> Result<ModelParams<F>> {
    global.check_congruent(own)?;
    match locality {
        BnLocality::AllBn => Ok(ModelParams {
            entries: global
                .entries
                .iter()
                .zip(&own.entries)
                .map(|((name, g), (_, o))| {
                    let tensor = if crate::nn::is_bn_param(name) { o.clone() } else { g.clone() };
                    (name.clone(), tensor)
                })
                .collect(),
        }),
        _ => Ok(global.clone()),
    }
}

/// Performs exactly E local steps of the family update and refreshes the
/// control variates.
pub fn client_update<F: Real>(
    env: &ClientEnv<'_, F>,
    state: &ClientState<F>,
    input: &RoundInput<'_, F>,
    client_id: usize,
) -> Result<ClientRoundOutput<F>> {
    if input.local_steps == 0 {
        return Err(FlError::Config("local step count must be at least 1".into()));
    }
    if env.dataset.is_empty() {
        return Err(FlError::Config(format!("client {client_id} has no data")));
    }
    let spec = input.spec;
    let locality = spec.locality();

    let mut weights = adopt_weights(input.global_weights, &state.weights, locality)?;
    let mut running = match locality {
        BnLocality::Global => input.global_stats.clone(),
        _ => state.running_stats.clone(),
    };
    for layer in &running.layers {
        if layer.var.iter().any(|v| *v < F::zero()) {
            return Err(FlError::Structure(
                "running statistics variances must be non-negative at round start".into(),
            ));
        }
    }
    state.cv.c.check_congruent(&input.global_cv.c)?;
    state.cv.k.check_congruent(&input.global_cv.k)?;

    let weights_start = weights.clone();
    let running_start = running.clone();
    let rho = F::of(spec.rho);
    let var_threshold = F::of(spec.var_threshold);
    // Drift correction, formed once: equal control variates cancel exactly.
    let correction = input.global_cv.c.sub(&state.cv.c)?;

    let mut stream = BatchStream::new(env.dataset.len(), env.batch_size, state.rng_seed)?;
    stream.set_cursor(state.batch_cursor);

    let mut steps = Vec::with_capacity(input.local_steps);
    let mut loss_sum = 0.0_f64;
    let mut gradients_computed = 0u64;

    for t in 0..input.local_steps {
        let iteration = input.global_step * input.local_steps as u64 + t as u64;
        let indices = stream.next_batch();
        let batch = env.dataset.features.gather_rows(&indices)?;
        let targets: Vec<u32> = indices.iter().map(|&i| env.dataset.labels[i]).collect();

        let frozen_phase = spec.freezes_running_stats()
            && iteration >= spec.t_star.expect("validated at construction");
        let bn_mode = if frozen_phase {
            BnApply::TrainInjected { stats: &running, flow: InjectedFlow::Frozen }
        } else {
            match spec.stats_correction() {
                StatsCorrection::Identity => BnApply::Train,
                StatsCorrection::Linear => BnApply::TrainCorrected {
                    k_local: &state.cv.k,
                    k_global: &input.global_cv.k,
                    var_threshold,
                },
                StatsCorrection::SharedFirstStep => {
                    if t == 0 {
                        let shared = input.shared_first_step.ok_or_else(|| {
                            FlError::Config(
                                "shared first-step statistics missing for this round".into(),
                            )
                        })?;
                        BnApply::TrainInjected { stats: shared, flow: InjectedFlow::Frozen }
                    } else {
                        BnApply::Train
                    }
                }
            }
        };

        let pass = match forward(env.arch, &weights, &batch, bn_mode, env.epsilon) {
            Ok(pass) => pass,
            Err(FlError::NonFinite(what)) => {
                return Err(FlError::Divergence {
                    client: client_id,
                    step: t,
                    detail: format!("non-finite {what} in forward pass"),
                })
            }
            Err(e) => return Err(e),
        };
        let (grad, loss) = backward(env.arch, &weights, &pass.cache, &targets)?;
        gradients_computed += batch.rows() as u64;

        // Warmup schedules start at a zero rate: the step moves nothing,
        // but statistics still accumulate below.
        if input.lr > F::zero() {
            weights = sgd_step(&weights, &grad, &correction, input.lr)?;
        }
        if !weights.all_finite() {
            return Err(FlError::Divergence {
                client: client_id,
                step: t,
                detail: "non-finite parameter after SGD step".into(),
            });
        }

        let used = pass
            .used_stats
            .clone()
            .expect("training modes always report used statistics");
        if !frozen_phase {
            running = ema_update(&running, &used, rho)?;
        }
        loss_sum += loss.wide();
        steps.push(StepTrace {
            raw_stats: pass.raw_batch_stats,
            used_stats: used,
            gradient: grad,
            running_after: running.clone(),
            loss,
            clipped: pass.clipped_components,
        });
    }

    let trace = RoundTrace {
        steps,
        weights_start: weights_start.clone(),
        weights_end: weights.clone(),
        running_start: running_start.clone(),
        running_end: running.clone(),
        lr: input.lr,
    };

    let new_c = match spec.c_option() {
        CvOption::Unused => state.cv.c.clone(),
        CvOption::One => {
            let stats = full_dataset_stats(env.arch, &weights_start, env.dataset, env.batch_size, env.epsilon)?;
            let (grad, _, rows) = full_dataset_gradient(
                env.arch, &weights_start, env.dataset, &stats, env.batch_size, env.epsilon,
            )?;
            gradients_computed += rows;
            grad
        }
        CvOption::Two => {
            if input.lr == F::zero() {
                // A zero-rate round moves nothing; the recursion would
                // divide by zero, so the control variate is carried over.
                state.cv.c.clone()
            } else {
                update_c_option2(
                    &state.cv.c,
                    &input.global_cv.c,
                    &weights_start,
                    &weights,
                    input.local_steps,
                    input.lr,
                )?
            }
        }
    };
    let new_k = match spec.k_option() {
        CvOption::Unused => state.cv.k.clone(),
        CvOption::One => {
            full_dataset_stats(env.arch, &weights_start, env.dataset, env.batch_size, env.epsilon)?
        }
        CvOption::Two => update_k_option2(
            &state.cv.k,
            &input.global_cv.k,
            &running_start,
            &running,
            input.local_steps,
            rho,
        )?,
    };

    Ok(ClientRoundOutput {
        state: ClientState {
            weights,
            running_stats: running,
            cv: ControlVariates { c: new_c, k: new_k },
            rng_seed: state.rng_seed,
            dataset_ref: state.dataset_ref,
            batch_cursor: stream.cursor(),
        },
        trace,
        mean_loss: loss_sum / input.local_steps as f64,
        gradients_computed,
    })
}

/// Raw mini-batch statistics of the client's next scheduled batch at the
/// broadcast weights; the cursor is not advanced. This is the client half
/// of the shared-first-step statistics exchange.
pub fn first_batch_stats<F: Real>(
    env: &ClientEnv<'_, F>,
    state: &ClientState<F>,
    global_weights: &ModelParams<F>,
) -> Result<BnStatsVec<F>> {
    let mut stream = BatchStream::new(env.dataset.len(), env.batch_size, state.rng_seed)?;
    stream.set_cursor(state.batch_cursor);
    let indices = stream.peek_batch(state.batch_cursor);
    let batch = env.dataset.features.gather_rows(&indices)?;
    let pass = forward(env.arch, global_weights, &batch, BnApply::Train, env.epsilon)?;
    Ok(pass.raw_batch_stats.expect("train mode reports batch statistics"))
}

/// The gradient control-variate recursion:
/// `c_prev_local - c_prev_global + (w_start - w_end) / (E * lr)`.
pub fn update_c_option2<F: Real>(
    c_prev_local: &Gradient<F>,
    c_prev_global: &Gradient<F>,
    w_start: &ModelParams<F>,
    w_end: &ModelParams<F>,
    local_steps: usize,
    lr: F,
) -> Result<Gradient<F>> {
    if local_steps == 0 || lr <= F::zero() {
        return Err(FlError::Config(
            "gradient recursion needs E >= 1 and a positive learning rate".into(),
        ));
    }
    let scale = F::one() / (F::from_usize(local_steps).unwrap() * lr);
    c_prev_local
        .sub(c_prev_global)?
        .add_scaled(&w_start.sub(w_end)?, scale)
}

/// The statistics control-variate recursion:
/// `k_prev_local - k_prev_global + (running_end - rho^E * running_start) / (1 - rho^E)`,
/// where `running_end` is the running-statistics value after all E EMA
/// updates of the round and `running_start` the value adopted before the
/// first local step.
pub fn update_k_option2<F: Real>(
    k_prev_local: &BnStatsVec<F>,
    k_prev_global: &BnStatsVec<F>,
    running_start: &BnStatsVec<F>,
    running_end: &BnStatsVec<F>,
    local_steps: usize,
    rho: F,
) -> Result<BnStatsVec<F>> {
    if rho <= F::zero() || rho >= F::one() {
        return Err(FlError::Config(format!(
            "statistics recursion needs rho strictly inside (0,1), got {rho}"
        )));
    }
    if local_steps == 0 {
        return Err(FlError::Config("statistics recursion needs E >= 1".into()));
    }
    let rho_e = rho.powi(local_steps as i32);
    let denom = F::one() - rho_e;
    let window = running_end
        .add_scaled(running_start, -rho_e)?
        .scaled(F::one() / denom);
    k_prev_local.sub(k_prev_global)?.add(&window)
}

/// P-weighted average of the clients' first-step batch statistics.
pub fn fedtan_first_step_stats<F: Real>(
    all_client_stats: &[BnStatsVec<F>],
    weights: &[f64],
) -> Result<BnStatsVec<F>> {
    if all_client_stats.is_empty() || all_client_stats.len() != weights.len() {
        return Err(FlError::Config(format!(
            "{} statistics vectors for {} weights",
            all_client_stats.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FlError::Config(format!(
            "client weights must sum to 1, got {sum}"
        )));
    }
    let mut acc = BnStatsVec::zeros_like(&all_client_stats[0]);
    for (stats, &w) in all_client_stats.iter().zip(weights) {
        acc.axpy(stats, F::of(w))?;
    }
    Ok(acc)
}

/// Full-dataset BN statistics at the given weights, streamed in fixed-size
/// chunks with a two-pass mean/variance per BN layer. Earlier BN layers
/// normalize with their already-computed full statistics, so the result
/// matches a single whole-dataset training batch.
pub fn full_dataset_stats<F: Real>(
    arch: &Architecture,
    params: &ModelParams<F>,
    dataset: &Dataset<F>,
    chunk: usize,
    epsilon: F,
) -> Result<BnStatsVec<F>> {
    if dataset.is_empty() {
        return Err(FlError::Config("full-dataset statistics need data".into()));
    }
    let chunk = chunk.max(1);
    let n = dataset.len();
    let bn_count = arch.bn_features().len();
    let mut known: Vec<LayerStats<F>> = Vec::with_capacity(bn_count);
    for bn_idx in 0..bn_count {
        let mut sums: Vec<f64> = Vec::new();
        let mut m_total = 0usize;
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let batch = dataset.features.gather_rows(&idx)?;
            let acts = pre_bn_activations(arch, params, &batch, bn_idx, &known, epsilon)?;
            accumulate_channel_sums(&acts, &mut sums, &mut m_total, None)?;
        }
        let mean: Vec<F> = sums.iter().map(|&s| F::of(s / m_total as f64)).collect();
        let mut sq = vec![0.0_f64; mean.len()];
        let mut m2 = 0usize;
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let batch = dataset.features.gather_rows(&idx)?;
            let acts = pre_bn_activations(arch, params, &batch, bn_idx, &known, epsilon)?;
            accumulate_channel_sums(&acts, &mut sq, &mut m2, Some(&mean))?;
        }
        let var: Vec<F> = sq.iter().map(|&s| F::of(s / m_total as f64)).collect();
        known.push(LayerStats { mean, var });
    }
    Ok(BnStatsVec { layers: known })
}

/// Adds per-channel sums (or squared deviations from `center`) of a
/// pre-BN activation tensor into `acc`.
fn accumulate_channel_sums<F: Real>(
    acts: &crate::tensor::Tensor<F>,
    acc: &mut Vec<f64>,
    m_total: &mut usize,
    center: Option<&[F]>,
) -> Result<()> {
    let shape = acts.shape();
    let (batch, channels, spatial) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => {
            return Err(FlError::Shape(format!(
                "pre-BN activations must be rank 2 or 4, got {:?}",
                shape
            )))
        }
    };
    if acc.is_empty() {
        acc.resize(channels, 0.0);
    }
    let data = acts.data();
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let v = data[base + s].wide();
                match center {
                    None => acc[c] += v,
                    Some(mu) => {
                        let d = v - mu[c].wide();
                        acc[c] += d * d;
                    }
                }
            }
        }
    }
    *m_total += batch * spatial;
    Ok(())
}

/// Mean gradient over the entire dataset with the supplied statistics held
/// frozen, streamed in chunks. Returns the gradient, the mean loss, and
/// the number of per-sample gradient evaluations.
pub fn full_dataset_gradient<F: Real>(
    arch: &Architecture,
    params: &ModelParams<F>,
    dataset: &Dataset<F>,
    stats: &BnStatsVec<F>,
    chunk: usize,
    epsilon: F,
) -> Result<(Gradient<F>, f64, u64)> {
    if dataset.is_empty() {
        return Err(FlError::Config("full-dataset gradient needs data".into()));
    }
    let chunk = chunk.max(1);
    let n = dataset.len();
    let mut acc = ModelParams::zeros_like(params);
    let mut loss_sum = 0.0_f64;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let batch = dataset.features.gather_rows(&idx)?;
        let targets: Vec<u32> = idx.iter().map(|&i| dataset.labels[i]).collect();
        let pass = forward(
            arch,
            params,
            &batch,
            BnApply::TrainInjected { stats, flow: InjectedFlow::Frozen },
            epsilon,
        )?;
        let (grad, loss) = backward(arch, params, &pass.cache, &targets)?;
        let w = F::from_usize(idx.len()).unwrap();
        acc.axpy(&grad, w)?;
        loss_sum += loss.wide() * idx.len() as f64;
    }
    let inv_n = F::one() / F::from_usize(n).unwrap();
    Ok((acc.scaled(inv_n), loss_sum / n as f64, n as u64))
}

/// Option-I gradient control variate: the full-dataset gradient at the
/// round-start weights, normalized by the full-dataset statistics.
pub fn update_c_option1<F: Real>(
    arch: &Architecture,
    round_start_weights: &ModelParams<F>,
    dataset: &Dataset<F>,
    chunk: usize,
    epsilon: F,
) -> Result<Gradient<F>> {
    let stats = full_dataset_stats(arch, round_start_weights, dataset, chunk, epsilon)?;
    let (grad, _, _) =
        full_dataset_gradient(arch, round_start_weights, dataset, &stats, chunk, epsilon)?;
    Ok(grad)
}

/// Option-I statistics control variate: the full-dataset statistics at the
/// round-start weights.
pub fn update_k_option1<F: Real>(
    arch: &Architecture,
    round_start_weights: &ModelParams<F>,
    dataset: &Dataset<F>,
    chunk: usize,
    epsilon: F,
) -> Result<BnStatsVec<F>> {
    full_dataset_stats(arch, round_start_weights, dataset, chunk, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn algorithm_names_round_trip() {
        for alg in Algorithm::ALL {
            assert_eq!(alg.name().parse::<Algorithm>().unwrap(), alg);
        }
        assert!("fedsgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn spec_requires_t_star_only_for_fixbn() {
        assert!(AlgorithmSpec::new(Algorithm::FixBn, 0.9, 0.01, None).is_err());
        assert!(AlgorithmSpec::new(Algorithm::FixBn, 0.9, 0.01, Some(10)).is_ok());
        assert!(AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.01, Some(10)).is_err());
        assert!(AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.01, None).is_ok());
    }

    #[test]
    fn spec_rejects_degenerate_rho_for_recursion() {
        assert!(AlgorithmSpec::new(Algorithm::BnScaffoldII, 0.0, 0.01, None).is_err());
        assert!(AlgorithmSpec::new(Algorithm::BnScaffoldII, 1.0, 0.01, None).is_err());
        assert!(AlgorithmSpec::new(Algorithm::FedAvg, 1.0, 0.01, None).is_ok());
    }

    #[test]
    fn c_recursion_zero_motion_gives_zero() {
        let arch = Architecture::mlp(3, &[2], 2);
        let w: ModelParams<f64> = init_params(&arch, 1);
        let c = ModelParams::zeros_like(&w);
        let out = update_c_option2(&c, &c, &w, &w, 4, 0.1).unwrap();
        assert_eq!(out.norm_sq(), 0.0);
    }

    #[test]
    fn c_recursion_single_step_recovers_gradient() {
        let arch = Architecture::mlp(3, &[2], 2);
        let w: ModelParams<f64> = init_params(&arch, 2);
        let g: ModelParams<f64> = init_params(&arch, 3);
        let z = ModelParams::zeros_like(&w);
        let lr = 0.05;
        let w_end = sgd_step(&w, &g, &z, lr).unwrap();
        let c = update_c_option2(&z, &z, &w, &w_end, 1, lr).unwrap();
        assert!(c.max_abs_diff(&g) < 1e-12);
    }

    fn stats_of(vals: &[(f64, f64)]) -> BnStatsVec<f64> {
        BnStatsVec {
            layers: vals
                .iter()
                .map(|&(m, v)| LayerStats { mean: vec![m], var: vec![v] })
                .collect(),
        }
    }

    #[test]
    fn k_recursion_constant_stats_collapse() {
        // All accumulated statistics equal s*: the geometric weights sum to
        // one, so the window term collapses to s* and
        // k = k_local - k_global + s*.
        let s_star = stats_of(&[(2.0, 3.0)]);
        let k_l = stats_of(&[(0.5, 0.25)]);
        let k_g = stats_of(&[(0.25, 0.5)]);
        let rho = 0.9_f64;
        let e = 6usize;
        let mut running = stats_of(&[(0.0, 1.0)]);
        let start = running.clone();
        for _ in 0..e {
            running = ema_update(&running, &s_star, rho).unwrap();
        }
        let k = update_k_option2(&k_l, &k_g, &start, &running, e, rho).unwrap();
        let expect = k_l.sub(&k_g).unwrap().add(&s_star).unwrap();
        assert!(k.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn k_recursion_corrected_ema_recovers_raw_sum() {
        // When the running statistics accumulate corrected values
        // s* + (k_global - k_local), the recursion's control-variate shift
        // cancels the correction and recovers the raw definitional sum,
        // here exactly s*.
        let s_star = stats_of(&[(2.0, 3.0)]);
        let k_l = stats_of(&[(0.5, 0.25)]);
        let k_g = stats_of(&[(0.25, 0.5)]);
        let rho = 0.9_f64;
        let e = 6usize;
        let corrected = s_star.add(&k_g.sub(&k_l).unwrap()).unwrap();
        let mut running = stats_of(&[(0.0, 1.0)]);
        let start = running.clone();
        for _ in 0..e {
            running = ema_update(&running, &corrected, rho).unwrap();
        }
        let k = update_k_option2(&k_l, &k_g, &start, &running, e, rho).unwrap();
        assert!(k.max_abs_diff(&s_star) < 1e-12);
    }

    #[test]
    fn k_recursion_rejects_endpoint_rho() {
        let s = stats_of(&[(0.0, 1.0)]);
        assert!(update_k_option2(&s, &s, &s, &s, 3, 0.0).is_err());
        assert!(update_k_option2(&s, &s, &s, &s, 3, 1.0).is_err());
    }

    #[test]
    fn fedtan_shared_stats_weighted_mean() {
        let a = stats_of(&[(1.0, 1.0)]);
        let b = stats_of(&[(2.0, 1.0)]);
        let c = stats_of(&[(10.0, 1.0)]);
        let out = fedtan_first_step_stats(&[a, b, c], &[0.5, 0.3, 0.2]).unwrap();
        assert!((out.layers[0].mean[0] - 3.1).abs() < 1e-12);
    }

    #[test]
    fn fedtan_shared_stats_identity_for_single_client() {
        let a = stats_of(&[(1.5, 0.25)]);
        let out = fedtan_first_step_stats(&[a.clone()], &[1.0]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn fedtan_shared_stats_rejects_bad_weights() {
        let a = stats_of(&[(0.0, 1.0)]);
        assert!(fedtan_first_step_stats(&[a.clone(), a], &[0.7, 0.2]).is_err());
    }
}
