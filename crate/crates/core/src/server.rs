//! Server-side round loop: broadcast, client updates, P-weighted
//! aggregation of weights, running statistics, and both control-variate
//! families, plus learning-rate scheduling and communication/gradient
//! accounting.

use std::fmt;

use crate::bn::BnStatsVec;
use crate::data::Dataset;
use crate::error::{FlError, Result};
use crate::fl::{
    client_update, fedtan_first_step_stats, first_batch_stats, Algorithm, AlgorithmSpec,
    BnLocality, ClientEnv, ClientRoundOutput, ClientState, ControlVariates, CvOption, RoundInput,
    RoundTrace, StatsCorrection,
};
use crate::nn::{forward, Architecture, BnApply, ModelParams};
use crate::nn::ops::cross_entropy;
use crate::tensor::Real;

/// Exact rational, used for per-local-step communication-round rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num.max(1), den);
        Self { num: num / g, den: den / g }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_integer(&self) -> bool {
        self.den == 1
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}", self.as_f64())
        }
    }
}

/// Learning-rate schedule: a piecewise-constant decay multiplied by a
/// linear warmup ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub factor: f64,
    pub milestones: Vec<u64>,
    pub warmup_iters: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    /// Decay by `factor` every `milestones[0]` iterations.
    Step,
    /// Decay by `factor` at each listed iteration.
    Multistep,
}

impl Schedule {
    pub fn constant(base_lr: f64) -> Self {
        Self { kind: ScheduleKind::Constant, base_lr, factor: 1.0, milestones: Vec::new(), warmup_iters: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(FlError::Config("base learning rate must be positive".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(FlError::Config(format!(
                "schedule factor must lie in (0,1], got {}",
                self.factor
            )));
        }
        match self.kind {
            ScheduleKind::Constant => {}
            ScheduleKind::Step => {
                if self.milestones.len() != 1 || self.milestones[0] == 0 {
                    return Err(FlError::Config(
                        "step schedule needs exactly one positive period".into(),
                    ));
                }
            }
            ScheduleKind::Multistep => {
                if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
                    return Err(FlError::Config(
                        "multistep milestones must be strictly increasing".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Scheduled rate at a cumulative local-iteration index.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let decayed = match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Step => {
                let period = self.milestones[0];
                self.base_lr * self.factor.powi((iteration / period) as i32)
            }
            ScheduleKind::Multistep => {
                let passed = self.milestones.iter().filter(|&&m| m <= iteration).count();
                self.base_lr * self.factor.powi(passed as i32)
            }
        };
        let ramp = if self.warmup_iters == 0 {
            1.0
        } else {
            (iteration as f64 / self.warmup_iters as f64).min(1.0)
        };
        decayed * ramp
    }
}

/// Global model, statistics, control variates, and cumulative counters.
#[derive(Debug, Clone)]
pub struct ServerState<F: Real> {
    pub global_weights: ModelParams<F>,
    pub global_stats: BnStatsVec<F>,
    pub global_cv: ControlVariates<F>,
    pub round: u64,
    pub comm_rounds: u64,
    pub comm_params: u64,
    pub gradients_computed: u64,
}

impl<F: Real> ServerState<F> {
    pub fn new(arch: &Architecture, weights: ModelParams<F>) -> Self {
        let cv = ControlVariates::zeros(arch, &weights);
        Self {
            global_weights: weights,
            global_stats: arch.initial_stats(),
            global_cv: cv,
            round: 0,
            comm_rounds: 0,
            comm_params: 0,
            gradients_computed: 0,
        }
    }
}

/// Per-round metrics and cumulative accounting.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: u64,
    /// Cumulative local iterations after this round.
    pub iteration: u64,
    pub client_losses: Vec<f64>,
    pub eval_accuracy: f64,
    pub eval_loss: f64,
    pub lr: f64,
    pub comm_rounds: Ratio,
    pub comm_params: u64,
    pub gradients_computed: u64,
}

/// Per-global-step one-direction payload size in parameter-count units.
pub fn payload_params(spec: &AlgorithmSpec, w_count: u64, s_count: u64) -> u64 {
    match spec.algorithm {
        Algorithm::FedAvg | Algorithm::FedBn | Algorithm::SiloBn | Algorithm::FixBn => {
            w_count + s_count
        }
        Algorithm::ScaffoldI
        | Algorithm::ScaffoldII
        | Algorithm::FixBnScaffold
        | Algorithm::FedBnScaffold
        | Algorithm::SiloBnScaffold => 2 * w_count + s_count,
        Algorithm::BnScaffoldI | Algorithm::BnScaffoldII => 2 * w_count + 2 * s_count,
        Algorithm::FedTan => 2 * w_count + 4 * s_count,
    }
}

/// Communication rounds per global step: one down-link plus one up-link per
/// client, plus the per-layer statistics waves of the shared-statistics
/// protocol.
pub fn rounds_per_global_step(spec: &AlgorithmSpec, n_clients: u64, depth: u64) -> u64 {
    match spec.algorithm {
        Algorithm::FedTan => (2 + 6 * depth) * n_clients,
        _ => 2 * n_clients,
    }
}

/// Closed-form cumulative communication accounting after
/// `local_steps_elapsed` local iterations: exact rational rounds and the
/// integer parameter total of all completed global steps.
#[allow(clippy::too_many_arguments)]
pub fn account_communication(
    spec: &AlgorithmSpec,
    n_clients: u64,
    local_steps: u64,
    w_count: u64,
    s_count: u64,
    depth: u64,
    local_steps_elapsed: u64,
) -> Result<(Ratio, u64)> {
    if n_clients == 0 || local_steps == 0 || w_count == 0 {
        return Err(FlError::Config("accounting needs positive counts".into()));
    }
    let per_step = rounds_per_global_step(spec, n_clients, depth);
    let rounds = Ratio::new(per_step * local_steps_elapsed, local_steps);
    let global_steps = local_steps_elapsed / local_steps;
    let params = payload_params(spec, w_count, s_count) * global_steps;
    Ok((rounds, params))
}

/// Gradients computed per local step across all clients, as an exact
/// rational: `N * |B|`, plus `|D| / E` for the option-I algorithms.
pub fn account_gradients(
    spec: &AlgorithmSpec,
    n_clients: u64,
    batch_size: u64,
    dataset_size: u64,
    local_steps: u64,
) -> Result<Ratio> {
    if n_clients == 0 || batch_size == 0 || local_steps == 0 {
        return Err(FlError::Config("accounting needs positive counts".into()));
    }
    let full_dataset = match spec.c_option() {
        CvOption::One => dataset_size,
        _ => 0,
    };
    Ok(Ratio::new(
        n_clients * batch_size * local_steps + full_dataset,
        local_steps,
    ))
}

/// Eval-mode forward over a test set: top-1 accuracy and mean loss.
pub fn evaluate<F: Real>(
    arch: &Architecture,
    weights: &ModelParams<F>,
    running_stats: &BnStatsVec<F>,
    test: &Dataset<F>,
    chunk: usize,
    epsilon: F,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(FlError::Config("evaluation needs a non-empty test set".into()));
    }
    if !running_stats.all_finite() {
        return Err(FlError::Structure("running statistics must be finite for evaluation".into()));
    }
    let chunk = chunk.max(1);
    let n = test.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0_f64;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let batch = test.features.gather_rows(&idx)?;
        let targets: Vec<u32> = idx.iter().map(|&i| test.labels[i]).collect();
        let pass = forward(
            arch,
            weights,
            &batch,
            BnApply::Eval { running: running_stats },
            epsilon,
        )?;
        let (loss, _) = cross_entropy(&pass.logits, &targets)?;
        loss_sum += loss.wide() * idx.len() as f64;
        let classes = arch.classes;
        for (r, &t) in targets.iter().enumerate() {
            let row = &pass.logits.data()[r * classes..(r + 1) * classes];
            let mut arg = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = c;
                }
            }
            if arg == t as usize {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// An experiment's immutable wiring: architecture, client datasets and
/// weights, algorithm, and round parameters.
pub struct Federation<F: Real> {
    pub arch: Architecture,
    pub spec: AlgorithmSpec,
    pub datasets: Vec<Dataset<F>>,
    /// A-priori client weights, summing to one.
    pub client_weights: Vec<f64>,
    pub local_steps: usize,
    pub batch_size: usize,
    pub epsilon: F,
    pub schedule: Schedule,
}

/// Outcome of one orchestrated round.
pub struct RoundOutcome<F: Real> {
    pub server: ServerState<F>,
    pub clients: Vec<ClientState<F>>,
    pub report: RoundReport,
    /// Per-client traces of the round, for the oracles.
    pub traces: Vec<RoundTrace<F>>,
}

impl<F: Real> Federation<F> {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(FlError::Config("federation needs at least one client".into()));
        }
        if self.datasets.len() != self.client_weights.len() {
            return Err(FlError::Config(format!(
                "{} datasets vs {} client weights",
                self.datasets.len(),
                self.client_weights.len()
            )));
        }
        let sum: f64 = self.client_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FlError::Config(format!(
                "client weights must sum to 1 within 1e-9, got {sum}"
            )));
        }
        if self.local_steps == 0 || self.batch_size == 0 {
            return Err(FlError::Config("local steps and batch size must be positive".into()));
        }
        self.schedule.validate()
    }

    /// Fresh client states sharing the server's initial weights. Batch
    /// seeds default to distinct per-client streams derived from the base
    /// seed; tests that need synchronized schedules can overwrite them.
    pub fn init_clients(&self, server: &ServerState<F>, base_seed: u64) -> Vec<ClientState<F>> {
        (0..self.datasets.len())
            .map(|i| ClientState {
                weights: server.global_weights.clone(),
                running_stats: server.global_stats.clone(),
                cv: ControlVariates::zeros(&self.arch, &server.global_weights),
                rng_seed: base_seed ^ ((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                dataset_ref: i,
                batch_cursor: 0,
            })
            .collect()
    }

    /// Learning rate of a round: the schedule sampled at the round's first
    /// iteration and held constant across its E local steps, which keeps
    /// the control-variate recursions exact.
    pub fn round_lr(&self, round: u64) -> f64 {
        self.schedule.lr_at(round * self.local_steps as u64)
    }

    /// One full global step: broadcast, parallel client updates, and
    /// P-weighted aggregation of all four state families.
    pub fn run_round(
        &self,
        server: &ServerState<F>,
        clients: &[ClientState<F>],
        eval_set: Option<&Dataset<F>>,
    ) -> Result<RoundOutcome<F>> {
        self.validate()?;
        if clients.len() != self.datasets.len() {
            return Err(FlError::Config(format!(
                "{} client states for {} datasets",
                clients.len(),
                self.datasets.len()
            )));
        }
        let round = server.round;
        let lr = F::of(self.round_lr(round));

        // Shared-first-step statistics exchange, when the algorithm uses it.
        let shared = if self.spec.stats_correction() == StatsCorrection::SharedFirstStep {
            let per_client: Vec<BnStatsVec<F>> = clients
                .iter()
                .map(|state| {
                    let env = self.client_env(state.dataset_ref);
                    first_batch_stats(&env, state, &server.global_weights)
                })
                .collect::<Result<_>>()?;
            Some(fedtan_first_step_stats(&per_client, &self.client_weights)?)
        } else {
            None
        };

        let input = RoundInput {
            global_weights: &server.global_weights,
            global_stats: &server.global_stats,
            global_cv: &server.global_cv,
            spec: &self.spec,
            local_steps: self.local_steps,
            lr,
            global_step: round,
            shared_first_step: shared.as_ref(),
        };

        let mut outputs: Vec<ClientRoundOutput<F>> = Vec::with_capacity(clients.len());
        for (id, state) in clients.iter().enumerate() {
            let env = self.client_env(state.dataset_ref);
            outputs.push(client_update(&env, state, &input, id)?);
        }

        // Aggregation in fixed client order.
        let mut agg_w = ModelParams::zeros_like(&server.global_weights);
        let mut agg_s = BnStatsVec::zeros_like(&server.global_stats);
        let mut agg_c = ModelParams::zeros_like(&server.global_cv.c);
        let mut agg_k = BnStatsVec::zeros_like(&server.global_cv.k);
        for (out, &p) in outputs.iter().zip(&self.client_weights) {
            let p = F::of(p);
            agg_w.axpy(&out.state.weights, p)?;
            agg_s.axpy(&out.state.running_stats, p)?;
            agg_c.axpy(&out.state.cv.c, p)?;
            agg_k.axpy(&out.state.cv.k, p)?;
        }

        let gradients_this_round: u64 = outputs.iter().map(|o| o.gradients_computed).sum();
        let mut server_next = ServerState {
            global_weights: agg_w,
            global_stats: agg_s,
            global_cv: ControlVariates { c: agg_c, k: agg_k },
            round: round + 1,
            comm_rounds: server.comm_rounds
                + rounds_per_global_step(&self.spec, clients.len() as u64, self.arch.depth() as u64),
            comm_params: server.comm_params
                + payload_params(
                    &self.spec,
                    self.arch.param_count() as u64,
                    self.arch.stats_count() as u64,
                ),
            gradients_computed: server.gradients_computed + gradients_this_round,
        };
        if !server_next.global_weights.all_finite() {
            return Err(FlError::Structure("aggregated weights are not finite".into()));
        }

        let (eval_accuracy, eval_loss) = match eval_set {
            Some(test) => evaluate(
                &self.arch,
                &server_next.global_weights,
                &server_next.global_stats,
                test,
                self.batch_size.max(64),
                self.epsilon,
            )?,
            None => (f64::NAN, f64::NAN),
        };

        // FedBN aggregates running statistics of clients that never adopt
        // them; keep the server copy finite regardless.
        if !server_next.global_stats.all_finite() {
            return Err(FlError::Structure("aggregated statistics are not finite".into()));
        }

        let report = RoundReport {
            round,
            iteration: (round + 1) * self.local_steps as u64,
            client_losses: outputs.iter().map(|o| o.mean_loss).collect(),
            eval_accuracy,
            eval_loss,
            lr: lr.wide(),
            comm_rounds: Ratio::new(server_next.comm_rounds, 1),
            comm_params: server_next.comm_params,
            gradients_computed: server_next.gradients_computed,
        };
        server_next.round = round + 1;

        Ok(RoundOutcome {
            server: server_next,
            clients: outputs.iter().map(|o| o.state.clone()).collect(),
            report,
            traces: outputs.into_iter().map(|o| o.trace).collect(),
        })
    }

    fn client_env(&self, dataset_ref: usize) -> ClientEnv<'_, F> {
        ClientEnv {
            arch: &self.arch,
            dataset: &self.datasets[dataset_ref],
            batch_size: self.batch_size,
            epsilon: self.epsilon,
        }
    }
}

/// True when the algorithm's locality rule keeps this parameter family on
/// the client; exposed for the locality tests.
pub fn keeps_local(spec: &AlgorithmSpec) -> (bool, bool) {
    match spec.locality() {
        BnLocality::Global => (false, false),
        BnLocality::RunningStats => (true, false),
        BnLocality::AllBn => (true, true),
    }
}
