//! Independent brute-force oracles.
//!
//! These certify the control-variate recursions and the engine's gradients
//! before any experiment is trusted: gradients against central finite
//! differences, the gradient recursion against the definitional mean of
//! replayed local gradients, the statistics recursion against the
//! definitional geometric-weighted sum of raw batch statistics, and the
//! homogeneous-collapse property of the corrected algorithms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::bn::BnStatsVec;
use crate::data::{gen_synthetic, client_weights, Dataset};
use crate::error::{FlError, Result};
use crate::fl::{
    update_c_option2, update_k_option2, Algorithm, AlgorithmSpec, ClientEnv, ClientState,
    ControlVariates, RoundInput, RoundTrace,
};
use crate::nn::{
    backward, forward, init_params, sgd_step, Architecture, BnApply, Gradient, InjectedFlow,
    ModelParams,
};
use crate::nn::ops::cross_entropy;
use crate::server::{Federation, Schedule, ServerState};
use crate::tensor::{Real, Tensor};
use crate::data::BatchStream;

/// Outcome of one oracle check.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub check: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Inputs of the worst case, sufficient to reproduce the check.
    pub witness: String,
}

impl OracleReport {
    pub fn new(check: impl Into<String>, max_error: f64, tolerance: f64, witness: String) -> Self {
        let finite = max_error.is_finite();
        Self {
            check: check.into(),
            max_error,
            tolerance,
            pass: finite && max_error <= tolerance,
            witness,
        }
    }

    /// One line of structured text: `oracle=<name> pass=... max_err=...`.
    pub fn line(&self) -> String {
        format!(
            "oracle={} pass={} max_err={:.3e} tol={:.3e} witness=\"{}\"",
            self.check, self.pass, self.max_error, self.tolerance, self.witness
        )
    }
}

/// Replays the E local steps of a recorded round, recomputing each
/// gradient with the recorded statistics injected. Frozen steps (no raw
/// statistics in the trace) replay frozen; all others flow through the
/// batch statistics, which reproduces the original gradients exactly as
/// long as no variance component was clipped.
pub fn replay_round_gradients<F: Real>(
    env: &ClientEnv<'_, F>,
    state: &ClientState<F>,
    input: &RoundInput<'_, F>,
    trace: &RoundTrace<F>,
) -> Result<Vec<Gradient<F>>> {
    if trace.total_clipped() > 0 {
        return Err(FlError::Structure(
            "cannot replay a round with clipped variances exactly".into(),
        ));
    }
    let mut stream = BatchStream::new(env.dataset.len(), env.batch_size, state.rng_seed)?;
    stream.set_cursor(state.batch_cursor);
    let correction = input.global_cv.c.sub(&state.cv.c)?;
    let mut weights = trace.weights_start.clone();
    let mut grads = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let indices = stream.next_batch();
        let batch = env.dataset.features.gather_rows(&indices)?;
        let targets: Vec<u32> = indices.iter().map(|&i| env.dataset.labels[i]).collect();
        let flow = if step.raw_stats.is_some() {
            InjectedFlow::ThroughBatch
        } else {
            InjectedFlow::Frozen
        };
        let pass = forward(
            env.arch,
            &weights,
            &batch,
            BnApply::TrainInjected { stats: &step.used_stats, flow },
            env.epsilon,
        )?;
        let (grad, _) = backward(env.arch, &weights, &pass.cache, &targets)?;
        weights = sgd_step(&weights, &grad, &correction, input.lr)?;
        grads.push(grad);
    }
    if weights.max_abs_diff(&trace.weights_end) > 0.0 {
        return Err(FlError::Structure(
            "replayed trajectory does not reproduce the recorded end weights".into(),
        ));
    }
    Ok(grads)
}

/// Certifies the gradient control-variate recursion on a recorded round:
/// the recursion output must equal the definitional mean `(1/E) sum g_t`
/// of the replayed local gradients.
pub fn check_c_recursion<F: Real>(
    env: &ClientEnv<'_, F>,
    state: &ClientState<F>,
    input: &RoundInput<'_, F>,
    trace: &RoundTrace<F>,
    tolerance: f64,
) -> Result<OracleReport> {
    if trace.steps.len() != input.local_steps {
        return Err(FlError::Structure(format!(
            "trace holds {} steps for E = {}",
            trace.steps.len(),
            input.local_steps
        )));
    }
    let grads = replay_round_gradients(env, state, input, trace)?;
    let mut mean = ModelParams::zeros_like(&trace.weights_start);
    for g in &grads {
        mean.axpy(g, F::one())?;
    }
    let mean = mean.scaled(F::one() / F::from_usize(grads.len()).unwrap());
    let recursion = update_c_option2(
        &state.cv.c,
        &input.global_cv.c,
        &trace.weights_start,
        &trace.weights_end,
        input.local_steps,
        input.lr,
    )?;
    let err = recursion.max_abs_diff(&mean);
    Ok(OracleReport::new(
        "c-recursion",
        err,
        tolerance,
        format!("E={} lr={}", input.local_steps, input.lr),
    ))
}

/// Which running-statistics window satisfied the statistics recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KWindow {
    /// Running value after all E EMA updates, paired with the value
    /// adopted before the first local step.
    AfterStepE,
    /// Running value after only E-1 updates.
    AfterStepEMinus1,
}

/// Certifies the statistics control-variate recursion on a recorded round
/// against the definitional geometric-weighted sum of the raw batch
/// statistics, and reports which running-statistics indexing satisfies the
/// definition.
pub fn check_k_recursion<F: Real>(
    state: &ClientState<F>,
    input: &RoundInput<'_, F>,
    trace: &RoundTrace<F>,
    tolerance: f64,
) -> Result<(OracleReport, KWindow)> {
    let e = input.local_steps;
    if trace.steps.len() != e {
        return Err(FlError::Structure(format!(
            "trace holds {} steps for E = {}",
            trace.steps.len(),
            e
        )));
    }
    if trace.total_clipped() > 0 {
        return Err(FlError::Structure(
            "statistics recursion is only exact on clip-free rounds".into(),
        ));
    }
    let rho = F::of(input.spec.rho);
    // Definitional sum over the raw batch statistics.
    let mut definition = BnStatsVec::zeros_like(&trace.running_start);
    for (t, step) in trace.steps.iter().enumerate() {
        let raw = step.raw_stats.as_ref().ok_or_else(|| {
            FlError::Structure("statistics recursion needs raw batch statistics per step".into())
        })?;
        let weight = rho.powi((e - 1 - t) as i32);
        definition.axpy(raw, weight)?;
    }
    let rho_e = rho.powi(e as i32);
    definition = definition.scaled((F::one() - rho) / (F::one() - rho_e));

    let candidate = |running_end: &BnStatsVec<F>| -> Result<f64> {
        let k = update_k_option2(
            &state.cv.k,
            &input.global_cv.k,
            &trace.running_start,
            running_end,
            e,
            rho,
        )?;
        Ok(k.max_abs_diff(&definition))
    };
    let err_after_e = candidate(&trace.running_end)?;
    let err_after_e_minus_1 = if e >= 2 {
        candidate(&trace.steps[e - 2].running_after)?
    } else {
        f64::INFINITY
    };
    let (window, err) = if err_after_e <= err_after_e_minus_1 {
        (KWindow::AfterStepE, err_after_e)
    } else {
        (KWindow::AfterStepEMinus1, err_after_e_minus_1)
    };
    let report = OracleReport::new(
        "k-recursion",
        err,
        tolerance,
        format!(
            "E={} rho={} window={:?} err_after_E={:.3e} err_after_E-1={:.3e}",
            e, input.spec.rho, window, err_after_e, err_after_e_minus_1
        ),
    );
    Ok((report, window))
}

/// Central finite differences on the mean cross-entropy, over every
/// parameter coordinate or a seeded subset of `max_coords` per tensor for
/// the large ones. Wide precision only.
pub fn check_gradients(
    arch: &Architecture,
    params: &ModelParams<f64>,
    batch: &Tensor<f64>,
    targets: &[u32],
    h: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<OracleReport> {
    let pass = forward(arch, params, batch, BnApply::Train, 1e-5)?;
    let (analytic, _) = backward(arch, params, &pass.cache, targets)?;

    let loss_at = |p: &ModelParams<f64>| -> Result<f64> {
        let pass = forward(arch, p, batch, BnApply::Train, 1e-5)?;
        let (loss, _) = cross_entropy(pass.logits(), targets)?;
        Ok(loss)
    };
    // A private accessor is enough here; logits live in the cache.
    trait Logits {
        fn logits(&self) -> &Tensor<f64>;
    }
    impl Logits for crate::nn::ForwardPass<f64> {
        fn logits(&self) -> &Tensor<f64> {
            &self.logits
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut witness = String::from("all coordinates within tolerance");
    for (ti, (name, tensor)) in params.entries.iter().enumerate() {
        let count = tensor.len();
        let coords: Vec<usize> = if count <= max_coords {
            (0..count).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..count)).collect()
        };
        for &ci in &coords {
            let mut plus = params.clone();
            plus.entries[ti].1.data_mut()[ci] += h;
            let mut minus = params.clone();
            minus.entries[ti].1.data_mut()[ci] -= h;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let a = analytic.entries[ti].1.data()[ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > worst {
                worst = err;
                witness = format!(
                    "tensor={} coord={} analytic={:.6e} numeric={:.6e} seed={}",
                    name, ci, a, numeric, seed
                );
            }
        }
    }
    Ok(OracleReport::new("gradient-check", worst, tolerance, witness))
}

/// Configuration of the homogeneous-collapse check.
#[derive(Debug, Clone)]
pub struct CollapseConfig {
    pub clients: usize,
    pub local_steps: usize,
    pub rounds: u64,
    pub seed: u64,
    /// Permute one client's batch order; the collapse must then fail.
    pub desynchronize_one: bool,
}

/// With identical client datasets and synchronized batch schedules, the
/// corrected algorithm's control variates must collapse onto the global
/// ones (`||c_i - c||`, `||k_i - k||` below tolerance from round 2 on) and
/// its weight trajectory must match FedAvg's bit for bit.
pub fn check_homogeneous_collapse(config: &CollapseConfig, tolerance: f64) -> Result<OracleReport> {
    let arch = Architecture::mlp(8, &[6], 3);
    let dataset: Dataset<f64> = gen_synthetic(3, 16, 8, 0.4, config.seed)?;
    let datasets: Vec<Dataset<f64>> = (0..config.clients).map(|_| dataset.clone()).collect();
    let weights = client_weights(&datasets);
    let schedule = Schedule::constant(0.1);

    let make_fed = |alg: Algorithm| -> Result<Federation<f64>> {
        Ok(Federation {
            arch: arch.clone(),
            spec: AlgorithmSpec::new(alg, 0.9, 0.0, None)?,
            datasets: datasets.clone(),
            client_weights: weights.clone(),
            local_steps: config.local_steps,
            batch_size: 8,
            epsilon: 1e-5,
            schedule: schedule.clone(),
        })
    };
    let fed_avg = make_fed(Algorithm::FedAvg)?;
    let fed_bns = make_fed(Algorithm::BnScaffoldII)?;

    let init = init_params::<f64>(&arch, config.seed ^ 0xabcd);
    let mut server_a = ServerState::new(&arch, init.clone());
    let mut server_b = ServerState::new(&arch, init);
    // Synchronized batch schedules: every client draws the same batches.
    let sync_clients = |fed: &Federation<f64>, server: &ServerState<f64>| {
        let mut clients = fed.init_clients(server, config.seed);
        for c in clients.iter_mut() {
            c.rng_seed = config.seed;
        }
        if config.desynchronize_one {
            clients[0].rng_seed = config.seed ^ 0x5555;
        }
        clients
    };
    let mut clients_a = sync_clients(&fed_avg, &server_a);
    let mut clients_b = sync_clients(&fed_bns, &server_b);

    let mut worst = 0.0_f64;
    let mut bit_identical = true;
    let mut detail = String::from("all rounds collapsed");
    for round in 0..config.rounds {
        let out_a = fed_avg.run_round(&server_a, &clients_a, None)?;
        let out_b = fed_bns.run_round(&server_b, &clients_b, None)?;
        server_a = out_a.server;
        clients_a = out_a.clients;
        server_b = out_b.server;
        clients_b = out_b.clients;
        if round >= 1 {
            // Control variates must agree with their aggregate.
            for (i, client) in clients_b.iter().enumerate() {
                let dc = client.cv.c.max_abs_diff(&server_b.global_cv.c);
                let dk = client.cv.k.max_abs_diff(&server_b.global_cv.k);
                let d = dc.max(dk);
                if d > worst {
                    worst = d;
                    detail = format!("round={round} client={i} dc={dc:.3e} dk={dk:.3e}");
                }
            }
            // And the corrected trajectory must match the uncorrected one.
            let d = server_b.global_weights.max_abs_diff(&server_a.global_weights);
            if !server_b.global_weights.bit_equal(&server_a.global_weights) {
                bit_identical = false;
            }
            if d > worst {
                worst = d;
                detail = format!("round={round} trajectories diverge by {d:.3e}");
            }
        }
    }
    let witness = format!(
        "clients={} E={} rounds={} seed={} bit_identical={} {}",
        config.clients, config.local_steps, config.rounds, config.seed, bit_identical, detail
    );
    Ok(OracleReport::new("homogeneous-collapse", worst, tolerance, witness))
}

/// Drives a few rounds of one client under the given algorithm and hands
/// each round to a visitor together with the inputs that produced it.
/// Shared scaffolding for the recursion oracles and their tests.
pub fn drive_recursion_rounds<F: Real, V>(
    algorithm: Algorithm,
    rho: f64,
    local_steps: usize,
    rounds: u64,
    seed: u64,
    mut visit: V,
) -> Result<()>
where
    V: FnMut(
        &ClientEnv<'_, F>,
        &ClientState<F>,
        &RoundInput<'_, F>,
        &RoundTrace<F>,
    ) -> Result<()>,
{
    let arch = Architecture::mlp(6, &[5, 4], 3);
    let dataset: Dataset<F> = gen_synthetic::<F>(3, 20, 6, 0.5, seed)?;
    let spec = AlgorithmSpec::new(algorithm, rho, 0.0, None)?;
    let lr = F::of(0.05);
    let init = init_params::<F>(&arch, seed ^ 0x77);
    let mut server = ServerState::new(&arch, init);
    let mut client = ClientState {
        weights: server.global_weights.clone(),
        running_stats: server.global_stats.clone(),
        cv: ControlVariates::zeros(&arch, &server.global_weights),
        rng_seed: seed,
        dataset_ref: 0,
        batch_cursor: 0,
    };
    let env = ClientEnv { arch: &arch, dataset: &dataset, batch_size: 10, epsilon: F::of(1e-5) };
    for round in 0..rounds {
        let input = RoundInput {
            global_weights: &server.global_weights,
            global_stats: &server.global_stats,
            global_cv: &server.global_cv,
            spec: &spec,
            local_steps,
            lr,
            global_step: round,
            shared_first_step: None,
        };
        let out = crate::fl::client_update(&env, &client, &input, 0)?;
        visit(&env, &client, &input, &out.trace)?;
        // Single client: the aggregate is the client itself.
        server.global_weights = out.state.weights.clone();
        server.global_stats = out.state.running_stats.clone();
        server.global_cv = ControlVariates {
            c: out.state.cv.c.clone(),
            k: out.state.cv.k.clone(),
        };
        server.round += 1;
        client = out.state;
    }
    Ok(())
}

/// The gate suite run before experiments: a gradient check on both
/// reference-architecture families, both recursion identities, and the
/// homogeneous collapse. Completes in seconds at desk scale.
pub fn run_gate_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();

    // Gradients: small MLP (every coordinate) and small CNN (sampled).
    let mlp = Architecture::mlp(6, &[5, 4], 3);
    let params = init_params::<f64>(&mlp, seed);
    let data: Dataset<f64> = gen_synthetic(3, 4, 6, 0.5, seed ^ 1)?;
    let batch = data.features.gather_rows(&(0..8).collect::<Vec<_>>())?;
    let targets: Vec<u32> = data.labels[..8].to_vec();
    reports.push(check_gradients(&mlp, &params, &batch, &targets, 1e-5, 1e-5, 400, seed)?);

    let cnn = Architecture::cnn(1, 8, 8, &[3, 4], 3);
    let cnn_params = init_params::<f64>(&cnn, seed ^ 2);
    let img: Dataset<f64> = gen_synthetic(3, 3, 64, 0.5, seed ^ 3)?;
    let img = img.with_sample_shape(&[1, 8, 8])?;
    let batch = img.features.gather_rows(&(0..6).collect::<Vec<_>>())?;
    let targets: Vec<u32> = img.labels[..6].to_vec();
    reports.push(check_gradients(&cnn, &cnn_params, &batch, &targets, 1e-5, 1e-5, 200, seed ^ 4)?);

    // Gradient recursion on a few SCAFFOLD-II rounds.
    let mut worst_c: Option<OracleReport> = None;
    for &e in &[1usize, 5] {
        drive_recursion_rounds::<f64, _>(Algorithm::ScaffoldII, 0.9, e, 3, seed ^ 5, |env, state, input, trace| {
            let rep = check_c_recursion(env, state, input, trace, 1e-10)?;
            if worst_c.as_ref().map_or(true, |w| rep.max_error > w.max_error) {
                worst_c = Some(rep);
            }
            Ok(())
        })?;
    }
    reports.push(worst_c.expect("at least one round visited"));

    // Statistics recursion on a few BN-SCAFFOLD-II rounds.
    let mut worst_k: Option<OracleReport> = None;
    for &(e, rho) in &[(1usize, 0.9), (5usize, 0.5), (5usize, 0.9)] {
        drive_recursion_rounds::<f64, _>(Algorithm::BnScaffoldII, rho, e, 3, seed ^ 6, |_, state, input, trace| {
            let (rep, _) = check_k_recursion(state, input, trace, 1e-10)?;
            if worst_k.as_ref().map_or(true, |w| rep.max_error > w.max_error) {
                worst_k = Some(rep);
            }
            Ok(())
        })?;
    }
    reports.push(worst_k.expect("at least one round visited"));

    reports.push(check_homogeneous_collapse(
        &CollapseConfig {
            clients: 2,
            local_steps: 5,
            rounds: 4,
            seed: seed ^ 7,
            desynchronize_one: false,
        },
        1e-12,
    )?);

    Ok(reports)
}
