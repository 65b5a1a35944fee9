//! Structural and behavioral properties of the algorithm family: one shared
//! E-step engine, exact collapse under homogeneity, locality rules, the
//! option-I full-dataset computations, and the orchestrated round loop.

use fedlab_core::bn::BnStatsVec;
use fedlab_core::data::{client_weights, gen_synthetic, Dataset};
use fedlab_core::error::FlError;
use fedlab_core::fl::{
    client_update, full_dataset_gradient, full_dataset_stats, update_c_option1, Algorithm,
    AlgorithmSpec, ClientEnv, ClientState, ControlVariates, RoundInput,
};
use fedlab_core::nn::{
    backward, forward, init_params, Architecture, BnApply, InjectedFlow, ModelParams,
};
use fedlab_core::oracle::{check_homogeneous_collapse, CollapseConfig};
use fedlab_core::server::{Federation, Schedule, ServerState};

fn small_arch() -> Architecture {
    Architecture::mlp(6, &[5], 3)
}

fn small_data(seed: u64) -> Dataset<f64> {
    gen_synthetic(3, 12, 6, 0.5, seed).unwrap()
}

fn fresh_state(arch: &Architecture, weights: &ModelParams<f64>, seed: u64) -> ClientState<f64> {
    ClientState {
        weights: weights.clone(),
        running_stats: arch.initial_stats(),
        cv: ControlVariates::zeros(arch, weights),
        rng_seed: seed,
        dataset_ref: 0,
        batch_cursor: 0,
    }
}

fn one_round(
    arch: &Architecture,
    dataset: &Dataset<f64>,
    state: &ClientState<f64>,
    spec: &AlgorithmSpec,
    e: usize,
) -> fedlab_core::fl::ClientRoundOutput<f64> {
    let env = ClientEnv { arch, dataset, batch_size: 6, epsilon: 1e-5 };
    let globals = ControlVariates::zeros(arch, &state.weights);
    let input = RoundInput {
        global_weights: &state.weights,
        global_stats: &state.running_stats,
        global_cv: &globals,
        spec,
        local_steps: e,
        lr: 0.1,
        global_step: 0,
        shared_first_step: None,
    };
    client_update(&env, state, &input, 0).unwrap()
}

#[test]
fn zero_correction_equivalence_is_bit_exact() {
    // With zeroed control variates and no clipping, SCAFFOLD-II and
    // BN-SCAFFOLD-II walk the same weight trajectory as FedAvg, bit for bit.
    let arch = small_arch();
    let dataset = small_data(40);
    let weights = init_params::<f64>(&arch, 4);
    let state = fresh_state(&arch, &weights, 77);

    let fedavg = AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.0, None).unwrap();
    let scaffold = AlgorithmSpec::new(Algorithm::ScaffoldII, 0.9, 0.0, None).unwrap();
    let bn_scaffold = AlgorithmSpec::new(Algorithm::BnScaffoldII, 0.9, 0.0, None).unwrap();

    let base = one_round(&arch, &dataset, &state, &fedavg, 7);
    for spec in [&scaffold, &bn_scaffold] {
        let out = one_round(&arch, &dataset, &state, spec, 7);
        assert!(
            out.state.weights.bit_equal(&base.state.weights),
            "{} trajectory deviates from FedAvg under zero corrections",
            spec.algorithm
        );
    }
}

#[test]
fn family_closure_shared_traces_under_zeroed_controls() {
    // The same engine runs every algorithm: zeroing the control inputs must
    // yield identical per-step gradients and statistics across family
    // members with identity-equivalent corrections.
    let arch = small_arch();
    let dataset = small_data(41);
    let weights = init_params::<f64>(&arch, 5);
    let state = fresh_state(&arch, &weights, 13);

    let specs = [
        AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.0, None).unwrap(),
        AlgorithmSpec::new(Algorithm::ScaffoldII, 0.9, 0.0, None).unwrap(),
        AlgorithmSpec::new(Algorithm::BnScaffoldII, 0.9, 0.0, None).unwrap(),
        AlgorithmSpec::new(Algorithm::SiloBnScaffold, 0.9, 0.0, None).unwrap(),
    ];
    let traces: Vec<_> = specs
        .iter()
        .map(|s| one_round(&arch, &dataset, &state, s, 5).trace)
        .collect();
    for other in &traces[1..] {
        assert_eq!(other.steps.len(), traces[0].steps.len());
        for (a, b) in traces[0].steps.iter().zip(&other.steps) {
            assert!(a.gradient.bit_equal(&b.gradient), "per-step gradients fork");
            assert_eq!(a.used_stats, b.used_stats, "per-step statistics fork");
        }
    }
}

#[test]
fn homogeneous_collapse_three_clients() {
    let report = check_homogeneous_collapse(
        &CollapseConfig {
            clients: 3,
            local_steps: 7,
            rounds: 4,
            seed: 2024,
            desynchronize_one: false,
        },
        1e-12,
    )
    .unwrap();
    assert!(report.pass, "{}", report.line());
}

#[test]
fn homogeneous_collapse_two_clients_is_bit_identical() {
    let report = check_homogeneous_collapse(
        &CollapseConfig {
            clients: 2,
            local_steps: 5,
            rounds: 5,
            seed: 11,
            desynchronize_one: false,
        },
        1e-12,
    )
    .unwrap();
    assert!(report.pass, "{}", report.line());
    assert!(
        report.witness.contains("bit_identical=true"),
        "two equal-weight clients must collapse exactly: {}",
        report.witness
    );
}

#[test]
fn silobn_keeps_running_stats_fedbn_keeps_bn_params() {
    let arch = small_arch();
    let dataset = small_data(50);
    let weights = init_params::<f64>(&arch, 50);
    let mut state = fresh_state(&arch, &weights, 3);
    // Give the client distinctive local statistics and BN parameters.
    for layer in state.running_stats.layers.iter_mut() {
        for v in layer.mean.iter_mut() {
            *v = 0.25;
        }
    }
    let mut own_weights = weights.clone();
    for (name, t) in own_weights.entries.iter_mut() {
        if fedlab_core::nn::is_bn_param(name) {
            for v in t.data_mut() {
                *v += 0.5;
            }
        }
    }
    state.weights = own_weights.clone();

    let global_weights = init_params::<f64>(&arch, 51);
    let global_stats = arch.initial_stats::<f64>();
    let env = ClientEnv { arch: &arch, dataset: &dataset, batch_size: 6, epsilon: 1e-5 };
    let globals = ControlVariates::zeros(&arch, &global_weights);

    for (alg, keeps_stats, keeps_bn_params) in [
        (Algorithm::FedAvg, false, false),
        (Algorithm::SiloBn, true, false),
        (Algorithm::FedBn, true, true),
    ] {
        let spec = AlgorithmSpec::new(alg, 0.9, 0.0, None).unwrap();
        let input = RoundInput {
            global_weights: &global_weights,
            global_stats: &global_stats,
            global_cv: &globals,
            spec: &spec,
            local_steps: 1,
            lr: 0.05,
            global_step: 0,
            shared_first_step: None,
        };
        let out = client_update(&env, &state, &input, 0).unwrap();
        let started_from_own_stats = out.trace.running_start.max_abs_diff(&state.running_stats)
            < 1e-15;
        assert_eq!(
            started_from_own_stats, keeps_stats,
            "{alg}: running-statistics locality"
        );
        let bn_from_own = out
            .trace
            .weights_start
            .entries
            .iter()
            .zip(&own_weights.entries)
            .filter(|((name, _), _)| fedlab_core::nn::is_bn_param(name))
            .all(|((_, a), (_, b))| a.data() == b.data());
        assert_eq!(bn_from_own, keeps_bn_params, "{alg}: BN-parameter locality");
    }
}

#[test]
fn centralized_equality_duplicated_clients() {
    // Two clients with the same dataset and synchronized batch schedules
    // under FedAvg match a single trainer on the same batches.
    let arch = small_arch();
    let dataset = small_data(60);
    let init = init_params::<f64>(&arch, 8);
    let schedule = Schedule::constant(0.2);

    let duo = Federation {
        arch: arch.clone(),
        spec: AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.0, None).unwrap(),
        datasets: vec![dataset.clone(), dataset.clone()],
        client_weights: vec![0.5, 0.5],
        local_steps: 1,
        batch_size: 6,
        epsilon: 1e-5,
        schedule: schedule.clone(),
    };
    let solo = Federation {
        arch: arch.clone(),
        spec: AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.0, None).unwrap(),
        datasets: vec![dataset.clone()],
        client_weights: vec![1.0],
        local_steps: 1,
        batch_size: 6,
        epsilon: 1e-5,
        schedule,
    };

    let mut server_duo = ServerState::new(&arch, init.clone());
    let mut server_solo = ServerState::new(&arch, init);
    let mut clients_duo = duo.init_clients(&server_duo, 0);
    for c in clients_duo.iter_mut() {
        c.rng_seed = 424242;
    }
    let mut clients_solo = solo.init_clients(&server_solo, 0);
    clients_solo[0].rng_seed = 424242;

    for _ in 0..100 {
        let a = duo.run_round(&server_duo, &clients_duo, None).unwrap();
        let b = solo.run_round(&server_solo, &clients_solo, None).unwrap();
        server_duo = a.server;
        clients_duo = a.clients;
        server_solo = b.server;
        clients_solo = b.clients;
        let d = server_duo.global_weights.max_abs_diff(&server_solo.global_weights);
        assert!(d <= 1e-10, "trajectories diverged by {d}");
        let ds = server_duo.global_stats.max_abs_diff(&server_solo.global_stats);
        assert!(ds <= 1e-10, "running statistics diverged by {ds}");
    }
}

#[test]
fn aggregation_identity_holds_every_round() {
    let arch = small_arch();
    let full = small_data(70);
    let plan = fedlab_core::data::PartitionPlan::new(2, 0.8, 5, 3).unwrap();
    let parts = fedlab_core::data::partition_label_skew(&full, &plan).unwrap();
    let weights = client_weights(&parts);
    let fed = Federation {
        arch: arch.clone(),
        spec: AlgorithmSpec::new(Algorithm::BnScaffoldII, 0.9, 1e-2, None).unwrap(),
        datasets: parts,
        client_weights: weights.clone(),
        local_steps: 3,
        batch_size: 4,
        epsilon: 1e-5,
        schedule: Schedule::constant(0.05),
    };
    let mut server = ServerState::new(&arch, init_params::<f64>(&arch, 7));
    let mut clients = fed.init_clients(&server, 123);
    for round in 0..5 {
        let out = fed.run_round(&server, &clients, None).unwrap();
        server = out.server;
        clients = out.clients;
        // c = sum P_i c_i and k = sum P_i k_i, recomputed independently.
        let mut c = ModelParams::zeros_like(&server.global_cv.c);
        let mut k = BnStatsVec::zeros_like(&server.global_cv.k);
        for (cl, &p) in clients.iter().zip(&weights) {
            c.axpy(&cl.cv.c, p).unwrap();
            k.axpy(&cl.cv.k, p).unwrap();
        }
        assert!(c.max_abs_diff(&server.global_cv.c) <= 1e-12, "round {round}: c identity");
        assert!(k.max_abs_diff(&server.global_cv.k) <= 1e-12, "round {round}: k identity");
    }
}

#[test]
fn option1_gradient_equals_mean_of_per_sample_gradients() {
    let arch = small_arch();
    let dataset: Dataset<f64> = gen_synthetic(3, 6, 6, 0.4, 80).unwrap(); // 18 samples
    let weights = init_params::<f64>(&arch, 81);

    let c1 = update_c_option1(&arch, &weights, &dataset, 5, 1e-5).unwrap();

    let stats = full_dataset_stats(&arch, &weights, &dataset, 5, 1e-5).unwrap();
    let mut mean = ModelParams::zeros_like(&weights);
    for i in 0..dataset.len() {
        let sample = dataset.features.gather_rows(&[i]).unwrap();
        let target = [dataset.labels[i]];
        let pass = forward(
            &arch,
            &weights,
            &sample,
            BnApply::TrainInjected { stats: &stats, flow: InjectedFlow::Frozen },
            1e-5,
        )
        .unwrap();
        let (grad, _) = backward(&arch, &weights, &pass.cache, &target).unwrap();
        mean.axpy(&grad, 1.0).unwrap();
    }
    let mean = mean.scaled(1.0 / dataset.len() as f64);
    assert!(c1.max_abs_diff(&mean) <= 1e-10, "diff {}", c1.max_abs_diff(&mean));
}

#[test]
fn option1_gradient_invariant_under_dataset_duplication() {
    let arch = small_arch();
    let dataset: Dataset<f64> = gen_synthetic(3, 4, 6, 0.4, 90).unwrap();
    let weights = init_params::<f64>(&arch, 91);
    let doubled = {
        let idx: Vec<usize> = (0..dataset.len()).chain(0..dataset.len()).collect();
        dataset.subset(&idx).unwrap()
    };
    let a = update_c_option1(&arch, &weights, &dataset, 4, 1e-5).unwrap();
    let b = update_c_option1(&arch, &weights, &doubled, 4, 1e-5).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-10);
}

#[test]
fn streamed_stats_match_monolithic_batch() {
    let arch = small_arch();
    let dataset: Dataset<f64> = gen_synthetic(3, 8, 6, 0.5, 100).unwrap();
    let weights = init_params::<f64>(&arch, 101);
    let streamed = full_dataset_stats(&arch, &weights, &dataset, 5, 1e-5).unwrap();
    // Monolithic reference: the whole dataset as one training batch.
    let pass = forward(&arch, &weights, &dataset.features, BnApply::Train, 1e-5).unwrap();
    let monolithic = pass.raw_batch_stats.unwrap();
    assert!(
        streamed.max_abs_diff(&monolithic) <= 1e-10,
        "diff {}",
        streamed.max_abs_diff(&monolithic)
    );
}

#[test]
fn full_dataset_stats_on_constant_data_have_zero_variance() {
    let arch = small_arch();
    let weights = init_params::<f64>(&arch, 110);
    let constant: Dataset<f64> = {
        let one = gen_synthetic::<f64>(3, 1, 6, 0.0, 7).unwrap();
        let idx = vec![0usize; 9];
        one.subset(&idx).unwrap()
    };
    let stats = full_dataset_stats(&arch, &weights, &constant, 4, 1e-5).unwrap();
    for layer in &stats.layers {
        for &v in &layer.var {
            assert!(v.abs() < 1e-18, "constant data must give zero variance, got {v}");
        }
    }
}

#[test]
fn full_dataset_stats_single_sample() {
    let arch = small_arch();
    let weights = init_params::<f64>(&arch, 111);
    let one: Dataset<f64> = gen_synthetic::<f64>(3, 1, 6, 0.0, 8).unwrap().subset(&[0]).unwrap();
    let stats = full_dataset_stats(&arch, &weights, &one, 4, 1e-5).unwrap();
    for layer in &stats.layers {
        for &v in &layer.var {
            assert_eq!(v, 0.0);
        }
    }
    assert!(full_dataset_gradient(&arch, &weights, &one, &stats, 4, 1e-5).is_ok());
}

#[test]
fn fedtan_first_step_shares_statistics_across_clients() {
    let arch = small_arch();
    let full = small_data(120);
    let plan = fedlab_core::data::PartitionPlan::new(2, 1.0, 9, 3).unwrap();
    let parts = fedlab_core::data::partition_label_skew(&full, &plan).unwrap();
    let weights = client_weights(&parts);
    let fed = Federation {
        arch: arch.clone(),
        spec: AlgorithmSpec::new(Algorithm::FedTan, 0.9, 0.0, None).unwrap(),
        datasets: parts,
        client_weights: weights,
        local_steps: 3,
        batch_size: 4,
        epsilon: 1e-5,
        schedule: Schedule::constant(0.05),
    };
    let server = ServerState::new(&arch, init_params::<f64>(&arch, 121));
    let clients = fed.init_clients(&server, 900);
    let out = fed.run_round(&server, &clients, None).unwrap();
    let t0_a = &out.traces[0].steps[0].used_stats;
    let t0_b = &out.traces[1].steps[0].used_stats;
    assert_eq!(t0_a, t0_b, "first-step statistics must be shared");
    assert!(out.traces[0].steps[0].raw_stats.is_none(), "shared stats are injected");
    assert!(out.traces[0].steps[1].raw_stats.is_some(), "later steps use local statistics");
    let t1_a = &out.traces[0].steps[1].used_stats;
    let t1_b = &out.traces[1].steps[1].used_stats;
    assert_ne!(t1_a, t1_b, "later steps diverge across heterogeneous clients");
}

#[test]
fn fixbn_freezes_running_stats_mid_round() {
    let arch = small_arch();
    let dataset = small_data(130);
    let weights = init_params::<f64>(&arch, 131);
    let state = fresh_state(&arch, &weights, 17);
    let spec = AlgorithmSpec::new(Algorithm::FixBn, 0.9, 0.0, Some(3)).unwrap();
    let out = one_round(&arch, &dataset, &state, &spec, 5);
    // Iterations 0..2 train normally, 3..4 run on frozen statistics.
    for t in 0..3 {
        assert!(out.trace.steps[t].raw_stats.is_some(), "step {t} should train");
    }
    for t in 3..5 {
        assert!(out.trace.steps[t].raw_stats.is_none(), "step {t} should be frozen");
        assert_eq!(
            out.trace.steps[t].running_after, out.trace.steps[2].running_after,
            "frozen steps must not move the running statistics"
        );
    }
}

#[test]
fn divergence_error_carries_client_and_step() {
    let arch = small_arch();
    let dataset = small_data(140);
    let weights = init_params::<f64>(&arch, 141);
    let state = fresh_state(&arch, &weights, 19);
    let spec = AlgorithmSpec::new(Algorithm::FedAvg, 0.9, 0.0, None).unwrap();
    let env = ClientEnv { arch: &arch, dataset: &dataset, batch_size: 6, epsilon: 1e-5 };
    let globals = ControlVariates::zeros(&arch, &weights);
    let input = RoundInput {
        global_weights: &weights,
        global_stats: &state.running_stats,
        global_cv: &globals,
        spec: &spec,
        local_steps: 4,
        lr: 1e300,
        global_step: 0,
        shared_first_step: None,
    };
    match client_update(&env, &state, &input, 3) {
        Err(FlError::Divergence { client, step, .. }) => {
            assert_eq!(client, 3);
            assert!(step >= 1, "the blow-up surfaces after the huge step");
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn single_client_aggregation_is_identity() {
    let arch = small_arch();
    let dataset = small_data(150);
    let fed = Federation {
        arch: arch.clone(),
        spec: AlgorithmSpec::new(Algorithm::ScaffoldII, 0.9, 0.0, None).unwrap(),
        datasets: vec![dataset],
        client_weights: vec![1.0],
        local_steps: 2,
        batch_size: 6,
        epsilon: 1e-5,
        schedule: Schedule::constant(0.1),
    };
    let server = ServerState::new(&arch, init_params::<f64>(&arch, 151));
    let clients = fed.init_clients(&server, 1);
    let out = fed.run_round(&server, &clients, None).unwrap();
    assert!(out.server.global_weights.bit_equal(&out.clients[0].weights));
    assert_eq!(out.server.global_stats, out.clients[0].running_stats);
}
