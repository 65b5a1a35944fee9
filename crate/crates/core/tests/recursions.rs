//! The control-variate recursion identities, certified against their
//! definitional sums on recorded client rounds, plus the EMA unroll
//! algebra they rest on.

use fedlab_core::bn::{correct_stats, ema_update, BnStatsVec, LayerStats};
use fedlab_core::fl::Algorithm;
use fedlab_core::oracle::{
    check_c_recursion, check_k_recursion, drive_recursion_rounds, KWindow,
};
use proptest::prelude::*;

#[test]
fn c_recursion_identity_across_e_grid() {
    for &e in &[1usize, 2, 5, 10] {
        for seed in 0..3u64 {
            let mut rounds = 0;
            drive_recursion_rounds::<f64, _>(
                Algorithm::ScaffoldII,
                0.9,
                e,
                4,
                seed.wrapping_mul(101) ^ 0x51ed,
                |env, state, input, trace| {
                    let report = check_c_recursion(env, state, input, trace, 1e-10)?;
                    assert!(report.pass, "E={e} seed={seed}: {}", report.line());
                    rounds += 1;
                    Ok(())
                },
            )
            .unwrap();
            assert_eq!(rounds, 4);
        }
    }
}

#[test]
fn c_recursion_also_holds_for_bn_scaffold() {
    // The gradient recursion must stay exact when the statistics are being
    // corrected at the same time.
    for &e in &[2usize, 5] {
        drive_recursion_rounds::<f64, _>(Algorithm::BnScaffoldII, 0.9, e, 4, 7, |env, state, input, trace| {
            let report = check_c_recursion(env, state, input, trace, 1e-10)?;
            assert!(report.pass, "E={e}: {}", report.line());
            Ok(())
        })
        .unwrap();
    }
}

#[test]
fn k_recursion_identity_across_e_rho_grid() {
    for &e in &[1usize, 2, 5, 10] {
        for &rho in &[0.5f64, 0.9, 0.99] {
            drive_recursion_rounds::<f64, _>(
                Algorithm::BnScaffoldII,
                rho,
                e,
                3,
                1000 + e as u64,
                |_, state, input, trace| {
                    assert_eq!(trace.total_clipped(), 0, "oracle rounds must be clip-free");
                    let (report, window) = check_k_recursion(state, input, trace, 1e-10)?;
                    assert!(report.pass, "E={e} rho={rho}: {}", report.line());
                    // The definitional sum is satisfied by the running value
                    // after all E updates, not after E-1.
                    assert_eq!(window, KWindow::AfterStepE, "E={e} rho={rho}");
                    Ok(())
                },
            )
            .unwrap();
        }
    }
}

#[test]
fn k_recursion_sensitive_to_corrupted_stats() {
    drive_recursion_rounds::<f64, _>(Algorithm::BnScaffoldII, 0.9, 3, 1, 5, |_, state, input, trace| {
        let mut bad = trace.clone();
        if let Some(raw) = bad.steps[1].raw_stats.as_mut() {
            raw.layers[0].mean[0] += 1e-3;
        }
        let (report, _) = check_k_recursion(state, input, &bad, 1e-10)?;
        assert!(!report.pass, "perturbed trace must fail: {}", report.line());
        Ok(())
    })
    .unwrap();
}

#[test]
fn ema_unroll_identity() {
    // Applying the EMA E times from s0 with inputs x_0..x_{E-1} equals
    // rho^E s0 + (1 - rho) sum_t rho^{E-1-t} x_t, to 1e-12.
    let feats = 3usize;
    let mk = |seed: u64| -> BnStatsVec<f64> {
        let mut v = Vec::new();
        let mut x = seed as f64 * 0.137 + 0.3;
        for _ in 0..2 * feats {
            x = (x * 97.0 + 0.123).sin();
            v.push(x);
        }
        BnStatsVec {
            layers: vec![LayerStats {
                mean: v[..feats].to_vec(),
                var: v[feats..].iter().map(|a| a.abs()).collect(),
            }],
        }
    };
    for &rho in &[0.3f64, 0.9, 0.99] {
        for &e in &[1usize, 4, 9] {
            let s0 = mk(1);
            let inputs: Vec<BnStatsVec<f64>> = (0..e).map(|t| mk(10 + t as u64)).collect();
            let mut iterated = s0.clone();
            for x in &inputs {
                iterated = ema_update(&iterated, x, rho).unwrap();
            }
            let mut closed = s0.scaled(rho.powi(e as i32));
            for (t, x) in inputs.iter().enumerate() {
                closed
                    .axpy(x, (1.0 - rho) * rho.powi((e - 1 - t) as i32))
                    .unwrap();
            }
            assert!(
                iterated.max_abs_diff(&closed) < 1e-12,
                "rho={rho} E={e} unroll mismatch {}",
                iterated.max_abs_diff(&closed)
            );
        }
    }
}

#[test]
fn bn_forward_inverse_affine_recovers_standardized_input() {
    use fedlab_core::bn::{batch_stats, bn_forward, BnLayout, StatsMode};
    use fedlab_core::tensor::Tensor;
    let mut vals = Vec::new();
    let mut x = 0.21_f64;
    for _ in 0..24 {
        x = (x * 61.0 + 0.37).sin() * 2.0;
        vals.push(x);
    }
    let t = Tensor::new(vec![8, 3], vals).unwrap();
    let stats = batch_stats(&t, BnLayout::Dense).unwrap();
    let eps = 1e-7;
    let (out, _) = bn_forward(
        &t,
        BnLayout::Dense,
        &stats,
        None,
        None,
        &[1.0; 3],
        &[0.0; 3],
        eps,
        StatsMode::BatchStats,
    )
    .unwrap();
    // alpha = 1, beta = 0: the output already is the standardized input.
    for (i, &v) in out.data().iter().enumerate() {
        let c = i % 3;
        let expect = (t.data()[i] - stats.mean[c]) / (stats.var[c] + eps).sqrt();
        assert!((v - expect).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn clipping_is_idempotent(
        means in proptest::collection::vec(-3.0f64..3.0, 4),
        vars in proptest::collection::vec(-1.0f64..3.0, 4),
        thr in 0.0f64..0.5,
    ) {
        let stats = BnStatsVec { layers: vec![LayerStats { mean: means, var: vars }] };
        let zero = BnStatsVec::zeros_like(&stats);
        let once = correct_stats(&stats, &zero, &zero, thr).unwrap();
        let twice = correct_stats(&once, &zero, &zero, thr).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn ema_is_convex_combination(
        run in proptest::collection::vec(-2.0f64..2.0, 3),
        inc in proptest::collection::vec(-2.0f64..2.0, 3),
        rho in 0.0f64..=1.0,
    ) {
        let running = BnStatsVec { layers: vec![LayerStats { mean: run.clone(), var: vec![1.0; 3] }] };
        let incoming = BnStatsVec { layers: vec![LayerStats { mean: inc.clone(), var: vec![1.0; 3] }] };
        let out = ema_update(&running, &incoming, rho).unwrap();
        for ((o, r), i) in out.layers[0].mean.iter().zip(&run).zip(&inc) {
            let lo = r.min(*i) - 1e-12;
            let hi = r.max(*i) + 1e-12;
            prop_assert!(*o >= lo && *o <= hi, "EMA left the segment: {o} not in [{lo},{hi}]");
        }
    }
}
