//! Experiment execution: dataset assembly, fold loop, round-by-round CSV,
//! per-fold summaries with t-interval confidence bounds, and axis sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use fedlab_core::data::{
    client_weights, fold_split, gen_synthetic, load_idx, partition_label_skew, Dataset,
    PartitionPlan,
};
use fedlab_core::nn::{init_params, Architecture};
use fedlab_core::server::{Federation, RoundReport, ServerState};
use fedlab_core::tensor::Real;

use crate::config::{derive_seed, AlgorithmChoice, ExperimentConfig};

/// Per-fold outcome used by summaries and sweeps.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_eval_loss: f64,
}

/// Everything an experiment produced.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub folds: Vec<FoldResult>,
    pub reports: Vec<Vec<RoundReport>>,
}

/// Training pool and test set, in wide precision; each fold casts to the
/// experiment's precision.
fn build_datasets(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset<f64>, Dataset<f64>)> {
    match cfg.dataset.kind.as_str() {
        "synthetic" => {
            let train = gen_synthetic(
                cfg.dataset.classes,
                cfg.dataset.samples_per_class,
                cfg.dataset.dims,
                cfg.dataset.spread,
                derive_seed(cfg.seed, "dataset-train", 0),
            )?;
            let test = gen_synthetic(
                cfg.dataset.classes,
                cfg.dataset.test_samples_per_class,
                cfg.dataset.dims,
                cfg.dataset.spread,
                derive_seed(cfg.seed, "dataset-test", 0),
            )?;
            Ok((train, test))
        }
        "idx" => {
            let norm = cfg.normalization()?;
            let mut train = load_idx(
                cfg.dataset.train_images.as_ref().expect("validated"),
                cfg.dataset.train_labels.as_ref().expect("validated"),
                &norm,
            )?;
            let test = load_idx(
                cfg.dataset.test_images.as_ref().expect("validated"),
                cfg.dataset.test_labels.as_ref().expect("validated"),
                &norm,
            )?;
            if let Some(cap) = cfg.dataset.subset {
                let cap = cap.min(train.len());
                let blocks = fold_split(train.len(), 1, derive_seed(cfg.seed, "subset", 0))?;
                train = train.subset(&blocks[0][..cap])?;
            }
            Ok((train, test))
        }
        other => bail!("dataset.kind: unknown kind '{other}'"),
    }
}

fn build_arch(cfg: &ExperimentConfig, sample_dims: usize) -> anyhow::Result<Architecture> {
    match cfg.model.arch.as_str() {
        "mlp" => Ok(Architecture::mlp(sample_dims, &cfg.model.hidden, cfg.dataset_classes())),
        "cnn" => {
            let s = &cfg.model.image_shape;
            let expect: usize = s.iter().product();
            if expect != sample_dims {
                bail!(
                    "model.image_shape: {:?} does not cover the {}-dimensional samples",
                    s,
                    sample_dims
                );
            }
            Ok(Architecture::cnn(s[0], s[1], s[2], &cfg.model.conv_channels, cfg.dataset_classes()))
        }
        other => bail!("model.arch: unknown architecture '{other}'"),
    }
}

impl ExperimentConfig {
    fn dataset_classes(&self) -> usize {
        match self.dataset.kind.as_str() {
            "synthetic" => self.dataset.classes,
            _ => 10,
        }
    }
}

/// One fold of one experiment at a fixed precision.
#[allow(clippy::too_many_arguments)]
fn run_fold<F: Real>(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    train_pool: &Dataset<f64>,
    test: &Dataset<f64>,
    fold: usize,
    fold_train_indices: &[usize],
) -> anyhow::Result<(Vec<RoundReport>, FoldResult)> {
    let fold_master = derive_seed(cfg.seed, "fold", fold as u64);
    let choice = cfg.algorithm_choice()?;
    let pool = train_pool.subset(fold_train_indices)?;

    let (datasets_f64, batch_size, local_steps, rounds): (Vec<Dataset<f64>>, usize, usize, u64) =
        match choice {
            AlgorithmChoice::Centralized => (
                vec![pool],
                cfg.train.batch_size * cfg.partition.clients,
                1,
                cfg.total_iterations()?,
            ),
            AlgorithmChoice::Federated(_) => {
                let plan = PartitionPlan::new(
                    cfg.partition.clients,
                    cfg.partition.p,
                    cfg.partition.seed.unwrap_or_else(|| derive_seed(fold_master, "partition", 0)),
                    pool.class_count,
                )?;
                let parts = partition_label_skew(&pool, &plan)?;
                for (i, part) in parts.iter().enumerate() {
                    if part.len() < cfg.train.batch_size.min(2) {
                        bail!("partition left client {i} with only {} samples", part.len());
                    }
                }
                (parts, cfg.train.batch_size, cfg.train.local_steps, cfg.rounds()?)
            }
        };

    let datasets: Vec<Dataset<F>> = datasets_f64.iter().map(|d| d.cast()).collect();
    let weights = client_weights(&datasets);
    let fed = Federation::<F> {
        arch: arch.clone(),
        spec: cfg.algorithm_spec()?,
        datasets,
        client_weights: weights,
        local_steps,
        batch_size,
        epsilon: F::of(cfg.bn.epsilon),
        schedule: cfg.schedule()?,
    };
    let test_f: Dataset<F> = test.cast();

    let init = init_params::<F>(arch, derive_seed(fold_master, "init", 0));
    let mut server = ServerState::new(arch, init);
    let mut clients = fed.init_clients(&server, derive_seed(fold_master, "batches", 0));

    let mut reports = Vec::with_capacity(rounds as usize);
    let mut best = f64::NEG_INFINITY;
    for round in 0..rounds {
        let outcome = fed
            .run_round(&server, &clients, Some(&test_f))
            .with_context(|| format!("fold {fold}, round {round}"))?;
        server = outcome.server;
        clients = outcome.clients;
        best = best.max(outcome.report.eval_accuracy);
        reports.push(outcome.report);
    }
    let last = reports.last().expect("at least one round");
    let result = FoldResult {
        fold,
        final_accuracy: last.eval_accuracy,
        best_accuracy: best,
        final_eval_loss: last.eval_loss,
    };
    Ok((reports, result))
}

fn rounds_csv(reports: &[RoundReport], clients: usize) -> String {
    let mut out = String::from("round,iteration,lr,eval_accuracy,eval_loss,comm_rounds,comm_params,gradients_computed");
    for c in 0..clients {
        let _ = write!(out, ",loss_client_{c}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.iteration,
            r.lr,
            r.eval_accuracy,
            r.eval_loss,
            r.comm_rounds,
            r.comm_params,
            r.gradients_computed
        );
        for loss in &r.client_losses {
            let _ = write!(out, ",{loss}");
        }
        out.push('\n');
    }
    out
}

/// Two-tailed 95% t-interval over folds; `None` with fewer than two folds.
fn t_interval(values: &[f64]) -> Option<(f64, f64, f64)> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return None;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?;
    let t = dist.inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    Some((mean, mean - half, mean + half))
}

fn summary_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from("stat_or_fold,final_accuracy,best_accuracy,final_eval_loss\n");
    for f in folds {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            f.fold, f.final_accuracy, f.best_accuracy, f.final_eval_loss
        );
    }
    let finals: Vec<f64> = folds.iter().map(|f| f.final_accuracy).collect();
    let bests: Vec<f64> = folds.iter().map(|f| f.best_accuracy).collect();
    let losses: Vec<f64> = folds.iter().map(|f| f.final_eval_loss).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let _ = writeln!(out, "mean,{},{},{}", mean(&finals), mean(&bests), mean(&losses));
    match (t_interval(&finals), t_interval(&bests), t_interval(&losses)) {
        (Some(a), Some(b), Some(l)) => {
            let _ = writeln!(out, "ci95_low,{},{},{}", a.1, b.1, l.1);
            let _ = writeln!(out, "ci95_high,{},{},{}", a.2, b.2, l.2);
        }
        _ => {
            // A single fold carries no interval; the cells stay empty.
            out.push_str("ci95_low,,,\n");
            out.push_str("ci95_high,,,\n");
        }
    }
    out
}

// Derived seeds span the full u64 range, which TOML integers (i64) cannot
// hold; the tree stores them as hex strings.
fn hex(seed: u64) -> String {
    format!("{seed:#018x}")
}

#[derive(Serialize)]
struct SeedTree {
    master: String,
    dataset_train: String,
    dataset_test: String,
    folds_shuffle: String,
    per_fold: Vec<FoldSeeds>,
}

#[derive(Serialize)]
struct FoldSeeds {
    fold: usize,
    partition: String,
    init: String,
    batches: String,
}

#[derive(Serialize)]
struct Metadata<'a> {
    created_unix: u64,
    precision: &'a str,
    resolved_rounds: u64,
    resolved_total_iterations: u64,
    evaluation_cadence: &'a str,
    fold_strategy: &'a str,
    seeds: SeedTree,
    config: &'a ExperimentConfig,
}

/// Runs one experiment: every fold, all artifacts on disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<RunArtifacts> {
    cfg.validate()?;
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let (train_pool, test) = build_datasets(cfg)?;
    let sample_dims: usize = train_pool.features.shape()[1..].iter().product();
    let mut arch = build_arch(cfg, sample_dims)?;
    let (train_pool, test) = if cfg.model.arch == "cnn" {
        let shape = cfg.model.image_shape.clone();
        (
            train_pool.with_sample_shape(&shape)?,
            test.with_sample_shape(&shape)?,
        )
    } else {
        // MLPs consume flat samples.
        let dims: usize = train_pool.features.shape()[1..].iter().product();
        arch = build_arch(cfg, dims)?;
        (
            train_pool.with_sample_shape(&[sample_dims])?,
            test.with_sample_shape(&[sample_dims])?,
        )
    };

    // One seeded shuffle, contiguous validation blocks; each fold trains on
    // the remaining blocks and the skew partition happens afterwards.
    let folds_shuffle = derive_seed(cfg.seed, "folds", 0);
    let blocks = if cfg.folds == 1 {
        vec![Vec::new()]
    } else {
        fold_split(train_pool.len(), cfg.folds, folds_shuffle)?
    };

    let mut fold_results = Vec::new();
    let mut all_reports = Vec::new();
    for fold in 0..cfg.folds {
        let train_indices: Vec<usize> = if cfg.folds == 1 {
            (0..train_pool.len()).collect()
        } else {
            blocks
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != fold)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect()
        };
        let (reports, result) = match cfg.precision.as_str() {
            "wide" => run_fold::<f64>(cfg, &arch, &train_pool, &test, fold, &train_indices)?,
            _ => run_fold::<f32>(cfg, &arch, &train_pool, &test, fold, &train_indices)?,
        };
        let csv = rounds_csv(&reports, self_client_count(cfg));
        let path = if cfg.folds == 1 {
            out_dir.join("rounds.csv")
        } else {
            let dir = out_dir.join(format!("fold_{fold}"));
            std::fs::create_dir_all(&dir)?;
            dir.join("rounds.csv")
        };
        std::fs::write(&path, csv)?;
        fold_results.push(result);
        all_reports.push(reports);
    }

    std::fs::write(out_dir.join("summary.csv"), summary_csv(&fold_results))?;

    let seeds = SeedTree {
        master: hex(cfg.seed),
        dataset_train: hex(derive_seed(cfg.seed, "dataset-train", 0)),
        dataset_test: hex(derive_seed(cfg.seed, "dataset-test", 0)),
        folds_shuffle: hex(folds_shuffle),
        per_fold: (0..cfg.folds)
            .map(|f| {
                let fm = derive_seed(cfg.seed, "fold", f as u64);
                FoldSeeds {
                    fold: f,
                    partition: hex(
                        cfg.partition
                            .seed
                            .unwrap_or_else(|| derive_seed(fm, "partition", 0)),
                    ),
                    init: hex(derive_seed(fm, "init", 0)),
                    batches: hex(derive_seed(fm, "batches", 0)),
                }
            })
            .collect(),
    };
    let metadata = Metadata {
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        precision: &cfg.precision,
        resolved_rounds: cfg.rounds()?,
        resolved_total_iterations: cfg.total_iterations()?,
        evaluation_cadence: "per-global-step",
        fold_strategy: "fold-then-partition",
        seeds,
        config: cfg,
    };
    std::fs::write(
        out_dir.join("metadata.toml"),
        toml::to_string_pretty(&metadata)?,
    )?;

    Ok(RunArtifacts { out_dir, folds: fold_results, reports: all_reports })
}

fn self_client_count(cfg: &ExperimentConfig) -> usize {
    match cfg.algorithm_choice() {
        Ok(AlgorithmChoice::Centralized) => 1,
        _ => cfg.partition.clients,
    }
}

/// Sweepable configuration axes.
pub fn apply_axis(cfg: &mut ExperimentConfig, axis: &str, value: &str) -> anyhow::Result<()> {
    match axis {
        "partition.p" => cfg.partition.p = value.parse().context("partition.p value")?,
        "train.local_steps" => {
            cfg.train.local_steps = value.parse().context("train.local_steps value")?;
            // A fixed iteration budget re-derives R = budget / E.
            if cfg.train.total_iterations.is_some() {
                cfg.train.rounds = None;
            }
        }
        "train.batch_size" => cfg.train.batch_size = value.parse().context("train.batch_size value")?,
        "algorithm" => {
            AlgorithmChoice::parse(value)?;
            cfg.algorithm = value.to_string();
        }
        "seed" => cfg.seed = value.parse().context("seed value")?,
        "bn.rho" => cfg.bn.rho = value.parse().context("bn.rho value")?,
        "bn.var_threshold" => cfg.bn.var_threshold = value.parse().context("bn.var_threshold value")?,
        "schedule.base_lr" => cfg.schedule.base_lr = value.parse().context("schedule.base_lr value")?,
        other => bail!("sweep axis '{other}' does not name a sweepable field"),
    }
    Ok(())
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One experiment per axis value; failures are recorded and the sweep
/// continues. Duplicate values run once.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[String],
    out_dir: &Path,
) -> anyhow::Result<PathBuf> {
    // Validate the axis up front against a scratch copy.
    {
        let mut probe = base.clone();
        apply_axis(&mut probe, axis, values.first().map(String::as_str).unwrap_or("0"))?;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut seen: Vec<String> = Vec::new();
    let mut rows = String::from("axis,value,algorithm,fold,final_accuracy,best_accuracy,status\n");
    for value in values {
        if seen.contains(value) {
            eprintln!("warning: duplicate sweep value '{value}' skipped");
            continue;
        }
        seen.push(value.clone());
        let mut cfg = base.clone();
        if let Err(e) = apply_axis(&mut cfg, axis, value) {
            let _ = writeln!(rows, "{axis},{value},{},,,,error: {e}", cfg.algorithm);
            continue;
        }
        cfg.out_dir = out_dir.join(format!("{}__{}", sanitize(axis), sanitize(value)));
        match run_experiment(&cfg) {
            Ok(artifacts) => {
                for f in &artifacts.folds {
                    let _ = writeln!(
                        rows,
                        "{axis},{value},{},{},{},{},ok",
                        cfg.algorithm, f.fold, f.final_accuracy, f.best_accuracy
                    );
                }
            }
            Err(e) => {
                let _ = writeln!(rows, "{axis},{value},{},,,,error: {e:#}", cfg.algorithm);
            }
        }
    }
    let sweep_path = out_dir.join("sweep.csv");
    std::fs::write(&sweep_path, rows)?;
    Ok(sweep_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_interval_matches_reference_quantile() {
        // Five folds: df = 4, t_{0.975} = 2.776445...
        let vals = [0.9, 0.92, 0.91, 0.89, 0.93];
        let (mean, lo, hi) = t_interval(&vals).unwrap();
        assert!((mean - 0.91).abs() < 1e-12);
        let half = (hi - lo) / 2.0;
        let s = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        let expect = 2.7764451051977987 * s / 5.0_f64.sqrt();
        assert!((half - expect).abs() < 1e-9, "half {half} vs {expect}");
    }

    #[test]
    fn single_fold_has_no_interval() {
        assert!(t_interval(&[0.5]).is_none());
        let csv = summary_csv(&[FoldResult {
            fold: 0,
            final_accuracy: 0.5,
            best_accuracy: 0.6,
            final_eval_loss: 1.0,
        }]);
        assert!(csv.contains("ci95_low,,,\n"), "{csv}");
    }

    #[test]
    fn axis_application_rederives_rounds_from_budget() {
        let mut cfg = ExperimentConfig::from_toml(
            "[train]\nlocal_steps = 10\ntotal_iterations = 1000\n",
        )
        .unwrap();
        apply_axis(&mut cfg, "train.local_steps", "5").unwrap();
        assert_eq!(cfg.rounds().unwrap(), 200);
    }

    #[test]
    fn unknown_axis_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(apply_axis(&mut cfg, "no.such.field", "1").is_err());
    }
}
