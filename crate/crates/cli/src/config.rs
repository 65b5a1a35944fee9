//! Experiment configuration: a TOML file with dotted sections. Every field
//! has a default except the IDX dataset paths, so a bare `[dataset]` with
//! `kind = "synthetic"` (or an empty file) describes a runnable experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use fedlab_core::data::Normalization;
use fedlab_core::fl::{Algorithm, AlgorithmSpec};
use fedlab_core::server::{Schedule, ScheduleKind};

/// Which algorithm an experiment trains: a family member or the
/// centralized reference trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmChoice {
    Federated(Algorithm),
    Centralized,
}

impl AlgorithmChoice {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        if s.eq_ignore_ascii_case("centralized") {
            return Ok(AlgorithmChoice::Centralized);
        }
        Ok(AlgorithmChoice::Federated(
            s.parse::<Algorithm>()
                .map_err(|e| anyhow::anyhow!("algorithm: {e}"))?,
        ))
    }

    pub fn name(&self) -> String {
        match self {
            AlgorithmChoice::Centralized => "centralized".to_string(),
            AlgorithmChoice::Federated(a) => a.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other stream is derived from it.
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_algorithm")]
    pub algorithm: String,
    /// `wide` (f64) or `standard` (f32).
    #[serde(default = "d_precision")]
    pub precision: String,
    /// Cross-validation fold count; 1 trains on the whole training pool.
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub bn: BnConfig,
    #[serde(default)]
    pub fixbn: FixBnConfig,
}

fn d_seed() -> u64 {
    42
}
fn d_algorithm() -> String {
    "fedavg".into()
}
fn d_precision() -> String {
    "standard".into()
}
fn d_folds() -> usize {
    1
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("runs/experiment")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is fully defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `mlp` or `cnn`.
    #[serde(default = "d_arch")]
    pub arch: String,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_conv_channels")]
    pub conv_channels: Vec<usize>,
    /// Per-sample shape `[channels, height, width]` for the CNN.
    #[serde(default = "d_image_shape")]
    pub image_shape: Vec<usize>,
}

fn d_arch() -> String {
    "mlp".into()
}
fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_conv_channels() -> Vec<usize> {
    vec![8, 16]
}
fn d_image_shape() -> Vec<usize> {
    vec![1, 28, 28]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: d_arch(),
            hidden: d_hidden(),
            conv_channels: d_conv_channels(),
            image_shape: d_image_shape(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic` or `idx`.
    #[serde(default = "d_kind")]
    pub kind: String,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_spc")]
    pub samples_per_class: usize,
    #[serde(default = "d_test_spc")]
    pub test_samples_per_class: usize,
    #[serde(default = "d_dims")]
    pub dims: usize,
    #[serde(default = "d_spread")]
    pub spread: f64,
    /// IDX paths; the only fields without defaults.
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// `mnist`, `cifar`, or `none`.
    #[serde(default = "d_norm")]
    pub normalization: String,
    /// Optional cap on the training pool (seeded subsample).
    #[serde(default)]
    pub subset: Option<usize>,
}

fn d_kind() -> String {
    "synthetic".into()
}
fn d_classes() -> usize {
    10
}
fn d_spc() -> usize {
    400
}
fn d_test_spc() -> usize {
    200
}
fn d_dims() -> usize {
    32
}
fn d_spread() -> f64 {
    1.1
}
fn d_norm() -> String {
    "mnist".into()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: d_kind(),
            classes: d_classes(),
            samples_per_class: d_spc(),
            test_samples_per_class: d_test_spc(),
            dims: d_dims(),
            spread: d_spread(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            normalization: d_norm(),
            subset: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "d_clients")]
    pub clients: usize,
    /// Label-skew assignment probability in `[0.5, 1]`.
    #[serde(default = "d_p")]
    pub p: f64,
    /// Partition stream seed; derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn d_clients() -> usize {
    2
}
fn d_p() -> f64 {
    0.5
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { clients: d_clients(), p: d_p(), seed: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// E: local SGD steps per global step.
    #[serde(default = "d_local_steps")]
    pub local_steps: usize,
    /// R: global steps. Exactly one of `rounds`/`total_iterations` may be
    /// set; the other is derived via `total = R * E`.
    #[serde(default)]
    pub rounds: Option<u64>,
    #[serde(default)]
    pub total_iterations: Option<u64>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

fn d_local_steps() -> usize {
    10
}
fn d_batch() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { local_steps: d_local_steps(), rounds: None, total_iterations: None, batch_size: d_batch() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// `constant`, `step`, or `multistep`.
    #[serde(default = "d_sched_kind")]
    pub kind: String,
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_factor")]
    pub factor: f64,
    #[serde(default)]
    pub milestones: Vec<u64>,
    #[serde(default)]
    pub warmup_iters: u64,
}

fn d_sched_kind() -> String {
    "constant".into()
}
fn d_base_lr() -> f64 {
    0.1
}
fn d_factor() -> f64 {
    0.5
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: d_sched_kind(),
            base_lr: d_base_lr(),
            factor: d_factor(),
            milestones: Vec::new(),
            warmup_iters: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_thr")]
    pub var_threshold: f64,
}

fn d_rho() -> f64 {
    0.9
}
fn d_eps() -> f64 {
    1e-5
}
fn d_thr() -> f64 {
    1e-2
}

impl Default for BnConfig {
    fn default() -> Self {
        Self { rho: d_rho(), epsilon: d_eps(), var_threshold: d_thr() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FixBnConfig {
    /// Iteration at which running statistics freeze; required for the
    /// FixBN variants, defaulting to half the iteration budget.
    #[serde(default)]
    pub t_star: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn algorithm_choice(&self) -> anyhow::Result<AlgorithmChoice> {
        AlgorithmChoice::parse(&self.algorithm)
    }

    /// Global steps R, derived from the iteration budget when needed.
    pub fn rounds(&self) -> anyhow::Result<u64> {
        let e = self.train.local_steps as u64;
        match (self.train.rounds, self.train.total_iterations) {
            (Some(r), None) => Ok(r),
            (None, Some(total)) => {
                if total % e != 0 {
                    bail!("train.total_iterations: {total} is not a multiple of local_steps {e}");
                }
                Ok(total / e)
            }
            (Some(r), Some(total)) => {
                if r * e != total {
                    bail!(
                        "train.rounds: rounds * local_steps = {} conflicts with total_iterations {}",
                        r * e,
                        total
                    );
                }
                Ok(r)
            }
            (None, None) => Ok(50),
        }
    }

    pub fn total_iterations(&self) -> anyhow::Result<u64> {
        Ok(self.rounds()? * self.train.local_steps as u64)
    }

    /// FixBN freeze iteration: configured, or half the budget.
    pub fn t_star(&self) -> anyhow::Result<u64> {
        match self.fixbn.t_star {
            Some(t) => Ok(t),
            None => Ok(self.total_iterations()? / 2),
        }
    }

    pub fn schedule(&self) -> anyhow::Result<Schedule> {
        let kind = match self.schedule.kind.as_str() {
            "constant" => ScheduleKind::Constant,
            "step" => ScheduleKind::Step,
            "multistep" => ScheduleKind::Multistep,
            other => bail!("schedule.kind: unknown kind '{other}'"),
        };
        let schedule = Schedule {
            kind,
            base_lr: self.schedule.base_lr,
            factor: self.schedule.factor,
            milestones: self.schedule.milestones.clone(),
            warmup_iters: self.schedule.warmup_iters,
        };
        schedule
            .validate()
            .map_err(|e| anyhow::anyhow!("schedule: {e}"))?;
        Ok(schedule)
    }

    pub fn normalization(&self) -> anyhow::Result<Normalization> {
        Ok(match self.dataset.normalization.as_str() {
            "mnist" => Normalization::mnist(),
            "cifar" => Normalization::cifar(),
            "none" => Normalization::none(),
            other => bail!("dataset.normalization: unknown preset '{other}'"),
        })
    }

    /// The federated algorithm spec (centralized experiments reuse FedAvg's).
    pub fn algorithm_spec(&self) -> anyhow::Result<AlgorithmSpec> {
        let alg = match self.algorithm_choice()? {
            AlgorithmChoice::Centralized => Algorithm::FedAvg,
            AlgorithmChoice::Federated(a) => a,
        };
        let needs_t_star = matches!(alg, Algorithm::FixBn | Algorithm::FixBnScaffold);
        let t_star = needs_t_star.then(|| self.t_star()).transpose()?;
        AlgorithmSpec::new(alg, self.bn.rho, self.bn.var_threshold, t_star)
            .map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.algorithm_choice()?;
        if self.precision != "wide" && self.precision != "standard" {
            bail!("precision: must be 'wide' or 'standard', got '{}'", self.precision);
        }
        if self.folds == 0 {
            bail!("folds: must be at least 1");
        }
        match self.model.arch.as_str() {
            "mlp" => {
                if self.model.hidden.is_empty() {
                    bail!("model.hidden: the MLP needs at least one hidden layer");
                }
            }
            "cnn" => {
                if self.model.conv_channels.is_empty() {
                    bail!("model.conv_channels: the CNN needs at least one block");
                }
                if self.model.image_shape.len() != 3 {
                    bail!("model.image_shape: expected [channels, height, width]");
                }
            }
            other => bail!("model.arch: unknown architecture '{other}'"),
        }
        match self.dataset.kind.as_str() {
            "synthetic" => {
                if self.dataset.dims < self.dataset.classes {
                    bail!(
                        "dataset.dims: needs dims >= classes ({} < {})",
                        self.dataset.dims,
                        self.dataset.classes
                    );
                }
            }
            "idx" => {
                for (field, value) in [
                    ("dataset.train_images", &self.dataset.train_images),
                    ("dataset.train_labels", &self.dataset.train_labels),
                    ("dataset.test_images", &self.dataset.test_images),
                    ("dataset.test_labels", &self.dataset.test_labels),
                ] {
                    if value.is_none() {
                        bail!("{field}: required for dataset.kind = \"idx\"");
                    }
                }
            }
            other => bail!("dataset.kind: unknown kind '{other}'"),
        }
        self.normalization()?;
        if !(0.5..=1.0).contains(&self.partition.p) {
            bail!("partition.p: must lie in [0.5, 1], got {}", self.partition.p);
        }
        if self.partition.clients == 0 {
            bail!("partition.clients: must be at least 1");
        }
        if self.train.local_steps == 0 {
            bail!("train.local_steps: must be at least 1");
        }
        if self.train.batch_size < 2 {
            bail!("train.batch_size: batch statistics need at least 2 samples");
        }
        self.rounds()?;
        self.schedule()?;
        if !(0.0..=1.0).contains(&self.bn.rho) {
            bail!("bn.rho: must lie in [0, 1], got {}", self.bn.rho);
        }
        if self.bn.epsilon <= 0.0 {
            bail!("bn.epsilon: must be positive");
        }
        if self.bn.var_threshold < 0.0 {
            bail!("bn.var_threshold: must be non-negative");
        }
        self.algorithm_spec()?;
        Ok(())
    }
}

/// Splitmix-style seed derivation: one master seed fans out into named,
/// index-tagged streams.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = master ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
