use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bilevel::BilevelConfig;
use crate::error::{ConfigViolation, Error, Result};
use crate::federation::{DatasetSpec, LocalTrainConfig};
use crate::numcore::{ArchSpec, Model};
use crate::personalization::PersonalizationConfig;
use crate::synthesis::SynthConfig;

/// Pipeline variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fedbicross,
    /// One-shot parameter averaging only.
    Fedavg1,
    IntraCluster,
    UniformCross,
    SimWeighted,
    /// Stop after distillation and evaluate the cluster models.
    NoPkd,
    /// A single cluster holding every client.
    NoClus,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Fedbicross,
        Mode::Fedavg1,
        Mode::IntraCluster,
        Mode::UniformCross,
        Mode::SimWeighted,
        Mode::NoPkd,
        Mode::NoClus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fedbicross => "fedbicross",
            Mode::Fedavg1 => "fedavg1",
            Mode::IntraCluster => "intra_cluster",
            Mode::UniformCross => "uniform_cross",
            Mode::SimWeighted => "sim_weighted",
            Mode::NoPkd => "no_pkd",
            Mode::NoClus => "no_clus",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Number of clients `N`.
    pub clients: usize,
    /// Dirichlet concentration of the label split.
    pub alpha: f64,
    /// Number of clusters `K`.
    pub clusters: usize,
    pub arch: ArchSpec,
    /// Fraction of every client shard held out for evaluation.
    pub test_fraction: f64,
    pub min_shard: usize,
    pub local: LocalTrainConfig,
    /// Probe images per client for clustering (`M`).
    pub probes: usize,
    pub synthesis: SynthConfig,
    pub bilevel: BilevelConfig,
    pub personalization: PersonalizationConfig,
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Also write every synthesis trajectory to the checkpoint directory.
    pub dump_trajectories: bool,
}

impl Default for ExperimentConfig {
    /// The desk-scale preset.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Images {
                classes: 4,
                size: 8,
                samples_per_class: 60,
                noise: 1.5,
            },
            clients: 6,
            alpha: 0.1,
            clusters: 3,
            arch: ArchSpec::small_cnn([1, 8, 8], 4, 16, 4),
            test_fraction: 0.2,
            min_shard: 10,
            local: LocalTrainConfig::default(),
            probes: 64,
            synthesis: SynthConfig {
                iterations: 100,
                batch_size: 64,
                ..SynthConfig::default()
            },
            bilevel: BilevelConfig::default(),
            personalization: PersonalizationConfig::default(),
            mode: Mode::Fedbicross,
            seed: 0,
            output_dir: None,
            dump_trajectories: false,
        }
    }
}

fn push(v: &mut Vec<ConfigViolation>, path: &str, message: impl Into<String>) {
    v.push(ConfigViolation {
        path: path.to_string(),
        message: message.into(),
    });
}

impl ExperimentConfig {
    /// All cross-field and range violations, empty when valid.
    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        let classes = self.dataset.classes();
        if classes < 2 {
            push(&mut v, "dataset.classes", "at least 2 classes are required");
        }
        if self.dataset.samples_per_class() == 0 {
            push(&mut v, "dataset.samples_per_class", "must be positive");
        }
        if let DatasetSpec::Blobs { std, .. } = self.dataset {
            if !(std >= 0.0) {
                push(&mut v, "dataset.std", "must be non-negative");
            }
        }
        if self.clients < 2 {
            push(&mut v, "clients", "N must be at least 2");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            push(&mut v, "alpha", "Dirichlet concentration must be positive");
        }
        if self.clusters < 1 {
            push(&mut v, "clusters", "K must be at least 1");
        }
        if self.clusters > self.clients {
            push(
                &mut v,
                "clusters",
                format!("K <= N is required (K = {}, N = {})", self.clusters, self.clients),
            );
        }
        match Model::zeros(self.arch.clone()) {
            Err(e) => push(&mut v, "arch", e.to_string()),
            Ok(m) => {
                if m.input_shape() != self.dataset.input_shape().as_slice() {
                    push(
                        &mut v,
                        "arch.input_shape",
                        format!(
                            "{:?} does not match the dataset's {:?}",
                            m.input_shape(),
                            self.dataset.input_shape()
                        ),
                    );
                }
                if m.num_classes() != classes {
                    push(
                        &mut v,
                        "arch.layers",
                        format!("head width {} differs from the class count {classes}", m.num_classes()),
                    );
                }
                if m.bn_states().is_empty() {
                    push(&mut v, "arch.layers", "at least one batch-norm layer is required");
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            push(&mut v, "test_fraction", "must lie in (0, 1)");
        }
        if self.min_shard < 2 {
            push(
                &mut v,
                "min_shard",
                "must be at least 2 so train and test are non-empty",
            );
        }
        if self.min_shard * self.clients > classes * self.dataset.samples_per_class() {
            push(&mut v, "min_shard", "N * min_shard exceeds the dataset size");
        }
        let l = &self.local;
        if l.epochs < 1 {
            push(&mut v, "local.epochs", "must be at least 1");
        }
        if l.batch_size < 1 {
            push(&mut v, "local.batch_size", "must be at least 1");
        }
        if !(l.lr >= 0.0) {
            push(&mut v, "local.lr", "must be non-negative");
        }
        if !(0.0..1.0).contains(&l.momentum) {
            push(&mut v, "local.momentum", "must lie in [0, 1)");
        }
        if self.probes < 1 {
            push(&mut v, "probes", "M must be at least 1");
        }
        let s = &self.synthesis;
        if s.iterations < 1 {
            push(&mut v, "synthesis.iterations", "T must be at least 1");
        }
        if s.batch_size < 2 {
            push(&mut v, "synthesis.batch_size", "B must be at least 2");
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            push(&mut v, "synthesis.lr", "must be positive");
        }
        if !(s.alpha_tv >= 0.0) {
            push(&mut v, "synthesis.alpha_tv", "must be non-negative");
        }
        if s.alpha_tv > 0.0 && !self.arch.is_image() {
            push(&mut v, "synthesis.alpha_tv", "total variation needs image inputs");
        }
        if !(s.alpha_bn >= 0.0) {
            push(&mut v, "synthesis.alpha_bn", "must be non-negative");
        }
        if !(s.momentum > 0.0 && s.momentum < 1.0) {
            push(&mut v, "synthesis.momentum", "beta must lie in (0, 1)");
        }
        if s.stride < 1 {
            push(&mut v, "synthesis.stride", "must be at least 1");
        }
        let b = &self.bilevel;
        if !(b.lr_model >= 0.0 && b.lr_model.is_finite()) {
            push(&mut v, "bilevel.lr_model", "must be non-negative");
        }
        if !(b.lr_weights >= 0.0 && b.lr_weights.is_finite()) {
            push(&mut v, "bilevel.lr_weights", "must be non-negative");
        }
        if !(b.tau > 0.0) {
            push(&mut v, "bilevel.tau", "temperature must be positive");
        }
        if !(b.train_fraction > 0.0 && b.train_fraction < 1.0) {
            push(&mut v, "bilevel.train_fraction", "must lie in (0, 1)");
        } else {
            let n_train = (s.batch_size as f64 * b.train_fraction).round() as usize;
            if s.batch_size < 4 || n_train < 2 || s.batch_size - n_train < 2 {
                push(
                    &mut v,
                    "bilevel.train_fraction",
                    format!(
                        "a batch of {} leaves fewer than 2 samples on one side of the split",
                        s.batch_size
                    ),
                );
            }
        }
        let p = &self.personalization;
        if !(p.gamma >= 0.0) {
            push(&mut v, "personalization.gamma", "must be non-negative");
        }
        if !(p.delta >= 0.0) {
            push(&mut v, "personalization.delta", "must be non-negative");
        }
        if p.epochs < 1 {
            push(&mut v, "personalization.epochs", "must be at least 1");
        }
        if p.batch_size < 1 {
            push(&mut v, "personalization.batch_size", "must be at least 1");
        }
        if !(p.lr >= 0.0) {
            push(&mut v, "personalization.lr", "must be non-negative");
        }
        if !(p.tau > 0.0) {
            push(&mut v, "personalization.tau", "temperature must be positive");
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Number of clusters actually used by the configured mode.
    pub fn effective_clusters(&self) -> usize {
        if self.mode == Mode::NoClus {
            1
        } else {
            self.clusters
        }
    }
}

/// Parse a JSON config (empty text means all defaults) and report every
/// violation at once.
pub fn validate_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(vec![ConfigViolation {
                path: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            }])
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}
