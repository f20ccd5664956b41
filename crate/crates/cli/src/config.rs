//! Experiment configuration file (TOML).
//!
//! ```toml
//! seed = 0
//! out = "runs/split"          # optional, `--out` wins
//!
//! [dataset]
//! kind = "idx"                 # or "synthetic"
//! train_images = "data/mnist10k/train-images-idx3-ubyte.gz"
//! train_labels = "data/mnist10k/train-labels-idx1-ubyte.gz"
//! test_images = "data/mnist10k/t10k-images-idx3-ubyte.gz"
//! test_labels = "data/mnist10k/t10k-labels-idx1-ubyte.gz"
//! val_frac = 0.15
//! tasks = { kind = "split", partition = [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]] }
//!
//! [model]
//! hidden = [200, 200]          # or an explicit `trunk = [{ kind = "linear", ... }, ...]`
//!
//! [method]
//! method = "lra"               # lra | ppbi | ft | ff | jt
//! alpha_max = 1e-3
//!
//! [train]
//! max_epochs = 20
//! batch_size = 128
//!
//! [prune]
//! criteria = [{ kind = "snr" }, { kind = "random", seed = 1 }]
//! fractions = [0.0, 0.5, 0.95]
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mpcl_core::continual::ImportanceMetric;
use mpcl_core::data::SyntheticSpec;
use mpcl_core::{CLConfig, CdfMetric, LayerSpec, Method, PruneCriterion, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_val_frac")]
        val_frac: f64,
        tasks: TaskSpec,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

fn default_val_frac() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Split { partition: Vec<Vec<usize>> },
    Permuted { n_tasks: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of a flatten → (linear, relu)* trunk.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    /// Explicit trunk, instead of `hidden`.
    #[serde(default)]
    pub trunk: Option<Vec<LayerSpec>>,
    /// Explicit per-task heads; by default each head is a linear layer to
    /// the task's classes followed by the softmax moment head.
    #[serde(default)]
    pub heads: Option<Vec<Vec<LayerSpec>>>,
}

/// Continual-learning settings. Unset values take the library defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub metric: ImportanceMetric,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub alpha0: Option<f64>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub tau0: Option<f64>,
    pub rho_init: Option<f64>,
    #[serde(default)]
    pub remap_as_printed: bool,
}

fn default_method() -> Method {
    Method::Ft
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            metric: ImportanceMetric::default(),
            alpha_min: None,
            alpha_max: None,
            alpha0: None,
            tau_min: None,
            tau_max: None,
            tau0: None,
            rho_init: None,
            remap_as_printed: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "default_criteria")]
    pub criteria: Vec<PruneCriterion>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_cdf")]
    pub cdf: Vec<CdfMetric>,
    /// Task whose validation split and head are used.
    #[serde(default)]
    pub task: usize,
}

fn default_criteria() -> Vec<PruneCriterion> {
    vec![
        PruneCriterion::Snr,
        PruneCriterion::Variance,
        PruneCriterion::Magnitude,
        PruneCriterion::Random { seed: 0 },
    ]
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
}

fn default_cdf() -> Vec<CdfMetric> {
    vec![CdfMetric::SnrDb, CdfMetric::Snr, CdfMetric::Variance]
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criteria: default_criteria(),
            fractions: default_fractions(),
            cdf: default_cdf(),
            task: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).context("config is not valid TOML")?;
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field `{path}`: {}", e.into_inner().message())
        })?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            fix(train_images);
            fix(train_labels);
            fix(test_images);
            fix(test_labels);
        }
        if let Some(o) = &mut self.out {
            fix(o);
        }
    }

    /// Continual-learning settings with the run seed and `[train]` block.
    pub fn cl_config(&self) -> CLConfig {
        let m = &self.method;
        let d = CLConfig::new(m.method);
        CLConfig {
            method: m.method,
            metric: m.metric,
            alpha_min: m.alpha_min.unwrap_or(d.alpha_min),
            alpha_max: m.alpha_max.unwrap_or(d.alpha_max),
            alpha0: m.alpha0,
            tau_min: m.tau_min.unwrap_or(d.tau_min),
            tau_max: m.tau_max.unwrap_or(d.tau_max),
            tau0: m.tau0.unwrap_or(d.tau0),
            rho_init: m.rho_init.unwrap_or(d.rho_init),
            remap_as_printed: m.remap_as_printed,
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
        }
    }

    /// Checks every field before any data is touched.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Idx {
                val_frac, tasks, ..
            } => {
                if !(*val_frac > 0.0 && *val_frac < 1.0) {
                    bail!("dataset.val_frac: {val_frac} must lie in (0, 1)");
                }
                match tasks {
                    TaskSpec::Split { partition } => {
                        if partition.is_empty() || partition.iter().any(Vec::is_empty) {
                            bail!("dataset.tasks.partition: every task needs at least one class");
                        }
                    }
                    TaskSpec::Permuted { n_tasks } => {
                        if *n_tasks == 0 {
                            bail!("dataset.tasks.n_tasks: must be >= 1");
                        }
                    }
                }
            }
            DatasetConfig::Synthetic { spec } => {
                spec.validate()
                    .map_err(|e| anyhow::anyhow!("dataset.spec: {e}"))?;
            }
        }
        match (&self.model.hidden, &self.model.trunk) {
            (Some(_), Some(_)) => bail!("model: give either `hidden` or `trunk`, not both"),
            (Some(h), None) if h.contains(&0) => bail!("model.hidden: widths must be >= 1"),
            _ => {}
        }

        let m = &self.method;
        let named = [
            ("alpha_min", m.alpha_min),
            ("alpha_max", m.alpha_max),
            ("alpha0", m.alpha0),
            ("tau_min", m.tau_min),
            ("tau_max", m.tau_max),
            ("tau0", m.tau0),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    bail!("method.{name}: {v} must be finite and >= 0");
                }
            }
        }
        if let Some(r) = m.rho_init {
            if !r.is_finite() {
                bail!("method.rho_init: must be finite");
            }
        }
        let cl = self.cl_config();
        if cl.alpha_min > cl.alpha_max {
            bail!(
                "method.alpha_min: {} exceeds alpha_max {}",
                cl.alpha_min,
                cl.alpha_max
            );
        }
        if cl.tau_min > cl.tau_max {
            bail!(
                "method.tau_min: {} exceeds tau_max {}",
                cl.tau_min,
                cl.tau_max
            );
        }

        let t = &self.train;
        if t.max_epochs == 0 {
            bail!("train.max_epochs: must be >= 1");
        }
        if t.batch_size == 0 {
            bail!("train.batch_size: must be >= 1");
        }
        if t.patience == 0 {
            bail!("train.patience: must be >= 1");
        }
        if !(t.min_delta >= 0.0) {
            bail!("train.min_delta: {} must be >= 0", t.min_delta);
        }
        t.validate()
            .map_err(|e| anyhow::anyhow!("train.optimizer: {e}"))?;

        let p = &self.prune;
        if p.fractions.is_empty() {
            bail!("prune.fractions: must not be empty");
        }
        if let Some(f) = p.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            bail!("prune.fractions: {f} outside [0, 1]");
        }
        if p.fractions.windows(2).any(|w| !(w[1] > w[0])) {
            bail!("prune.fractions: must be strictly increasing");
        }
        cl.validate().map_err(|e| anyhow::anyhow!("method: {e}"))?;
        Ok(())
    }
}
