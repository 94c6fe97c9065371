//! Experiment configuration: one JSON file drives every subcommand.
//!
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults. Every field has a default; an empty object
//! `{}` is a valid config describing the standard benchmark.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fsnas_core::space::{OpDesc, OpKind, OpVocab, SearchSpace};
use fsnas_core::{BudgetConfig, DatasetConfig, SearchConfig, TrainHyper, TrainMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub space: SpaceSection,
    pub training: TrainingSection,
    pub split: SplitSection,
    pub search: SearchSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub sizes: [usize; 3],
    pub label_noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            seed: d.seed,
            sizes: d.sizes,
            label_noise: d.label_noise,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    /// Intermediate node count; edges are all forward pairs.
    pub nodes: usize,
    /// Ops per edge when `vocab` is not given.
    pub ops: usize,
    pub hidden: usize,
    /// Explicit op names overriding `ops` (e.g. ["zero", "linear_relu"]).
    pub vocab: Option<Vec<String>>,
}

impl Default for SpaceSection {
    fn default() -> Self {
        Self {
            nodes: 4,
            ops: 5,
            hidden: 16,
            vocab: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub oracle: OracleSection,
    pub root: ScheduleSection,
    pub child: ScheduleSection,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            oracle: OracleSection::default(),
            root: ScheduleSection { epochs: 300 },
            child: ScheduleSection { epochs: 50 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Refuse to enumerate spaces larger than this.
    pub cap: u128,
}

impl Default for OracleSection {
    fn default() -> Self {
        let h = TrainHyper::oracle(0);
        Self {
            epochs: h.epochs,
            batch_size: h.batch_size,
            lr0: h.lr0,
            momentum: h.momentum,
            weight_decay: h.weight_decay,
            seed: 0,
            cap: fsnas_core::DEFAULT_ORACLE_CAP,
        }
    }
}

/// Root and child supernet schedules only expose length; the rest of the
/// supernet recipe (batch, learning rate, decay) is fixed by the trainer.
/// `epochs` is mandatory once the section is spelled out, so `"root": {}`
/// cannot silently mean zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub total_epoch_budget: usize,
    pub wall_clock_secs: Option<f64>,
    /// Fixed split order; omit to draw edges from the split stream.
    pub edges: Option<Vec<usize>>,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for SplitSection {
    fn default() -> Self {
        let b = BudgetConfig::default();
        Self {
            total_epoch_budget: b.total_epoch_budget,
            wall_clock_secs: b.wall_clock_secs,
            edges: b.split_edges,
            seed: b.seed,
            mode: TrainMode::SinglePath,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub algorithm: String,
    pub sample_budget: usize,
    pub k: usize,
    pub population: usize,
    pub tournament: usize,
    pub reinforce_lr: f64,
    pub baseline_decay: f64,
    pub random_without_replacement: bool,
    pub seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            algorithm: "random".into(),
            sample_budget: s.sample_budget,
            k: s.k,
            population: s.population,
            tournament: s.tournament,
            reinforce_lr: s.reinforce_lr,
            baseline_decay: s.baseline_decay,
            random_without_replacement: s.random_without_replacement,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec!["csv".into()],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("config {} is invalid", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.output.formats {
            if f != "csv" {
                bail!("unsupported output format {f:?} (only \"csv\")");
            }
        }
        if let Some(vocab) = &self.space.vocab {
            if vocab.is_empty() {
                bail!("space.vocab must list at least one op");
            }
        }
        Ok(())
    }

    pub fn build_space(&self) -> Result<Arc<SearchSpace>> {
        let vocab = match &self.space.vocab {
            Some(names) => {
                let ops = names
                    .iter()
                    .enumerate()
                    .map(|(id, name)| {
                        let kind = op_kind_by_name(name)
                            .with_context(|| format!("unknown op {name:?} in space.vocab"))?;
                        Ok(OpDesc {
                            id,
                            name: name.clone(),
                            kind,
                            param_shape: kind.param_shape(self.space.hidden),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                OpVocab::new(ops)?
            }
            None => OpVocab::with_size(self.space.ops, self.space.hidden)?,
        };
        Ok(Arc::new(SearchSpace::new(
            self.space.nodes,
            self.space.hidden,
            vocab,
        )?))
    }

    pub fn build_dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.dataset.seed,
            sizes: self.dataset.sizes,
            label_noise: self.dataset.label_noise,
            ..DatasetConfig::default()
        }
    }

    /// Oracle schedule; `seed_override` is the --seed flag.
    pub fn build_oracle_hyper(&self, seed_override: Option<u64>) -> TrainHyper {
        TrainHyper {
            epochs: self.training.oracle.epochs,
            batch_size: self.training.oracle.batch_size,
            lr0: self.training.oracle.lr0,
            momentum: self.training.oracle.momentum,
            weight_decay: self.training.oracle.weight_decay,
            ..TrainHyper::oracle(seed_override.unwrap_or(self.training.oracle.seed))
        }
    }

    pub fn build_budget(&self, seed_override: Option<u64>) -> BudgetConfig {
        BudgetConfig {
            total_epoch_budget: self.split.total_epoch_budget,
            wall_clock_secs: self.split.wall_clock_secs,
            root_epochs: self.training.root.epochs,
            child_epochs: self.training.child.epochs,
            split_edges: self.split.edges.clone(),
            seed: seed_override.unwrap_or(self.split.seed),
        }
    }

    pub fn build_search(&self, seed_override: Option<u64>) -> SearchConfig {
        SearchConfig {
            sample_budget: self.search.sample_budget,
            k: self.search.k,
            population: self.search.population,
            tournament: self.search.tournament,
            reinforce_lr: self.search.reinforce_lr,
            baseline_decay: self.search.baseline_decay,
            random_without_replacement: self.search.random_without_replacement,
            seed: seed_override.unwrap_or(self.search.seed),
        }
    }
}

pub(crate) fn op_kind_by_name(name: &str) -> Option<OpKind> {
    let stem = name.strip_suffix("_b").unwrap_or(name);
    Some(match stem {
        "zero" => OpKind::Zero,
        "identity" => OpKind::Identity,
        "linear_relu" => OpKind::LinearRelu,
        "linear_tanh" => OpKind::LinearTanh,
        "diag_scale" => OpKind::DiagScale,
        _ => return None,
    })
}
