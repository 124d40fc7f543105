//! TOML run configuration.
//!
//! Every field is optional and falls back to the documented default; unknown
//! keys are rejected. Errors carry the 1-based line of the offending key.
//!
//! ```toml
//! seed = 0
//!
//! [hierarchy]
//! layers = 8          # encoder layers L
//! groups = 4          # visual groups K (must divide L)
//! patches = 16        # patch tokens N
//! feature_dim = 32    # feature width D (>= L)
//!
//! [task]
//! clusters = 3
//! sentence_dim = 48
//! readout_dim = 16
//! train_per_cluster = 128
//! heldout_per_cluster = 32
//! noise_scale = 0.01
//! contrast = 1.0
//! embedding_spread = 0.1
//! min_profile_gap = 0.5
//! # profiles = [[0.7, 0.1, 0.1, 0.1], ...]   # optional, one row per cluster
//!
//! [allocator]
//! hidden = 64
//! heads = 4
//! blocks = 4
//! ffn_mult = 4
//!
//! [adapter]
//! dim = 64            # output width D_t
//! hidden = 64
//! init = "teacher"    # or "random"
//! lr_scale = 0.01     # adapter lr relative to training.lr
//!
//! [training]
//! lr = 3e-3
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! weight_decay = 1e-4
//! lambda = 0.02
//! steps = 2000
//! batch = 32
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::allocator::AllocatorConfig;
use crate::error::{Error, Result};
use crate::training::{AdamWConfig, AdapterInit, TaskSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySection {
    pub layers: usize,
    pub groups: usize,
    pub patches: usize,
    pub feature_dim: usize,
}

impl Default for HierarchySection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            layers: t.layers,
            groups: t.groups,
            patches: t.patches,
            feature_dim: t.feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub clusters: usize,
    pub sentence_dim: usize,
    pub readout_dim: usize,
    pub train_per_cluster: usize,
    pub heldout_per_cluster: usize,
    pub noise_scale: f64,
    pub contrast: f64,
    pub embedding_spread: f64,
    pub min_profile_gap: f64,
    pub profiles: Option<Vec<Vec<f64>>>,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            clusters: t.clusters,
            sentence_dim: t.sentence_dim,
            readout_dim: t.readout_dim,
            train_per_cluster: t.train_per_cluster,
            heldout_per_cluster: t.heldout_per_cluster,
            noise_scale: t.noise_scale,
            contrast: t.contrast,
            embedding_spread: t.embedding_spread,
            min_profile_gap: t.min_profile_gap,
            profiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocatorSection {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
}

impl Default for AllocatorSection {
    fn default() -> Self {
        let a = AllocatorConfig::default();
        Self {
            hidden: a.hidden,
            heads: a.heads,
            blocks: a.blocks,
            ffn_mult: a.ffn_mult,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Teacher,
    Random,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub dim: usize,
    pub hidden: usize,
    pub init: InitKind,
    pub lr_scale: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            dim: t.adapter_dim,
            hidden: t.adapter_hidden,
            init: InitKind::Teacher,
            lr_scale: TrainConfig::default().adapter_lr_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.optimizer.lr,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            weight_decay: t.optimizer.weight_decay,
            lambda: t.lambda,
            steps: t.steps,
            batch: t.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub hierarchy: HierarchySection,
    pub task: TaskSection,
    pub allocator: AllocatorSection,
    pub adapter: AdapterSection,
    pub training: TrainingSection,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Line of `key` inside `[section]` (or at top level when `section` is
/// empty), falling back to the section header, then to line 1.
fn locate(src: &str, section: &str, key: &str) -> usize {
    let Ok(doc) = toml::de::DeTable::parse(src) else {
        return 1;
    };
    let doc = doc.get_ref();
    let find = |table: &toml::de::DeTable, k: &str| {
        table
            .iter()
            .find(|(name, _)| name.get_ref().as_ref() == k)
            .map(|(name, _)| name.span().start)
    };
    let offset = if section.is_empty() {
        find(doc, key)
    } else {
        doc.iter()
            .find(|(name, _)| name.get_ref().as_ref() == section)
            .and_then(|(name, value)| match value.get_ref() {
                toml::de::DeValue::Table(t) => find(t, key).or(Some(name.span().start)),
                _ => Some(name.span().start),
            })
    };
    offset.map_or(1, |o| line_of(src, o))
}

struct Check<'a> {
    src: &'a str,
}

impl Check<'_> {
    fn require(&self, ok: bool, section: &str, key: &str, message: impl FnOnce() -> String) -> Result<()> {
        if ok {
            return Ok(());
        }
        let name = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        Err(Error::ConfigAt {
            line: locate(self.src, section, key),
            message: format!("{name}: {}", message()),
        })
    }

    fn positive(&self, section: &str, key: &str, v: usize) -> Result<()> {
        self.require(v > 0, section, key, || "must be at least 1".into())
    }

    fn positive_f(&self, section: &str, key: &str, v: f64) -> Result<()> {
        self.require(v > 0.0 && v.is_finite(), section, key, || format!("must be positive, got {v}"))
    }

    fn nonneg_f(&self, section: &str, key: &str, v: f64) -> Result<()> {
        self.require(v >= 0.0 && v.is_finite(), section, key, || {
            format!("must be nonnegative, got {v}")
        })
    }
}

impl RunConfig {
    /// Parses and validates a config document.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| Error::ConfigAt {
            line: e.span().map_or(1, |s| line_of(src, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate_against(src)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&src)
    }

    /// Checks value ranges and cross-field constraints. `src` is used only to
    /// report line numbers.
    pub fn validate_against(&self, src: &str) -> Result<()> {
        let c = Check { src };
        let h = &self.hierarchy;
        for (k, v) in [("layers", h.layers), ("patches", h.patches), ("feature_dim", h.feature_dim)] {
            c.positive("hierarchy", k, v)?;
        }
        c.require(h.groups >= 2, "hierarchy", "groups", || format!("must be at least 2, got {}", h.groups))?;
        c.require(h.layers.is_multiple_of(h.groups), "hierarchy", "groups", || {
            format!("{} groups do not divide {} layers", h.groups, h.layers)
        })?;
        c.require(h.layers <= h.feature_dim, "hierarchy", "feature_dim", || {
            format!("must be at least layers ({})", h.layers)
        })?;

        let t = &self.task;
        c.require(t.clusters >= 2, "task", "clusters", || format!("must be at least 2, got {}", t.clusters))?;
        for (k, v) in [
            ("sentence_dim", t.sentence_dim),
            ("readout_dim", t.readout_dim),
            ("train_per_cluster", t.train_per_cluster),
            ("heldout_per_cluster", t.heldout_per_cluster),
        ] {
            c.positive("task", k, v)?;
        }
        c.nonneg_f("task", "noise_scale", t.noise_scale)?;
        c.positive_f("task", "contrast", t.contrast)?;
        c.nonneg_f("task", "embedding_spread", t.embedding_spread)?;
        c.nonneg_f("task", "min_profile_gap", t.min_profile_gap)?;
        if let Some(p) = &t.profiles {
            c.require(p.len() == t.clusters, "task", "profiles", || {
                format!("expected {} rows, got {}", t.clusters, p.len())
            })?;
            for row in p {
                c.require(row.len() == h.groups, "task", "profiles", || {
                    format!("each row needs {} weights", h.groups)
                })?;
                let sum: f64 = row.iter().sum();
                c.require(
                    row.iter().all(|w| *w >= 0.0) && (sum - 1.0).abs() <= 1e-9,
                    "task",
                    "profiles",
                    || format!("row {row:?} is not on the simplex"),
                )?;
            }
        }

        let a = &self.allocator;
        for (k, v) in [("hidden", a.hidden), ("heads", a.heads), ("blocks", a.blocks), ("ffn_mult", a.ffn_mult)] {
            c.positive("allocator", k, v)?;
        }
        c.require(a.hidden.is_multiple_of(a.heads), "allocator", "heads", || {
            format!("{} heads do not divide hidden width {}", a.heads, a.hidden)
        })?;

        let d = &self.adapter;
        c.positive("adapter", "dim", d.dim)?;
        c.positive("adapter", "hidden", d.hidden)?;
        c.nonneg_f("adapter", "lr_scale", d.lr_scale)?;

        let r = &self.training;
        c.positive_f("training", "lr", r.lr)?;
        for (k, v) in [("beta1", r.beta1), ("beta2", r.beta2)] {
            c.require((0.0..1.0).contains(&v), "training", k, || format!("must lie in [0, 1), got {v}"))?;
        }
        c.positive_f("training", "eps", r.eps)?;
        c.nonneg_f("training", "weight_decay", r.weight_decay)?;
        c.nonneg_f("training", "lambda", r.lambda)?;
        c.positive("training", "batch", r.batch)?;

        self.task_spec().validate()?;
        self.allocator_config().validate()?;
        self.train_config().validate()
    }

    pub fn task_spec(&self) -> TaskSpec {
        let (h, t) = (&self.hierarchy, &self.task);
        TaskSpec {
            clusters: t.clusters,
            groups: h.groups,
            layers: h.layers,
            patches: h.patches,
            feature_dim: h.feature_dim,
            sentence_dim: t.sentence_dim,
            adapter_dim: self.adapter.dim,
            adapter_hidden: self.adapter.hidden,
            readout_dim: t.readout_dim,
            train_per_cluster: t.train_per_cluster,
            heldout_per_cluster: t.heldout_per_cluster,
            noise_scale: t.noise_scale,
            contrast: t.contrast,
            embedding_spread: t.embedding_spread,
            min_profile_gap: t.min_profile_gap,
            profiles: t.profiles.clone(),
            seed: self.seed,
        }
    }

    pub fn allocator_config(&self) -> AllocatorConfig {
        let a = &self.allocator;
        AllocatorConfig {
            groups: self.hierarchy.groups,
            feature_dim: self.hierarchy.feature_dim,
            sentence_dim: self.task.sentence_dim,
            hidden: a.hidden,
            heads: a.heads,
            blocks: a.blocks,
            ffn_mult: a.ffn_mult,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let r = &self.training;
        TrainConfig {
            optimizer: AdamWConfig {
                lr: r.lr,
                beta1: r.beta1,
                beta2: r.beta2,
                eps: r.eps,
                weight_decay: r.weight_decay,
            },
            lambda: r.lambda,
            steps: r.steps,
            batch: r.batch,
            seed: self.seed,
            adapter_init: match self.adapter.init {
                InitKind::Teacher => AdapterInit::Teacher,
                InitKind::Random => AdapterInit::Random,
            },
            adapter_lr_scale: self.adapter.lr_scale,
        }
    }
}
