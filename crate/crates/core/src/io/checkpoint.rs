//! Training checkpoints: model parameters plus everything needed to rebuild
//! the task they were trained on, in one IGT1 archive.

use std::path::Path;

use super::igt1::Archive;
use crate::allocator::{AllocatorConfig, AllocatorParams};
use crate::error::{Error, FormatErrorKind, Result};
use crate::fusion::{AdapterConfig, AdapterParams};
use crate::tensor::Tensor;
use crate::training::{Model, TaskSpec};

const ALLOCATOR: &str = "meta.allocator";
const ADAPTER: &str = "meta.adapter";
const TASK: &str = "meta.task";
const SEED: &str = "meta.seed";
const PROFILES: &str = "meta.profiles";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: TaskSpec,
    pub model: Model,
}

/// A `u64` as two exactly representable 32-bit halves.
fn seed_tensor(seed: u64) -> Tensor {
    Tensor::vector(vec![(seed >> 32) as f64, (seed & 0xFFFF_FFFF) as f64])
}

fn seed_from(t: &Tensor) -> Result<u64> {
    let d = t.data();
    let half = |v: f64| {
        if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
            Ok(v as u64)
        } else {
            Err(Error::format(FormatErrorKind::ShapeMismatch, 0, format!("{SEED}: bad value {v}")))
        }
    };
    Ok((half(d[0])? << 32) | half(d[1])?)
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert(ALLOCATOR, self.model.allocator.config().to_tensor())?;
        a.insert(ADAPTER, self.model.adapter.config().to_tensor())?;
        a.insert(TASK, self.task.to_tensor())?;
        a.insert(SEED, seed_tensor(self.task.seed))?;
        if let Some(p) = &self.task.profiles {
            let k = self.task.groups;
            a.insert(PROFILES, Tensor::new(&[p.len(), k], p.concat())?)?;
        }
        self.model.allocator.write_into(&mut a)?;
        self.model.adapter.write_into(&mut a)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let alloc_cfg = AllocatorConfig::from_tensor(a.require(ALLOCATOR, &[7])?)?;
        let adapter_cfg = AdapterConfig::from_tensor(a.require(ADAPTER, &[3])?)?;
        let seed = seed_from(a.require(SEED, &[2])?)?;
        let mut task = TaskSpec::from_tensor(a.require(TASK, &[15])?, seed)?;
        if a.get(PROFILES).is_some() {
            let p = a.require(PROFILES, &[task.clusters, task.groups])?;
            task.profiles = Some((0..task.clusters).map(|c| p.row(c).to_vec()).collect());
            task.validate()?;
        }
        let model = Model {
            allocator: AllocatorParams::from_archive(a, &alloc_cfg)?,
            adapter: AdapterParams::from_archive(a, &adapter_cfg)?,
        };
        Ok(Self { task, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}
