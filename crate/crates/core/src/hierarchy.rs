//! Per-layer encoder features, layer grouping and group pooling.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, FormatErrorKind, Result};
use crate::io::igt1::Archive;
use crate::rng;
use crate::tensor::Tensor;

/// `cls` and patch features of every encoder layer.
///
/// `cls` has shape `[L, D]`, `patches` has shape `[L, N, D]`. Layers are
/// stored in encoder order; index 0 is the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalFeatures {
    cls: Tensor,
    patches: Tensor,
}

impl HierarchicalFeatures {
    pub fn new(cls: Tensor, patches: Tensor) -> Result<Self> {
        if cls.rank() != 2 || patches.rank() != 3 {
            return Err(Error::dim("features", cls.shape(), patches.shape()));
        }
        let (l, d) = (cls.shape()[0], cls.shape()[1]);
        if patches.shape()[0] != l || patches.shape()[2] != d {
            return Err(Error::dim("features", cls.shape(), patches.shape()));
        }
        if l < 2 {
            return Err(Error::Config(format!(
                "features need at least 2 layers, got {l}"
            )));
        }
        if d == 0 || patches.shape()[1] == 0 {
            return Err(Error::Config("features need N >= 1 and D >= 1".into()));
        }
        Ok(Self { cls, patches })
    }

    pub fn layers(&self) -> usize {
        self.cls.shape()[0]
    }

    pub fn patches_per_layer(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.cls.shape()[1]
    }

    pub fn cls(&self) -> &Tensor {
        &self.cls
    }

    pub fn patches(&self) -> &Tensor {
        &self.patches
    }

    pub fn cls_of(&self, layer: usize) -> &[f64] {
        self.cls.row(layer)
    }

    /// Patch grid `[N, D]` of a 0-based layer as a slice.
    pub fn grid_of(&self, layer: usize) -> &[f64] {
        let len = self.patches_per_layer() * self.dim();
        &self.patches.data()[layer * len..(layer + 1) * len]
    }

    pub fn grid(&self, layer: usize) -> Tensor {
        Tensor::new(
            &[self.patches_per_layer(), self.dim()],
            self.grid_of(layer).to_vec(),
        )
        .expect("grid shape")
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.insert("cls", self.cls.clone()).expect("fresh archive");
        a.insert("patches", self.patches.clone()).expect("fresh archive");
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let missing = |n: &str| Error::format(FormatErrorKind::MissingTensor, 0, n);
        let cls = a.get("cls").ok_or_else(|| missing("cls"))?;
        let patches = a.get("patches").ok_or_else(|| missing("patches"))?;
        let consistent = cls.rank() == 2
            && patches.rank() == 3
            && patches.shape()[0] == cls.shape()[0]
            && patches.shape()[2] == cls.shape()[1];
        if !consistent {
            return Err(Error::format(
                FormatErrorKind::ShapeMismatch,
                0,
                format!(
                    "cls {:?} does not match patches {:?}",
                    cls.shape(),
                    patches.shape()
                ),
            ));
        }
        Self::new(cls.clone(), patches.clone())
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<HierarchicalFeatures> {
    HierarchicalFeatures::from_archive(&Archive::read(path)?)
}

pub fn save_features(f: &HierarchicalFeatures, path: impl AsRef<Path>) -> Result<()> {
    f.to_archive().write(path)
}

/// Partition of `L` layers into `K` contiguous groups of `L / K` layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    layers: usize,
    ranges: Vec<Range<usize>>,
}

impl GroupingScheme {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn groups(&self) -> usize {
        self.ranges.len()
    }

    /// 0-based, half-open layer ranges in encoder order.
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Inclusive 1-based `(first, last)` layer numbers of each group.
    pub fn layer_numbers(&self) -> Vec<(usize, usize)> {
        self.ranges.iter().map(|r| (r.start + 1, r.end)).collect()
    }

    fn check(&self, f: &HierarchicalFeatures) -> Result<()> {
        if self.layers != f.layers() {
            return Err(Error::dim("grouping", &[self.layers], &[f.layers()]));
        }
        Ok(())
    }
}

impl fmt::Display for GroupingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layer_numbers()
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

pub fn make_grouping(layers: usize, groups: usize) -> Result<GroupingScheme> {
    if groups == 0 || layers < groups {
        return Err(Error::Config(format!(
            "cannot split {layers} layers into {groups} groups"
        )));
    }
    if !layers.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "{groups} groups do not divide {layers} layers evenly"
        )));
    }
    let size = layers / groups;
    Ok(GroupingScheme {
        layers,
        ranges: (0..groups).map(|k| k * size..(k + 1) * size).collect(),
    })
}

fn mean_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; len];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean `cls` vector of each group, as `[D]` tensors.
pub fn pool_group_cls(f: &HierarchicalFeatures, g: &GroupingScheme) -> Result<Vec<Tensor>> {
    g.check(f)?;
    Ok(g.ranges
        .iter()
        .map(|r| Tensor::vector(mean_rows(r.clone().map(|l| f.cls_of(l)), f.dim())))
        .collect())
}

/// Mean patch grid of each group, as `[N, D]` tensors.
pub fn pool_group_patches(f: &HierarchicalFeatures, g: &GroupingScheme) -> Result<Vec<Tensor>> {
    g.check(f)?;
    let shape = [f.patches_per_layer(), f.dim()];
    Ok(g.ranges
        .iter()
        .map(|r| {
            let data = mean_rows(r.clone().map(|l| f.grid_of(l)), shape[0] * shape[1]);
            Tensor::new(&shape, data).expect("grid shape")
        })
        .collect())
}

/// Copy of the patch grid of layer `L - 1` (1-based), i.e. the second to last.
pub fn penultimate(f: &HierarchicalFeatures) -> Result<Tensor> {
    if f.layers() < 2 {
        return Err(Error::Config("penultimate layer needs L >= 2".into()));
    }
    Ok(f.grid(f.layers() - 2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummaries {
    pub cls_group: Vec<Tensor>,
    pub patch_group: Vec<Tensor>,
    pub penultimate: Tensor,
}

impl GroupSummaries {
    pub fn new(f: &HierarchicalFeatures, g: &GroupingScheme) -> Result<Self> {
        Ok(Self {
            cls_group: pool_group_cls(f, g)?,
            patch_group: pool_group_patches(f, g)?,
            penultimate: penultimate(f)?,
        })
    }

    pub fn groups(&self) -> usize {
        self.cls_group.len()
    }

    /// Group `cls` vectors stacked into one `[K, D]` tensor.
    pub fn cls_matrix(&self) -> Tensor {
        let d = self.cls_group[0].len();
        let data = self.cls_group.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&[self.groups(), d], data).expect("stacked cls")
    }
}

/// Generator settings for synthetic features.
///
/// Each layer `l` carries a unit direction `u_l` (mutually orthogonal across
/// layers). Patch row `n` of layer `l` is `signal * a_{l,n} * u_l + noise`,
/// where `a_{l,n} = 1 + 0.5 z` for a standard normal `z`. The `cls` vector of
/// a layer is the mean of its patch rows plus independent noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub layers: usize,
    pub patches: usize,
    pub dim: usize,
    pub seed: u64,
    /// Seed of the planted directions, shared by every sample of a task.
    pub direction_seed: u64,
    pub signal: f64,
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(layers: usize, patches: usize, dim: usize, seed: u64) -> Self {
        Self {
            layers,
            patches,
            dim,
            seed,
            direction_seed: seed,
            signal: 1.0,
            noise: 0.3,
        }
    }
}

/// `count` orthonormal directions in `dim` dimensions from Gram-Schmidt on
/// seeded Gaussian draws, as a `[count, dim]` tensor.
pub fn planted_directions(count: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if count == 0 || count > dim {
        return Err(Error::Config(format!(
            "cannot plant {count} orthogonal directions in {dim} dimensions"
        )));
    }
    let mut r = rng::seeded(rng::derive_seed(seed, 0xD1));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng::gaussian_vec(&mut r, dim);
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Tensor::from_rows(&basis)
}

pub fn synth_features(spec: &SynthSpec) -> Result<HierarchicalFeatures> {
    let SynthSpec {
        layers: l,
        patches: n,
        dim: d,
        ..
    } = *spec;
    if l < 2 || n == 0 || d == 0 {
        return Err(Error::Config(format!(
            "synthetic features need L >= 2, N >= 1, D >= 1 (got {l}, {n}, {d})"
        )));
    }
    let dirs = planted_directions(l, d, spec.direction_seed)?;
    let mut r = rng::seeded(rng::derive_seed(spec.seed, 0xFE));
    let mut patches = Vec::with_capacity(l * n * d);
    let mut cls = Vec::with_capacity(l * d);
    for layer in 0..l {
        let u = dirs.row(layer);
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let amp = spec.signal * (1.0 + 0.5 * rng::gaussian(&mut r));
            for (j, m) in mean.iter_mut().enumerate() {
                let v = amp * u[j] + spec.noise * rng::gaussian(&mut r);
                patches.push(v);
                *m += v / n as f64;
            }
        }
        cls.extend(mean.iter().map(|m| m + spec.noise * rng::gaussian(&mut r)));
    }
    HierarchicalFeatures::new(Tensor::new(&[l, d], cls)?, Tensor::new(&[l, n, d], patches)?)
}
