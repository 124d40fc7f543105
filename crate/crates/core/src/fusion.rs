//! Weighted fusion of group patch grids, penultimate concatenation, the
//! GELU adapter and the full forward pipeline.

use std::fmt;
use std::str::FromStr;

use crate::allocator::{AllocatorParams, WeightVector};
use crate::embedding::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hierarchy::{GroupSummaries, GroupingScheme, HierarchicalFeatures};
use crate::io::igt1::Archive;
use crate::params::{Init, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterConfig {
    /// Width `D` of each of the two concatenated grids.
    pub feature_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl AdapterConfig {
    /// Hidden and output width both `d_t`.
    pub fn new(feature_dim: usize, d_t: usize) -> Self {
        Self {
            feature_dim,
            hidden: d_t,
            out_dim: d_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("adapter widths must be positive".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        vec![
            ("adapter.proj1.w".into(), vec![2 * self.feature_dim, self.hidden], Init::FanIn),
            ("adapter.proj1.b".into(), vec![self.hidden], Init::Zeros),
            ("adapter.proj2.w".into(), vec![self.hidden, self.out_dim], Init::FanIn),
            ("adapter.proj2.b".into(), vec![self.out_dim], Init::Zeros),
        ]
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(vec![
            self.feature_dim as f64,
            self.hidden as f64,
            self.out_dim as f64,
        ])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = crate::allocator::decode_counts(t, 3, "adapter config")?;
        let c = Self {
            feature_dim: v[0],
            hidden: v[1],
            out_dim: v[2],
        };
        c.validate()?;
        Ok(c)
    }
}

/// `Proj2(GELU(Proj1(x)))` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    config: AdapterConfig,
    set: ParamSet,
}

impl AdapterParams {
    pub fn init(config: &AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        Ok(Self {
            config: *config,
            set: ParamSet::init(&config.layout(), &mut r),
        })
    }

    /// Builds parameters from explicit `(w1, b1, w2, b2)`.
    pub fn from_tensors(config: &AdapterConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::zeros(&config.shapes());
        set.assign(tensors)?;
        Ok(Self {
            config: *config,
            set,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn from_archive(archive: &Archive, config: &AdapterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: *config,
            set: ParamSet::from_archive(archive, &config.shapes())?,
        })
    }

    pub fn write_into(&self, archive: &mut Archive) -> Result<()> {
        self.set.write_into(archive)
    }

    /// Records the adapter on `g` for an `[N, 2D]` input.
    pub fn forward(&self, g: &mut Graph, p: &[Var], f_hat: Var) -> Result<Var> {
        adapt_on(g, p, f_hat)
    }
}

pub(crate) fn adapt_on(g: &mut Graph, p: &[Var], f_hat: Var) -> Result<Var> {
    let h = g.linear(f_hat, p[0], p[1])?;
    let h = g.gelu(h);
    g.linear(h, p[2], p[3])
}

/// The five fixed four-group weightings used as non-adaptive baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StaticPreset {
    Uniform,
    MonoIncrease,
    MonoDecrease,
    IncThenDec,
    DecThenInc,
}

impl StaticPreset {
    pub const ALL: [StaticPreset; 5] = [
        Self::Uniform,
        Self::MonoIncrease,
        Self::MonoDecrease,
        Self::IncThenDec,
        Self::DecThenInc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::MonoIncrease => "mono_increase",
            Self::MonoDecrease => "mono_decrease",
            Self::IncThenDec => "inc_then_dec",
            Self::DecThenInc => "dec_then_inc",
        }
    }

    /// Display label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Uniform => "Uniform",
            Self::MonoIncrease => "Monotonic increase",
            Self::MonoDecrease => "Monotonic decrease",
            Self::IncThenDec => "Increase-then-decrease",
            Self::DecThenInc => "Decrease-then-increase",
        }
    }

    pub fn weights(self) -> WeightVector {
        let w = match self {
            Self::Uniform => [0.25, 0.25, 0.25, 0.25],
            Self::MonoIncrease => [0.1, 0.2, 0.3, 0.4],
            Self::MonoDecrease => [0.4, 0.3, 0.2, 0.1],
            Self::IncThenDec => [0.1, 0.4, 0.4, 0.1],
            Self::DecThenInc => [0.4, 0.1, 0.1, 0.4],
        };
        WeightVector::new(w.to_vec()).expect("presets lie on the simplex")
    }
}

impl fmt::Display for StaticPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StaticPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown static preset {s:?}")))
    }
}

/// Preset weights for a `groups`-group scheme. Presets exist only for 4 groups.
pub fn static_preset(name: &str, groups: usize) -> Result<WeightVector> {
    let preset: StaticPreset = name.parse()?;
    if groups != 4 {
        return Err(Error::Config(format!(
            "static presets are defined for 4 groups, not {groups}"
        )));
    }
    Ok(preset.weights())
}

/// Where the group weighting comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Run the allocator.
    Dynamic,
    /// Use the given weights; the allocator is not evaluated.
    Static(WeightVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    /// `[N, D]`.
    pub f_fused: Tensor,
    /// `[N, 2D]`, fused columns first.
    pub f_hat: Tensor,
    /// `[N, D_t]`.
    pub adapted: Tensor,
}

fn with_constants(
    f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[&Tensor],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let v = f(&mut g, &vars)?;
    Ok(g.value(v).clone())
}

/// `sum_k w_k F_k`.
pub fn fuse(w: &WeightVector, patch_group: &[Tensor]) -> Result<Tensor> {
    let wt = w.to_tensor();
    let mut inputs = vec![&wt];
    inputs.extend(patch_group);
    with_constants(|g, v| g.weighted_sum(v[0], &v[1..]), &inputs)
}

pub fn concat_with_penultimate(f_fused: &Tensor, pen: &Tensor) -> Result<Tensor> {
    if f_fused.shape() != pen.shape() || f_fused.rank() != 2 {
        return Err(Error::dim("concat_with_penultimate", f_fused.shape(), pen.shape()));
    }
    with_constants(|g, v| g.concat_channels(v[0], v[1]), &[f_fused, pen])
}

pub fn adapt(f_hat: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    let width = 2 * params.config.feature_dim;
    if f_hat.rank() != 2 || f_hat.cols() != width {
        return Err(Error::dim("adapt", f_hat.shape(), &[f_hat.rows(), width]));
    }
    let mut g = Graph::new();
    let x = g.constant(f_hat.clone());
    let p = params.set.bind_frozen(&mut g);
    let y = adapt_on(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Graph handles of one pipeline evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PipelineVars {
    pub w: Var,
    pub f_fused: Var,
    pub f_hat: Var,
    pub adapted: Var,
}

/// Leaf handles for one sample's inputs.
#[derive(Debug, Clone)]
pub struct SampleVars {
    pub s: Option<Var>,
    pub cls: Option<Var>,
    pub patch_group: Vec<Var>,
    pub penultimate: Var,
}

impl SampleVars {
    pub fn constants(g: &mut Graph, s: &SentenceEmbedding, sums: &GroupSummaries) -> Self {
        Self {
            s: Some(g.constant(s.to_tensor())),
            cls: Some(g.constant(sums.cls_matrix())),
            patch_group: sums.patch_group.iter().map(|t| g.constant(t.clone())).collect(),
            penultimate: g.constant(sums.penultimate.clone()),
        }
    }

    /// Patch inputs only, for runs that never evaluate the allocator.
    pub fn constants_without_embedding(g: &mut Graph, sums: &GroupSummaries) -> Self {
        Self {
            s: None,
            cls: None,
            patch_group: sums.patch_group.iter().map(|t| g.constant(t.clone())).collect(),
            penultimate: g.constant(sums.penultimate.clone()),
        }
    }
}

/// Records the pipeline on `g`. `alloc` and `adapter` are the bound
/// parameter variables of `aparams` and `adparams`.
pub fn pipeline_on(
    g: &mut Graph,
    x: &SampleVars,
    aparams: &AllocatorParams,
    alloc: &[Var],
    adapter: &[Var],
    mode: &Mode,
) -> Result<PipelineVars> {
    let w = match mode {
        Mode::Dynamic => match (x.s, x.cls) {
            (Some(s), Some(cls)) => aparams.forward(g, alloc, s, cls)?,
            _ => return Err(Error::Config("dynamic mode needs the embedding and cls inputs".into())),
        },
        Mode::Static(w) => {
            if w.len() != x.patch_group.len() {
                return Err(Error::dim("static weights", &[w.len()], &[x.patch_group.len()]));
            }
            g.constant(w.to_tensor())
        }
    };
    fuse_and_adapt_on(g, x, w, adapter)
}

/// Records fusion, concatenation and adaptation for a given weight variable.
pub fn fuse_and_adapt_on(g: &mut Graph, x: &SampleVars, w: Var, adapter: &[Var]) -> Result<PipelineVars> {
    let f_fused = g.weighted_sum(w, &x.patch_group)?;
    if g.shape(f_fused) != g.shape(x.penultimate) {
        return Err(Error::dim("concat_with_penultimate", g.shape(f_fused), g.shape(x.penultimate)));
    }
    let f_hat = g.concat_channels(f_fused, x.penultimate)?;
    let adapted = adapt_on(g, adapter, f_hat)?;
    Ok(PipelineVars {
        w,
        f_fused,
        f_hat,
        adapted,
    })
}

/// Group pooling, weighting, fusion, concatenation and adaptation on plain
/// values.
pub fn pipeline_forward(
    f: &HierarchicalFeatures,
    grouping: &GroupingScheme,
    s: &SentenceEmbedding,
    aparams: &AllocatorParams,
    adparams: &AdapterParams,
    mode: &Mode,
) -> Result<(WeightVector, FusedRepresentation)> {
    let sums = GroupSummaries::new(f, grouping)?;
    pipeline_summaries(&sums, s, aparams, adparams, mode)
}

/// As [`pipeline_forward`] for precomputed group summaries.
pub fn pipeline_summaries(
    sums: &GroupSummaries,
    s: &SentenceEmbedding,
    aparams: &AllocatorParams,
    adparams: &AdapterParams,
    mode: &Mode,
) -> Result<(WeightVector, FusedRepresentation)> {
    match mode {
        Mode::Static(w) => Ok((w.clone(), static_pipeline(sums, w, adparams)?)),
        Mode::Dynamic => {
            let mut g = Graph::new();
            let x = SampleVars::constants(&mut g, s, sums);
            let alloc = aparams.set().bind_frozen(&mut g);
            let adapter = adparams.set.bind_frozen(&mut g);
            let v = pipeline_on(&mut g, &x, aparams, &alloc, &adapter, mode)?;
            let w = WeightVector::new(g.value(v.w).data().to_vec())?;
            Ok((w, representation(&g, &v)))
        }
    }
}

/// Fusion, concatenation and adaptation with fixed weights.
pub fn static_pipeline(
    sums: &GroupSummaries,
    w: &WeightVector,
    adparams: &AdapterParams,
) -> Result<FusedRepresentation> {
    let mut g = Graph::new();
    let x = SampleVars::constants_without_embedding(&mut g, sums);
    let wv = g.constant(w.to_tensor());
    let adapter = adparams.set.bind_frozen(&mut g);
    let v = fuse_and_adapt_on(&mut g, &x, wv, &adapter)?;
    Ok(representation(&g, &v))
}

fn representation(g: &Graph, v: &PipelineVars) -> FusedRepresentation {
    FusedRepresentation {
        f_fused: g.value(v.f_fused).clone(),
        f_hat: g.value(v.f_hat).clone(),
        adapted: g.value(v.adapted).clone(),
    }
}
