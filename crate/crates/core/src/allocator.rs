//! Instruction-conditioned weight allocation over layer groups.
//!
//! The instruction embedding becomes a single query token, the group `cls`
//! vectors become keys and values, and a stack of post-norm cross-attention
//! blocks feeds a linear head whose softmax is the group weighting.

use crate::embedding::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::graph::{AttentionVars, Graph, Var};
use crate::io::igt1::Archive;
use crate::params::{Init, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Group weights: nonnegative and summing to 1 within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Config("empty weight vector".into()));
        }
        if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain {
                op: "weight vector",
                detail: format!("component {v} is not a nonnegative number"),
            });
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Domain {
                op: "weight vector",
                detail: format!("components sum to {sum}"),
            });
        }
        Ok(Self(w))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }

    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocatorConfig {
    pub groups: usize,
    pub feature_dim: usize,
    pub sentence_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            feature_dim: 32,
            sentence_dim: 48,
            hidden: 64,
            heads: 4,
            blocks: 4,
            ffn_mult: 4,
        }
    }
}

const BLOCK_TENSORS: usize = 16;
const HEAD_W: &str = "alloc.head.w";

impl AllocatorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("groups", self.groups),
            ("feature_dim", self.feature_dim),
            ("sentence_dim", self.sentence_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("allocator {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.hidden < 2 {
            return Err(Error::Config("hidden width must be at least 2".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let h = self.hidden;
        let f = self.ffn_mult * h;
        let mut l = vec![
            ("alloc.sent.w".to_string(), vec![self.sentence_dim, h], Init::FanIn),
            ("alloc.sent.b".to_string(), vec![h], Init::Zeros),
            ("alloc.vis.w".to_string(), vec![self.feature_dim, h], Init::FanIn),
            ("alloc.vis.b".to_string(), vec![h], Init::Zeros),
        ];
        for i in 0..self.blocks {
            let p = |s: &str| format!("alloc.block{i}.{s}");
            for m in ["q", "k", "v", "o"] {
                l.push((p(&format!("attn.w{m}")), vec![h, h], Init::FanIn));
                l.push((p(&format!("attn.b{m}")), vec![h], Init::Zeros));
            }
            l.push((p("ln1.gamma"), vec![h], Init::Ones));
            l.push((p("ln1.beta"), vec![h], Init::Zeros));
            l.push((p("ffn.w1"), vec![h, f], Init::FanIn));
            l.push((p("ffn.b1"), vec![f], Init::Zeros));
            l.push((p("ffn.w2"), vec![f, h], Init::FanIn));
            l.push((p("ffn.b2"), vec![h], Init::Zeros));
            l.push((p("ln2.gamma"), vec![h], Init::Ones));
            l.push((p("ln2.beta"), vec![h], Init::Zeros));
        }
        l.push((HEAD_W.to_string(), vec![h, self.groups], Init::FanIn));
        l.push(("alloc.head.b".to_string(), vec![self.groups], Init::Zeros));
        l
    }

    /// Tensor names and shapes, in storage order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Integer encoding stored in checkpoints.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(
            [
                self.groups,
                self.feature_dim,
                self.sentence_dim,
                self.hidden,
                self.heads,
                self.blocks,
                self.ffn_mult,
            ]
            .iter()
            .map(|&v| v as f64)
            .collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = decode_counts(t, 7, "allocator config")?;
        let c = Self {
            groups: v[0],
            feature_dim: v[1],
            sentence_dim: v[2],
            hidden: v[3],
            heads: v[4],
            blocks: v[5],
            ffn_mult: v[6],
        };
        c.validate()?;
        Ok(c)
    }
}

/// Reads a vector of non-negative integers stored as `f64`.
pub(crate) fn decode_counts(t: &Tensor, n: usize, what: &str) -> Result<Vec<usize>> {
    use crate::error::FormatErrorKind;
    if t.shape() != [n] {
        return Err(Error::format(
            FormatErrorKind::ShapeMismatch,
            0,
            format!("{what}: expected [{n}], found {:?}", t.shape()),
        ));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{what}: {v} is not a count")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorParams {
    config: AllocatorConfig,
    set: ParamSet,
}

/// Weights drawn uniform in `±1/sqrt(fan_in)`, biases and layer-norm offsets
/// zero, layer-norm gains one.
pub fn init_params(config: &AllocatorConfig, seed: u64) -> Result<AllocatorParams> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    Ok(AllocatorParams {
        config: *config,
        set: ParamSet::init(&config.layout(), &mut r),
    })
}

impl AllocatorParams {
    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn head_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        let n = self.set.len();
        let (a, b) = self.set.tensors_mut()[n - 2..].split_at_mut(1);
        (&mut a[0], &mut b[0])
    }

    pub fn zero_head(&mut self) {
        let (w, b) = self.head_mut();
        w.data_mut().fill(0.0);
        b.data_mut().fill(0.0);
    }

    pub fn from_archive(archive: &Archive, config: &AllocatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: *config,
            set: ParamSet::from_archive(archive, &config.shapes())?,
        })
    }

    pub fn write_into(&self, archive: &mut Archive) -> Result<()> {
        self.set.write_into(archive)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut a = Archive::new();
        self.write_into(&mut a)?;
        a.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>, config: &AllocatorConfig) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, config)
    }

    /// Records the allocator forward pass on `g` given bound parameter
    /// variables (in storage order), `s` of shape `[D_s]` and `cls` of shape
    /// `[K, D]`. Returns the `[K]` weight variable.
    pub fn forward(&self, g: &mut Graph, p: &[Var], s: Var, cls: Var) -> Result<Var> {
        forward(&self.config, g, p, s, cls)
    }

    /// Runs the allocator on plain values.
    pub fn allocate(&self, s: &SentenceEmbedding, cls_group: &[Tensor]) -> Result<WeightVector> {
        let cls = stack_rows(cls_group, self.config.feature_dim)?;
        let mut g = Graph::new();
        let p = self.set.bind_frozen(&mut g);
        let sv = g.constant(s.to_tensor());
        let cv = g.constant(cls);
        let w = self.forward(&mut g, &p, sv, cv)?;
        Ok(WeightVector(g.value(w).data().to_vec()))
    }
}

/// Stacks `K` vectors of length `d` into `[K, d]`.
pub fn stack_rows(rows: &[Tensor], d: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup("stack_rows"));
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.shape() != [d] {
            return Err(Error::dim("stack_rows", &[d], r.shape()));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(&[rows.len(), d], data)
}

pub(crate) fn forward(
    c: &AllocatorConfig,
    g: &mut Graph,
    p: &[Var],
    s: Var,
    cls: Var,
) -> Result<Var> {
    if p.len() != 4 + c.blocks * BLOCK_TENSORS + 2 {
        return Err(Error::dim(
            "allocator parameters",
            &[4 + c.blocks * BLOCK_TENSORS + 2],
            &[p.len()],
        ));
    }
    if g.shape(s) != [c.sentence_dim] {
        return Err(Error::dim("allocate", &[c.sentence_dim], g.shape(s)));
    }
    if g.shape(cls) != [c.groups, c.feature_dim] {
        return Err(Error::dim("allocate", &[c.groups, c.feature_dim], g.shape(cls)));
    }
    let s_row = g.reshape(s, &[1, c.sentence_dim])?;
    let mut q = g.linear(s_row, p[0], p[1])?;
    let kv = g.linear(cls, p[2], p[3])?;
    for b in 0..c.blocks {
        let v = &p[4 + b * BLOCK_TENSORS..4 + (b + 1) * BLOCK_TENSORS];
        let attn = AttentionVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
        };
        let a = g.cross_attention(q, kv, attn, c.heads)?;
        let r = g.add(q, a)?;
        q = g.layer_norm(r, v[8], v[9])?;
        let h = g.linear(q, v[10], v[11])?;
        let h = g.gelu(h);
        let h = g.linear(h, v[12], v[13])?;
        let r = g.add(q, h)?;
        q = g.layer_norm(r, v[14], v[15])?;
    }
    let n = p.len();
    let logits = g.linear(q, p[n - 2], p[n - 1])?;
    let logits = g.reshape(logits, &[c.groups])?;
    g.softmax(logits)
}
