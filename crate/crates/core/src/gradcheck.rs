//! Central finite-difference verification of recorded gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step, restricted to `[1e-7, 1e-4]`.
    pub step: f64,
    /// Bound on the relative error of every checked element.
    pub tol: f64,
    /// When a tensor's largest analytic gradient is below this, its absolute
    /// error is compared against `abs_tol * max(1, |f|)` instead.
    pub abs_threshold: f64,
    pub abs_tol: f64,
    /// Check a seeded random subset of at most this many elements per
    /// parameter tensor. `None` checks every element.
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 3e-5,
            tol: 1e-6,
            abs_threshold: 1e-8,
            abs_tol: 1e-10,
            max_elements_per_param: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest absolute error among tensors compared on the absolute branch.
    pub max_abs_error: f64,
    pub checked: usize,
    /// (parameter index, element index) of the largest deviation in the
    /// tensor with the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::Evaluation(format!(
            "function must return a scalar, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is {v}")));
    }
    Ok(v)
}

fn pick_indices(len: usize, limit: Option<usize>, rng: &mut rng::SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    match limit {
        Some(k) if k < len => {
            // Partial Fisher-Yates.
            for i in 0..k {
                let j = i + (rng::unit(rng) * (len - i) as f64) as usize;
                idx.swap(i, j.min(len - 1));
            }
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => idx,
    }
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences `(f(x + h) - f(x - h)) / 2h` for every checked element.
///
/// Errors are measured per parameter tensor in the max norm:
/// `max|a - n| / max(max|a|, max|n|)`. A tensor whose analytic gradient stays
/// below `abs_threshold` everywhere is compared on `max|a - n|` alone,
/// against `abs_tol * max(1, |f|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&cfg.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            cfg.step
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v0 = g.value(out);
    if v0.len() != 1 || !v0.is_finite() {
        return Err(Error::Evaluation(format!(
            "function must return a finite scalar, got {:?}",
            v0.data()
        )));
    }
    // Central differences of a function near |f| cannot resolve gradients
    // much below ulp(f) / 2h, so the absolute bound grows with |f|.
    let abs_bound = cfg.abs_tol * v0.item().abs().max(1.0);
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    let mut sampler = rng::seeded(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let (mut max_diff, mut max_analytic, mut max_numeric) = (0.0f64, 0.0f64, 0.0f64);
        let mut worst_elem = 0;
        for ei in pick_indices(param.len(), cfg.max_elements_per_param, &mut sampler) {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + cfg.step;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig - cfg.step;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi].data()[ei];
            let diff = (a - numeric).abs();
            if diff > max_diff {
                max_diff = diff;
                worst_elem = ei;
            }
            max_analytic = max_analytic.max(a.abs());
            max_numeric = max_numeric.max(numeric.abs());
            report.checked += 1;
        }
        if max_analytic < cfg.abs_threshold {
            report.max_abs_error = report.max_abs_error.max(max_diff);
            if max_diff >= abs_bound {
                report.passed = false;
            }
        } else {
            let rel = max_diff / max_analytic.max(max_numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, worst_elem));
            }
            if rel >= cfg.tol {
                report.passed = false;
            }
        }
    }
    Ok(report)
}

/// Problem sizes for the op and end-to-end suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimsPreset {
    /// A handful of elements per tensor; every element is checked.
    Toy,
    /// The default training dimensions.
    Desk,
}

impl std::str::FromStr for DimsPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown dims preset {s:?} (expected toy or desk)"))),
        }
    }
}

struct OpDims {
    rows: usize,
    width: usize,
    out: usize,
    groups: usize,
    heads: usize,
}

impl DimsPreset {
    fn op_dims(self) -> OpDims {
        match self {
            Self::Toy => OpDims {
                rows: 3,
                width: 4,
                out: 2,
                groups: 3,
                heads: 2,
            },
            Self::Desk => OpDims {
                rows: 16,
                width: 32,
                out: 64,
                groups: 4,
                heads: 4,
            },
        }
    }

    /// Elements sampled per tensor in the end-to-end check.
    pub fn e2e_subset(self) -> Option<usize> {
        match self {
            Self::Toy => None,
            Self::Desk => Some(64),
        }
    }
}

fn scaled_gaussian(r: &mut rng::SeededRng, shape: &[usize], scale: f64) -> Tensor {
    let t = rng::gaussian_tensor(r, shape);
    let data = t.data().iter().map(|v| v * scale).collect();
    Tensor::new(shape, data).expect("same shape")
}

fn attention_from(v: &[Var]) -> crate::graph::AttentionVars {
    crate::graph::AttentionVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

/// Checks one differentiable op on seeded random inputs. The op output is
/// reduced to a scalar by an inner product with a fixed random tensor, so
/// every output element contributes to the checked gradient.
pub fn check_op(op: crate::graph::OpKind, dims: DimsPreset, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    use crate::graph::OpKind;

    let OpDims {
        rows: n,
        width: d,
        out: o,
        groups: k,
        heads,
    } = dims.op_dims();
    let mut r = rng::seeded(seed);
    let fan = |x: usize| 1.0 / (x as f64).sqrt();
    let (params, out_shape): (Vec<Tensor>, Vec<usize>) = match op {
        OpKind::Linear => (
            vec![
                rng::gaussian_tensor(&mut r, &[n, d]),
                scaled_gaussian(&mut r, &[d, o], fan(d)),
                rng::gaussian_tensor(&mut r, &[o]),
            ],
            vec![n, o],
        ),
        OpKind::Gelu | OpKind::Softmax | OpKind::Scale | OpKind::Reshape => {
            (vec![rng::gaussian_tensor(&mut r, &[n, d])], vec![n, d])
        }
        OpKind::LayerNorm => (
            vec![
                rng::gaussian_tensor(&mut r, &[n, d]),
                rng::gaussian_tensor(&mut r, &[d]),
                rng::gaussian_tensor(&mut r, &[d]),
            ],
            vec![n, d],
        ),
        OpKind::CrossAttention => {
            let mut p = vec![rng::gaussian_tensor(&mut r, &[1, d]), rng::gaussian_tensor(&mut r, &[k, d])];
            for _ in 0..4 {
                p.push(scaled_gaussian(&mut r, &[d, d], fan(d)));
                p.push(scaled_gaussian(&mut r, &[d], 0.5));
            }
            (p, vec![1, d])
        }
        OpKind::MeanOverFirstAxis => ((0..k).map(|_| rng::gaussian_tensor(&mut r, &[n, d])).collect(), vec![n, d]),
        OpKind::WeightedSum => {
            let mut p = vec![rng::gaussian_tensor(&mut r, &[k])];
            p.extend((0..k).map(|_| rng::gaussian_tensor(&mut r, &[n, d])));
            (p, vec![n, d])
        }
        OpKind::ConcatChannels => (
            vec![rng::gaussian_tensor(&mut r, &[n, d]), rng::gaussian_tensor(&mut r, &[n, o])],
            vec![n, d + o],
        ),
        OpKind::NegEntropy => {
            let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng::unit(&mut r)).collect();
            let z: f64 = raw.iter().sum();
            (vec![Tensor::vector(raw.into_iter().map(|v| v / z).collect())], vec![1])
        }
        OpKind::Mse | OpKind::Add | OpKind::Dot => (
            vec![rng::gaussian_tensor(&mut r, &[n, d]), rng::gaussian_tensor(&mut r, &[n, d])],
            if op == OpKind::Add { vec![n, d] } else { vec![1] },
        ),
        OpKind::Sum => (vec![rng::gaussian_tensor(&mut r, &[n, d])], vec![1]),
    };
    let proj = rng::gaussian_tensor(&mut r, &out_shape);
    grad_check(
        |g, v| {
            let y = match op {
                OpKind::Linear => g.linear(v[0], v[1], v[2])?,
                OpKind::Gelu => g.gelu(v[0]),
                OpKind::LayerNorm => g.layer_norm(v[0], v[1], v[2])?,
                OpKind::Softmax => g.softmax(v[0])?,
                OpKind::CrossAttention => g.cross_attention(v[0], v[1], attention_from(&v[2..]), heads)?,
                OpKind::MeanOverFirstAxis => g.mean_over_first_axis(v)?,
                OpKind::WeightedSum => g.weighted_sum(v[0], &v[1..])?,
                OpKind::ConcatChannels => g.concat_channels(v[0], v[1])?,
                OpKind::NegEntropy => g.neg_entropy(v[0])?,
                OpKind::Mse => g.mse(v[0], v[1])?,
                OpKind::Add => g.add(v[0], v[1])?,
                OpKind::Scale => g.scale(v[0], -1.7),
                OpKind::Dot => g.dot(v[0], v[1])?,
                OpKind::Sum => g.sum(v[0]),
                OpKind::Reshape => g.reshape(v[0], &[d, n])?,
            };
            let y = if g.shape(y) == proj.shape() {
                y
            } else {
                g.reshape(y, proj.shape())?
            };
            let c = g.constant(proj.clone());
            g.dot(y, c)
        },
        &params,
        cfg,
    )
}

/// Checks the batch objective (regression loss plus entropy term) with
/// respect to every allocator and adapter parameter, on a seeded planted
/// task of the given size.
pub fn check_end_to_end(dims: DimsPreset, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    use crate::allocator::{init_params, AllocatorConfig};
    use crate::fusion::{AdapterParams, Mode};
    use crate::training::{gen_task, record_batch, Sample, TaskSpec};

    let (spec, alloc) = match dims {
        DimsPreset::Toy => (
            TaskSpec {
                clusters: 2,
                groups: 2,
                layers: 4,
                patches: 3,
                feature_dim: 4,
                sentence_dim: 5,
                adapter_dim: 3,
                adapter_hidden: 3,
                readout_dim: 2,
                train_per_cluster: 2,
                heldout_per_cluster: 1,
                seed,
                ..TaskSpec::default()
            },
            AllocatorConfig {
                hidden: 4,
                heads: 2,
                blocks: 1,
                ffn_mult: 2,
                ..AllocatorConfig::default()
            },
        ),
        DimsPreset::Desk => (
            TaskSpec {
                train_per_cluster: 1,
                heldout_per_cluster: 1,
                seed,
                ..TaskSpec::default()
            },
            AllocatorConfig::default(),
        ),
    };
    let task = gen_task(&spec)?;
    let alloc = AllocatorConfig {
        groups: spec.groups,
        feature_dim: spec.feature_dim,
        sentence_dim: spec.sentence_dim,
        ..alloc
    };
    let allocator = init_params(&alloc, rng::derive_seed(seed, 1))?;
    let adapter = AdapterParams::init(&task.adapter_config(), rng::derive_seed(seed, 2))?;
    let batch: Vec<&Sample> = task.train.iter().take(2).collect();
    let na = allocator.set().len();
    let mut params = allocator.set().tensors().to_vec();
    params.extend_from_slice(adapter.set().tensors());
    grad_check(
        |g, v| {
            let b = record_batch(g, &task, &batch, &allocator, &v[..na], &v[na..], 0.02, &Mode::Dynamic)?;
            Ok(b.total)
        },
        &params,
        &GradCheckConfig {
            max_elements_per_param: dims.e2e_subset(),
            ..*cfg
        },
    )
}
