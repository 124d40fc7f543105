//! Entropy-balanced objective, optimizer, planted task and training loop.

mod eval;
mod optim;
mod task;

pub use eval::{
    best_static_weight, compare_static_vs_dynamic, eval_weight_report, heldout_loss,
    simplex_grid, Comparison, StaticEvaluator,
};
pub use optim::{AdamW, AdamWConfig};
pub use task::{apply_readout, gen_task, Sample, SyntheticTask, TaskSpec};

use crate::allocator::{init_params, AllocatorConfig, AllocatorParams, WeightVector};
use crate::error::{Error, Result};
use crate::fusion::{pipeline_on, AdapterParams, Mode, SampleVars};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Floor applied to weights inside the entropy term.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Trainable parameters: the allocator and the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub allocator: AllocatorParams,
    pub adapter: AdapterParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Batch mean of the regression loss.
    pub surrogate: f64,
    /// Batch mean of `sum_k w_k ln w_k`.
    pub neg_entropy: f64,
}

/// Graph handles of a recorded batch loss.
#[derive(Debug, Clone)]
pub struct BatchVars {
    pub total: Var,
    pub surrogate: Var,
    pub neg_entropy: Var,
    pub weights: Vec<Var>,
}

/// Records `mean_i [mse(readout(adapted_i), y_i) + lambda * sum_k w_ik ln w_ik]`
/// on `g`, with the weights clamped at [`WEIGHT_FLOOR`] inside the logarithm.
#[allow(clippy::too_many_arguments)]
pub fn record_batch(
    g: &mut Graph,
    task: &SyntheticTask,
    samples: &[&Sample],
    allocator: &AllocatorParams,
    alloc_vars: &[Var],
    adapter_vars: &[Var],
    lambda: f64,
    mode: &Mode,
) -> Result<BatchVars> {
    if samples.is_empty() {
        return Err(Error::EmptyGroup("record_batch"));
    }
    let readout = g.constant(task.readout.clone());
    let zero = g.constant(Tensor::zeros(&[task.readout.shape()[1]]));
    let mut terms = Vec::with_capacity(samples.len());
    let mut mses = Vec::with_capacity(samples.len());
    let mut entropies = Vec::with_capacity(samples.len());
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        let x = SampleVars::constants(g, &s.embedding, &s.summaries);
        let out = pipeline_on(g, &x, allocator, alloc_vars, adapter_vars, mode)?;
        let n = g.value(out.adapted).len();
        let flat = g.reshape(out.adapted, &[n])?;
        let pred = g.linear(flat, readout, zero)?;
        let target = g.constant(s.target.clone());
        let mse = g.mse(pred, target)?;
        let ne = g.neg_entropy_clamped(out.w, WEIGHT_FLOOR)?;
        let reg = g.scale(ne, lambda);
        terms.push(g.add(mse, reg)?);
        mses.push(mse);
        entropies.push(ne);
        weights.push(out.w);
    }
    let inv = 1.0 / samples.len() as f64;
    let mean = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
        let s = g.sum_scalars(xs)?;
        Ok(g.scale(s, inv))
    };
    Ok(BatchVars {
        total: mean(g, &terms)?,
        surrogate: mean(g, &mses)?,
        neg_entropy: mean(g, &entropies)?,
        weights,
    })
}

/// Evaluates the objective on `samples` without recording gradients.
pub fn total_loss(task: &SyntheticTask, samples: &[&Sample], model: &Model, lambda: f64) -> Result<LossParts> {
    let mut g = Graph::new();
    let a = model.allocator.set().bind_frozen(&mut g);
    let d = model.adapter.set().bind_frozen(&mut g);
    let b = record_batch(&mut g, task, samples, &model.allocator, &a, &d, lambda, &Mode::Dynamic)?;
    Ok(LossParts {
        total: g.value(b.total).item(),
        surrogate: g.value(b.surrogate).item(),
        neg_entropy: g.value(b.neg_entropy).item(),
    })
}

/// How the trainable adapter starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterInit {
    /// Copy of the task's label-generating adapter, standing in for an
    /// adapter that was pretrained before instruction tuning.
    Teacher,
    /// Fresh seeded draw.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub adapter_init: AdapterInit,
    /// Adapter learning rate as a multiple of `optimizer.lr`.
    pub adapter_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 1e-4,
                ..AdamWConfig::default()
            },
            lambda: 0.02,
            steps: 2000,
            batch: 32,
            seed: 0,
            adapter_init: AdapterInit::Teacher,
            adapter_lr_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.adapter_lr_scale >= 0.0 && self.adapter_lr_scale.is_finite()) {
            return Err(Error::Config("adapter lr scale must be nonnegative".into()));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight decay nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Total loss of each step's batch, before that step's update.
    pub loss_trace: Vec<f64>,
    /// Entropy (nats) of each step's batch-mean weight vector.
    pub entropy_trace: Vec<f64>,
    /// Mean held-out weights per cluster after training.
    pub cluster_weights: Vec<WeightVector>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub report: TrainReport,
}

/// Allocator configuration whose dimensions agree with `task`.
pub fn allocator_config_for(task: &SyntheticTask, base: &AllocatorConfig) -> AllocatorConfig {
    AllocatorConfig {
        groups: task.spec.groups,
        feature_dim: task.spec.feature_dim,
        sentence_dim: task.spec.sentence_dim,
        ..*base
    }
}

pub fn init_model(task: &SyntheticTask, alloc: &AllocatorConfig, cfg: &TrainConfig) -> Result<Model> {
    let alloc = allocator_config_for(task, alloc);
    let allocator = init_params(&alloc, rng::derive_seed(cfg.seed, 1))?;
    let adapter = match cfg.adapter_init {
        AdapterInit::Teacher => task.teacher.clone(),
        AdapterInit::Random => AdapterParams::init(&task.adapter_config(), rng::derive_seed(cfg.seed, 2))?,
    };
    Ok(Model { allocator, adapter })
}

/// Entropy of the mean of several weight vectors.
pub fn mean_weight_entropy(ws: &[&[f64]]) -> f64 {
    let k = ws[0].len();
    let mut mean = vec![0.0; k];
    for w in ws {
        for (m, v) in mean.iter_mut().zip(*w) {
            *m += v / ws.len() as f64;
        }
    }
    -mean.iter().filter(|m| **m > 0.0).map(|m| m * m.ln()).sum::<f64>()
}

/// Runs `cfg.steps` AdamW steps on minibatches drawn with replacement from
/// the training pool.
pub fn train(task: &SyntheticTask, alloc: &AllocatorConfig, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let model = init_model(task, alloc, cfg)?;
    train_from(task, model, cfg)
}

pub fn train_from(task: &SyntheticTask, mut model: Model, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(Error::Config("task has no training samples".into()));
    }
    let mut opt_alloc = AdamW::new(cfg.optimizer, model.allocator.set().tensors());
    let adapter_opt = AdamWConfig {
        lr: cfg.optimizer.lr * cfg.adapter_lr_scale,
        ..cfg.optimizer
    };
    let mut opt_adapter = AdamW::new(adapter_opt, model.adapter.set().tensors());
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, 3));
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let mut entropy_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<&Sample> = (0..cfg.batch)
            .map(|_| &task.train[(rng::unit(&mut r) * task.train.len() as f64) as usize])
            .collect();
        let mut g = Graph::new();
        let av = model.allocator.set().bind(&mut g);
        let dv = model.adapter.set().bind(&mut g);
        let b = record_batch(&mut g, task, &batch, &model.allocator, &av, &dv, cfg.lambda, &Mode::Dynamic)?;
        let loss = g.value(b.total).item();
        loss_trace.push(loss);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence {
                step,
                loss,
                trace: loss_trace,
            });
        }
        let ws: Vec<&[f64]> = b.weights.iter().map(|&w| g.value(w).data()).collect();
        entropy_trace.push(mean_weight_entropy(&ws));

        g.backward(b.total)?;
        let ga: Vec<Tensor> = av.iter().map(|&v| g.grad_or_zeros(v)).collect();
        let gd: Vec<Tensor> = dv.iter().map(|&v| g.grad_or_zeros(v)).collect();
        drop(g);
        let names = model.allocator.set().names().to_vec();
        opt_alloc.step(&names, model.allocator.set_mut().tensors_mut(), &ga)?;
        let names = model.adapter.set().names().to_vec();
        opt_adapter.step(&names, model.adapter.set_mut().tensors_mut(), &gd)?;
    }

    let cluster_weights = eval_weight_report(task, &model.allocator)?;
    Ok(Trained {
        model,
        report: TrainReport {
            loss_trace,
            entropy_trace,
            cluster_weights,
        },
    })
}
