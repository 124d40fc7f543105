//! Held-out evaluation: per-cluster weight tables and static baselines.

use super::task::{Sample, SyntheticTask};
use super::{record_batch, total_loss, Model};
use crate::allocator::{AllocatorParams, WeightVector};
use crate::error::{Error, Result};
use crate::fusion::{static_preset, AdapterParams, Mode, StaticPreset};
use crate::graph::{gelu_scalar, Graph};

/// Mean held-out allocator weights of every cluster.
pub fn eval_weight_report(task: &SyntheticTask, allocator: &AllocatorParams) -> Result<Vec<WeightVector>> {
    let k = task.spec.groups;
    (0..task.spec.clusters)
        .map(|c| {
            let mut mean = vec![0.0; k];
            let mut n = 0usize;
            for s in task.samples_of(c, true) {
                let w = allocator.allocate(&s.embedding, &s.summaries.cls_group)?;
                mean.iter_mut().zip(w.as_slice()).for_each(|(m, v)| *m += v);
                n += 1;
            }
            if n == 0 {
                return Err(Error::Report(format!("cluster {c} has no held-out samples")));
            }
            WeightVector::new(mean.iter().map(|m| m / n as f64).collect())
        })
        .collect()
}

/// Mean regression loss over the held-out pool.
pub fn heldout_loss(task: &SyntheticTask, model: &Model, mode: &Mode) -> Result<f64> {
    let samples: Vec<&Sample> = task.heldout.iter().collect();
    match mode {
        Mode::Dynamic => Ok(total_loss(task, &samples, model, 0.0)?.surrogate),
        Mode::Static(_) => {
            let mut g = Graph::new();
            let d = model.adapter.set().bind_frozen(&mut g);
            let b = record_batch(&mut g, task, &samples, &model.allocator, &[], &d, 0.0, mode)?;
            Ok(g.value(b.surrogate).item())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub loss: f64,
}

/// Held-out loss of the dynamic model followed by the five presets.
pub fn compare_static_vs_dynamic(task: &SyntheticTask, model: &Model) -> Result<Vec<Comparison>> {
    let mut rows = vec![Comparison {
        label: "Dynamic".into(),
        loss: heldout_loss(task, model, &Mode::Dynamic)?,
    }];
    for p in StaticPreset::ALL {
        let w = static_preset(p.name(), task.spec.groups)?;
        rows.push(Comparison {
            label: p.label().into(),
            loss: heldout_loss(task, model, &Mode::Static(w))?,
        });
    }
    Ok(rows)
}

/// All points of the `k`-simplex whose coordinates are multiples of `1/steps`.
pub fn simplex_grid(k: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, steps: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() + 1 == k {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(k, left - c, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(k, steps, steps, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

struct Precomputed {
    /// `K` grids of `[N, hidden]`: each group's patches through the fused half of Proj1.
    groups: Vec<Vec<f64>>,
    /// `[N, hidden]`: penultimate half of Proj1 plus its bias.
    base: Vec<f64>,
    target: Vec<f64>,
}

/// Held-out regression loss for fixed weights, with everything linear in
/// `w` folded ahead of time. Proj1 is linear in the fused grid, and Proj2
/// followed by the readout collapses to one `[hidden, R]` map per patch row.
pub struct StaticEvaluator {
    samples: Vec<Precomputed>,
    /// Per patch row `n`: `W2 * R_n`, `[hidden, R]`.
    row_maps: Vec<Vec<f64>>,
    offset: Vec<f64>,
    patches: usize,
    hidden: usize,
    outputs: usize,
}

impl StaticEvaluator {
    pub fn new(task: &SyntheticTask, adapter: &AdapterParams) -> Result<Self> {
        let t = adapter.set().tensors();
        let (w1, b1, w2, b2) = (&t[0], &t[1], &t[2], &t[3]);
        let d = task.spec.feature_dim;
        let n = task.spec.patches;
        let hidden = w1.shape()[1];
        let dt = w2.shape()[1];
        let r = task.readout.shape()[1];
        if task.readout.shape()[0] != n * dt {
            return Err(Error::dim("readout", task.readout.shape(), &[n * dt, r]));
        }

        let project = |grid: &[f64], rows: std::ops::Range<usize>| -> Vec<f64> {
            let mut out = vec![0.0; n * hidden];
            for p in 0..n {
                for (j, row) in rows.clone().enumerate() {
                    let x = grid[p * d + j];
                    for (o, w) in out[p * hidden..(p + 1) * hidden].iter_mut().zip(w1.row(row)) {
                        *o += x * w;
                    }
                }
            }
            out
        };
        let samples = task
            .heldout
            .iter()
            .map(|s| {
                let groups = s.summaries.patch_group.iter().map(|g| project(g.data(), 0..d)).collect();
                let mut base = project(s.summaries.penultimate.data(), d..2 * d);
                for p in 0..n {
                    for (o, b) in base[p * hidden..(p + 1) * hidden].iter_mut().zip(b1.data()) {
                        *o += b;
                    }
                }
                Precomputed {
                    groups,
                    base,
                    target: s.target.data().to_vec(),
                }
            })
            .collect();

        let mut row_maps = Vec::with_capacity(n);
        let mut offset = vec![0.0; r];
        for p in 0..n {
            let mut m = vec![0.0; hidden * r];
            for h in 0..hidden {
                for (c, w) in w2.row(h).iter().enumerate() {
                    let rrow = task.readout.row(p * dt + c);
                    for (o, rv) in m[h * r..(h + 1) * r].iter_mut().zip(rrow) {
                        *o += w * rv;
                    }
                }
            }
            for (c, b) in b2.data().iter().enumerate() {
                for (o, rv) in offset.iter_mut().zip(task.readout.row(p * dt + c)) {
                    *o += b * rv;
                }
            }
            row_maps.push(m);
        }
        Ok(Self {
            samples,
            row_maps,
            offset,
            patches: n,
            hidden,
            outputs: r,
        })
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let (n, h, r) = (self.patches, self.hidden, self.outputs);
        let mut total = 0.0;
        let mut z = vec![0.0; n * h];
        for s in &self.samples {
            z.copy_from_slice(&s.base);
            for (g, wk) in s.groups.iter().zip(w) {
                for (zi, gi) in z.iter_mut().zip(g) {
                    *zi += wk * gi;
                }
            }
            let mut y = self.offset.clone();
            for p in 0..n {
                let m = &self.row_maps[p];
                for hi in 0..h {
                    let a = gelu_scalar(z[p * h + hi]);
                    for (o, mv) in y.iter_mut().zip(&m[hi * r..(hi + 1) * r]) {
                        *o += a * mv;
                    }
                }
            }
            total += y
                .iter()
                .zip(&s.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / r as f64;
        }
        total / self.samples.len() as f64
    }
}

/// Brute-force search for the single weight vector with the lowest held-out
/// loss over the simplex grid of resolution `1/steps`.
pub fn best_static_weight(task: &SyntheticTask, adapter: &AdapterParams, steps: usize) -> Result<(WeightVector, f64)> {
    let eval = StaticEvaluator::new(task, adapter)?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for w in simplex_grid(task.spec.groups, steps) {
        let l = eval.loss(&w);
        if best.as_ref().is_none_or(|(_, b)| l < *b) {
            best = Some((w, l));
        }
    }
    let (w, l) = best.ok_or_else(|| Error::Config("empty simplex grid".into()))?;
    // Grid points sum to 1 up to the division rounding.
    let s: f64 = w.iter().sum();
    Ok((WeightVector::new(w.iter().map(|x| x / s).collect())?, l))
}
