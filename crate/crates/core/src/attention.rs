//! Single-query multi-head cross-attention kernels.
//!
//! The query is one row of width `d`; keys and values come from `m` rows of
//! the same width. All four projections are `d x d` with a bias.

pub(crate) struct AttnCache {
    pub q_proj: Vec<f64>,
    pub k_proj: Vec<f64>,
    pub v_proj: Vec<f64>,
    /// Attention probabilities, `heads x m`.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
}

/// Projection weights in the order wq, bq, wk, bk, wv, bv, wo, bo.
pub(crate) struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

/// Mutable gradient slots, `None` for inputs that do not require a gradient.
#[derive(Default)]
pub(crate) struct AttnGrads<'a> {
    pub q: Option<&'a mut [f64]>,
    pub kv: Option<&'a mut [f64]>,
    pub wq: Option<&'a mut [f64]>,
    pub bq: Option<&'a mut [f64]>,
    pub wk: Option<&'a mut [f64]>,
    pub bk: Option<&'a mut [f64]>,
    pub wv: Option<&'a mut [f64]>,
    pub bv: Option<&'a mut [f64]>,
    pub wo: Option<&'a mut [f64]>,
    pub bo: Option<&'a mut [f64]>,
}

/// `out[j] = bias[j] + sum_p x[p] * w[p, j]` for every row of `x`.
fn project_rows(x: &[f64], w: &[f64], bias: &[f64], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(bias);
        let o = &mut out[r * d..(r + 1) * d];
        for (p, &xp) in x[r * d..(r + 1) * d].iter().enumerate() {
            for (oj, wj) in o.iter_mut().zip(&w[p * d..(p + 1) * d]) {
                *oj += xp * wj;
            }
        }
    }
    out
}

pub(crate) fn forward(
    q: &[f64],
    kv: &[f64],
    d: usize,
    heads: usize,
    w: &AttnWeights<'_>,
) -> (Vec<f64>, AttnCache) {
    let m = kv.len() / d;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q_proj = project_rows(q, w.wq, w.bq, d);
    let k_proj = project_rows(kv, w.wk, w.bk, d);
    let v_proj = project_rows(kv, w.wv, w.bv, d);

    let mut probs = vec![0.0; heads * m];
    let mut ctx = vec![0.0; d];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let p = &mut probs[h * m..(h + 1) * m];
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &k_proj[j * d..(j + 1) * d];
            *pj = scale
                * q_proj[cols.clone()]
                    .iter()
                    .zip(&kj[cols.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            z += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= z;
        }
        for (j, &a) in p.iter().enumerate() {
            let vj = &v_proj[j * d..(j + 1) * d];
            for c in cols.clone() {
                ctx[c] += a * vj[c];
            }
        }
    }
    let out = project_rows(&ctx, w.wo, w.bo, d);
    (
        out,
        AttnCache {
            q_proj,
            k_proj,
            v_proj,
            probs,
            ctx,
        },
    )
}

fn add_outer(dw: &mut [f64], x: &[f64], dy: &[f64]) {
    let d = dy.len();
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        for (g, &dj) in dw[p * d..(p + 1) * d].iter_mut().zip(dy) {
            *g += xp * dj;
        }
    }
}

/// `out[p] += sum_j w[p, j] * dy[j]`
fn add_wt_dy(out: &mut [f64], w: &[f64], dy: &[f64]) {
    let d = dy.len();
    for (p, o) in out.iter_mut().enumerate() {
        *o += w[p * d..(p + 1) * d]
            .iter()
            .zip(dy)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    dout: &[f64],
    q: &[f64],
    kv: &[f64],
    d: usize,
    heads: usize,
    w: &AttnWeights<'_>,
    cache: &AttnCache,
    grads: AttnGrads<'_>,
) {
    let m = kv.len() / d;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    if let Some(g) = grads.bo {
        for (gi, di) in g.iter_mut().zip(dout) {
            *gi += di;
        }
    }
    if let Some(g) = grads.wo {
        add_outer(g, &cache.ctx, dout);
    }
    let mut dctx = vec![0.0; d];
    add_wt_dy(&mut dctx, w.wo, dout);

    let mut dq_proj = vec![0.0; d];
    let mut dk_proj = vec![0.0; m * d];
    let mut dv_proj = vec![0.0; m * d];
    let mut da = vec![0.0; m];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let p = &cache.probs[h * m..(h + 1) * m];
        for j in 0..m {
            let vj = &cache.v_proj[j * d..(j + 1) * d];
            da[j] = cols.clone().map(|c| dctx[c] * vj[c]).sum();
            for c in cols.clone() {
                dv_proj[j * d + c] += p[j] * dctx[c];
            }
        }
        let mix: f64 = p.iter().zip(&da).map(|(a, b)| a * b).sum();
        for j in 0..m {
            let ds = p[j] * (da[j] - mix) * scale;
            let kj = &cache.k_proj[j * d..(j + 1) * d];
            for c in cols.clone() {
                dq_proj[c] += ds * kj[c];
                dk_proj[j * d + c] += ds * cache.q_proj[c];
            }
        }
    }

    if let Some(g) = grads.bq {
        for (gi, di) in g.iter_mut().zip(&dq_proj) {
            *gi += di;
        }
    }
    if let Some(g) = grads.wq {
        add_outer(g, q, &dq_proj);
    }
    if let Some(g) = grads.q {
        add_wt_dy(g, w.wq, &dq_proj);
    }

    let mut dkv = grads.kv;
    for (dproj, wmat, gw, gb) in [
        (&dk_proj, w.wk, grads.wk, grads.bk),
        (&dv_proj, w.wv, grads.wv, grads.bv),
    ] {
        if let Some(g) = gb {
            for j in 0..m {
                for (gi, di) in g.iter_mut().zip(&dproj[j * d..(j + 1) * d]) {
                    *gi += di;
                }
            }
        }
        if let Some(g) = gw {
            for j in 0..m {
                add_outer(g, &kv[j * d..(j + 1) * d], &dproj[j * d..(j + 1) * d]);
            }
        }
        if let Some(g) = dkv.as_deref_mut() {
            for j in 0..m {
                add_wt_dy(&mut g[j * d..(j + 1) * d], wmat, &dproj[j * d..(j + 1) * d]);
            }
        }
    }
}
