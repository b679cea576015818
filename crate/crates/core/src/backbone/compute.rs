//! Forward and backward passes of the transformer body.
//!
//! Rows of the hidden state are sequence positions. The first `t` rows are
//! the prompt columns (no positional encoding), the remaining rows are token
//! embeddings plus learned positions `0, 1, ...`. Pre-norm blocks, causal
//! multi-head attention, tanh-GELU feed-forward.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::weights::{BackboneConfig, LayerWeights, Weights};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(n);
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mu = row.sum() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| (v - mu) * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Accumulates weight gradients of `y = x·W + b` and returns `dx`.
fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    grads: Option<(&mut Array2<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dw, db)) = grads {
        *dw += &x.t().dot(dy);
        *db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w.t())
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, n_heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let n = q.nrows();
    let dh = q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for i in 0..n {
            let mut row = scores.row_mut(i);
            let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let mut sum = 0.0;
            for j in 0..n {
                if j <= i {
                    let e = (row[j] * scale - max).exp();
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = 0.0;
                }
            }
            row.mapv_inplace(|e| e / sum);
        }
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (ctx, probs)
}

fn layer_forward(x: &Array2<f64>, w: &LayerWeights, n_heads: usize) -> (Array2<f64>, LayerCache) {
    let (a, ln1) = layer_norm(x, &w.ln1_g, &w.ln1_b);
    let q = linear(&a, &w.wq, &w.bq);
    let k = linear(&a, &w.wk, &w.bk);
    let v = linear(&a, &w.wv, &w.bv);
    let (ctx, probs) = attention(&q, &k, &v, n_heads);
    let mid = x + &linear(&ctx, &w.wo, &w.bo);
    let (b, ln2) = layer_norm(&mid, &w.ln2_g, &w.ln2_b);
    let pre_act = linear(&b, &w.w1, &w.b1);
    let act = pre_act.mapv(gelu);
    let out = &mid + &linear(&act, &w.w2, &w.b2);
    (out, LayerCache { ln1, a, q, k, v, probs, ctx, ln2, b, pre_act, act })
}

fn layer_backward(
    dout: &Array2<f64>,
    w: &LayerWeights,
    c: &LayerCache,
    n_heads: usize,
    mut grads: Option<&mut LayerWeights>,
) -> Array2<f64> {
    // Feed-forward branch.
    let dact = linear_backward(dout, &c.act, &w.w2, grads.as_deref_mut().map(|g| (&mut g.w2, &mut g.b2)));
    let dpre = &dact * &c.pre_act.mapv(gelu_grad);
    let db = linear_backward(&dpre, &c.b, &w.w1, grads.as_deref_mut().map(|g| (&mut g.w1, &mut g.b1)));
    let mut dmid = layer_norm_backward(&db, &w.ln2_g, &c.ln2, grads.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)));
    dmid += dout;

    // Attention branch.
    let dctx = linear_backward(&dmid, &c.ctx, &w.wo, grads.as_deref_mut().map(|g| (&mut g.wo, &mut g.bo)));
    let dh = c.q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dprobs = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut dscores = probs * &dprobs;
        for (mut row, p) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let total = row.sum();
            row.zip_mut_with(&p, |ds, &pv| *ds -= pv * total);
        }
        dscores *= scale;
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    let mut da = linear_backward(&dq, &c.a, &w.wq, grads.as_deref_mut().map(|g| (&mut g.wq, &mut g.bq)));
    da += &linear_backward(&dk, &c.a, &w.wk, grads.as_deref_mut().map(|g| (&mut g.wk, &mut g.bk)));
    da += &linear_backward(&dv, &c.a, &w.wv, grads.as_deref_mut().map(|g| (&mut g.wv, &mut g.bv)));
    let mut dx = layer_norm_backward(&da, &w.ln1_g, &c.ln1, grads.map(|g| (&mut g.ln1_g, &mut g.ln1_b)));
    dx += &dmid;
    dx
}

/// Activations kept from a forward pass for the backward pass.
pub(crate) struct Trace {
    n_prefix: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

/// Runs the body on `prefix` (d×t, one prompt column per row position)
/// followed by `tokens`, returning the final-normed hidden state (one row
/// per position) and, if requested, the activation trace.
pub(crate) fn hidden(
    cfg: &BackboneConfig,
    w: &Weights,
    prefix: ArrayView2<f64>,
    tokens: &[u32],
    keep_trace: bool,
) -> (Array2<f64>, Option<Trace>) {
    let t = prefix.ncols();
    let n = t + tokens.len();
    let mut x = Array2::zeros((n, cfg.d_model));
    x.slice_mut(s![..t, ..]).assign(&prefix.t());
    for (j, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t + j);
        row.assign(&w.tok_emb.row(tok as usize));
        row += &w.pos_emb.row(j);
    }
    let mut layers = Vec::with_capacity(if keep_trace { cfg.n_layers } else { 0 });
    for lw in &w.layers {
        let (out, cache) = layer_forward(&x, lw, cfg.n_heads);
        x = out;
        if keep_trace {
            layers.push(cache);
        }
    }
    let (hf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    let trace = keep_trace.then(|| Trace { n_prefix: t, tokens: tokens.to_vec(), layers, lnf });
    (hf, trace)
}

/// Per-layer keys and values of every row processed so far, for
/// incremental decoding.
pub(crate) struct KvCache {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl KvCache {
    pub(crate) fn new(cfg: &BackboneConfig) -> Self {
        let empty = || (0..cfg.n_layers).map(|_| Array2::zeros((0, cfg.d_model))).collect();
        Self { keys: empty(), values: empty(), len: 0 }
    }
}

/// Input rows for `tokens` placed at token positions `start..`.
pub(crate) fn token_rows(w: &Weights, tokens: &[u32], start: usize) -> Array2<f64> {
    let mut x = Array2::zeros((tokens.len(), w.tok_emb.ncols()));
    for (j, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(j);
        row.assign(&w.tok_emb.row(tok as usize));
        row += &w.pos_emb.row(start + j);
    }
    x
}

/// Pushes new input rows through the body, attending to everything already
/// in `cache`, and returns their final-normed hidden rows.
pub(crate) fn extend(cfg: &BackboneConfig, w: &Weights, cache: &mut KvCache, rows: Array2<f64>) -> Array2<f64> {
    let base = cache.len;
    let m = rows.nrows();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = rows;
    for (l, lw) in w.layers.iter().enumerate() {
        let (a, _) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = linear(&a, &lw.wq, &lw.bq);
        let k = linear(&a, &lw.wk, &lw.bk);
        let v = linear(&a, &lw.wv, &lw.bv);
        let keys = ndarray::concatenate(Axis(0), &[cache.keys[l].view(), k.view()]).expect("matching widths");
        let values = ndarray::concatenate(Axis(0), &[cache.values[l].view(), v.view()]).expect("matching widths");
        let mut ctx = Array2::zeros(q.raw_dim());
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&keys.slice(cols).t());
            for i in 0..m {
                let visible = base + i + 1;
                let row = scores.row(i);
                let max = row.iter().take(visible).fold(f64::NEG_INFINITY, |acc, &s| acc.max(s * scale));
                let mut probs: Array1<f64> = row.iter().take(visible).map(|&s| (s * scale - max).exp()).collect();
                probs /= probs.sum();
                let out = probs.dot(&values.slice(s![..visible, h * dh..(h + 1) * dh]));
                ctx.slice_mut(s![i, h * dh..(h + 1) * dh]).assign(&out);
            }
        }
        cache.keys[l] = keys;
        cache.values[l] = values;
        let mid = &x + &linear(&ctx, &lw.wo, &lw.bo);
        let (b, _) = layer_norm(&mid, &lw.ln2_g, &lw.ln2_b);
        let act = linear(&b, &lw.w1, &lw.b1).mapv(gelu);
        x = &mid + &linear(&act, &lw.w2, &lw.b2);
    }
    cache.len += m;
    layer_norm(&x, &w.lnf_g, &w.lnf_b).0
}

pub(crate) fn project(w: &Weights, rows: ArrayView2<f64>) -> Array2<f64> {
    rows.dot(&w.w_out) + &w.b_out
}

/// Backpropagates `dhidden` (gradient w.r.t. the final-normed hidden rows)
/// to the input rows. Returns the gradient w.r.t. the prefix as a d×t
/// matrix. If `grads` is given, all weight gradients are accumulated into it.
pub(crate) fn backward(
    cfg: &BackboneConfig,
    w: &Weights,
    trace: &Trace,
    dhidden: &Array2<f64>,
    mut grads: Option<&mut Weights>,
) -> Array2<f64> {
    let mut dx = layer_norm_backward(
        dhidden,
        &w.lnf_g,
        &trace.lnf,
        grads.as_deref_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
    );
    for (i, (lw, cache)) in w.layers.iter().zip(&trace.layers).enumerate().rev() {
        dx = layer_backward(&dx, lw, cache, cfg.n_heads, grads.as_deref_mut().map(|g| &mut g.layers[i]));
    }
    if let Some(g) = grads {
        for (j, &tok) in trace.tokens.iter().enumerate() {
            let drow = dx.row(trace.n_prefix + j);
            let mut te = g.tok_emb.row_mut(tok as usize);
            te += &drow;
            let mut pe = g.pos_emb.row_mut(j);
            pe += &drow;
        }
    }
    dx.slice(s![..trace.n_prefix, ..]).t().to_owned()
}

/// Mean next-token cross-entropy over `targets` given `logits` (one row per
/// target) and the gradient w.r.t. the logits.
pub(crate) fn cross_entropy(logits: &Array2<f64>, targets: &[u32]) -> (f64, Array2<f64>) {
    let n = targets.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &tgt) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[tgt as usize];
        let mut drow = dlogits.row_mut(i);
        for (dv, &v) in drow.iter_mut().zip(row.iter()) {
            *dv = (v - lse).exp() / n;
        }
        drow[tgt as usize] -= 1.0 / n;
    }
    (loss / n, dlogits)
}
