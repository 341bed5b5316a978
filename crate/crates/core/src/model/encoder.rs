//! Pre-norm transformer encoder: forward pass with cached activations and
//! the matching reverse pass.
//!
//! Only the pooled vector at position 0 leaves the encoder, so the last
//! layer computes queries, the feed-forward block and the final norm for
//! that single row; keys and values still span every attended position.
//! Positions after the last attended one never influence position 0 and are
//! not computed at all.

use super::params::{EncoderParams, LayerParams};
use super::EncoderConfig;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive pre-softmax score for keys whose attention mask is 0.
pub const MASK_SCORE: f64 = -1e9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: ArrayView2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let (rows, h) = x.dim();
    let mut xhat = Array2::zeros((rows, h));
    let mut rstd = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mu = row.sum() / h as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / h as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        xhat.row_mut(r).assign(&row.mapv(|v| (v - mu) * rs));
    }
    let y = &xhat * gain + bias;
    (y, NormCache { xhat, rstd })
}

/// Returns dx; accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, h) = dy.dim();
    let mut dx = Array2::zeros((rows, h));
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let dxhat = &dyr * gain;
        *dgain += &(&dyr * &xh);
        *dbias += &dyr;
        let mean_d = dxhat.sum() / h as f64;
        let mean_dx = (&dxhat * &xh).sum() / h as f64;
        let rs = cache.rstd[r];
        dx.row_mut(r)
            .assign(&((&dxhat - mean_d - &xh * mean_dx) * rs));
    }
    dx
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

/// Inverted dropout mask (entries 0 or 1/(1-p)).
fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct LayerCache {
    ln1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: NormCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
}

/// Activations of one forward pass, kept for the reverse pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    segments: Vec<u8>,
    drop_emb: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    pub h_cls: Array1<f64>,
}

/// Attention + feed-forward block. `x` is `len × hidden`; the block output
/// has `rows` rows (the first `rows` query positions).
fn layer_forward(
    p: &LayerParams,
    cfg: &EncoderConfig,
    x: ArrayView2<f64>,
    rows: usize,
    key_mask: &[u8],
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let heads = cfg.num_attention_heads;
    let d = cfg.hidden_size / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let (a, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = add_bias(a.slice(s![..rows, ..]).dot(&p.wq), &p.bq);
    let k = add_bias(a.dot(&p.wk), &p.bk);
    let v = add_bias(a.dot(&p.wv), &p.bv);

    let mut ctx = Array2::zeros((rows, cfg.hidden_size));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * d..(hd + 1) * d];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        for mut row in scores.rows_mut() {
            for (j, sc) in row.iter_mut().enumerate() {
                if key_mask[j] == 0 {
                    *sc += MASK_SCORE;
                }
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let mut attn = add_bias(ctx.dot(&p.wo), &p.bo);
    let drop_attn = match (cfg.dropout_rate > 0.0, rng.as_deref_mut()) {
        (true, Some(r)) => {
            let m = dropout_mask(r, attn.dim(), cfg.dropout_rate);
            attn *= &m;
            Some(m)
        }
        _ => None,
    };
    let x_mid = &x.slice(s![..rows, ..]) + &attn;

    let (b, ln2) = layer_norm(x_mid.view(), &p.ln2_gain, &p.ln2_bias);
    let u = add_bias(b.dot(&p.w1), &p.b1);
    let g = u.mapv(gelu);
    let mut f = add_bias(g.dot(&p.w2), &p.b2);
    let drop_ffn = match (cfg.dropout_rate > 0.0, rng) {
        (true, Some(r)) => {
            let m = dropout_mask(r, f.dim(), cfg.dropout_rate);
            f *= &m;
            Some(m)
        }
        _ => None,
    };
    let out = x_mid + f;
    (
        out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            drop_attn,
            ln2,
            b,
            u,
            g,
            drop_ffn,
        },
    )
}

/// Reverse of [`layer_forward`]: `dout` is `rows × hidden`, the result is
/// `len × hidden`.
fn layer_backward(
    p: &LayerParams,
    grad: &mut LayerParams,
    cfg: &EncoderConfig,
    c: &LayerCache,
    dout: ArrayView2<f64>,
    len: usize,
) -> Array2<f64> {
    let rows = dout.nrows();
    let heads = cfg.num_attention_heads;
    let d = cfg.hidden_size / heads;
    let scale = 1.0 / (d as f64).sqrt();

    // feed-forward branch
    let mut df = dout.to_owned();
    if let Some(m) = &c.drop_ffn {
        df *= m;
    }
    general_mat_mul(1.0, &c.g.t(), &df, 1.0, &mut grad.w2);
    grad.b2 += &df.sum_axis(Axis(0));
    let mut du = df.dot(&p.w2.t());
    ndarray::Zip::from(&mut du).and(&c.u).for_each(|g, &u| *g *= gelu_grad(u));
    general_mat_mul(1.0, &c.b.t(), &du, 1.0, &mut grad.w1);
    grad.b1 += &du.sum_axis(Axis(0));
    let db = du.dot(&p.w1.t());
    let mut dx_mid = layer_norm_backward(db.view(), &c.ln2, &p.ln2_gain, &mut grad.ln2_gain, &mut grad.ln2_bias);
    dx_mid += &dout;

    // attention branch
    let mut dattn = dx_mid.clone();
    if let Some(m) = &c.drop_attn {
        dattn *= m;
    }
    general_mat_mul(1.0, &c.ctx.t(), &dattn, 1.0, &mut grad.wo);
    grad.bo += &dattn.sum_axis(Axis(0));
    let dctx = dattn.dot(&p.wo.t());

    let mut dq = Array2::zeros((rows, cfg.hidden_size));
    let mut dk = Array2::zeros((len, cfg.hidden_size));
    let mut dv = Array2::zeros((len, cfg.hidden_size));
    for hd in 0..heads {
        let cols = s![.., hd * d..(hd + 1) * d];
        let pr = &c.probs[hd];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
        let mut ds = &dp * pr;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
            let dot = row.sum();
            // ds = P ⊙ (dP − ⟨dP, P⟩)
            row.zip_mut_with(&prow, |x, &pv| *x -= pv * dot);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    general_mat_mul(1.0, &c.a.slice(s![..rows, ..]).t(), &dq, 1.0, &mut grad.wq);
    grad.bq += &dq.sum_axis(Axis(0));
    general_mat_mul(1.0, &c.a.t(), &dk, 1.0, &mut grad.wk);
    grad.bk += &dk.sum_axis(Axis(0));
    general_mat_mul(1.0, &c.a.t(), &dv, 1.0, &mut grad.wv);
    grad.bv += &dv.sum_axis(Axis(0));

    let mut da = dk.dot(&p.wk.t());
    general_mat_mul(1.0, &dv, &p.wv.t(), 1.0, &mut da);
    {
        let mut top = da.slice_mut(s![..rows, ..]);
        general_mat_mul(1.0, &dq, &p.wq.t(), 1.0, &mut top);
    }
    let mut dx = layer_norm_backward(da.view(), &c.ln1, &p.ln1_gain, &mut grad.ln1_gain, &mut grad.ln1_bias);
    {
        let mut top = dx.slice_mut(s![..rows, ..]);
        top += &dx_mid;
    }
    dx
}

/// Runs the encoder over the attended prefix of an example. With `rng`,
/// dropout is active.
pub fn forward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    token_ids: &[u32],
    segment_ids: &[u8],
    attention_mask: &[u8],
    mut rng: Option<&mut ChaCha8Rng>,
) -> ForwardCache {
    let len = attention_mask.iter().rposition(|&m| m != 0).map_or(1, |p| p + 1);
    let ids = token_ids[..len].to_vec();
    let segments = segment_ids[..len].to_vec();
    let key_mask = &attention_mask[..len];

    let h = cfg.hidden_size;
    let mut x = Array2::zeros((len, h));
    for i in 0..len {
        let row = &params.token_embeddings.row(ids[i] as usize)
            + &params.position_embeddings.row(i)
            + &params.segment_embeddings.row(segments[i] as usize);
        x.row_mut(i).assign(&row);
    }
    let drop_emb = match (cfg.dropout_rate > 0.0, rng.as_deref_mut()) {
        (true, Some(r)) => {
            let m = dropout_mask(r, x.dim(), cfg.dropout_rate);
            x *= &m;
            Some(m)
        }
        _ => None,
    };

    let n = params.layers.len();
    let mut layers = Vec::with_capacity(n);
    for (li, lp) in params.layers.iter().enumerate() {
        let rows = if li + 1 == n { 1 } else { len };
        let (out, cache) = layer_forward(lp, cfg, x.view(), rows, key_mask, rng.as_deref_mut());
        layers.push(cache);
        x = out;
    }
    let (y, final_norm) = layer_norm(x.slice(s![..1, ..]), &params.final_gain, &params.final_bias);
    ForwardCache {
        ids,
        segments,
        drop_emb,
        layers,
        final_norm,
        h_cls: y.row(0).to_owned(),
    }
}

/// Accumulates into `grad` the gradient of a scalar whose derivative with
/// respect to `h_cls` is `dh`.
pub fn backward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    cache: &ForwardCache,
    dh: ArrayView1<f64>,
    grad: &mut EncoderParams,
) {
    let len = cache.ids.len();
    debug_assert!(!params.layers.is_empty());
    let dy = dh.insert_axis(Axis(0));
    let mut dx = layer_norm_backward(
        dy,
        &cache.final_norm,
        &params.final_gain,
        &mut grad.final_gain,
        &mut grad.final_bias,
    );
    for li in (0..params.layers.len()).rev() {
        dx = layer_backward(
            &params.layers[li],
            &mut grad.layers[li],
            cfg,
            &cache.layers[li],
            dx.view(),
            len,
        );
    }
    if let Some(m) = &cache.drop_emb {
        dx *= m;
    }
    for i in 0..dx.nrows() {
        let row = dx.row(i);
        let mut t = grad.token_embeddings.row_mut(cache.ids[i] as usize);
        t += &row;
        let mut p = grad.position_embeddings.row_mut(i);
        p += &row;
        let mut sg = grad.segment_embeddings.row_mut(cache.segments[i] as usize);
        sg += &row;
    }
}
