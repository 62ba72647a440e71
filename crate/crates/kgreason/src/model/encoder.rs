//! Transformer encoder: forward pass and hand-written backward pass.
//!
//! Batches are jagged: all sequences are concatenated into one `[N, dim]`
//! token matrix with no padding. Dense projections (QKV, output, FFN) run
//! as single matrix products over the whole batch; self-attention runs per
//! sequence per head on slices, so tokens never attend across sequence
//! boundaries. Blocks are post-norm: `x = LN(x + Attn(x))` then
//! `x = LN(x + FFN(x))`, with GELU (tanh form) inside the FFN. Token and
//! position embeddings are summed without an embedding-side norm.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{BlockP, LayerNormP, LinearP, ModelParams, Real};
use crate::text::TokenId;

pub const LN_EPS: f64 = 1e-5;

/// Concatenated token sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<TokenId>,
    /// `bounds[i]..bounds[i+1]` is sequence `i`; `bounds[0] == 0`.
    pub bounds: Vec<usize>,
}

impl Batch {
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut bounds = Vec::with_capacity(seqs.len() + 1);
        bounds.push(0);
        for s in seqs {
            tokens.extend_from_slice(s.as_ref());
            bounds.push(tokens.len());
        }
        Self { tokens, bounds }
    }

    pub fn n_seqs(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_range(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }
}

fn linear<F: Real>(x: &Array2<F>, p: &LinearP<F>) -> Array2<F> {
    let mut y = x.dot(&p.w);
    y += &p.b;
    y
}

/// Accumulates input gradient; adds weight gradients into `gp`.
fn linear_backward<F: Real>(
    x: &Array2<F>,
    p: &LinearP<F>,
    dy: &Array2<F>,
    gp: &mut LinearP<F>,
) -> Array2<F> {
    gp.w += &x.t().dot(dy);
    gp.b += &dy.sum_axis(Axis(0));
    dy.dot(&p.w.t())
}

pub(crate) struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, p: &LayerNormP<F>) -> (Array2<F>, LnCache<F>) {
    let d = x.ncols();
    let inv_d = F::from_f64(1.0 / d as f64);
    let eps = F::from_f64(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) * inv_d;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *is = inv;
    }
    let mut y = xhat.clone();
    y *= &p.gamma;
    y += &p.beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    p: &LayerNormP<F>,
    cache: &LnCache<F>,
    gp: &mut LayerNormP<F>,
) -> Array2<F> {
    let d = dy.ncols();
    let inv_d = F::from_f64(1.0 / d as f64);
    for (dyr, xr) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        // dgamma += dy ⊙ xhat, dbeta += dy (row accumulation).
        for ((g, &a), &b) in gp.gamma.iter_mut().zip(dyr.iter()).zip(xr.iter()) {
            *g = *g + a * b;
        }
        for (g, &a) in gp.beta.iter_mut().zip(dyr.iter()) {
            *g = *g + a;
        }
    }
    let mut dx = Array2::zeros(dy.raw_dim());
    for ((dyr, xr), (mut dxr, &inv)) in dy
        .rows()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(dx.rows_mut().into_iter().zip(cache.inv_std.iter()))
    {
        // dL/dxhat = dy ⊙ gamma; dx = (dxhat − mean(dxhat) − xhat ⊙
        // mean(dxhat ⊙ xhat)) · inv_std.
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for ((&dyv, &g), &xv) in dyr.iter().zip(p.gamma.iter()).zip(xr.iter()) {
            let dxh = dyv * g;
            m1 = m1 + dxh;
            m2 = m2 + dxh * xv;
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        for (((dxv, &dyv), &g), &xv) in dxr
            .iter_mut()
            .zip(dyr.iter())
            .zip(p.gamma.iter())
            .zip(xr.iter())
        {
            *dxv = (dyv * g - m1 - xv * m2) * inv;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Numerically stable in-place softmax over each row.
pub(crate) fn softmax_rows_inplace<F: Real>(a: &mut Array2<F>) {
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) struct BlockCache<F> {
    x_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention weights per (sequence, head), index `seq * heads + head`.
    attn: Vec<Array2<F>>,
    ctx: Array2<F>,
    ln1: LnCache<F>,
    x1: Array2<F>,
    h_pre: Array2<F>,
    h_act: Array2<F>,
    ln2: LnCache<F>,
}

pub struct EncoderCache<F> {
    blocks: Vec<BlockCache<F>>,
}

fn block_forward<F: Real>(
    x: Array2<F>,
    p: &BlockP<F>,
    batch: &Batch,
    heads: usize,
) -> (Array2<F>, BlockCache<F>) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let q = linear(&x, &p.wq);
    let k = linear(&x, &p.wk);
    let v = linear(&x, &p.wv);

    let mut ctx = Array2::zeros(x.raw_dim());
    let mut attn = Vec::with_capacity(batch.n_seqs() * heads);
    for si in 0..batch.n_seqs() {
        let r = batch.seq_range(si);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![r.clone(), cols.clone()]);
            let ks = k.slice(s![r.clone(), cols.clone()]);
            let vs = v.slice(s![r.clone(), cols.clone()]);
            let mut a = qs.dot(&ks.t());
            a.mapv_inplace(|x| x * scale);
            softmax_rows_inplace(&mut a);
            let c = a.dot(&vs);
            ctx.slice_mut(s![r.clone(), cols]).assign(&c);
            attn.push(a);
        }
    }

    let o = linear(&ctx, &p.wo);
    let r1 = &x + &o;
    let (x1, ln1) = layer_norm(&r1, &p.ln1);

    let h_pre = linear(&x1, &p.ffn1);
    let h_act = h_pre.mapv(gelu_scalar);
    let f = linear(&h_act, &p.ffn2);
    let r2 = &x1 + &f;
    let (x2, ln2) = layer_norm(&r2, &p.ln2);

    (
        x2,
        BlockCache {
            x_in: x,
            q,
            k,
            v,
            attn,
            ctx,
            ln1,
            x1,
            h_pre,
            h_act,
            ln2,
        },
    )
}

fn block_backward<F: Real>(
    dy: Array2<F>,
    p: &BlockP<F>,
    gp: &mut BlockP<F>,
    cache: &BlockCache<F>,
    batch: &Batch,
    heads: usize,
) -> Array2<F> {
    let d = dy.ncols();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    // x2 = LN2(x1 + FFN(x1))
    let dr2 = layer_norm_backward(&dy, &p.ln2, &cache.ln2, &mut gp.ln2);
    let df = dr2.clone();
    let mut dx1 = dr2;
    let dh_act = linear_backward(&cache.h_act, &p.ffn2, &df, &mut gp.ffn2);
    let mut dh_pre = dh_act;
    dh_pre.zip_mut_with(&cache.h_pre, |g, &x| *g = *g * gelu_grad_scalar(x));
    dx1 += &linear_backward(&cache.x1, &p.ffn1, &dh_pre, &mut gp.ffn1);

    // x1 = LN1(x_in + Attn(x_in))
    let dr1 = layer_norm_backward(&dx1, &p.ln1, &cache.ln1, &mut gp.ln1);
    let do_ = dr1.clone();
    let mut dx = dr1;
    let dctx = linear_backward(&cache.ctx, &p.wo, &do_, &mut gp.wo);

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for si in 0..batch.n_seqs() {
        let r = batch.seq_range(si);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &cache.attn[si * heads + h];
            let qs = cache.q.slice(s![r.clone(), cols.clone()]);
            let ks = cache.k.slice(s![r.clone(), cols.clone()]);
            let vs = cache.v.slice(s![r.clone(), cols.clone()]);
            let dc = dctx.slice(s![r.clone(), cols.clone()]);

            let da = dc.dot(&vs.t());
            dv.slice_mut(s![r.clone(), cols.clone()])
                .assign(&a.t().dot(&dc));
            // Softmax backward per row: ds = a ⊙ (da − rowsum(da ⊙ a)).
            let mut ds = da;
            for (mut dsr, ar) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = dsr
                    .iter()
                    .zip(ar.iter())
                    .map(|(&x, &y)| x * y)
                    .fold(F::zero(), |acc, v| acc + v);
                for (d, &w) in dsr.iter_mut().zip(ar.iter()) {
                    *d = w * (*d - dot);
                }
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(s![r.clone(), cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![r.clone(), cols]).assign(&ds.t().dot(&qs));
        }
    }

    dx += &linear_backward(&cache.x_in, &p.wq, &dq, &mut gp.wq);
    dx += &linear_backward(&cache.x_in, &p.wk, &dk, &mut gp.wk);
    dx += &linear_backward(&cache.x_in, &p.wv, &dv, &mut gp.wv);
    dx
}

/// Embed and encode a batch; returns `[N, dim]` token states and the cache
/// for the backward pass.
pub fn encoder_forward<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
) -> (Array2<F>, EncoderCache<F>) {
    let d = params.config.dim;
    assert!(!batch.is_empty(), "empty batch");
    let mut x = Array2::zeros((batch.len(), d));
    for si in 0..batch.n_seqs() {
        let r = batch.seq_range(si);
        assert!(
            r.len() <= params.config.max_len,
            "sequence of {} tokens exceeds max_len {}",
            r.len(),
            params.config.max_len
        );
        for (pos, t) in r.clone().enumerate() {
            let tok = batch.tokens[t].0 as usize;
            assert!(tok < params.config.vocab_size, "token id out of range");
            let mut row = x.row_mut(t);
            row.assign(&params.tok_emb.row(tok));
            row += &params.pos_emb.row(pos);
        }
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward(x, b, batch, params.config.heads);
        caches.push(cache);
        x = next;
    }
    (x, EncoderCache { blocks: caches })
}

/// Backward from `d_out` (gradient at the encoder output) down to the
/// embeddings, accumulating into `grads`.
pub fn encoder_backward<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    cache: &EncoderCache<F>,
    d_out: Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let mut dy = d_out;
    for ((p, gp), c) in params
        .blocks
        .iter()
        .zip(grads.blocks.iter_mut())
        .zip(cache.blocks.iter())
        .rev()
    {
        dy = block_backward(dy, p, gp, c, batch, params.config.heads);
    }
    for si in 0..batch.n_seqs() {
        let r = batch.seq_range(si);
        for (pos, t) in r.enumerate() {
            let tok = batch.tokens[t].0 as usize;
            let g = dy.row(t);
            grads
                .tok_emb
                .row_mut(tok)
                .zip_mut_with(&g, |a, &b| *a = *a + b);
            grads
                .pos_emb
                .row_mut(pos)
                .zip_mut_with(&g, |a, &b| *a = *a + b);
        }
    }
}

/// Mean of the rows `range` of `x`.
pub fn mean_rows<F: Real>(x: &ArrayView2<F>, range: std::ops::Range<usize>) -> Array1<F> {
    let len = range.len();
    assert!(len > 0, "empty pooling range");
    let mut out = Array1::zeros(x.ncols());
    for r in range {
        out += &x.row(r);
    }
    out.mapv_inplace(|v| v / F::from_f64(len as f64));
    out
}

/// Scatter `d_mean / len` back into the pooled rows.
pub fn mean_rows_backward<F: Real>(
    d_mean: &ArrayView1<F>,
    range: std::ops::Range<usize>,
    dx: &mut Array2<F>,
) {
    let inv = F::from_f64(1.0 / range.len() as f64);
    for r in range {
        dx.row_mut(r).zip_mut_with(d_mean, |a, &b| *a = *a + b * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            blocks: 2,
            heads: 4,
            max_len: 24,
            maxout_pieces: 2,
            vocab_size: 40,
            classify_entities: None,
        }
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn batch_bounds() {
        let b = Batch::from_sequences(&[toks(&[1, 2, 3]), toks(&[4]), toks(&[5, 6])]);
        assert_eq!(b.n_seqs(), 3);
        assert_eq!(b.len(), 6);
        assert_eq!(b.seq_range(0), 0..3);
        assert_eq!(b.seq_range(1), 3..4);
        assert_eq!(b.seq_range(2), 4..6);
    }

    #[test]
    fn gelu_reference_values() {
        // Frozen from the tanh-form formula evaluated independently.
        let cases = [
            (0.0, 0.0),
            (1.0, 0.8411919906082768),
            (-1.0, -0.15880800939172324),
            (2.0, 1.954597694087775),
            (-2.0, -0.04540230591222494),
            (0.5, 0.34571400982514394),
            (3.0, 2.996362607918227),
        ];
        for (x, y) in cases {
            assert_abs_diff_eq!(gelu_scalar::<f64>(x), y, epsilon = 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0f64] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad_scalar(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let p = LayerNormP::<f64> {
            gamma: Array1::ones(8),
            beta: Array1::zeros(8),
        };
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.37 - 1.0);
        let (y, _) = layer_norm(&x, &p);
        for row in y.rows() {
            let mean: f64 = row.sum() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut a = Array2::from_shape_fn((4, 5), |(i, j)| (i as f64) * 3.0 - (j as f64) * 0.7);
        softmax_rows_inplace(&mut a);
        for row in a.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let params = ModelParams::<f64>::init(&config(), 3).unwrap();
        let batch = Batch::from_sequences(&[toks(&[1, 2, 3, 4, 5]), toks(&[6, 7])]);
        let (_, cache) = encoder_forward(&params, &batch);
        for block in &cache.blocks {
            for a in &block.attn {
                for row in a.rows() {
                    assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn sequences_are_independent_in_a_jagged_batch() {
        let params = ModelParams::<f64>::init(&config(), 7).unwrap();
        let s1 = toks(&[3, 9, 14, 2]);
        let s2 = toks(&[5, 5, 11]);
        let joint = Batch::from_sequences(&[s1.clone(), s2.clone()]);
        let (yj, _) = encoder_forward(&params, &joint);
        let (y1, _) = encoder_forward(&params, &Batch::from_sequences(&[s1]));
        let (y2, _) = encoder_forward(&params, &Batch::from_sequences(&[s2]));
        for i in 0..4 {
            for j in 0..16 {
                assert_abs_diff_eq!(yj[(i, j)], y1[(i, j)], epsilon = 1e-12);
            }
        }
        for i in 0..3 {
            for j in 0..16 {
                assert_abs_diff_eq!(yj[(4 + i, j)], y2[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::<f32>::init(&config(), 1).unwrap();
        let batch = Batch::from_sequences(&[toks(&[1, 2, 3]), toks(&[4, 5])]);
        let (a, _) = encoder_forward(&params, &batch);
        let (b, _) = encoder_forward(&params, &batch);
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "exceeds max_len")]
    fn overlong_sequence_panics() {
        let params = ModelParams::<f32>::init(&config(), 1).unwrap();
        let long: Vec<TokenId> = (0..25).map(|i| TokenId(i % 10)).collect();
        let batch = Batch::from_sequences(&[long]);
        encoder_forward(&params, &batch);
    }

    #[test]
    fn mean_rows_and_backward() {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let m = mean_rows(&x.view(), 1..3);
        // Rows 1 and 2: [3,4,5] and [6,7,8] -> [4.5, 5.5, 6.5].
        assert_eq!(m, ndarray::arr1(&[4.5, 5.5, 6.5]));
        let mut dx = Array2::zeros((4, 3));
        let g = ndarray::arr1(&[2.0, 4.0, 6.0]);
        mean_rows_backward(&g.view(), 1..3, &mut dx);
        assert_eq!(dx.row(0).sum(), 0.0);
        assert_eq!(dx[(1, 0)], 1.0);
        assert_eq!(dx[(2, 2)], 3.0);
    }

    /// Finite-difference smoke check of the full encoder backward against a
    /// scalar readout, touching one coordinate from every tensor kind.
    #[test]
    fn encoder_backward_matches_finite_difference() {
        let cfg = ModelConfig {
            dim: 8,
            blocks: 2,
            heads: 2,
            max_len: 12,
            maxout_pieces: 1,
            vocab_size: 12,
            classify_entities: None,
        };
        let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        let batch = Batch::from_sequences(&[toks(&[1, 4, 7, 2]), toks(&[3, 8])]);
        // Loss: weighted sum of outputs, fixed weights.
        let w = Array2::from_shape_fn((6, 8), |(i, j)| ((i + 2 * j) as f64 * 0.13).sin());
        let loss = |p: &ModelParams<f64>| -> f64 {
            let (y, _) = encoder_forward(p, &batch);
            (&y * &w).sum()
        };

        let mut grads = params.zeros_like();
        let (_, cache) = encoder_forward(&params, &batch);
        encoder_backward(&params, &batch, &cache, w.clone(), &mut grads);

        // Probe a handful of coordinates per tensor.
        let mut p_mut = params.clone();
        let n_tensors = p_mut.flat_tensors_mut().len();
        for ti in 0..n_tensors {
            for &fi in &[0usize, 3] {
                let (len, orig) = {
                    let t = &mut p_mut.flat_tensors_mut()[ti];
                    (t.len(), t[fi.min(t.len() - 1)])
                };
                let idx = fi.min(len - 1);
                let h = 1e-6;
                p_mut.flat_tensors_mut()[ti][idx] = orig + h;
                let up = loss(&p_mut);
                p_mut.flat_tensors_mut()[ti][idx] = orig - h;
                let down = loss(&p_mut);
                p_mut.flat_tensors_mut()[ti][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.flat_tensors_mut()[ti][idx];
                // Near-zero gradients sit inside central-difference noise, so
                // they are judged on absolute agreement instead.
                let abs = (fd - an).abs();
                let rel = abs / fd.abs().max(an.abs()).max(f64::MIN_POSITIVE);
                assert!(
                    abs < 1e-8 || rel < 1e-6,
                    "tensor {ti} coord {idx}: fd {fd} analytic {an}"
                );
            }
        }
    }
}
