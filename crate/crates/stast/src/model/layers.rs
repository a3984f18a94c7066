//! Transformer building blocks on the gradient tape: sinusoidal positions,
//! multi-head attention, feed-forward, post-layer-norm residual wiring.

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::scalar::{c, Scalar};

use super::net::Ctx;

/// Additive mask value; exp() of it underflows to exactly zero.
pub const NEG_LARGE: f64 = -1e9;

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal positional encodings as a constant T x d tensor.
pub fn positional_encoding<F: Scalar>(tape: &Tape<F>, t: usize, d: usize) -> Tensor<F> {
    let mut vals = vec![F::zero(); t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            vals[pos * d + 2 * i] = c::<F>(angle.sin());
            vals[pos * d + 2 * i + 1] = c::<F>(angle.cos());
        }
    }
    tape.constant(t, d, vals)
}

pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    x.matmul(w)?.add_row(b)
}

/// Additive attention mask over Tq x Tk scores.
fn attention_mask<F: Scalar>(
    tape: &Tape<F>,
    tq: usize,
    tk: usize,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Option<Tensor<F>> {
    if !causal && key_mask.is_none() {
        return None;
    }
    let neg = c::<F>(NEG_LARGE);
    let mut vals = vec![F::zero(); tq * tk];
    for q in 0..tq {
        for k in 0..tk {
            let blocked = (causal && k > q) || key_mask.map(|m| !m[k]).unwrap_or(false);
            if blocked {
                vals[q * tk + k] = neg;
            }
        }
    }
    Some(tape.constant(tq, tk, vals))
}

pub struct AttentionOut<F: Scalar> {
    pub out: Tensor<F>,
    /// Per-head post-softmax attention probabilities, Tq x Tk each.
    pub probs: Vec<Tensor<F>>,
}

/// Multi-head attention reading its projections from `ctx` under `prefix`.
pub fn multi_head_attention<F: Scalar>(
    ctx: &mut Ctx<F>,
    prefix: &str,
    queries: &Tensor<F>,
    keys_values: &Tensor<F>,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOut<F>> {
    let tape = ctx.tape().clone();
    let q = linear(queries, &ctx.p(&format!("{prefix}.wq")), &ctx.p(&format!("{prefix}.bq")))?;
    let k = linear(keys_values, &ctx.p(&format!("{prefix}.wk")), &ctx.p(&format!("{prefix}.bk")))?;
    let v = linear(keys_values, &ctx.p(&format!("{prefix}.wv")), &ctx.p(&format!("{prefix}.bv")))?;

    let n_heads = ctx.cfg().n_heads;
    let dh = ctx.cfg().d_model / n_heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let mask = attention_mask(&tape, queries.rows(), keys_values.rows(), causal, key_mask);

    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let mut scores = qh.matmul_nt(&kh)?.scale(scale);
        if let Some(m) = &mask {
            scores = scores.add(m)?;
        }
        let p = scores.softmax_rows();
        let p_dropped = ctx.dropout(&p);
        heads.push(p_dropped.matmul(&vh)?);
        probs.push(p);
    }
    let concat = Tensor::concat_cols(&heads)?;
    let out = linear(&concat, &ctx.p(&format!("{prefix}.wo")), &ctx.p(&format!("{prefix}.bo")))?;
    Ok(AttentionOut { out, probs })
}

pub fn feed_forward<F: Scalar>(ctx: &mut Ctx<F>, prefix: &str, x: &Tensor<F>) -> Result<Tensor<F>> {
    let h = linear(x, &ctx.p(&format!("{prefix}.w1")), &ctx.p(&format!("{prefix}.b1")))?;
    let h = relu(&h);
    let h = ctx.dropout(&h);
    linear(&h, &ctx.p(&format!("{prefix}.w2")), &ctx.p(&format!("{prefix}.b2")))
}

/// ReLU as max(x, 0) built from a 0/1 indicator constant.
pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (r, co) = x.shape();
    let ind: Vec<F> = x.value().iter().map(|&v| if v > F::zero() { F::one() } else { F::zero() }).collect();
    let mask = x.tape().constant(r, co, ind);
    x.mul_elem(&mask).expect("same shape")
}

/// Residual + dropout + post-layer-norm around a sublayer output.
pub fn post_ln<F: Scalar>(ctx: &mut Ctx<F>, ln_prefix: &str, x: &Tensor<F>, sub: &Tensor<F>) -> Result<Tensor<F>> {
    let dropped = ctx.dropout(sub);
    let summed = x.add(&dropped)?;
    summed.layer_norm(
        &ctx.p(&format!("{ln_prefix}.g")),
        &ctx.p(&format!("{ln_prefix}.b")),
        c::<F>(LN_EPS),
    )
}

/// Self-attention encoder layer (post-LN wiring).
pub fn encoder_layer<F: Scalar>(
    ctx: &mut Ctx<F>,
    prefix: &str,
    x: &Tensor<F>,
    key_mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    let attn = multi_head_attention(ctx, &format!("{prefix}.attn"), x, x, false, key_mask)?;
    let x = post_ln(ctx, &format!("{prefix}.ln1"), x, &attn.out)?;
    let ff = feed_forward(ctx, &format!("{prefix}.ffn"), &x)?;
    post_ln(ctx, &format!("{prefix}.ln2"), &x, &ff)
}

/// Decoder layer: causal self-attention, cross-attention, feed-forward.
pub fn decoder_layer<F: Scalar>(
    ctx: &mut Ctx<F>,
    prefix: &str,
    x: &Tensor<F>,
    enc: &Tensor<F>,
    enc_mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    let self_attn = multi_head_attention(ctx, &format!("{prefix}.attn"), x, x, true, None)?;
    let x = post_ln(ctx, &format!("{prefix}.ln1"), x, &self_attn.out)?;
    let cross = multi_head_attention(ctx, &format!("{prefix}.cross"), &x, enc, false, enc_mask)?;
    let x = post_ln(ctx, &format!("{prefix}.ln3"), &x, &cross.out)?;
    let ff = feed_forward(ctx, &format!("{prefix}.ffn"), &x)?;
    post_ln(ctx, &format!("{prefix}.ln2"), &x, &ff)
}
