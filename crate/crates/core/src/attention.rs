//! Modular (multi-head) and aggregator (learned-key pooling) self-attention,
//! plus sinusoidal positional encoding.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::{FeedForward, Forward, LayerNorm};
use crate::numerics::{glorot_uniform, scaled_normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, Rng};

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::Config("positional encoding needs at least one position".into()));
    }
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    let mut pe = Tensor::zeros(&[len, d_model]);
    let data = pe.data_mut();
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / libm::pow(10000.0, (2 * i) as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = libm::sin(angle);
            data[pos * d_model + 2 * i + 1] = libm::cos(angle);
        }
    }
    Ok(pe)
}

/// `softmax(Q·Kᵀ / √d_k) · V`. Returns the output and the `t×t` weights.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d_k = tape.dims2(q)?.1;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(d_k as f64))?;
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Weights of one multi-head self-attention + position-wise feed-forward
/// block. `d_k = d_v = d_model / heads`.
#[derive(Clone, Debug)]
pub struct ModularBlockParams {
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
    pub ffn: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl ModularBlockParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let d_k = head_dim(d_model, heads)?;
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push(HeadParams {
                w_q: store.add(format!("{name}.head{h}.w_q"), glorot_uniform(d_model, d_k, rng))?,
                w_k: store.add(format!("{name}.head{h}.w_k"), glorot_uniform(d_model, d_k, rng))?,
                w_v: store.add(format!("{name}.head{h}.w_v"), glorot_uniform(d_model, d_k, rng))?,
            });
        }
        let w_o = store.add(format!("{name}.w_o"), glorot_uniform(heads * d_k, d_model, rng))?;
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, d_ff, d_model)?;
        let norm_attn = LayerNorm::new(store, &format!("{name}.norm_attn"), d_model)?;
        let norm_ffn = LayerNorm::new(store, &format!("{name}.norm_ffn"), d_model)?;
        Ok(Self { heads: hs, w_o, ffn, norm_attn, norm_ffn })
    }

    /// `4·d² + 2·d·d_ff + d_ff + 5·d` when `heads` divides `d`.
    pub fn param_count(d_model: usize, d_ff: usize) -> usize {
        4 * d_model * d_model + 2 * d_model * d_ff + d_ff + 5 * d_model
    }
}

pub fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    Ok(d_model / heads)
}

/// `concat(h₁, …, h_n) · W_o` with `h_j = f_sa(X·W_Q⁽ʲ⁾, X·W_K⁽ʲ⁾, X·W_V⁽ʲ⁾)`.
pub fn multi_head_self_attention(fwd: &mut Forward, x: Var, p: &ModularBlockParams) -> Result<Var> {
    let mut outs = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let (wq, wk, wv) = (fwd.param(head.w_q)?, fwd.param(head.w_k)?, fwd.param(head.w_v)?);
        let q = fwd.tape.matmul(x, wq)?;
        let k = fwd.tape.matmul(x, wk)?;
        let v = fwd.tape.matmul(x, wv)?;
        let (h, _) = scaled_dot_product_attention(&mut fwd.tape, q, k, v)?;
        outs.push(h);
    }
    let cat = if outs.len() == 1 { outs[0] } else { fwd.tape.concat_cols(&outs)? };
    let w_o = fwd.param(p.w_o)?;
    fwd.tape.matmul(cat, w_o)
}

/// `y₁ = LN(x + MHSA(x))`, `y₂ = LN(y₁ + FFN(y₁))`.
pub fn modular_block(fwd: &mut Forward, x: Var, p: &ModularBlockParams) -> Result<Var> {
    let attn = multi_head_self_attention(fwd, x, p)?;
    let res = fwd.tape.add(x, attn)?;
    let y1 = p.norm_attn.forward(fwd, res)?;
    let ff = p.ffn.forward(fwd, y1)?;
    let res = fwd.tape.add(y1, ff)?;
    p.norm_ffn.forward(fwd, res)
}

pub fn modular_stack(fwd: &mut Forward, mut x: Var, blocks: &[ModularBlockParams]) -> Result<Var> {
    for b in blocks {
        x = modular_block(fwd, x, b)?;
    }
    Ok(x)
}

/// Weights of the single-head pooling block: feed-forward before and after,
/// query/value projections and the learned `1×d_ka` key.
#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub pre: FeedForward,
    pub w_aq: ParamId,
    pub w_av: ParamId,
    pub key: ParamId,
    pub post: FeedForward,
}

impl AggregatorParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        let pre = FeedForward::new(store, rng, &format!("{name}.pre"), d_model, d_ff, d_model)?;
        let w_aq = store.add(format!("{name}.w_aq"), glorot_uniform(d_model, d_model, rng))?;
        let w_av = store.add(format!("{name}.w_av"), glorot_uniform(d_model, d_model, rng))?;
        let key = store.add(format!("{name}.key"), scaled_normal(&[1, d_model], 0.02, rng))?;
        let post = FeedForward::new(store, rng, &format!("{name}.post"), d_model, d_ff, d_model)?;
        Ok(Self { pre, w_aq, w_av, key, post })
    }

    /// `2·d² + d + 2·(2·d·d_ff + d_ff + d)`.
    pub fn param_count(d_model: usize, d_ff: usize) -> usize {
        2 * d_model * d_model + d_model + 2 * FeedForward::param_count(d_model, d_ff, d_model)
    }
}

/// Result of aggregator pooling.
#[derive(Clone, Debug)]
pub struct Pooled {
    /// `1×d_model` pooled representation.
    pub output: Var,
    /// Softmax weights over the input rows.
    pub weights: Vec<f64>,
}

/// `w = softmax(Q_a·K_aᵀ / √d_ka)` over timesteps, pooled as `wᵀ·V_a`.
pub fn aggregator_attention(fwd: &mut Forward, x: Var, p: &AggregatorParams) -> Result<Pooled> {
    let (t, _) = fwd.tape.dims2(x)?;
    let h = p.pre.forward(fwd, x)?;
    let (w_aq, w_av, key) = (fwd.param(p.w_aq)?, fwd.param(p.w_av)?, fwd.param(p.key)?);
    let q = fwd.tape.matmul(h, w_aq)?;
    let v = fwd.tape.matmul(h, w_av)?;
    let d_ka = fwd.tape.dims2(q)?.1;
    let logits = fwd.tape.matmul_nt(q, key)?;
    let logits = fwd.tape.scale(logits, 1.0 / libm::sqrt(d_ka as f64))?;
    let logits = fwd.tape.reshape(logits, alloc::vec![1, t])?;
    let w = fwd.tape.softmax(logits, 1)?;
    let weights = fwd.tape.value(w).to_vec();
    let pooled = fwd.tape.matmul(w, v)?;
    let output = p.post.forward(fwd, pooled)?;
    Ok(Pooled { output, weights })
}

/// Which aggregator produced an [`AttentionRecord`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionBlock {
    /// Window aggregator for the window at this position in the session;
    /// weights are laid out placement-major then time.
    Window(usize),
    Session,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub block: AttentionBlock,
    pub weights: Vec<f64>,
}
